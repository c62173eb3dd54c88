#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "krrmix/autograd.hpp"
#include "krrmix/gradcheck.hpp"
#include "krrmix/rng.hpp"

namespace krrmix::checks {

struct CheckOptions {
  /// Only run this suite (linalg, autograd, mixers, model, harness); empty runs all.
  std::string suite;
  /// Passed to every finite-difference check; used to prove the gradient
  /// suites notice a broken backward rule.
  autograd::Fault fault = autograd::Fault::None;
};

struct CheckOutcome {
  bool passed = false;
  std::string detail;
};

struct Check {
  std::string suite;
  std::string id;  // "<suite>.<invariant>", listed in the invariant manifest
  std::string description;
  std::function<CheckOutcome(const CheckOptions&)> run;
};

const std::vector<Check>& registry();
std::vector<std::string> suite_names();

struct CheckResult {
  std::string suite;
  std::string id;
  bool passed = false;
  std::string detail;
  double ms = 0.0;
};

struct CheckReport {
  std::vector<CheckResult> results;
  bool all_passed() const;
};

/// Runs the selected checks at 64-bit. Failures (including exceptions) are
/// recorded, never thrown. Throws std::invalid_argument for an unknown suite.
CheckReport run_checks(const CheckOptions& opts, std::ostream* log = nullptr);

/// One line per check plus a per-suite total.
void print_report(std::ostream& os, const CheckReport& report);

/// A random small instance exercising one primitive: loss = sum(C * op(inputs))
/// with C a fixed random tensor (or the op itself when it is already scalar).
struct PrimitiveProbe {
  autograd::LossBuilder<double> loss;
  std::vector<Tensor<double>> inputs;
};

PrimitiveProbe primitive_probe(autograd::Primitive p, Rng& rng);

/// Largest per-primitive relative error over `instances` random probes.
double primitive_gradient_error(autograd::Primitive p, std::size_t instances, std::uint64_t seed,
                                autograd::Fault fault = autograd::Fault::None);

}  // namespace krrmix::checks
