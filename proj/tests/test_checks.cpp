#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "krrmix/checks.hpp"

using namespace krrmix;
using namespace krrmix::checks;

TEST(Checks, AllSuitesPass) {
  auto report = run_checks({});
  std::ostringstream os;
  print_report(os, report);
  EXPECT_TRUE(report.all_passed()) << os.str();
  EXPECT_EQ(report.results.size(), registry().size());
  EXPECT_NE(os.str().find("all checks passed"), std::string::npos);
}

TEST(Checks, SingleSuiteRunsOnlyItsChecks) {
  auto report = run_checks({"linalg"});
  ASSERT_FALSE(report.results.empty());
  for (const auto& r : report.results) EXPECT_EQ(r.suite, "linalg");
}

TEST(Checks, UnknownSuiteRejected) {
  EXPECT_THROW(run_checks({"optics"}), std::invalid_argument);
}

TEST(Checks, CorruptedSolveRuleFailsGradientSuites) {
  for (const std::string suite : {"autograd", "mixers", "model"}) {
    CheckOptions opts{suite, autograd::Fault::SolveBackward};
    auto report = run_checks(opts);
    EXPECT_FALSE(report.all_passed()) << suite;
    std::ostringstream os;
    print_report(os, report);
    EXPECT_NE(os.str().find("CHECKS FAILED"), std::string::npos);
  }
  // Suites without gradient checks are unaffected.
  EXPECT_TRUE(run_checks({"linalg", autograd::Fault::SolveBackward}).all_passed());
}

TEST(Checks, ManifestMatchesRegistry) {
  std::ifstream in(std::string(KRRMIX_TEST_DIR) + "/invariants.manifest");
  ASSERT_TRUE(in) << "missing invariants.manifest";
  std::set<std::string> manifest;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string id;
    ss >> id;
    EXPECT_TRUE(manifest.insert(id).second) << "duplicate manifest id " << id;
  }
  std::set<std::string> registered;
  for (const auto& c : registry()) {
    EXPECT_TRUE(registered.insert(c.id).second) << "duplicate check id " << c.id;
    EXPECT_EQ(c.id.substr(0, c.id.find('.')), c.suite);
  }
  for (const auto& id : manifest) EXPECT_TRUE(registered.count(id)) << "no check for " << id;
  for (const auto& id : registered) EXPECT_TRUE(manifest.count(id)) << "check not in manifest: " << id;
  const auto suites = suite_names();
  for (const auto& c : registry())
    EXPECT_NE(std::find(suites.begin(), suites.end(), c.suite), suites.end());
}

TEST(Checks, PrimitiveProbesCoverEveryRule) {
  Rng rng(1);
  for (auto p : autograd::differentiable_primitives()) {
    auto probe = primitive_probe(p, rng);
    EXPECT_FALSE(probe.inputs.empty()) << autograd::primitive_name(p);
  }
}
