#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "krrmix/autograd.hpp"

namespace krrmix::autograd {

/// Builds a scalar loss on `tape` from one leaf per parameter tensor. Must be
/// deterministic: it is re-run for every finite-difference probe.
template <typename T>
using LossBuilder = std::function<Var<T>(Tape<T>& tape, std::span<const Var<T>> params)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t elements = 0;
};

/// Central-difference check of every parameter element. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <typename T>
GradCheckResult finite_difference_check(const LossBuilder<T>& f,
                                        const std::vector<Tensor<T>>& params,
                                        T eps = T(1e-5), Fault fault = Fault::None);

}  // namespace krrmix::autograd
