#include "krrmix/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace krrmix::autograd {

namespace {

template <typename T>
T evaluate(const LossBuilder<T>& f, const std::vector<Tensor<T>>& params) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p));
  return f(tape, vars).value().item();
}

}  // namespace

template <typename T>
GradCheckResult finite_difference_check(const LossBuilder<T>& f,
                                        const std::vector<Tensor<T>>& params, T eps,
                                        Fault fault) {
  Tape<T> tape;
  tape.inject_fault(fault);
  std::vector<Var<T>> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.leaf(p));
  const Var<T> loss = f(tape, vars);
  const GradMap<T> grads = tape.backward(loss);

  GradCheckResult result;
  std::vector<Tensor<T>> probe = params;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor<T> analytic = grads.get_or_zeros(vars[pi]);
    for (std::size_t i = 0; i < params[pi].size(); ++i) {
      const T orig = probe[pi][i];
      probe[pi][i] = orig + eps;
      const T plus = evaluate(f, probe);
      probe[pi][i] = orig - eps;
      const T minus = evaluate(f, probe);
      probe[pi][i] = orig;

      const double numeric = (static_cast<double>(plus) - static_cast<double>(minus)) /
                             (2.0 * static_cast<double>(eps));
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.elements;
      if (rel > result.max_rel_err || !std::isfinite(rel)) {
        result.max_rel_err = std::isfinite(rel) ? rel : INFINITY;
        result.worst_param = pi;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

template GradCheckResult finite_difference_check(const LossBuilder<float>&,
                                                 const std::vector<Tensor<float>>&,
                                                 float, Fault);
template GradCheckResult finite_difference_check(const LossBuilder<double>&,
                                                 const std::vector<Tensor<double>>&,
                                                 double, Fault);

}  // namespace krrmix::autograd
