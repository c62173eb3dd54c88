#pragma once

#include <functional>
#include <span>

#include "krrmix/mixers.hpp"
#include "krrmix/tensor.hpp"

// Literal closed forms written with explicit inverses and scalar loops. They
// share no code with the mixer path beyond the tensor container and the
// Gauss-Jordan inverse, and exist to be compared against it.
namespace krrmix::oracles {

template <typename T>
using Kernel = std::function<T(std::span<const T>, std::span<const T>)>;

/// f(x) = k(x)^T (K + lambda I)^-1 Y for train_x [N, d], train_y [N, m].
template <typename T>
Tensor<T> krr_predict_oracle(const Tensor<T>& train_x, const Tensor<T>& train_y,
                             std::span<const T> query_x, const Kernel<T>& kernel, T lambda);

/// Primal ridge regression x^T (X^T X + lambda I)^-1 X^T Y.
template <typename T>
Tensor<T> ridge_primal_predict(const Tensor<T>& train_x, const Tensor<T>& train_y,
                               std::span<const T> query_x, T lambda);

/// Per head: softmax(scale q k^T) * inverse(Sigma^-1) * diag(s_hat) * v.
/// x [N, D]; KRR variants only.
template <typename T>
Tensor<T> cubit_composition_oracle(const Tensor<T>& x, const mixers::MixerWeights<T>& w,
                                   const mixers::MixerConfig& cfg);

/// Weighted least squares per query via explicit inverse of the normal
/// equations. q, k, v [N, d].
template <typename T>
Tensor<T> llr_normal_equations_oracle(const Tensor<T>& q, const Tensor<T>& k,
                                      const Tensor<T>& v, bool causal, T reg, T score_scale);

}  // namespace krrmix::oracles
