#pragma once

#include <optional>

#include "krrmix/linalg.hpp"

// Serial, loop-for-loop versions of the OpenMP kernels. Kept for equivalence
// tests and for the kernel benchmark; nothing on the model path calls them.
namespace krrmix::linalg::reference {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const std::optional<Mask>& mask);

template <typename T>
Tensor<T> solve_lower_triangular(const Tensor<T>& l, const Tensor<T>& b);

/// Gaussian elimination with partial pivoting on an augmented copy.
template <typename T>
Tensor<T> solve_general(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace krrmix::linalg::reference
