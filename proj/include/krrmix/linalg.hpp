#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "krrmix/tensor.hpp"

// Dense kernels shared by every mixer. All operations act on the trailing two
// axes and treat any leading axes as independent (batch, head) slices; the
// OpenMP loops split work over slices or output rows only.
namespace krrmix::linalg {

inline constexpr double kDiagFloor = 1e-12;
inline constexpr double kPivotFloor = 1e-12;
inline constexpr double kNormFloor = 1e-12;

/// Which score entries a row may attend to. Either the causal rule (j <= i on
/// a square matrix) or an explicit boolean matrix.
class Mask {
 public:
  static Mask causal(std::size_t n);
  static Mask from_allowed(std::size_t rows, std::size_t cols,
                           std::vector<std::uint8_t> allowed);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool is_causal() const { return causal_; }

  bool allowed(std::size_t i, std::size_t j) const {
    return causal_ ? j <= i : allowed_[i * cols_ + j] != 0;
  }

 private:
  Mask(std::size_t rows, std::size_t cols, bool causal,
       std::vector<std::uint8_t> allowed)
      : rows_(rows), cols_(cols), causal_(causal), allowed_(std::move(allowed)) {}

  std::size_t rows_;
  std::size_t cols_;
  bool causal_;
  std::vector<std::uint8_t> allowed_;
};

/// Row-wise softmax over allowed entries; masked entries are exactly 0.
/// Throws FullyMaskedRow when some row allows nothing.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const std::optional<Mask>& mask);

/// Vector-Jacobian product of row softmax given its output `s`.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& s, const Tensor<T>& grad);

/// C = op(A) * op(B). Leading axes must match, or B may be a plain matrix that
/// is shared by every slice of A.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false);

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// Forward substitution L X = B reading only the lower triangle of L. With
/// `transpose`, solves L^T X = B by back substitution instead.
/// Throws SingularDiagonal when |L[i,i]| < kDiagFloor.
template <typename T>
Tensor<T> solve_lower_triangular(const Tensor<T>& l, const Tensor<T>& b,
                                 bool transpose = false);

/// Packed LU factors (unit lower, upper) with row pivots, one per slice.
template <typename T>
struct LuFactors {
  Tensor<T> lu;
  std::vector<std::size_t> pivots;  // slice-major, n entries per slice
};

/// Partial-pivot LU. Throws SingularMatrix when a pivot is below kPivotFloor.
template <typename T>
LuFactors<T> lu_factor(const Tensor<T>& a);

/// Solves A X = B (or A^T X = B) from existing factors.
template <typename T>
Tensor<T> lu_solve(const LuFactors<T>& factors, const Tensor<T>& b,
                   bool transpose = false);

template <typename T>
Tensor<T> solve_general(const Tensor<T>& a, const Tensor<T>& b);

/// Divides each row by max(||row||_2, kNormFloor).
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& m);

/// Gauss-Jordan inverse of a single matrix (N <= 256). Oracle use only; the
/// model path never forms an inverse.
template <typename T>
Tensor<T> explicit_inverse(const Tensor<T>& a);

inline constexpr std::size_t kExplicitInverseMaxN = 256;

}  // namespace krrmix::linalg
