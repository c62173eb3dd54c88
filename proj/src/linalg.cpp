#include "krrmix/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

#include "krrmix/parallel.hpp"

namespace krrmix::linalg {

namespace {

using Index = std::ptrdiff_t;

// Below this many scalar ops per call the fork/join costs more than it saves.
constexpr std::size_t kParallelGrain = 1 << 14;

bool go_parallel(std::size_t work) {
  return num_threads() > 1 && work >= kParallelGrain;
}

Shape leading(const Shape& s, std::size_t trailing) {
  return Shape(s.begin(), s.end() - static_cast<Index>(trailing));
}

template <typename T>
void require_square_slices(const Tensor<T>& a, const char* what) {
  if (a.rank() < 2 || a.dim(-1) != a.dim(-2)) {
    throw ShapeMismatch(std::string(what) + ": expected [...,N,N], got " +
                        shape_str(a.shape()));
  }
}

template <typename T>
void require_rhs(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (b.rank() != a.rank() || leading(a.shape(), 2) != leading(b.shape(), 2) ||
      b.dim(-2) != a.dim(-1)) {
    throw ShapeMismatch(std::string(what) + ": lhs " + shape_str(a.shape()) +
                        " incompatible with rhs " + shape_str(b.shape()));
  }
}

// Matmul tiles: a block of rows of C accumulated over the full k range in a
// local buffer. Each C entry still sums its k products in ascending order.
constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 32;

template <typename T>
T a_at(const T* as, bool trans_a, std::size_t m, std::size_t k, std::size_t i, std::size_t kk) {
  return trans_a ? as[kk * m + i] : as[i * k + kk];
}

template <typename T, std::size_t R, std::size_t J>
void matmul_tile(const T* as, bool trans_a, std::size_t m, std::size_t k, std::size_t i0,
                 const T* bs, std::size_t n, std::size_t j0, T* cs) {
  T acc[R][J] = {};
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* brow = bs + kk * n + j0;
    for (std::size_t r = 0; r < R; ++r) {
      const T a = a_at(as, trans_a, m, k, i0 + r, kk);
      for (std::size_t j = 0; j < J; ++j) acc[r][j] += a * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    std::copy(acc[r], acc[r] + J, cs + (i0 + r) * n + j0);
}

template <typename T>
void matmul_tile_edge(const T* as, bool trans_a, std::size_t m, std::size_t k, std::size_t i0,
                      std::size_t rows, const T* bs, std::size_t n, std::size_t j0,
                      std::size_t cols, T* cs) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* crow = cs + (i0 + r) * n + j0;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T a = a_at(as, trans_a, m, k, i0 + r, kk);
      const T* brow = bs + kk * n + j0;
      for (std::size_t j = 0; j < cols; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace

Mask Mask::causal(std::size_t n) { return Mask(n, n, true, {}); }

Mask Mask::from_allowed(std::size_t rows, std::size_t cols,
                        std::vector<std::uint8_t> allowed) {
  if (allowed.size() != rows * cols) {
    throw ShapeMismatch("mask size " + std::to_string(allowed.size()) +
                        " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  return Mask(rows, cols, false, std::move(allowed));
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const std::optional<Mask>& mask) {
  if (scores.rank() < 2) {
    throw ShapeMismatch("masked_softmax needs rank >= 2, got " +
                        shape_str(scores.shape()));
  }
  const std::size_t rows = scores.dim(-2);
  const std::size_t cols = scores.dim(-1);
  if (mask && (mask->rows() != rows || mask->cols() != cols)) {
    throw ShapeMismatch("mask " + std::to_string(mask->rows()) + "x" +
                        std::to_string(mask->cols()) + " vs scores " +
                        shape_str(scores.shape()));
  }
  if (mask) {
    for (std::size_t i = 0; i < rows; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < cols && !any; ++j) any = mask->allowed(i, j);
      if (!any) throw FullyMaskedRow("row " + std::to_string(i) + " has no allowed entry");
    }
  }

  Tensor<T> out(scores.shape());
  const std::size_t total_rows = scores.batch_count(2) * rows;
  const T* src = scores.data().data();
  T* dst = out.data().data();
  const int nt = num_threads();

#pragma omp parallel for num_threads(nt) schedule(static) \
    if (go_parallel(total_rows * cols))
  for (Index r = 0; r < static_cast<Index>(total_rows); ++r) {
    const std::size_t i = static_cast<std::size_t>(r) % rows;
    const T* in = src + static_cast<std::size_t>(r) * cols;
    T* o = dst + static_cast<std::size_t>(r) * cols;
    auto ok = [&](std::size_t j) { return !mask || mask->allowed(i, j); };
    // Causal rows stop at the diagonal; everything after stays exactly 0.
    const std::size_t end = (mask && mask->is_causal()) ? std::min(i + 1, cols) : cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < end; ++j) {
      if (ok(j)) mx = std::max(mx, in[j]);
    }
    T sum = 0;
    for (std::size_t j = 0; j < end; ++j) {
      if (ok(j)) {
        o[j] = std::exp(in[j] - mx);
        sum += o[j];
      }
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < end; ++j) o[j] *= inv;
  }
  return out;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& s, const Tensor<T>& grad) {
  if (s.shape() != grad.shape()) {
    throw ShapeMismatch("softmax_backward " + shape_str(s.shape()) + " vs " +
                        shape_str(grad.shape()));
  }
  const std::size_t cols = s.dim(-1);
  const std::size_t total_rows = s.size() / std::max<std::size_t>(cols, 1);
  Tensor<T> out(s.shape());
  const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) \
    if (go_parallel(s.size()))
  for (Index r = 0; r < static_cast<Index>(total_rows); ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    T dot = 0;
    for (std::size_t j = 0; j < cols; ++j) dot += grad[base + j] * s[base + j];
    for (std::size_t j = 0; j < cols; ++j) {
      out[base + j] = s[base + j] * (grad[base + j] - dot);
    }
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) {
    throw ShapeMismatch("transpose needs rank >= 2, got " + shape_str(a.shape()));
  }
  const std::size_t rows = a.dim(-2);
  const std::size_t cols = a.dim(-1);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor<T> out(shape);
  const std::size_t slices = a.batch_count(2);
  for (std::size_t b = 0; b < slices; ++b) {
    const T* src = a.data().data() + b * rows * cols;
    T* dst = out.data().data() + b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeMismatch("matmul needs rank >= 2: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (!shared_b && leading(a.shape(), 2) != leading(b.shape(), 2)) {
    throw ShapeMismatch("matmul batch axes differ: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  std::size_t m = trans_a ? a.dim(-1) : a.dim(-2);
  const std::size_t k = trans_a ? a.dim(-2) : a.dim(-1);
  const std::size_t kb = trans_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = trans_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) {
    throw ShapeMismatch("matmul inner dims differ: " + shape_str(a.shape()) +
                        (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                        (trans_b ? "^T" : ""));
  }

  // Work on B in [k, n] layout so every inner loop is a contiguous axpy.
  const Tensor<T> b_kn = trans_b ? transpose(b) : Tensor<T>();
  const Tensor<T>& bb = trans_b ? b_kn : b;

  Shape out_shape = leading(a.shape(), 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);

  // A shared B lets untransposed slices of A stack into one tall matrix.
  const bool stack = shared_b && !trans_a;
  const std::size_t slices = stack ? 1 : a.batch_count(2);
  if (stack) m *= a.batch_count(2);
  const std::size_t a_stride = m * k;
  const std::size_t b_stride = shared_b ? 0 : k * n;
  const std::size_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
  const T* pa = a.data().data();
  const T* pb = bb.data().data();
  T* pc = out.data().data();
  const int nt = num_threads();

#pragma omp parallel for num_threads(nt) schedule(static) \
    if (go_parallel(slices * m * n * k))
  for (Index r = 0; r < static_cast<Index>(slices * row_blocks); ++r) {
    const std::size_t s = static_cast<std::size_t>(r) / row_blocks;
    const std::size_t i0 = (static_cast<std::size_t>(r) % row_blocks) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, m - i0);
    const T* as = pa + s * a_stride;
    const T* bs = pb + s * b_stride;
    T* cs = pc + s * m * n;
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      if (rows == kRowBlock && n - j0 >= kColBlock) {
        matmul_tile<T, kRowBlock, kColBlock>(as, trans_a, m, k, i0, bs, n, j0, cs);
      } else {
        matmul_tile_edge(as, trans_a, m, k, i0, rows, bs, n, j0, std::min(kColBlock, n - j0), cs);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> solve_lower_triangular(const Tensor<T>& l, const Tensor<T>& b, bool transpose) {
  require_square_slices(l, "solve_lower_triangular");
  require_rhs(l, b, "solve_lower_triangular");
  const std::size_t n = l.dim(-1);
  const std::size_t m = b.dim(-1);
  const std::size_t slices = l.batch_count(2);
  for (std::size_t s = 0; s < slices; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      const T d = l[s * n * n + i * n + i];
      if (!(std::abs(d) >= T(kDiagFloor))) {
        throw SingularDiagonal("|L[" + std::to_string(i) + "," + std::to_string(i) +
                               "]| = " + std::to_string(std::abs(d)) +
                               " below diag_floor");
      }
    }
  }

  Tensor<T> x = b;
  const int nt = num_threads();
#pragma omp parallel for num_threads(nt) schedule(static) \
    if (go_parallel(slices * n * n * m))
  for (Index si = 0; si < static_cast<Index>(slices); ++si) {
    const std::size_t s = static_cast<std::size_t>(si);
    const T* ls = l.data().data() + s * n * n;
    T* xs = x.data().data() + s * n * m;
    if (!transpose) {
      for (std::size_t i = 0; i < n; ++i) {
        T* xi = xs + i * m;
        for (std::size_t j = 0; j < i; ++j) {
          const T lij = ls[i * n + j];
          const T* xj = xs + j * m;
          for (std::size_t c = 0; c < m; ++c) xi[c] -= lij * xj[c];
        }
        const T inv = T(1) / ls[i * n + i];
        for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
      }
    } else {
      for (std::size_t ii = n; ii-- > 0;) {
        T* xi = xs + ii * m;
        for (std::size_t j = ii + 1; j < n; ++j) {
          const T lji = ls[j * n + ii];
          const T* xj = xs + j * m;
          for (std::size_t c = 0; c < m; ++c) xi[c] -= lji * xj[c];
        }
        const T inv = T(1) / ls[ii * n + ii];
        for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
      }
    }
  }
  return x;
}

template <typename T>
LuFactors<T> lu_factor(const Tensor<T>& a) {
  require_square_slices(a, "lu_factor");
  const std::size_t n = a.dim(-1);
  const std::size_t slices = a.batch_count(2);
  LuFactors<T> f{a, std::vector<std::size_t>(slices * n)};
  std::vector<std::uint8_t> singular(slices, 0);
  const int nt = num_threads();

#pragma omp parallel for num_threads(nt) schedule(static) \
    if (go_parallel(slices * n * n * n))
  for (Index si = 0; si < static_cast<Index>(slices); ++si) {
    const std::size_t s = static_cast<std::size_t>(si);
    T* lu = f.lu.data().data() + s * n * n;
    std::size_t* piv = f.pivots.data() + s * n;
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t p = k;
      T best = std::abs(lu[k * n + k]);
      for (std::size_t i = k + 1; i < n; ++i) {
        const T v = std::abs(lu[i * n + k]);
        if (v > best) {
          best = v;
          p = i;
        }
      }
      piv[k] = p;
      if (!(best >= T(kPivotFloor))) {
        singular[s] = 1;
        break;
      }
      if (p != k) {
        for (std::size_t j = 0; j < n; ++j) std::swap(lu[k * n + j], lu[p * n + j]);
      }
      const T inv = T(1) / lu[k * n + k];
      const T* rowk = lu + k * n;
      for (std::size_t i = k + 1; i < n; ++i) {
        T* rowi = lu + i * n;
        const T lik = rowi[k] * inv;
        rowi[k] = lik;
        for (std::size_t j = k + 1; j < n; ++j) rowi[j] -= lik * rowk[j];
      }
    }
  }
  for (std::size_t s = 0; s < slices; ++s) {
    if (singular[s]) {
      throw SingularMatrix("pivot below pivot_floor in slice " + std::to_string(s));
    }
  }
  return f;
}

template <typename T>
Tensor<T> lu_solve(const LuFactors<T>& f, const Tensor<T>& b, bool transpose) {
  require_rhs(f.lu, b, "lu_solve");
  const std::size_t n = f.lu.dim(-1);
  const std::size_t m = b.dim(-1);
  const std::size_t slices = f.lu.batch_count(2);
  Tensor<T> x = b;
  const int nt = num_threads();

#pragma omp parallel for num_threads(nt) schedule(static) \
    if (go_parallel(slices * n * n * m))
  for (Index si = 0; si < static_cast<Index>(slices); ++si) {
    const std::size_t s = static_cast<std::size_t>(si);
    const T* lu = f.lu.data().data() + s * n * n;
    const std::size_t* piv = f.pivots.data() + s * n;
    T* xs = x.data().data() + s * n * m;
    auto swap_rows = [&](std::size_t i, std::size_t j) {
      if (i != j) {
        for (std::size_t c = 0; c < m; ++c) std::swap(xs[i * m + c], xs[j * m + c]);
      }
    };
    if (!transpose) {
      for (std::size_t k = 0; k < n; ++k) swap_rows(k, piv[k]);
      for (std::size_t i = 0; i < n; ++i) {
        T* xi = xs + i * m;
        for (std::size_t j = 0; j < i; ++j) {
          const T lij = lu[i * n + j];
          for (std::size_t c = 0; c < m; ++c) xi[c] -= lij * xs[j * m + c];
        }
      }
      for (std::size_t ii = n; ii-- > 0;) {
        T* xi = xs + ii * m;
        for (std::size_t j = ii + 1; j < n; ++j) {
          const T uij = lu[ii * n + j];
          for (std::size_t c = 0; c < m; ++c) xi[c] -= uij * xs[j * m + c];
        }
        const T inv = T(1) / lu[ii * n + ii];
        for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
      }
    } else {
      // A^T = U^T L^T P: forward with U^T, back with unit L^T, then undo P.
      for (std::size_t i = 0; i < n; ++i) {
        T* xi = xs + i * m;
        for (std::size_t j = 0; j < i; ++j) {
          const T uji = lu[j * n + i];
          for (std::size_t c = 0; c < m; ++c) xi[c] -= uji * xs[j * m + c];
        }
        const T inv = T(1) / lu[i * n + i];
        for (std::size_t c = 0; c < m; ++c) xi[c] *= inv;
      }
      for (std::size_t ii = n; ii-- > 0;) {
        T* xi = xs + ii * m;
        for (std::size_t j = ii + 1; j < n; ++j) {
          const T lji = lu[j * n + ii];
          for (std::size_t c = 0; c < m; ++c) xi[c] -= lji * xs[j * m + c];
        }
      }
      for (std::size_t k = n; k-- > 0;) swap_rows(k, piv[k]);
    }
  }
  return x;
}

template <typename T>
Tensor<T> solve_general(const Tensor<T>& a, const Tensor<T>& b) {
  require_square_slices(a, "solve_general");
  require_rhs(a, b, "solve_general");
  return lu_solve(lu_factor(a), b);
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& mat) {
  if (mat.rank() < 1) throw ShapeMismatch("l2_normalize_rows on rank-0 tensor");
  const std::size_t d = mat.dim(-1);
  const std::size_t rows = d ? mat.size() / d : 0;
  Tensor<T> out(mat.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = 0;
    for (std::size_t c = 0; c < d; ++c) sq += mat[r * d + c] * mat[r * d + c];
    const T denom = std::max(std::sqrt(sq), T(kNormFloor));
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = mat[r * d + c] / denom;
  }
  return out;
}

template <typename T>
Tensor<T> explicit_inverse(const Tensor<T>& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeMismatch("explicit_inverse expects [N,N], got " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0);
  if (n > kExplicitInverseMaxN) {
    throw ShapeMismatch("explicit_inverse limited to N <= 256, got " + std::to_string(n));
  }
  // Gauss-Jordan on [A | I].
  std::vector<T> w(n * 2 * n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) w[i * 2 * n + j] = a[i * n + j];
    w[i * 2 * n + n + i] = T(1);
  }
  const std::size_t width = 2 * n;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t p = col;
    for (std::size_t i = col + 1; i < n; ++i) {
      if (std::abs(w[i * width + col]) > std::abs(w[p * width + col])) p = i;
    }
    if (!(std::abs(w[p * width + col]) >= T(kPivotFloor))) {
      throw SingularMatrix("explicit_inverse: pivot below pivot_floor at column " +
                           std::to_string(col));
    }
    if (p != col) {
      for (std::size_t j = 0; j < width; ++j) std::swap(w[p * width + j], w[col * width + j]);
    }
    const T inv = T(1) / w[col * width + col];
    for (std::size_t j = 0; j < width; ++j) w[col * width + j] *= inv;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == col) continue;
      const T f = w[i * width + col];
      if (f == T(0)) continue;
      for (std::size_t j = 0; j < width; ++j) w[i * width + j] -= f * w[col * width + j];
    }
  }
  Tensor<T> out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = w[i * width + n + j];
  }
  return out;
}

#define KRRMIX_INSTANTIATE(T)                                                      \
  template Tensor<T> masked_softmax(const Tensor<T>&, const std::optional<Mask>&); \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);       \
  template Tensor<T> transpose(const Tensor<T>&);                                  \
  template Tensor<T> solve_lower_triangular(const Tensor<T>&, const Tensor<T>&,    \
                                            bool);                                 \
  template LuFactors<T> lu_factor(const Tensor<T>&);                               \
  template Tensor<T> lu_solve(const LuFactors<T>&, const Tensor<T>&, bool);        \
  template Tensor<T> solve_general(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                          \
  template Tensor<T> explicit_inverse(const Tensor<T>&);

KRRMIX_INSTANTIATE(float)
KRRMIX_INSTANTIATE(double)

#undef KRRMIX_INSTANTIATE

}  // namespace krrmix::linalg
