#include "krrmix/linalg_reference.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace krrmix::linalg::reference {

namespace {

Shape leading(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (!shared_b && leading(a.shape()) != leading(b.shape())) {
    throw ShapeMismatch("reference::matmul batch axes differ");
  }
  const std::size_t m = trans_a ? a.dim(-1) : a.dim(-2);
  const std::size_t k = trans_a ? a.dim(-2) : a.dim(-1);
  const std::size_t n = trans_b ? b.dim(-2) : b.dim(-1);
  if ((trans_b ? b.dim(-1) : b.dim(-2)) != k) {
    throw ShapeMismatch("reference::matmul inner dims differ");
  }
  Shape shape = leading(a.shape());
  shape.push_back(m);
  shape.push_back(n);
  Tensor<T> c(shape);
  const std::size_t slices = a.batch_count(2);
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t ao = s * m * k;
    const std::size_t bo = shared_b ? 0 : s * k * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T av = trans_a ? a[ao + kk * m + i] : a[ao + i * k + kk];
          const T bv = trans_b ? b[bo + j * k + kk] : b[bo + kk * n + j];
          acc += av * bv;
        }
        c[s * m * n + i * n + j] = acc;
      }
    }
  }
  return c;
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, const std::optional<Mask>& mask) {
  const std::size_t rows = scores.dim(-2);
  const std::size_t cols = scores.dim(-1);
  Tensor<T> out(scores.shape());
  const std::size_t slices = scores.batch_count(2);
  for (std::size_t s = 0; s < slices; ++s) {
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t base = (s * rows + i) * cols;
      // Masked entries behave as an additive -inf sentinel.
      std::vector<T> shifted(cols, -std::numeric_limits<T>::infinity());
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < cols; ++j) {
        if (!mask || mask->allowed(i, j)) {
          shifted[j] = scores[base + j];
          mx = std::max(mx, shifted[j]);
        }
      }
      if (mx == -std::numeric_limits<T>::infinity()) {
        throw FullyMaskedRow("row " + std::to_string(i));
      }
      T sum = 0;
      for (std::size_t j = 0; j < cols; ++j) sum += std::exp(shifted[j] - mx);
      for (std::size_t j = 0; j < cols; ++j) out[base + j] = std::exp(shifted[j] - mx) / sum;
    }
  }
  return out;
}

template <typename T>
Tensor<T> solve_lower_triangular(const Tensor<T>& l, const Tensor<T>& b) {
  const std::size_t n = l.dim(-1);
  const std::size_t m = b.dim(-1);
  Tensor<T> x(b.shape());
  const std::size_t slices = l.batch_count(2);
  for (std::size_t s = 0; s < slices; ++s) {
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        T acc = b[s * n * m + i * m + c];
        for (std::size_t j = 0; j < i; ++j) {
          acc -= l[s * n * n + i * n + j] * x[s * n * m + j * m + c];
        }
        const T d = l[s * n * n + i * n + i];
        if (!(std::abs(d) >= T(kDiagFloor))) throw SingularDiagonal("reference");
        x[s * n * m + i * m + c] = acc / d;
      }
    }
  }
  return x;
}

template <typename T>
Tensor<T> solve_general(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t n = a.dim(-1);
  const std::size_t m = b.dim(-1);
  Tensor<T> x(b.shape());
  const std::size_t slices = a.batch_count(2);
  for (std::size_t s = 0; s < slices; ++s) {
    std::vector<T> w(n * (n + m));
    const std::size_t width = n + m;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) w[i * width + j] = a[s * n * n + i * n + j];
      for (std::size_t c = 0; c < m; ++c) w[i * width + n + c] = b[s * n * m + i * m + c];
    }
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t p = k;
      for (std::size_t i = k + 1; i < n; ++i) {
        if (std::abs(w[i * width + k]) > std::abs(w[p * width + k])) p = i;
      }
      if (!(std::abs(w[p * width + k]) >= T(kPivotFloor))) throw SingularMatrix("reference");
      for (std::size_t j = 0; j < width; ++j) std::swap(w[k * width + j], w[p * width + j]);
      for (std::size_t i = k + 1; i < n; ++i) {
        const T f = w[i * width + k] / w[k * width + k];
        for (std::size_t j = k; j < width; ++j) w[i * width + j] -= f * w[k * width + j];
      }
    }
    for (std::size_t c = 0; c < m; ++c) {
      for (std::size_t ii = n; ii-- > 0;) {
        T acc = w[ii * width + n + c];
        for (std::size_t j = ii + 1; j < n; ++j) acc -= w[ii * width + j] * x[s * n * m + j * m + c];
        x[s * n * m + ii * m + c] = acc / w[ii * width + ii];
      }
    }
  }
  return x;
}

#define KRRMIX_INSTANTIATE(T)                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);       \
  template Tensor<T> masked_softmax(const Tensor<T>&, const std::optional<Mask>&); \
  template Tensor<T> solve_lower_triangular(const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> solve_general(const Tensor<T>&, const Tensor<T>&);

KRRMIX_INSTANTIATE(float)
KRRMIX_INSTANTIATE(double)

#undef KRRMIX_INSTANTIATE

}  // namespace krrmix::linalg::reference
