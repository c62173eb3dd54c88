#include "krrmix/rope.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace krrmix {

template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::size_t position_offset, bool inverse) {
  if (x.rank() < 2) throw ShapeMismatch("rope needs [..., N, d], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(-2);
  const std::size_t d = x.dim(-1);
  if (d % 2 != 0) throw OddHeadDim("rope head dim " + std::to_string(d) + " is odd");

  const std::size_t half = d / 2;
  std::vector<T> cos_t(n * half);
  std::vector<T> sin_t(n * half);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t j = 0; j < half; ++j) {
      const double theta = std::pow(kRopeBase, -2.0 * static_cast<double>(j) /
                                                   static_cast<double>(d));
      const double angle = static_cast<double>(p + position_offset) * theta;
      cos_t[p * half + j] = static_cast<T>(std::cos(angle));
      sin_t[p * half + j] = static_cast<T>(inverse ? -std::sin(angle) : std::sin(angle));
    }
  }

  Tensor<T> out(x.shape());
  const std::size_t slices = x.batch_count(2);
  for (std::size_t s = 0; s < slices; ++s) {
    for (std::size_t p = 0; p < n; ++p) {
      const std::size_t base = (s * n + p) * d;
      for (std::size_t j = 0; j < half; ++j) {
        const T c = cos_t[p * half + j];
        const T sn = sin_t[p * half + j];
        const T x0 = x[base + 2 * j];
        const T x1 = x[base + 2 * j + 1];
        out[base + 2 * j] = x0 * c - x1 * sn;
        out[base + 2 * j + 1] = x0 * sn + x1 * c;
      }
    }
  }
  return out;
}

template Tensor<float> rope_apply(const Tensor<float>&, std::size_t, bool);
template Tensor<double> rope_apply(const Tensor<double>&, std::size_t, bool);

}  // namespace krrmix
