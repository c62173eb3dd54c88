#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "krrmix/errors.hpp"

namespace krrmix {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array of rank <= 4 (batch, head, sequence, feature).
/// Element type is float for training and double for verification.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  static constexpr std::size_t kMaxRank = 4;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_rank();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeMismatch("tensor data size " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
    }
  }

  /// Builds a matrix from nested rows; handy for small literals in tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    std::vector<T> data;
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeMismatch("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i) out.data_[i * n + i] = T(1);
    return out;
  }

  static Tensor scalar(T value) { return Tensor({1}, value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  /// Axis length; negative indices count from the back.
  std::size_t dim(int axis) const {
    const int r = static_cast<int>(shape_.size());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for " +
                          shape_str(shape_));
    }
    return shape_[static_cast<std::size_t>(a)];
  }

  /// Product of every axis except the trailing `trailing` ones.
  std::size_t batch_count(std::size_t trailing) const {
    if (shape_.size() < trailing) {
      throw ShapeMismatch("rank " + std::to_string(shape_.size()) + " < " +
                          std::to_string(trailing));
    }
    std::size_t n = 1;
    for (std::size_t i = 0; i + trailing < shape_.size(); ++i) n *= shape_[i];
    return n;
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const {
    return data_[offset(index)];
  }

  T item() const {
    if (data_.size() != 1) throw NonScalarLoss("item() on " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) {
      throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " +
                          shape_str(shape));
    }
    shape_ = std::move(shape);
    check_rank();
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  void check_rank() const {
    if (shape_.size() > kMaxRank) {
      throw ShapeMismatch("rank exceeds 4: " + shape_str(shape_));
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw ShapeMismatch("index rank mismatch for " + shape_str(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) off = off * shape_[axis++] + i;
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch("max_abs_diff " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace krrmix
