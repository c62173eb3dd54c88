#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "krrmix/rng.hpp"
#include "krrmix/tensor.hpp"

namespace krrmix {

/// Shape plus initializer of one learnable tensor; materialized on demand so
/// shapes can be counted without allocating.
struct ParamSpec {
  enum class Init { Normal, Constant };

  Shape shape;
  Init init = Init::Constant;
  double value = 0.0;  // std for Normal, fill for Constant

  static ParamSpec normal(Shape s, double std) { return {std::move(s), Init::Normal, std}; }
  static ParamSpec constant(Shape s, double v) { return {std::move(s), Init::Constant, v}; }

  std::size_t count() const { return shape_size(shape); }
};

/// Each parameter draws from its own stream keyed by (seed, name), so a tensor
/// initializes identically whatever else the model contains.
template <typename T>
Tensor<T> materialize(const ParamSpec& spec, std::string_view name, std::uint64_t seed) {
  Tensor<T> t(spec.shape, static_cast<T>(spec.value));
  if (spec.init == ParamSpec::Init::Normal) {
    Rng rng = Rng(seed).split(name);
    for (auto& v : t.data()) v = static_cast<T>(spec.value * rng.normal());
  }
  return t;
}

}  // namespace krrmix
