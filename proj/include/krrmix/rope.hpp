#pragma once

#include <cstddef>

#include "krrmix/tensor.hpp"

namespace krrmix {

inline constexpr double kRopeBase = 10000.0;

/// Rotary position encoding over the trailing [N, d] axes. Feature pairs
/// (2j, 2j+1) at position p rotate by p * base^(-2j/d); `inverse` rotates the
/// other way, which is also the transpose used for gradients.
/// Throws OddHeadDim when d is odd.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::size_t position_offset = 0,
                     bool inverse = false);

}  // namespace krrmix
