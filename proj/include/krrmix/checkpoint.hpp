#pragma once

#include <filesystem>

#include "krrmix/model.hpp"

namespace krrmix::model {

/// Text manifest followed by a little-endian blob:
///
///   krrmix-checkpoint 1
///   config_digest <16 hex digits>
///   params <count>
///   <name> <d0>x<d1>... <byte offset into blob> <element width in bytes>
///   ...
///   end
///   <blob>
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     ModelWeights<T>& weights);

/// Reads a checkpoint written for `cfg` (digest and every shape must match).
/// Element width may differ from T; values are converted. Throws CheckpointError.
template <typename T>
ModelWeights<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg);

}  // namespace krrmix::model
