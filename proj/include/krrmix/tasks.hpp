#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "krrmix/config.hpp"
#include "krrmix/rng.hpp"

namespace krrmix::harness {

/// Row-major [batch, seq_len] token ids with next-token targets and a 0/1
/// loss weight per position.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  std::vector<double> weights;

  /// FNV-1a over inputs, targets and weights.
  std::uint64_t digest() const;
};

// Reserved tokens.
inline constexpr std::int32_t kCopySeparator = 0;
inline constexpr std::int32_t kRecallPad = 0;
inline constexpr std::int32_t kRecallQuery = 1;

/// Samples batches for one task. Copy: h = seq_len/2 prompt tokens from
/// [1, V), the separator, then the prompt again; only echo targets carry
/// weight. Assoc recall: left padding, then num_pairs (key, value) pairs with
/// distinct keys, then num_queries blocks of (query marker, stored key, its
/// value) drawn with replacement; each key position is weighted, with the value
/// as its target. Keys come from [2, 2 + (V-2)/2), values from
/// the rest. Char LM: a random window of seq_len + 1 corpus bytes.
class BatchSource {
 public:
  /// Reads the corpus for char_lm; throws CorpusTooSmall if no window fits.
  explicit BatchSource(TaskSpec spec);
  /// char_lm with the corpus given directly.
  BatchSource(TaskSpec spec, std::string corpus);

  Batch sample(std::size_t batch, Rng& rng) const;

  /// Stream of training batch `step`; a pure function of (task seed, step).
  Batch train_batch(std::size_t batch, std::size_t step) const;
  /// Fixed held-out batch `index`.
  Batch eval_batch(std::size_t batch, std::size_t index) const;

  const TaskSpec& spec() const { return spec_; }

 private:
  TaskSpec spec_;
  std::string corpus_;
};

Batch gen_batch(const TaskSpec& task, std::size_t batch, Rng& rng);

}  // namespace krrmix::harness
