#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "krrmix/config.hpp"
#include "krrmix/metrics.hpp"
#include "krrmix/mixers.hpp"

namespace krrmix::harness {

struct RunOptions {
  /// When set, metrics.csv and checkpoint.bin are written here.
  std::filesystem::path out_dir;
  /// Progress lines; nullptr keeps the run silent.
  std::ostream* log = nullptr;
  /// When > 0, stop after the first evaluation whose token accuracy reaches it.
  double stop_at_accuracy = 0.0;
};

struct RunResult {
  std::string label;
  std::vector<RunMetrics> rows;
  /// Digest of the training batch of every step, in order.
  std::vector<std::uint64_t> batch_digests;
};

/// Label used in the variant column, e.g. "KRR" or "KRR+bypass".
std::string run_label(const TrainConfig& cfg);

/// Trains from the initial weights for cfg.steps Adam steps. Rows are emitted
/// at every multiple of eval_interval and at the final step. Throws
/// NonFiniteLoss naming the step whose training loss was not finite.
RunResult run_training(const TrainConfig& cfg, const RunOptions& opts = {});

struct CompareResult {
  std::vector<RunResult> runs;
  /// All rows, grouped by variant in the requested order.
  std::vector<RunMetrics> rows;
};

/// Runs every variant on the same config, seed and data stream. The bypass
/// hook in cfg applies to KRR variants only. Throws Error if two variants saw
/// different batches. With out_dir set, writes compare.csv and
/// compare_summary.csv.
CompareResult run_compare(const TrainConfig& cfg, const std::vector<mixers::Variant>& variants,
                          const RunOptions& opts = {});

/// Final eval loss per variant and every pairwise gap (row minus column).
void print_compare_summary(std::ostream& os, const CompareResult& result);

}  // namespace krrmix::harness
