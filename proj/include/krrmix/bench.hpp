#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace krrmix::harness {

struct BenchOptions {
  std::vector<std::size_t> lengths{128, 256, 512, 1024};
  std::size_t head_dim = 64;
  std::size_t heads = 1;
  std::size_t reps = 5;
  std::uint64_t seed = 0;
  /// Variants to time; empty means all of NW, KRR-tri, KRR-general, LLR.
  std::vector<std::string> variants;
};

struct BenchRow {
  std::string variant;
  std::size_t n = 0;
  double median_us = 0.0;
  double p90_us = 0.0;
};

inline constexpr const char* kBenchHeader = "variant,N,median_us,p90_us";

/// Causal forward time of the mixing core on pre-projected [H, N, d_h]
/// inputs (float32). KRR-tri and KRR-general differ only in how the
/// normalizer is solved.
std::vector<BenchRow> run_bench(const BenchOptions& opts);

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);

/// Median and nearest-rank 90th percentile.
std::pair<double, double> median_p90(std::vector<double> samples);

}  // namespace krrmix::harness
