#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <cstdio>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace krrmix::harness {

inline constexpr std::string_view kMetricsHeader =
    "step,variant,seed,train_loss,eval_loss,token_accuracy,wall_ms";

struct RunMetrics {
  std::size_t step = 0;
  std::string variant;
  std::uint64_t seed = 0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double token_accuracy = 0.0;
  double wall_ms = 0.0;

  bool operator==(const RunMetrics&) const = default;
};

/// One CSV line without the newline. Losses use 9 significant digits, which
/// parse back to the same float.
std::string format_metrics_row(const RunMetrics& m);
RunMetrics parse_metrics_row(std::string_view line);

void write_metrics_csv(std::ostream& os, const std::vector<RunMetrics>& rows);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<RunMetrics>& rows);

/// Throws std::runtime_error on a wrong header or malformed row.
std::vector<RunMetrics> parse_metrics_csv(std::string_view text);
std::vector<RunMetrics> read_metrics_csv(const std::filesystem::path& path);

/// Appends rows as they are produced, flushing after each one.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  ~MetricsWriter();
  MetricsWriter(const MetricsWriter&) = delete;
  MetricsWriter& operator=(const MetricsWriter&) = delete;

  void append(const RunMetrics& m);

 private:
  std::FILE* file_ = nullptr;
};

}  // namespace krrmix::harness
