#include "krrmix/metrics.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace krrmix::harness {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

template <typename T>
T parse_number(std::string_view field, const char* what) {
  T v{};
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw std::runtime_error(std::string("metrics csv: bad ") + what + " '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace

std::string format_metrics_row(const RunMetrics& m) {
  std::string s = std::to_string(m.step);
  s += ',';
  s += m.variant;
  s += ',';
  s += std::to_string(m.seed);
  s += ',' + fmt("%.9g", m.train_loss);
  s += ',' + fmt("%.9g", m.eval_loss);
  s += ',' + fmt("%.6f", m.token_accuracy);
  s += ',' + fmt("%.3f", m.wall_ms);
  return s;
}

RunMetrics parse_metrics_row(std::string_view line) {
  const auto f = split_commas(line);
  if (f.size() != 7) throw std::runtime_error("metrics csv: expected 7 fields");
  RunMetrics m;
  m.step = parse_number<std::size_t>(f[0], "step");
  m.variant = std::string(f[1]);
  m.seed = parse_number<std::uint64_t>(f[2], "seed");
  m.train_loss = parse_number<double>(f[3], "train_loss");
  m.eval_loss = parse_number<double>(f[4], "eval_loss");
  m.token_accuracy = parse_number<double>(f[5], "token_accuracy");
  m.wall_ms = parse_number<double>(f[6], "wall_ms");
  return m;
}

void write_metrics_csv(std::ostream& os, const std::vector<RunMetrics>& rows) {
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) os << format_metrics_row(r) << '\n';
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<RunMetrics>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_metrics_csv(out, rows);
}

std::vector<RunMetrics> parse_metrics_csv(std::string_view text) {
  std::vector<RunMetrics> rows;
  bool header = true;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (header) {
      if (line != kMetricsHeader) throw std::runtime_error("metrics csv: unexpected header");
      header = false;
      continue;
    }
    if (line.empty()) continue;
    rows.push_back(parse_metrics_row(line));
  }
  if (header) throw std::runtime_error("metrics csv: missing header");
  return rows;
}

std::vector<RunMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_metrics_csv(ss.str());
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path)
    : file_(std::fopen(path.string().c_str(), "wb")) {
  if (!file_) throw std::runtime_error("cannot write " + path.string());
  std::fprintf(file_, "%.*s\n", static_cast<int>(kMetricsHeader.size()), kMetricsHeader.data());
  std::fflush(file_);
}

MetricsWriter::~MetricsWriter() {
  if (file_) std::fclose(file_);
}

void MetricsWriter::append(const RunMetrics& m) {
  const std::string line = format_metrics_row(m);
  std::fprintf(file_, "%s\n", line.c_str());
  std::fflush(file_);
}

}  // namespace krrmix::harness
