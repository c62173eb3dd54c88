#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "krrmix/model.hpp"

namespace krrmix::harness {

/// Flat `key = value` text with `[section]` headers and `#` comments. Keys
/// are addressed as "section.key"; keys before any header live in "".
class ConfigFile {
 public:
  struct Value {
    std::string text;
    int line = 0;
  };

  static ConfigFile parse(std::string_view text);
  static ConfigFile load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, Value>& values() const { return values_; }

  std::string get_string(const std::string& key, std::string fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  void set(const std::string& key, std::string value) { values_[key] = Value{std::move(value), 0}; }

 private:
  std::map<std::string, Value> values_;
};

enum class TaskKind { Copy, AssocRecall, CharLm };

std::string_view task_name(TaskKind k);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  std::size_t vocab_size = 16;
  std::size_t seq_len = 128;
  std::size_t num_pairs = 8;
  /// Query blocks after the pairs, each with one weighted target.
  std::size_t num_queries = 1;
  std::filesystem::path corpus;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate(std::size_t max_seq_len) const;
};

enum class Precision { Float32, Float64 };

enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  model::ModelConfig model;
  TaskSpec task;
  std::size_t steps = 2000;
  std::size_t batch = 16;
  model::AdamConfig adam;
  /// Linear ramp from 0 over the first warmup_steps, then the schedule.
  std::size_t warmup_steps = 0;
  /// Cosine decays to 10% of lr at the final step.
  LrSchedule schedule = LrSchedule::Constant;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 4;
  Precision precision = Precision::Float32;
  /// Wall time makes CSVs nondeterministic, so it is recorded only on request.
  bool record_wall_time = false;
};

/// Builds a TrainConfig; every key is optional. Unknown keys and malformed
/// values raise ConfigError naming the line and key.
TrainConfig train_config_from(const ConfigFile& file);

/// Learning rate for 1-based `step`.
double learning_rate(const TrainConfig& cfg, std::size_t step);
TrainConfig load_train_config(const std::filesystem::path& path);

}  // namespace krrmix::harness
