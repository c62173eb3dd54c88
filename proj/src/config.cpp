#include "krrmix/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <fstream>
#include <set>
#include <sstream>

namespace krrmix::harness {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "model.layers",        "model.hidden",         "model.heads",
      "model.ffn_mult",      "model.max_seq_len",    "model.init_std",
      "model.seed",          "model.tied_head",      "mixer.variant",
      "mixer.causal",        "mixer.lrr_lower",      "mixer.lrr_upper",
      "mixer.lambda_init",   "mixer.llr_reg",        "mixer.learnable_temperature",
      "mixer.rope",          "mixer.bypass",         "task.kind",
      "task.vocab_size",     "task.seq_len",         "task.num_pairs",
      "task.num_queries",
      "task.corpus",         "task.seed",            "train.steps",
      "train.batch",         "train.lr",             "train.beta1",
      "train.beta2",         "train.adam_eps",       "train.eval_interval",
      "train.eval_batches",  "train.precision",      "train.record_wall_time",
      "train.warmup_steps",  "train.lr_schedule",
  };
  return keys;
}

}  // namespace

ConfigFile ConfigFile::parse(std::string_view text) {
  ConfigFile cfg;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", line_no);
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("empty section name", line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value'", line_no);
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError("missing key", line_no);
    const std::string full = section.empty() ? key : section + "." + key;
    if (cfg.values_.count(full)) {
      throw ConfigError("duplicate key", line_no, full);
    }
    cfg.values_[full] = Value{trim(std::string_view(line).substr(eq + 1)), line_no};
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ConfigFile::get_string(const std::string& key, std::string fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second.text;
}

double ConfigFile::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second.text, &used);
    if (used != it->second.text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + it->second.text + "'", it->second.line, key);
  }
}

std::size_t ConfigFile::get_size(const std::string& key, std::size_t fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& t = it->second.text;
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ConfigError("expected a non-negative integer, got '" + t + "'", it->second.line, key);
  }
  try {
    return static_cast<std::size_t>(std::stoull(t));
  } catch (const std::exception&) {
    throw ConfigError("integer out of range: '" + t + "'", it->second.line, key);
  }
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string t = lower(it->second.text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("expected a boolean, got '" + it->second.text + "'", it->second.line, key);
}

std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::AssocRecall: return "assoc_recall";
    case TaskKind::CharLm: return "char_lm";
  }
  return "?";
}

void TaskSpec::validate(std::size_t max_seq_len) const {
  if (seq_len == 0) throw ConfigError("seq_len must be >= 1", 0, "task.seq_len");
  if (seq_len > max_seq_len) {
    throw ConfigError("seq_len " + std::to_string(seq_len) + " exceeds max_seq_len " +
                          std::to_string(max_seq_len),
                      0, "task.seq_len");
  }
  switch (kind) {
    case TaskKind::Copy:
      if (seq_len % 2 != 0) throw ConfigError("copy needs an even seq_len", 0, "task.seq_len");
      if (vocab_size < 2) throw ConfigError("copy needs vocab_size >= 2", 0, "task.vocab_size");
      break;
    case TaskKind::AssocRecall: {
      if (num_pairs == 0) throw ConfigError("num_pairs must be >= 1", 0, "task.num_pairs");
      if (num_queries == 0) {
        throw ConfigError("num_queries must be >= 1", 0, "task.num_queries");
      }
      if (seq_len + 1 < 2 * num_pairs + 3 * num_queries) {
        throw ConfigError("assoc_recall needs seq_len >= 2*num_pairs + 3*num_queries - 1", 0,
                          "task.seq_len");
      }
      if (vocab_size < 2 + 2 * num_pairs) {
        throw ConfigError("assoc_recall needs vocab_size >= 2 + 2*num_pairs", 0,
                          "task.vocab_size");
      }
      break;
    }
    case TaskKind::CharLm:
      if (vocab_size != 256) throw ConfigError("char_lm uses byte tokens (vocab 256)", 0, "task.vocab_size");
      if (corpus.empty()) throw ConfigError("char_lm needs a corpus path", 0, "task.corpus");
      break;
  }
}

TrainConfig train_config_from(const ConfigFile& f) {
  for (const auto& [key, value] : f.values()) {
    if (!known_keys().count(key)) throw ConfigError("unknown key", value.line, key);
  }
  auto line_of = [&](const std::string& key) {
    auto it = f.values().find(key);
    return it == f.values().end() ? 0 : it->second.line;
  };

  TrainConfig c;
  auto& m = c.model;
  m.layers = f.get_size("model.layers", m.layers);
  m.hidden = f.get_size("model.hidden", m.hidden);
  m.heads = f.get_size("model.heads", m.heads);
  m.ffn_mult = f.get_size("model.ffn_mult", m.ffn_mult);
  m.max_seq_len = f.get_size("model.max_seq_len", m.max_seq_len);
  m.init_std = f.get_double("model.init_std", m.init_std);
  m.seed = f.get_size("model.seed", m.seed);
  m.tied_head = f.get_bool("model.tied_head", m.tied_head);

  auto& mx = m.mixer;
  const std::string variant = f.get_string("mixer.variant", "KRR");
  const auto parsed = mixers::parse_variant(variant);
  if (!parsed) throw ConfigError("unknown variant '" + variant + "'", line_of("mixer.variant"), "mixer.variant");
  mx.variant = *parsed;
  mx.causal = f.get_bool("mixer.causal", mx.causal);
  mx.lrr_lower = f.get_double("mixer.lrr_lower", mx.lrr_lower);
  mx.lrr_upper = f.get_double("mixer.lrr_upper", mx.lrr_upper);
  mx.lambda_init = f.get_double("mixer.lambda_init", mx.lambda_init);
  mx.llr_reg = f.get_double("mixer.llr_reg", mx.llr_reg);
  mx.learnable_temperature = f.get_bool("mixer.learnable_temperature", mx.learnable_temperature);
  mx.rope = f.get_bool("mixer.rope", mx.rope);
  const std::string bypass = lower(f.get_string("mixer.bypass", "none"));
  if (bypass == "identity") {
    mx.bypass = mixers::Bypass::Identity;
  } else if (bypass != "none") {
    throw ConfigError("bypass must be none or identity", line_of("mixer.bypass"), "mixer.bypass");
  }

  auto& t = c.task;
  const std::string kind = lower(f.get_string("task.kind", "copy"));
  if (kind == "copy") {
    t.kind = TaskKind::Copy;
  } else if (kind == "assoc_recall") {
    t.kind = TaskKind::AssocRecall;
  } else if (kind == "char_lm") {
    t.kind = TaskKind::CharLm;
    t.vocab_size = 256;
  } else {
    throw ConfigError("unknown task kind '" + kind + "'", line_of("task.kind"), "task.kind");
  }
  t.num_pairs = f.get_size("task.num_pairs", t.num_pairs);
  t.num_queries = f.get_size("task.num_queries", t.num_queries);
  if (t.kind == TaskKind::AssocRecall) {
    t.vocab_size = 34;
    t.seq_len = 2 * t.num_pairs + 3 * t.num_queries - 1;
  }
  t.vocab_size = f.get_size("task.vocab_size", t.vocab_size);
  t.seq_len = f.get_size("task.seq_len", t.seq_len);
  t.corpus = f.get_string("task.corpus", "");
  t.seed = f.get_size("task.seed", t.seed);

  c.steps = f.get_size("train.steps", c.steps);
  c.batch = f.get_size("train.batch", c.batch);
  c.adam.lr = f.get_double("train.lr", c.adam.lr);
  c.adam.beta1 = f.get_double("train.beta1", c.adam.beta1);
  c.adam.beta2 = f.get_double("train.beta2", c.adam.beta2);
  c.adam.eps = f.get_double("train.adam_eps", c.adam.eps);
  c.eval_interval = f.get_size("train.eval_interval", c.eval_interval);
  c.eval_batches = f.get_size("train.eval_batches", c.eval_batches);
  c.record_wall_time = f.get_bool("train.record_wall_time", c.record_wall_time);
  c.warmup_steps = f.get_size("train.warmup_steps", c.warmup_steps);
  const std::string sched = lower(f.get_string("train.lr_schedule", "constant"));
  if (sched == "cosine") {
    c.schedule = LrSchedule::Cosine;
  } else if (sched != "constant") {
    throw ConfigError("lr_schedule must be constant or cosine", line_of("train.lr_schedule"),
                      "train.lr_schedule");
  }
  const std::string prec = lower(f.get_string("train.precision", "float32"));
  if (prec == "float32") {
    c.precision = Precision::Float32;
  } else if (prec == "float64") {
    c.precision = Precision::Float64;
  } else {
    throw ConfigError("precision must be float32 or float64", line_of("train.precision"),
                      "train.precision");
  }

  m.vocab_size = t.vocab_size;
  if (c.batch == 0) throw ConfigError("batch must be >= 1", line_of("train.batch"), "train.batch");
  if (c.eval_interval == 0) {
    throw ConfigError("eval_interval must be >= 1", line_of("train.eval_interval"), "train.eval_interval");
  }
  if (!(c.adam.lr > 0.0)) throw ConfigError("lr must be > 0", line_of("train.lr"), "train.lr");
  try {
    m.validate();
    t.validate(m.max_seq_len);
  } catch (const ConfigError& e) {
    const std::string key = e.key().find('.') == std::string::npos && !e.key().empty()
                                ? (e.key() == "lrr_lower" || e.key() == "lambda_init" ||
                                           e.key() == "llr_reg"
                                       ? "mixer." + e.key()
                                       : "model." + e.key())
                                : e.key();
    throw ConfigError(e.what(), line_of(key), key);
  }
  return c;
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  const double base = cfg.adam.lr;
  if (step <= cfg.warmup_steps) {
    return base * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == LrSchedule::Constant || cfg.steps <= cfg.warmup_steps) return base;
  const double t = static_cast<double>(step - cfg.warmup_steps) /
                   static_cast<double>(cfg.steps - cfg.warmup_steps);
  return base * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * t)));
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  return train_config_from(ConfigFile::load(path));
}

}  // namespace krrmix::harness
