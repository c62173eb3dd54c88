#include "krrmix/tasks.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

#include "krrmix/errors.hpp"

namespace krrmix::harness {

std::uint64_t Batch::digest() const {
  auto bytes = [](const auto& v) {
    return std::string_view(reinterpret_cast<const char*>(v.data()),
                            v.size() * sizeof(v[0]));
  };
  std::uint64_t h = fnv1a64(bytes(inputs));
  h = fnv1a64(bytes(targets), h);
  for (double w : weights) h = fnv1a64(w > 0.0 ? "1" : "0", h);
  return h;
}

namespace {

std::string read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusTooSmall("cannot read corpus " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void check_corpus(const TaskSpec& spec, const std::string& corpus) {
  if (corpus.size() < spec.seq_len + 1) {
    throw CorpusTooSmall("corpus has " + std::to_string(corpus.size()) +
                         " bytes; a window needs " + std::to_string(spec.seq_len + 1));
  }
}

// Fills one sequence of seq_len + 1 tokens plus per-target weights.
void copy_row(const TaskSpec& t, Rng& rng, std::vector<std::int32_t>& s, std::vector<double>& w) {
  const std::size_t h = t.seq_len / 2;
  for (std::size_t i = 0; i < h; ++i) {
    s[i] = static_cast<std::int32_t>(1 + rng.below(t.vocab_size - 1));
    s[h + 1 + i] = s[i];
  }
  s[h] = kCopySeparator;
  for (std::size_t i = 0; i < t.seq_len; ++i) w[i] = i >= h ? 1.0 : 0.0;
}

void recall_row(const TaskSpec& t, Rng& rng, std::vector<std::int32_t>& s, std::vector<double>& w) {
  const std::size_t n_keys = (t.vocab_size - 2) / 2;
  const std::size_t n_values = t.vocab_size - 2 - n_keys;
  const auto key_base = static_cast<std::int32_t>(2);
  const auto value_base = static_cast<std::int32_t>(2 + n_keys);
  const std::size_t pairs = t.num_pairs;
  const std::size_t pad = t.seq_len + 1 - (2 * pairs + 3 * t.num_queries);

  // Partial Fisher-Yates for distinct keys.
  std::vector<std::int32_t> keys(n_keys);
  std::iota(keys.begin(), keys.end(), key_base);
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::size_t j = i + rng.below(n_keys - i);
    std::swap(keys[i], keys[j]);
  }
  std::vector<std::int32_t> values(pairs);
  for (auto& v : values) v = value_base + static_cast<std::int32_t>(rng.below(n_values));
  // Queried pairs are drawn with replacement: with distinct picks the last
  // query could be answered by elimination instead of lookup.
  const std::size_t queries = t.num_queries;
  std::vector<std::size_t> picks(queries);
  for (auto& p : picks) p = rng.below(pairs);

  std::fill(w.begin(), w.end(), 0.0);
  std::size_t pos = 0;
  for (; pos < pad; ++pos) s[pos] = kRecallPad;
  for (std::size_t p = 0; p < pairs; ++p) {
    s[pos++] = keys[p];
    s[pos++] = values[p];
  }
  for (std::size_t q = 0; q < queries; ++q) {
    s[pos++] = kRecallQuery;
    s[pos] = keys[picks[q]];
    w[pos++] = 1.0;
    s[pos++] = values[picks[q]];
  }
}

void char_row(const TaskSpec& t, const std::string& corpus, Rng& rng,
              std::vector<std::int32_t>& s, std::vector<double>& w) {
  const std::size_t start = rng.below(corpus.size() - t.seq_len);
  for (std::size_t i = 0; i <= t.seq_len; ++i) {
    s[i] = static_cast<std::int32_t>(static_cast<unsigned char>(corpus[start + i]));
  }
  std::fill(w.begin(), w.end(), 1.0);
}

}  // namespace

BatchSource::BatchSource(TaskSpec spec) : spec_(std::move(spec)) {
  if (spec_.kind == TaskKind::CharLm) {
    corpus_ = read_corpus(spec_.corpus);
    check_corpus(spec_, corpus_);
  }
}

BatchSource::BatchSource(TaskSpec spec, std::string corpus)
    : spec_(std::move(spec)), corpus_(std::move(corpus)) {
  if (spec_.kind == TaskKind::CharLm) check_corpus(spec_, corpus_);
}

Batch BatchSource::sample(std::size_t batch, Rng& rng) const {
  const std::size_t n = spec_.seq_len;
  Batch b;
  b.batch = batch;
  b.seq_len = n;
  b.inputs.resize(batch * n);
  b.targets.resize(batch * n);
  b.weights.resize(batch * n);
  std::vector<std::int32_t> s(n + 1);
  std::vector<double> w(n);
  for (std::size_t r = 0; r < batch; ++r) {
    switch (spec_.kind) {
      case TaskKind::Copy: copy_row(spec_, rng, s, w); break;
      case TaskKind::AssocRecall: recall_row(spec_, rng, s, w); break;
      case TaskKind::CharLm: char_row(spec_, corpus_, rng, s, w); break;
    }
    for (std::size_t i = 0; i < n; ++i) {
      b.inputs[r * n + i] = s[i];
      b.targets[r * n + i] = s[i + 1];
      b.weights[r * n + i] = w[i];
    }
  }
  return b;
}

Batch BatchSource::train_batch(std::size_t batch, std::size_t step) const {
  Rng rng = Rng(spec_.seed).split("train").split(step);
  return sample(batch, rng);
}

Batch BatchSource::eval_batch(std::size_t batch, std::size_t index) const {
  Rng rng = Rng(spec_.seed).split("eval").split(index);
  return sample(batch, rng);
}

Batch gen_batch(const TaskSpec& task, std::size_t batch, Rng& rng) {
  return BatchSource(task).sample(batch, rng);
}

}  // namespace krrmix::harness
