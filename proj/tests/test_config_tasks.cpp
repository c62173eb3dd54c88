#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <sstream>

#include "krrmix/config.hpp"
#include "krrmix/errors.hpp"
#include "krrmix/metrics.hpp"
#include "krrmix/tasks.hpp"

using namespace krrmix;
using namespace krrmix::harness;

namespace {

ConfigError config_error(std::string_view text) {
  try {
    train_config_from(ConfigFile::parse(text));
  } catch (const ConfigError& e) {
    return e;
  }
  ADD_FAILURE() << "no ConfigError for:\n" << text;
  return ConfigError("none");
}

}  // namespace

TEST(Config, EmptyFileIsValid) {
  auto c = train_config_from(ConfigFile::parse(""));
  EXPECT_EQ(c.task.kind, TaskKind::Copy);
  EXPECT_EQ(c.model.vocab_size, c.task.vocab_size);
  EXPECT_EQ(c.precision, Precision::Float32);
}

TEST(Config, ParsesSectionsAndComments) {
  auto c = train_config_from(ConfigFile::parse(
      "# comment\n[model]\nlayers = 3\nhidden=48  # trailing\nheads = 2\n\n"
      "[mixer]\nvariant = krr-share\nrope = false\n[train]\nprecision = float64\nsteps = 7\n"));
  EXPECT_EQ(c.model.layers, 3u);
  EXPECT_EQ(c.model.hidden, 48u);
  EXPECT_EQ(c.model.mixer.variant, mixers::Variant::KRRShare);
  EXPECT_FALSE(c.model.mixer.rope);
  EXPECT_EQ(c.precision, Precision::Float64);
  EXPECT_EQ(c.steps, 7u);
}

TEST(Config, UnknownKeyNamesLineAndKey) {
  auto e = config_error("[model]\nlayers = 2\nwidth = 3\n");
  EXPECT_EQ(e.line(), 3);
  EXPECT_EQ(e.key(), "model.width");
}

TEST(Config, MalformedNumberNamesLineAndKey) {
  auto e = config_error("[train]\n\nlr = fast\n");
  EXPECT_EQ(e.line(), 3);
  EXPECT_EQ(e.key(), "train.lr");
}

TEST(Config, InvariantViolationNamesKey) {
  auto e = config_error("[model]\nhidden = 10\nheads = 4\n");
  EXPECT_EQ(e.key(), "model.heads");
  EXPECT_EQ(e.line(), 3);
}

TEST(Config, DuplicateKeyRejected) {
  EXPECT_THROW(ConfigFile::parse("[train]\nsteps = 1\nsteps = 2\n"), ConfigError);
}

TEST(Config, BadVariantRejected) {
  EXPECT_EQ(config_error("[mixer]\nvariant = rnn\n").key(), "mixer.variant");
}

TEST(Config, SequenceLongerThanContextRejected) {
  EXPECT_EQ(config_error("[model]\nmax_seq_len = 16\n[task]\nseq_len = 32\n").key(), "task.seq_len");
}

TEST(Config, RecallDefaults) {
  auto c = train_config_from(ConfigFile::parse("[task]\nkind = assoc_recall\n"));
  EXPECT_EQ(c.task.vocab_size, 34u);
  EXPECT_EQ(c.task.seq_len, 18u);
  EXPECT_EQ(c.task.num_pairs, 8u);
  auto q = train_config_from(ConfigFile::parse("[task]\nkind = assoc_recall\nnum_queries = 4\n"));
  EXPECT_EQ(q.task.seq_len, 27u);
}

TEST(Config, ZeroQueriesRejected) {
  EXPECT_EQ(config_error("[task]\nkind = assoc_recall\nnum_queries = 0\n").key(),
            "task.num_queries");
}

TEST(Config, LearningRateSchedule) {
  auto c = train_config_from(ConfigFile::parse(
      "[train]\nlr = 0.01\nsteps = 100\nwarmup_steps = 10\nlr_schedule = cosine\n"));
  EXPECT_NEAR(learning_rate(c, 1), 0.001, 1e-15);
  EXPECT_NEAR(learning_rate(c, 10), 0.01, 1e-15);
  EXPECT_NEAR(learning_rate(c, 100), 0.001, 1e-12);
  auto flat = train_config_from(ConfigFile::parse("[train]\nlr = 0.01\n"));
  EXPECT_EQ(learning_rate(flat, 1), 0.01);
  EXPECT_EQ(learning_rate(flat, 500), 0.01);
}

TEST(Copy, EchoTargetsEqualPrompt) {
  TaskSpec t;
  t.kind = TaskKind::Copy;
  t.vocab_size = 4;
  t.seq_len = 8;
  Rng rng(1);
  Batch b = gen_batch(t, 3, rng);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto* in = &b.inputs[r * 8];
    const auto* tg = &b.targets[r * 8];
    const auto* w = &b.weights[r * 8];
    EXPECT_EQ(in[4], kCopySeparator);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_GE(in[i], 1);
      EXPECT_LT(in[i], 4);
      EXPECT_EQ(w[i], 0.0);
      EXPECT_EQ(w[4 + i], 1.0);
      EXPECT_EQ(tg[4 + i], in[i]);
    }
  }
}

TEST(Recall, OnePairTargetIsStoredValue) {
  TaskSpec t;
  t.kind = TaskKind::AssocRecall;
  t.vocab_size = 6;
  t.num_pairs = 1;
  t.seq_len = 6;
  Rng rng(2);
  Batch b = gen_batch(t, 5, rng);
  for (std::size_t r = 0; r < 5; ++r) {
    const auto* in = &b.inputs[r * 6];
    EXPECT_EQ(in[0], kRecallPad);
    EXPECT_EQ(in[1], kRecallPad);
    EXPECT_EQ(in[4], kRecallQuery);
    EXPECT_EQ(in[5], in[2]);
    EXPECT_EQ(b.targets[r * 6 + 5], in[3]);
    EXPECT_EQ(std::count(&b.weights[r * 6], &b.weights[r * 6] + 6, 1.0), 1);
    EXPECT_EQ(b.weights[r * 6 + 5], 1.0);
  }
}

TEST(Recall, KeysDistinctAndAnswersMatchPairs) {
  TaskSpec t;
  t.kind = TaskKind::AssocRecall;
  t.vocab_size = 34;
  t.num_pairs = 8;
  t.num_queries = 3;
  t.seq_len = 2 * 8 + 3 * 3 - 1;
  Rng rng(3);
  Batch b = gen_batch(t, 20, rng);
  const std::size_t n = t.seq_len;
  for (std::size_t r = 0; r < 20; ++r) {
    const auto* in = &b.inputs[r * n];
    std::map<std::int32_t, std::int32_t> table;
    for (std::size_t p = 0; p < 8; ++p) {
      EXPECT_GE(in[2 * p], 2);
      EXPECT_LT(in[2 * p], 18);
      EXPECT_GE(in[2 * p + 1], 18);
      EXPECT_TRUE(table.emplace(in[2 * p], in[2 * p + 1]).second) << "duplicate key";
    }
    std::size_t weighted = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (b.weights[r * n + i] == 0.0) continue;
      ++weighted;
      EXPECT_EQ(in[i - 1], kRecallQuery);
      EXPECT_EQ(b.targets[r * n + i], table.at(in[i]));
    }
    EXPECT_EQ(weighted, 3u);
  }
}

TEST(CharLm, WindowsAreVerbatimSubstrings) {
  std::string corpus;
  for (int i = 0; i < 100; ++i) corpus.push_back(static_cast<char>('a' + (i * 7) % 26));
  TaskSpec t;
  t.kind = TaskKind::CharLm;
  t.vocab_size = 256;
  t.seq_len = 32;
  BatchSource src(t, corpus);
  Rng rng(4);
  Batch b = src.sample(16, rng);
  for (std::size_t r = 0; r < 16; ++r) {
    std::string window;
    for (std::size_t i = 0; i < 32; ++i) window.push_back(static_cast<char>(b.inputs[r * 32 + i]));
    window.push_back(static_cast<char>(b.targets[r * 32 + 31]));
    EXPECT_NE(corpus.find(window), std::string::npos);
    for (std::size_t i = 0; i + 1 < 32; ++i) EXPECT_EQ(b.targets[r * 32 + i], b.inputs[r * 32 + i + 1]);
  }
}

TEST(CharLm, CorpusTooSmall) {
  TaskSpec t;
  t.kind = TaskKind::CharLm;
  t.vocab_size = 256;
  t.seq_len = 32;
  EXPECT_THROW(BatchSource(t, std::string(32, 'x')), CorpusTooSmall);
  EXPECT_NO_THROW(BatchSource(t, std::string(33, 'x')));
}

TEST(CharLm, MissingCorpusFile) {
  TaskSpec t;
  t.kind = TaskKind::CharLm;
  t.vocab_size = 256;
  t.seq_len = 8;
  t.corpus = "/nonexistent/krrmix/corpus.txt";
  EXPECT_THROW(BatchSource{t}, Error);
}

TEST(Batches, StreamsArePureFunctionsOfSeedAndIndex) {
  TaskSpec t;
  t.seed = 9;
  BatchSource a(t), b(t);
  EXPECT_EQ(a.train_batch(4, 17).digest(), b.train_batch(4, 17).digest());
  EXPECT_NE(a.train_batch(4, 17).digest(), a.train_batch(4, 18).digest());
  EXPECT_NE(a.train_batch(4, 1).digest(), a.eval_batch(4, 1).digest());
  t.seed = 10;
  EXPECT_NE(BatchSource(t).train_batch(4, 17).digest(), a.train_batch(4, 17).digest());
}

TEST(Metrics, RowRoundTrip) {
  RunMetrics m{250, "KRR+bypass", 7, 1.0 / 3.0, 2.718281828459045, 0.953125, 12.5};
  RunMetrics back = parse_metrics_row(format_metrics_row(m));
  EXPECT_EQ(back.step, m.step);
  EXPECT_EQ(back.variant, m.variant);
  EXPECT_EQ(back.seed, m.seed);
  EXPECT_EQ(static_cast<float>(back.train_loss), static_cast<float>(m.train_loss));
  EXPECT_EQ(static_cast<float>(back.eval_loss), static_cast<float>(m.eval_loss));
  EXPECT_EQ(back.token_accuracy, m.token_accuracy);
  EXPECT_EQ(back.wall_ms, m.wall_ms);
  EXPECT_EQ(format_metrics_row(back), format_metrics_row(m));
}

TEST(Metrics, CsvHeaderAndRows) {
  std::vector<RunMetrics> rows = {{100, "NW", 0, 2.5, 2.4, 0.5, 0}, {200, "NW", 0, 1.5, 1.4, 0.75, 0}};
  std::ostringstream os;
  write_metrics_csv(os, rows);
  const std::string text = os.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsHeader);
  EXPECT_EQ(parse_metrics_csv(text), rows);
}

TEST(Metrics, RejectsWrongHeaderOrRow) {
  EXPECT_THROW(parse_metrics_csv("step,variant\n"), std::runtime_error);
  EXPECT_THROW(parse_metrics_csv(std::string(kMetricsHeader) + "\n1,NW,0,x,1,1,0\n"),
               std::runtime_error);
  EXPECT_THROW(parse_metrics_csv(std::string(kMetricsHeader) + "\n1,NW,0,1,1\n"), std::runtime_error);
}
