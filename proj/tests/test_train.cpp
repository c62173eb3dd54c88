#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "krrmix/bench.hpp"
#include "krrmix/checkpoint.hpp"
#include "krrmix/errors.hpp"
#include "krrmix/metrics.hpp"
#include "krrmix/parallel.hpp"
#include "krrmix/train.hpp"

using namespace krrmix;
using namespace krrmix::harness;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_run(mixers::Variant v) {
  auto c = train_config_from(ConfigFile::parse(
      "[model]\nlayers = 1\nhidden = 16\nheads = 2\nffn_mult = 2\nmax_seq_len = 16\n"
      "[task]\nkind = copy\nvocab_size = 6\nseq_len = 12\n"
      "[train]\nsteps = 6\nbatch = 4\nlr = 3e-3\neval_interval = 3\neval_batches = 2\n"));
  c.model.mixer.variant = v;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("krrmix_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Train, ZeroStepsWritesHeaderAndInitialWeights) {
  auto cfg = tiny_run(mixers::Variant::KRR);
  cfg.steps = 0;
  const fs::path dir = fresh_dir("zero");
  auto r = run_training(cfg, {dir});
  EXPECT_TRUE(r.rows.empty());
  EXPECT_EQ(slurp(dir / "metrics.csv"), std::string(kMetricsHeader) + "\n");
  auto loaded = model::load_checkpoint<float>(dir / "checkpoint.bin", cfg.model);
  auto init = model::init_weights<float>(cfg.model);
  EXPECT_EQ(loaded.embedding.storage(), init.embedding.storage());
  EXPECT_EQ(loaded.blocks[0].w_o.storage(), init.blocks[0].w_o.storage());
}

TEST(Train, RowsAtIntervalAndFinalStep) {
  auto cfg = tiny_run(mixers::Variant::NW);
  cfg.steps = 7;
  auto r = run_training(cfg);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].step, 3u);
  EXPECT_EQ(r.rows[1].step, 6u);
  EXPECT_EQ(r.rows[2].step, 7u);
  EXPECT_EQ(r.batch_digests.size(), 7u);
  for (const auto& m : r.rows) {
    EXPECT_EQ(m.variant, "NW");
    EXPECT_EQ(m.wall_ms, 0.0);
    EXPECT_GE(m.token_accuracy, 0.0);
    EXPECT_LE(m.token_accuracy, 1.0);
    EXPECT_TRUE(std::isfinite(m.train_loss));
  }
}

TEST(Train, SameSeedGivesIdenticalCsv) {
  auto cfg = tiny_run(mixers::Variant::KRR);
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  run_training(cfg, {a});
  run_training(cfg, {b});
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
}

TEST(Train, DeterministicAcrossThreadCounts) {
  auto cfg = tiny_run(mixers::Variant::LLR);
  set_num_threads(1);
  auto one = run_training(cfg);
  set_num_threads(3);
  auto many = run_training(cfg);
  set_num_threads(1);
  EXPECT_EQ(one.rows, many.rows);
}

TEST(Train, LossDecreasesOnCopy) {
  auto cfg = tiny_run(mixers::Variant::NW);
  cfg.steps = 60;
  cfg.eval_interval = 60;
  cfg.precision = Precision::Float64;
  auto first = tiny_run(mixers::Variant::NW);
  first.steps = 1;
  const double before = run_training(first).rows.back().eval_loss;
  const double after = run_training(cfg).rows.back().eval_loss;
  EXPECT_LT(after, before);
}

TEST(Train, EarlyStopEndsAtThreshold) {
  auto cfg = tiny_run(mixers::Variant::NW);
  cfg.steps = 30;
  RunOptions opts;
  opts.stop_at_accuracy = 1e-9;
  auto r = run_training(cfg, opts);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].step, 3u);
}

TEST(Train, NonFiniteLossIsReported) {
  auto cfg = tiny_run(mixers::Variant::NW);
  cfg.model.init_std = std::numeric_limits<double>::infinity();
  EXPECT_THROW(run_training(cfg), NonFiniteLoss);
}

TEST(Compare, SingleVariantMatchesTrain) {
  auto cfg = tiny_run(mixers::Variant::NW);
  const fs::path t = fresh_dir("cmp_train"), c = fresh_dir("cmp_compare");
  run_training(cfg, {t});
  auto r = run_compare(cfg, {mixers::Variant::NW}, {c});
  EXPECT_EQ(slurp(t / "metrics.csv"), slurp(c / "compare.csv"));
  std::ostringstream os;
  write_metrics_csv(os, r.rows);
  EXPECT_EQ(os.str(), slurp(t / "metrics.csv"));
}

TEST(Compare, AlignedStepGridsOnCharLm) {
  const fs::path dir = fresh_dir("cmp_char");
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "corpus.txt");
    for (int i = 0; i < 40; ++i) out << "the quick brown fox jumps over the lazy dog. ";
  }
  auto cfg = train_config_from(ConfigFile::parse(
      "[model]\nlayers = 1\nhidden = 16\nheads = 2\nffn_mult = 2\nmax_seq_len = 16\n"
      "[task]\nkind = char_lm\nseq_len = 16\ncorpus = " + (dir / "corpus.txt").string() +
      "\n[train]\nsteps = 4\nbatch = 2\neval_interval = 2\neval_batches = 1\n"));
  auto r = run_compare(cfg, {mixers::Variant::NW, mixers::Variant::KRRNoLRR, mixers::Variant::KRR},
                       {dir});
  ASSERT_EQ(r.runs.size(), 3u);
  for (const auto& run : r.runs) {
    ASSERT_EQ(run.rows.size(), r.runs[0].rows.size());
    for (std::size_t i = 0; i < run.rows.size(); ++i) EXPECT_EQ(run.rows[i].step, r.runs[0].rows[i].step);
    EXPECT_EQ(run.batch_digests, r.runs[0].batch_digests);
  }
  auto rows = read_metrics_csv(dir / "compare.csv");
  EXPECT_EQ(rows.size(), 6u);
  const std::string summary = slurp(dir / "compare_summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "variant,final_eval_loss,final_token_accuracy");
}

TEST(Compare, BypassedKrrTracksNw) {
  auto cfg = tiny_run(mixers::Variant::NW);
  cfg.precision = Precision::Float64;
  cfg.steps = 20;
  cfg.eval_interval = 5;
  cfg.model.mixer.bypass = mixers::Bypass::Identity;
  auto r = run_compare(cfg, {mixers::Variant::NW, mixers::Variant::KRR});
  ASSERT_EQ(r.runs.size(), 2u);
  EXPECT_EQ(r.runs[1].label, "KRR+bypass");
  ASSERT_EQ(r.runs[0].rows.size(), r.runs[1].rows.size());
  for (std::size_t i = 0; i < r.runs[0].rows.size(); ++i) {
    EXPECT_NEAR(r.runs[0].rows[i].train_loss, r.runs[1].rows[i].train_loss, 1e-6);
    EXPECT_NEAR(r.runs[0].rows[i].eval_loss, r.runs[1].rows[i].eval_loss, 1e-6);
  }
}

TEST(Compare, SummaryListsGaps) {
  auto cfg = tiny_run(mixers::Variant::NW);
  cfg.steps = 3;
  auto r = run_compare(cfg, {mixers::Variant::NW, mixers::Variant::KRR});
  std::ostringstream os;
  print_compare_summary(os, r);
  EXPECT_NE(os.str().find("KRR"), std::string::npos);
  EXPECT_NE(os.str().find("NW"), std::string::npos);
}

TEST(Bench, MedianAndP90) {
  auto [med, p90] = median_p90({5, 1, 4, 2, 3, 6, 7, 8, 9, 10});
  EXPECT_DOUBLE_EQ(med, 5.5);
  EXPECT_DOUBLE_EQ(p90, 9.0);
  auto [m1, p1] = median_p90({3});
  EXPECT_EQ(m1, 3.0);
  EXPECT_EQ(p1, 3.0);
}

TEST(Bench, OneRepOneLengthGivesOneRowPerVariant) {
  BenchOptions o;
  o.lengths = {32};
  o.reps = 1;
  o.head_dim = 8;
  auto rows = run_bench(o);
  ASSERT_EQ(rows.size(), 4u);
  std::ostringstream os;
  write_bench_csv(os, rows);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kBenchHeader);
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 4);
  for (const auto& r : rows) {
    EXPECT_EQ(r.n, 32u);
    EXPECT_GT(r.median_us, 0.0);
    EXPECT_EQ(r.median_us, r.p90_us);
  }
}

TEST(Bench, UnknownVariantRejected) {
  BenchOptions o;
  o.variants = {"GRU"};
  EXPECT_THROW(run_bench(o), std::invalid_argument);
}

TEST(Bench, ScalingOrderings) {
  BenchOptions o;
  o.lengths = {256, 512, 1024};
  o.reps = 3;
  o.variants = {"NW", "KRR-tri", "KRR-general"};
  const auto rows = run_bench(o);
  auto median = [&](const std::string& v, std::size_t n) {
    for (const auto& r : rows)
      if (r.variant == v && r.n == n) return r.median_us;
    ADD_FAILURE() << "missing " << v << " " << n;
    return 0.0;
  };
  // The triangular solve does strictly less work than LU on the same system.
  for (std::size_t n : {256, 512, 1024}) EXPECT_LE(median("KRR-tri", n), median("KRR-general", n)) << n;
  // Quadratic terms dominate by N = 512, so doubling N costs at least 3.5x.
  for (const char* v : {"NW", "KRR-tri"}) EXPECT_GE(median(v, 1024) / median(v, 512), 3.5) << v;
}
