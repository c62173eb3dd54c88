// krrmix command line: train, compare, check, bench.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "krrmix/bench.hpp"
#include "krrmix/checks.hpp"
#include "krrmix/config.hpp"
#include "krrmix/errors.hpp"
#include "krrmix/parallel.hpp"
#include "krrmix/train.hpp"

namespace {

using namespace krrmix;

template <typename T>
std::vector<T> split_list(const std::string& s, T (*convert)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(convert(item));
  }
  return out;
}

mixers::Variant to_variant(const std::string& s) {
  const auto v = mixers::parse_variant(s);
  if (!v) throw CLI::ValidationError("--variants", "unknown variant '" + s + "'");
  return *v;
}

std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); }

int report_config_error(const ConfigError& e, const std::string& path) {
  std::cerr << path;
  if (e.line() > 0) std::cerr << ':' << e.line();
  std::cerr << ": ";
  if (!e.key().empty()) std::cerr << e.key() << ": ";
  std::cerr << e.what() << '\n';
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  init_threads_from_env();

  CLI::App app{"Kernel-regression token mixers: training and verification"};
  app.require_subcommand(1);

  std::string config, out_dir = "runs/latest", variants, suite, lengths = "128,256,512,1024";
  std::size_t reps = 5, head_dim = 64, heads = 1;
  std::string bench_out;
  bool corrupt_solve = false;

  auto* train = app.add_subcommand("train", "Train one model from a config file");
  train->add_option("--config", config, "Config file")->required();
  train->add_option("--out", out_dir, "Output directory for metrics.csv and checkpoint.bin");

  auto* compare = app.add_subcommand("compare", "Train several mixer variants on identical data");
  compare->add_option("--config", config, "Config file")->required();
  compare->add_option("--variants", variants, "Comma-separated list, e.g. NW,KRR,LLR")->required();
  compare->add_option("--out", out_dir, "Output directory for compare.csv");

  auto* check = app.add_subcommand("check", "Run the invariant, oracle and gradient suites");
  check->add_option("--suite", suite, "linalg, autograd, mixers, model or harness");
  check->add_flag("--corrupt-solve-backward", corrupt_solve,
                  "Flip the sign of the solve gradient (the gradient suites must then fail)");

  auto* bench = app.add_subcommand("bench", "Time mixer forward passes");
  bench->add_option("--lengths", lengths, "Comma-separated sequence lengths");
  bench->add_option("--reps", reps, "Timed repetitions per point");
  bench->add_option("--head-dim", head_dim, "Head dimension");
  bench->add_option("--heads", heads, "Number of heads");
  bench->add_option("--out", bench_out, "Write the CSV here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      harness::TrainConfig cfg;
      try {
        cfg = harness::load_train_config(config);
      } catch (const ConfigError& e) {
        return report_config_error(e, config);
      }
      harness::RunOptions opts;
      opts.out_dir = out_dir;
      opts.log = &std::cout;
      harness::run_training(cfg, opts);
      std::cout << "wrote " << (std::filesystem::path(out_dir) / "metrics.csv").string() << " and "
                << (std::filesystem::path(out_dir) / "checkpoint.bin").string() << '\n';
      return 0;
    }
    if (*compare) {
      harness::TrainConfig cfg;
      try {
        cfg = harness::load_train_config(config);
      } catch (const ConfigError& e) {
        return report_config_error(e, config);
      }
      const auto list = split_list<mixers::Variant>(variants, to_variant);
      harness::RunOptions opts;
      opts.out_dir = out_dir;
      opts.log = &std::cout;
      const auto result = harness::run_compare(cfg, list, opts);
      harness::print_compare_summary(std::cout, result);
      std::cout << "wrote " << (std::filesystem::path(out_dir) / "compare.csv").string() << '\n';
      return 0;
    }
    if (*check) {
      checks::CheckOptions opts;
      opts.suite = suite;
      if (corrupt_solve) opts.fault = autograd::Fault::SolveBackward;
      const auto report = checks::run_checks(opts, &std::cout);
      checks::print_report(std::cout, report);
      return report.all_passed() ? 0 : 1;
    }
    if (*bench) {
      harness::BenchOptions opts;
      opts.lengths = split_list<std::size_t>(lengths, to_size);
      opts.reps = reps;
      opts.head_dim = head_dim;
      opts.heads = heads;
      const auto rows = harness::run_bench(opts);
      if (bench_out.empty()) {
        harness::write_bench_csv(std::cout, rows);
      } else {
        std::ofstream os(bench_out, std::ios::binary);
        harness::write_bench_csv(os, rows);
      }
      return 0;
    }
  } catch (const NonFiniteLoss& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
