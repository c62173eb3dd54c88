#include "krrmix/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "krrmix/checkpoint.hpp"
#include "krrmix/errors.hpp"
#include "krrmix/model.hpp"
#include "krrmix/tasks.hpp"

namespace krrmix::harness {

namespace {

using autograd::Tape;
using autograd::Var;

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

template <typename T>
std::vector<T> cast_weights(const std::vector<double>& w) {
  return std::vector<T>(w.begin(), w.end());
}

template <typename T>
EvalResult evaluate(const model::ModelConfig& mcfg, model::ModelWeights<T>& weights,
                    const BatchSource& source, std::size_t batch, std::size_t batches) {
  double loss_sum = 0.0, weight_sum = 0.0;
  double hits = 0.0, counted = 0.0;
  for (std::size_t e = 0; e < batches; ++e) {
    const Batch b = source.eval_batch(batch, e);
    Tape<T> tape;
    auto vars = model::bind(tape, weights);
    Var<T> logits = model::forward_logits(tape, vars, mcfg, b.inputs, b.batch, b.seq_len);
    const auto w = cast_weights<T>(b.weights);
    const T loss = model::lm_loss<T>(logits, b.targets, w).value().item();
    double bw = 0.0;
    for (double x : b.weights) bw += x;
    loss_sum += static_cast<double>(loss) * bw;
    weight_sum += bw;

    const Tensor<T>& lv = logits.value();
    const std::size_t vocab = lv.dim(1);
    for (std::size_t row = 0; row < lv.dim(0); ++row) {
      if (b.weights[row] <= 0.0) continue;
      std::size_t best = 0;
      for (std::size_t c = 1; c < vocab; ++c) {
        if (lv[row * vocab + c] > lv[row * vocab + best]) best = c;
      }
      hits += b.weights[row] * (static_cast<std::int32_t>(best) == b.targets[row] ? 1.0 : 0.0);
      counted += b.weights[row];
    }
  }
  return {weight_sum > 0 ? loss_sum / weight_sum : 0.0, counted > 0 ? hits / counted : 0.0};
}

template <typename T>
RunResult train_impl(const TrainConfig& cfg, const RunOptions& opts) {
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  const BatchSource source(cfg.task);
  const auto& mcfg = cfg.model;
  auto weights = model::init_weights<T>(mcfg);

  std::vector<Tensor<T>*> params;
  weights.for_each([&](const std::string&, Tensor<T>& t) { params.push_back(&t); });
  model::Adam<T> adam(cfg.adam);

  RunResult result;
  result.label = run_label(cfg);
  std::unique_ptr<MetricsWriter> writer;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    writer = std::make_unique<MetricsWriter>(opts.out_dir / "metrics.csv");
  }

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Batch b = source.train_batch(cfg.batch, step);
    result.batch_digests.push_back(b.digest());

    Tape<T> tape;
    auto vars = model::bind(tape, weights);
    std::vector<Var<T>> leaves;
    vars.for_each([&](const std::string&, Var<T>& v) { leaves.push_back(v); });
    Var<T> logits = model::forward_logits(tape, vars, mcfg, b.inputs, b.batch, b.seq_len);
    const auto w = cast_weights<T>(b.weights);
    Var<T> loss = model::lm_loss<T>(logits, b.targets, w);
    const double train_loss = static_cast<double>(loss.value().item());
    if (!std::isfinite(train_loss)) {
      throw NonFiniteLoss("training loss is not finite at step " + std::to_string(step));
    }
    const auto grads = tape.backward(loss);
    std::vector<Tensor<T>> g;
    g.reserve(leaves.size());
    for (const auto& v : leaves) g.push_back(grads.get_or_zeros(v));
    adam.set_lr(learning_rate(cfg, step));
    adam.step(params, g);

    if (step % cfg.eval_interval == 0 || step == cfg.steps) {
      const EvalResult ev = evaluate(mcfg, weights, source, cfg.batch, cfg.eval_batches);
      const double ms =
          std::chrono::duration<double, std::milli>(Clock::now() - start).count();
      RunMetrics m{step, result.label, mcfg.seed, train_loss, ev.loss, ev.accuracy,
                   cfg.record_wall_time ? ms : 0.0};
      if (!std::isfinite(ev.loss)) {
        throw NonFiniteLoss("eval loss is not finite at step " + std::to_string(step));
      }
      result.rows.push_back(m);
      if (writer) writer->append(m);
      if (opts.log) {
        char line[256];
        std::snprintf(line, sizeof line,
                      "%s step %zu train_loss %.5f eval_loss %.5f token_accuracy %.4f wall_ms %.0f\n",
                      result.label.c_str(), step, train_loss, ev.loss, ev.accuracy, ms);
        *opts.log << line << std::flush;
      }
      if (opts.stop_at_accuracy > 0.0 && ev.accuracy >= opts.stop_at_accuracy) break;
    }
  }
  if (!opts.out_dir.empty()) {
    model::save_checkpoint<T>(opts.out_dir / "checkpoint.bin", mcfg, weights);
  }
  return result;
}

}  // namespace

std::string run_label(const TrainConfig& cfg) {
  const auto& mx = cfg.model.mixer;
  std::string label(mixers::variant_name(mx.variant));
  if (mx.bypass == mixers::Bypass::Identity && mixers::is_krr(mx.variant)) label += "+bypass";
  return label;
}

RunResult run_training(const TrainConfig& cfg, const RunOptions& opts) {
  return cfg.precision == Precision::Float64 ? train_impl<double>(cfg, opts)
                                             : train_impl<float>(cfg, opts);
}

CompareResult run_compare(const TrainConfig& cfg, const std::vector<mixers::Variant>& variants,
                          const RunOptions& opts) {
  CompareResult out;
  for (const auto v : variants) {
    TrainConfig c = cfg;
    c.model.mixer.variant = v;
    if (!mixers::is_krr(v)) c.model.mixer.bypass = mixers::Bypass::None;
    RunOptions run_opts;
    run_opts.log = opts.log;
    RunResult r = run_training(c, run_opts);
    if (!out.runs.empty() && r.batch_digests != out.runs.front().batch_digests) {
      throw Error("compare: variant " + r.label + " saw a different data stream");
    }
    out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
    out.runs.push_back(std::move(r));
  }
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    write_metrics_csv(opts.out_dir / "compare.csv", out.rows);
    std::ofstream s(opts.out_dir / "compare_summary.csv", std::ios::binary);
    s << "variant,final_eval_loss,final_token_accuracy\n";
    for (const auto& r : out.runs) {
      if (r.rows.empty()) continue;
      char line[160];
      std::snprintf(line, sizeof line, "%s,%.9g,%.6f\n", r.label.c_str(), r.rows.back().eval_loss,
                    r.rows.back().token_accuracy);
      s << line;
    }
  }
  return out;
}

void print_compare_summary(std::ostream& os, const CompareResult& result) {
  char buf[64];
  os << "final eval loss\n";
  for (const auto& r : result.runs) {
    if (r.rows.empty()) continue;
    std::snprintf(buf, sizeof buf, "  %-12s %.5f  acc %.4f\n", r.label.c_str(),
                  r.rows.back().eval_loss, r.rows.back().token_accuracy);
    os << buf;
  }
  os << "pairwise gaps (row - column)\n";
  std::snprintf(buf, sizeof buf, "  %-12s", "");
  os << buf;
  for (const auto& r : result.runs) {
    std::snprintf(buf, sizeof buf, " %12s", r.label.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& a : result.runs) {
    std::snprintf(buf, sizeof buf, "  %-12s", a.label.c_str());
    os << buf;
    for (const auto& b : result.runs) {
      if (a.rows.empty() || b.rows.empty()) {
        std::snprintf(buf, sizeof buf, " %12s", "-");
      } else {
        std::snprintf(buf, sizeof buf, " %+12.5f", a.rows.back().eval_loss - b.rows.back().eval_loss);
      }
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace krrmix::harness
