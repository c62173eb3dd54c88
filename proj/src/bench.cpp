#include "krrmix/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

#include "krrmix/linalg.hpp"
#include "krrmix/mixers.hpp"
#include "krrmix/rng.hpp"

namespace krrmix::harness {

namespace {

Tensor<float> random_tensor(Shape shape, Rng& rng, double std) {
  Tensor<float> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(std * rng.normal());
  return t;
}

// Keeps the optimizer from discarding a result.
volatile float g_sink = 0.0f;

}  // namespace

std::pair<double, double> median_p90(std::vector<double> s) {
  if (s.empty()) return {0.0, 0.0};
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  const double median = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n)));
  return {median, s[std::max<std::size_t>(rank, 1) - 1]};
}

std::vector<BenchRow> run_bench(const BenchOptions& opts) {
  std::vector<std::string> variants = opts.variants;
  if (variants.empty()) variants = {"NW", "KRR-tri", "KRR-general", "LLR"};
  for (const auto& v : variants) {
    if (v != "NW" && v != "KRR-tri" && v != "KRR-general" && v != "LLR") {
      throw std::invalid_argument("unknown bench variant '" + v + "'");
    }
  }
  const std::size_t h = opts.heads, dh = opts.head_dim;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<BenchRow> rows;

  for (const auto& variant : variants) {
    for (const std::size_t n : opts.lengths) {
      Rng rng = Rng(opts.seed).split(variant).split(n);
      const auto q = random_tensor({h, n, dh}, rng, 1.0);
      const auto k = random_tensor({h, n, dh}, rng, 1.0);
      const auto v = random_tensor({h, n, dh}, rng, 1.0);
      const auto r = random_tensor({h, n, dh}, rng, 1.0);
      const Tensor<float> c({h}, 1.0f);
      const Tensor<float> log_lambda({h}, std::log(0.1f));
      const auto mask = linalg::Mask::causal(n);

      auto run_once = [&]() {
        Tensor<float> z;
        if (variant == "NW") {
          z = mixers::nw_attention(q, k, v, mask, scale);
        } else if (variant == "LLR") {
          z = mixers::llr_forward(q, k, v, mask, 1.0f, scale);
        } else {
          const bool general = variant == "KRR-general";
          const auto o = mixers::krr_normalize(r, v, c, log_lambda, mask, true, general);
          z = mixers::nw_attention(q, k, o, mask, scale);
        }
        g_sink = g_sink + z[0];
      };

      run_once();  // warm-up
      std::vector<double> samples;
      for (std::size_t i = 0; i < std::max<std::size_t>(opts.reps, 1); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
      }
      const auto [median, p90] = median_p90(samples);
      rows.push_back({variant, n, median, p90});
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << kBenchHeader << '\n';
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.1f,%.1f\n", r.variant.c_str(), r.n, r.median_us,
                  r.p90_us);
    os << buf;
  }
}

}  // namespace krrmix::harness
