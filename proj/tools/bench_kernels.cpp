// Serial reference kernels against the OpenMP kernels at KRRMIX_THREADS.

#include <benchmark/benchmark.h>

#include <cmath>

#include "krrmix/linalg.hpp"
#include "krrmix/linalg_reference.hpp"
#include "krrmix/parallel.hpp"
#include "krrmix/rng.hpp"

namespace {

using krrmix::Tensor;
namespace linalg = krrmix::linalg;

Tensor<float> random(krrmix::Shape s, std::uint64_t seed) {
  krrmix::Rng rng(seed);
  Tensor<float> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

// Lower triangular with a dominant diagonal.
Tensor<float> lower(std::size_t n, std::uint64_t seed) {
  auto t = random({n, n}, seed);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (j > i) t[i * n + j] = 0.0f;
      else if (j == i) t[i * n + j] = 1.0f + std::abs(t[i * n + j]);
      else t[i * n + j] /= static_cast<float>(n);
    }
  return t;
}

void BM_MatmulReference(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::reference::matmul(a, b));
}

void BM_MatmulParallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::matmul(a, b));
}

void BM_SoftmaxReference(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto s = random({4, n, n}, 3);
  const auto mask = linalg::Mask::causal(n);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::reference::masked_softmax(s, mask));
}

void BM_SoftmaxParallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto s = random({4, n, n}, 3);
  const auto mask = linalg::Mask::causal(n);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::masked_softmax(s, mask));
}

void BM_TriSolveReference(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto l = lower(n, 4);
  const auto b = random({n, 64}, 5);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::reference::solve_lower_triangular(l, b));
}

void BM_TriSolveParallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto l = lower(n, 4);
  const auto b = random({n, 64}, 5);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::solve_lower_triangular(l, b));
}

void BM_GeneralSolveReference(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto l = lower(n, 4);
  const auto b = random({n, 64}, 5);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::reference::solve_general(l, b));
}

void BM_GeneralSolveParallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto l = lower(n, 4);
  const auto b = random({n, 64}, 5);
  for (auto _ : st) benchmark::DoNotOptimize(linalg::solve_general(l, b));
}

}  // namespace

BENCHMARK(BM_MatmulReference)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(BM_MatmulParallel)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(BM_SoftmaxReference)->Arg(256)->Arg(1024);
BENCHMARK(BM_SoftmaxParallel)->Arg(256)->Arg(1024);
BENCHMARK(BM_TriSolveReference)->Arg(256)->Arg(1024);
BENCHMARK(BM_TriSolveParallel)->Arg(256)->Arg(1024);
BENCHMARK(BM_GeneralSolveReference)->Arg(256)->Arg(512);
BENCHMARK(BM_GeneralSolveParallel)->Arg(256)->Arg(512);

int main(int argc, char** argv) {
  krrmix::init_threads_from_env();
  benchmark::Initialize(&argc, argv);
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
