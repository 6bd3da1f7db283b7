// OpenMP kernels against their serial references.
//
//   build/bench/trelm_bench --benchmark_filter=matmul
//
// With one core the two columns should match; the gap is the fork overhead.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "trelm/kernels.hpp"
#include "trelm/routing.hpp"

namespace {

using namespace trelm;

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

using Gemm = void (*)(const double*, const double*, double*, std::size_t, std::size_t, std::size_t, bool);

template <Gemm F>
void bm_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    F(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

BENCHMARK(bm_gemm<kernels::matmul>)->Name("matmul/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kernels::reference::matmul>)->Name("matmul/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kernels::matmul_bt>)->Name("matmul_bt/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kernels::reference::matmul_bt>)->Name("matmul_bt/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kernels::matmul_at>)->Name("matmul_at/omp")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(bm_gemm<kernels::reference::matmul_at>)->Name("matmul_at/serial")->RangeMultiplier(2)->Range(32, 256);

// Attribution of every FFN neuron of the default-size model on two sequences.
void bm_attribute(benchmark::State& state, Execution execution) {
  TransformerConfig c;
  c.n_layers = 4;
  c.hidden_dim = 64;
  c.n_heads = 4;
  c.ffn_dim = 256;
  c.vocab_size = 2000;
  c.max_seq_len = 32;
  c.kg_dim = 32;
  c.seed = 1;
  const TransformerModel model(c);
  std::vector<AssessSequence> batch;
  for (std::uint64_t s = 0; s < 2; ++s) {
    std::vector<TokenId> tokens;
    std::mt19937_64 rng(s);
    for (int i = 0; i < 12; ++i) tokens.push_back(static_cast<TokenId>(10 + rng() % 1900));
    Tape tape(GradMode::disabled);
    ParamBinding b(tape, model);
    batch.push_back({tape.value(model.embed(b, tokens)), {{4, tokens[4]}, {7, tokens[7]}}});
  }
  const auto m = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(attribute(model, batch, m, execution));
  }
}

BENCHMARK_CAPTURE(bm_attribute, omp, Execution::parallel)->Arg(5)->Arg(20)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bm_attribute, serial, Execution::serial)->Arg(5)->Arg(20)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
