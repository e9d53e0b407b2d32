#include <benchmark/benchmark.h>

#include <random>

#include "vqi/kernels.hpp"
#include "vqi/model.hpp"

using namespace vqi;

namespace {

Tensor<float> noise(Shape shape, std::uint64_t seed) {
  Tensor<float> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = u(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const auto c = std::size_t(state.range(0)), side = std::size_t(state.range(1));
  ConvSpec s{int(c), int(c), 3, 3, 1, 1, 1};
  const auto x = noise({1, c, side, side}, 1);
  const auto w = noise(s.weight_shape(), 2);
  const auto b = noise({c}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_forward(x, w, b, s));
  state.counters["FLOP/s"] = benchmark::Counter(2.0 * double(c * c * 9 * side * side), benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Conv3x3)->Args({16, 112})->Args({32, 56})->Args({64, 28})->Unit(benchmark::kMillisecond);

void BM_Depthwise3x3(benchmark::State& state) {
  const auto c = std::size_t(state.range(0)), side = std::size_t(state.range(1));
  ConvSpec s{int(c), int(c), 3, 3, 1, 1, int(c)};
  const auto x = noise({1, c, side, side}, 1);
  const auto w = noise(s.weight_shape(), 2);
  const auto b = noise({c}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_forward(x, w, b, s));
}
BENCHMARK(BM_Depthwise3x3)->Args({32, 112})->Args({64, 56})->Unit(benchmark::kMillisecond);

void BM_BlurPool(benchmark::State& state) {
  const auto side = std::size_t(state.range(0));
  const auto x = noise({1, 16, side, side}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(blur_pool(x, 2));
}
BENCHMARK(BM_BlurPool)->Arg(224)->Arg(112)->Unit(benchmark::kMicrosecond);

void BM_ReferenceForward(benchmark::State& state) {
  const auto g = build_reference_config();
  const auto params = ModelParams<float>::kaiming_uniform(g, 1);
  const auto batch = noise({std::size_t(state.range(0)), 1, 224, 224}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(forward(g, params, batch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ReferenceForward)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
