// Serial reference vs OpenMP grid sampling.
//
//   ./build/bench/bench_kernels --benchmark_min_time=0.5
//
// Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <cmath>
#include <vector>

#include "omsqz/kernels.hpp"
#include "omsqz/lineshape.hpp"
#include "omsqz/units.hpp"

using namespace omsqz;

namespace {

std::vector<double> grid_hz(std::size_t n) {
  std::vector<double> g(n);
  const double lo = 490e3, step = 80e3 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = hz_to_rad(lo + step * static_cast<double>(i));
  return g;
}

SpectrumModel model() {
  const auto rates = phenomenological_rates(hz_to_rad(530e3), hz_to_rad(3929.31), 0.53, 5.8);
  return heterodyne_model(rates, 5.8, hz_to_rad(11e3), 1.0, 1e-6);
}

double lorentz_pair(double w) {
  const double a = w - 3.33e6, b = w + 3.33e6;
  return 1.0 / (1.0 + a * a * 1e-8) + 0.7 / (1.0 + b * b * 1e-8);
}

void BM_map_serial(benchmark::State& st) {
  const auto g = grid_hz(static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(kernels::sample_serial(g, lorentz_pair));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_map_parallel(benchmark::State& st) {
  const auto g = grid_hz(static_cast<std::size_t>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(kernels::sample(g, lorentz_pair));
  st.SetItemsProcessed(st.iterations() * st.range(0));
  st.counters["threads"] = kernels::max_threads();
}

void BM_model_serial(benchmark::State& st) {
  const auto g = grid_hz(static_cast<std::size_t>(st.range(0)));
  const auto m = model();
  for (auto _ : st) benchmark::DoNotOptimize(m.sample_serial(g));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_model_parallel(benchmark::State& st) {
  const auto g = grid_hz(static_cast<std::size_t>(st.range(0)));
  const auto m = model();
  for (auto _ : st) benchmark::DoNotOptimize(m.sample(g));
  st.SetItemsProcessed(st.iterations() * st.range(0));
  st.counters["threads"] = kernels::max_threads();
}

}  // namespace

BENCHMARK(BM_map_serial)->RangeMultiplier(16)->Range(1 << 12, 1 << 20);
BENCHMARK(BM_map_parallel)->RangeMultiplier(16)->Range(1 << 12, 1 << 20);
BENCHMARK(BM_model_serial)->RangeMultiplier(16)->Range(1 << 12, 1 << 20);
BENCHMARK(BM_model_parallel)->RangeMultiplier(16)->Range(1 << 12, 1 << 20);

BENCHMARK_MAIN();
