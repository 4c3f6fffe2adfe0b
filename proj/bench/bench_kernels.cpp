// Serial reference vs OpenMP kernels at model-like sizes. Run with
// SSMCYTO_THREADS or OMP_NUM_THREADS to vary the worker count.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "ssmcyto/kernels.hpp"

namespace k = ssmcyto::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Token projection: [batch·tokens, C] x [C, 2C].
template <bool Parallel>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const k::GemmArgs args{false, false, 32 * 64, 2 * n, n, false};
  const auto a = random_vec(args.m * args.k, 1), b = random_vec(args.k * args.n, 2);
  std::vector<double> c(args.m * args.n);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::gemm(args, a, b, c);
    else k::serial::gemm(args, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * args.m * args.n * args.k));
}

// Depthwise 3x3 on an 8x8 grid.
template <bool Parallel>
void BM_conv(benchmark::State& state) {
  const auto ch = static_cast<std::size_t>(state.range(0));
  k::ConvGeometry g;
  g.batch = 32;
  g.height = g.width = 8;
  g.in_channels = g.out_channels = g.groups = ch;
  g.kernel_h = g.kernel_w = 3;
  g.pad_top = g.pad_left = 1;
  const auto x = random_vec(g.batch * 64 * ch, 3), w = random_vec(9 * ch, 4);
  std::vector<double> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::conv_forward(g, x, w, y);
    else k::serial::conv_forward(g, x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_scan(benchmark::State& state) {
  const k::ScanGeometry g{32, static_cast<std::size_t>(state.range(0)), 32, 8};
  const auto x = random_vec(g.batch * g.len * g.dim, 5), delta = random_vec(g.batch * g.len * g.dim, 6, 0.01, 0.1);
  const auto A = random_vec(g.dim * g.state, 7, -2.0, -0.1), B = random_vec(g.batch * g.len * g.state, 8);
  const auto C = random_vec(g.batch * g.len * g.state, 9), skip = random_vec(g.dim, 10);
  const k::ScanInputs in{x, delta, A, B, C, skip, {}};
  std::vector<double> y(x.size()), states(g.batch * g.dim * g.state * g.len), h(g.batch * g.dim * g.state);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::selective_scan(g, in, y, states, h);
    else k::serial::selective_scan(g, in, y, states, h);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<false>)->Name("gemm/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Arg(32)->Arg(64);
BENCHMARK(BM_conv<false>)->Name("conv_depthwise/serial")->Arg(64)->Arg(128);
BENCHMARK(BM_conv<true>)->Name("conv_depthwise/parallel")->Arg(64)->Arg(128);
BENCHMARK(BM_scan<false>)->Name("selective_scan/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_scan<true>)->Name("selective_scan/parallel")->Arg(64)->Arg(256);

BENCHMARK_MAIN();
