// Serial reference vs OpenMP kernels on encoder-sized shapes.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mimmx/kernels.hpp"

namespace k = mimmx::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Second conv layer of the default encoder at batch 150.
k::ConvGeometry conv_geometry(std::size_t batch) { return {batch, 8, 32, 32, 16, 3, 2, 1}; }

template <bool Parallel>
void BM_matmul_nt(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::matmul_nt(a.data(), b.data(), c.data(), n, n, n, false);
    else k::serial::matmul_nt(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <bool Parallel>
void BM_conv_forward(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)));
  const auto x = random_vec(g.batch * g.in_channels * g.in_h * g.in_w, 3);
  const auto w = random_vec(g.out_channels * g.patch(), 4);
  const auto bias = random_vec(g.out_channels, 5);
  std::vector<double> y(g.batch * g.out_channels * g.out_h() * g.out_w());
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    else k::serial::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_conv_backward(benchmark::State& state) {
  const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)));
  const auto x = random_vec(g.batch * g.in_channels * g.in_h * g.in_w, 3);
  const auto w = random_vec(g.out_channels * g.patch(), 4);
  const auto gy = random_vec(g.batch * g.out_channels * g.out_h() * g.out_w(), 6);
  std::vector<double> gx(x.size()), gw(w.size()), gb(g.out_channels);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::conv2d_backward(g, x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
    else k::serial::conv2d_backward(g, x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Parallel>
void BM_pairwise(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_vec(n * 16, 7);
  std::vector<double> d(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::pairwise_distances(x.data(), n, 16, d.data());
    else k::serial::pairwise_distances(x.data(), n, 16, d.data());
    benchmark::DoNotOptimize(d.data());
  }
}

}  // namespace

BENCHMARK(BM_matmul_nt<false>)->Arg(128)->Arg(256);
BENCHMARK(BM_matmul_nt<true>)->Arg(128)->Arg(256);
BENCHMARK(BM_conv_forward<false>)->Arg(150);
BENCHMARK(BM_conv_forward<true>)->Arg(150);
BENCHMARK(BM_conv_backward<false>)->Arg(150);
BENCHMARK(BM_conv_backward<true>)->Arg(150);
BENCHMARK(BM_pairwise<false>)->Arg(800);
BENCHMARK(BM_pairwise<true>)->Arg(800);

BENCHMARK_MAIN();
