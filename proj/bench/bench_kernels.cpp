// Serial reference vs OpenMP kernels. Set OMP_NUM_THREADS to vary the team.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "evflow/kernels.hpp"

namespace k = evflow::kernels;

namespace {

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

// Token-major shapes as seen in the denoiser: rows = batch * tokens.
template <bool Parallel>
void BM_gemm_nn(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0)), d = static_cast<std::size_t>(st.range(1));
  const auto a = noise(n * d, 1), b = noise(d * 4 * d, 2);
  std::vector<double> c(n * 4 * d);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::gemm_nn(a, b, c, n, d, 4 * d, false);
    else k::serial::gemm_nn(a, b, c, n, d, 4 * d, false);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n * d * 4 * d));
}

template <bool Parallel>
void BM_gemm_tn(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0)), d = static_cast<std::size_t>(st.range(1));
  const auto a = noise(n * d, 3), b = noise(n * 4 * d, 4);
  std::vector<double> c(d * 4 * d);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::gemm_tn(a, b, c, n, d, 4 * d, false);
    else k::serial::gemm_tn(a, b, c, n, d, 4 * d, false);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * n * d * 4 * d));
}

template <bool Parallel>
void BM_attention(benchmark::State& st) {
  k::AttentionShape s;
  s.groups = static_cast<std::size_t>(st.range(0));
  s.heads = 4;
  s.q_len = s.kv_len = 24;
  s.width = 256;
  const auto q = noise(s.groups * s.q_len * s.width, 5), kk = noise(s.groups * s.kv_len * s.width, 6),
             v = noise(s.groups * s.kv_len * s.width, 7), d_out = noise(s.groups * s.q_len * s.width, 8);
  std::vector<double> probs(s.prob_size()), out(q.size()), dq(q.size()), dk(kk.size()), dv(v.size());
  for (auto _ : st) {
    if constexpr (Parallel) {
      k::parallel::attention_forward(s, q, kk, v, {}, probs, out);
      k::parallel::attention_backward(s, q, kk, v, {}, probs, d_out, dq, dk, dv);
    } else {
      k::serial::attention_forward(s, q, kk, v, {}, probs, out);
      k::serial::attention_backward(s, q, kk, v, {}, probs, d_out, dq, dk, dv);
    }
    benchmark::DoNotOptimize(dq.data());
  }
}

template <bool Parallel>
void BM_crps(benchmark::State& st) {
  const auto m = static_cast<std::size_t>(st.range(0)), n = std::size_t{48};
  const auto ens = noise(m * n, 9), y = noise(n, 10);
  std::vector<double> out(n);
  for (auto _ : st) {
    if constexpr (Parallel) k::parallel::crps_pointwise(ens, m, n, y, out);
    else k::serial::crps_pointwise(ens, m, n, y, out);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/serial")->Args({64 * 24, 64})->Args({64 * 24, 256});
BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/parallel")->Args({64 * 24, 64})->Args({64 * 24, 256});
BENCHMARK(BM_gemm_tn<false>)->Name("gemm_tn/serial")->Args({64 * 24, 64})->Args({64 * 24, 256});
BENCHMARK(BM_gemm_tn<true>)->Name("gemm_tn/parallel")->Args({64 * 24, 64})->Args({64 * 24, 256});
BENCHMARK(BM_attention<false>)->Name("attention/serial")->Arg(16)->Arg(64);
BENCHMARK(BM_attention<true>)->Name("attention/parallel")->Arg(16)->Arg(64);
BENCHMARK(BM_crps<false>)->Name("crps/serial")->Arg(100)->Arg(400);
BENCHMARK(BM_crps<true>)->Name("crps/parallel")->Arg(100)->Arg(400);

BENCHMARK_MAIN();
