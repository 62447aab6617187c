#include <omp.h>

#include <algorithm>
#include <cstdint>

#include "evflow/kernels.hpp"
#include "kernels_detail.hpp"

namespace evflow::kernels::parallel {

namespace {
// Below this many multiply-adds the fork/join costs more than it saves.
constexpr std::size_t kMinParallelWork = 1 << 15;
}

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
             std::size_t k, std::size_t m, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * k * m > kMinParallelWork)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c.data() + i * m;
    if (!accumulate) std::fill(crow, crow + m, 0.0);
    const double* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
             std::size_t k, std::size_t m, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * k * m > kMinParallelWork)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* arow = a.data() + i * k;
    double* crow = c.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

// Row i of c sums over p in ascending order, the same order as the serial
// p-outer loop, so results match bitwise.
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t r,
             std::size_t n, std::size_t m, bool accumulate) {
  const auto rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * r * m > kMinParallelWork)
  for (std::int64_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c.data() + i * m;
    if (!accumulate) std::fill(crow, crow + m, 0.0);
    for (std::size_t p = 0; p < r; ++p) {
      const double av = a[p * n + i];
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<const double> mask, std::span<double> probs,
                       std::span<double> out) {
  const auto slices = static_cast<std::int64_t>(s.groups * s.heads);
  const std::size_t work = s.groups * s.q_len * s.kv_len * s.width;
#pragma omp parallel for schedule(static) if (work > kMinParallelWork)
  for (std::int64_t gh = 0; gh < slices; ++gh) {
    const auto idx = static_cast<std::size_t>(gh);
    detail::attention_forward_slice(s, idx / s.heads, idx % s.heads, q, k, v, mask, probs, out);
  }
}

void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> mask, std::span<const double> probs,
                        std::span<const double> d_out, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv) {
  const auto slices = static_cast<std::int64_t>(s.groups * s.heads);
  const std::size_t work = s.groups * s.q_len * s.kv_len * s.width;
#pragma omp parallel for schedule(static) if (work > kMinParallelWork)
  for (std::int64_t gh = 0; gh < slices; ++gh) {
    const auto idx = static_cast<std::size_t>(gh);
    detail::attention_backward_slice(s, idx / s.heads, idx % s.heads, q, k, v, mask, probs, d_out, dq, dk, dv);
  }
}

void crps_pointwise(std::span<const double> ensemble, std::size_t members, std::size_t points,
                    std::span<const double> truth, std::span<double> per_point) {
  const auto n = static_cast<std::int64_t>(points);
#pragma omp parallel for schedule(static) if (members * members * points > kMinParallelWork)
  for (std::int64_t jj = 0; jj < n; ++jj) {
    const auto j = static_cast<std::size_t>(jj);
    per_point[j] = detail::crps_point(ensemble, members, points, j, truth[j]);
  }
}

}  // namespace evflow::kernels::parallel
