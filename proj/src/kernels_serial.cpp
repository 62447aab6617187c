#include "evflow/kernels.hpp"
#include "kernels_detail.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

namespace evflow::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::Parallel};
}

void set_backend(Backend b) noexcept { g_backend.store(b, std::memory_order_relaxed); }
Backend backend() noexcept { return g_backend.load(std::memory_order_relaxed); }

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
             std::size_t k, std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) {
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
  for (std::size_t i = 0; i < n; ++i) {
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

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t r,
             std::size_t n, std::size_t m, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(n * m), 0.0);
  for (std::size_t p = 0; p < r; ++p) {
    const double* arow = a.data() + p * n;
    const double* brow = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      double* crow = c.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace serial

// Shared by both backends: one (group, head) slice of attention.
namespace detail {

void attention_forward_slice(const AttentionShape& s, std::size_t g, std::size_t h, std::span<const double> q,
                             std::span<const double> k, std::span<const double> v, std::span<const double> mask,
                             std::span<double> probs, std::span<double> out) {
  const std::size_t dh = s.head_dim();
  const std::size_t W = s.width;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t col0 = h * dh;
  const std::size_t pbase = (g * s.heads + h) * s.q_len * s.kv_len;
  for (std::size_t i = 0; i < s.q_len; ++i) {
    const double* qrow = q.data() + (g * s.q_len + i) * W + col0;
    double* prow = probs.data() + pbase + i * s.kv_len;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s.kv_len; ++j) {
      const double* krow = k.data() + (g * s.kv_len + j) * W + col0;
      double dot = 0.0;
      for (std::size_t d = 0; d < dh; ++d) dot += qrow[d] * krow[d];
      prow[j] = dot * scale;
      mx = std::max(mx, prow[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < s.kv_len; ++j) {
      prow[j] = std::exp(prow[j] - mx);
      z += prow[j];
    }
    for (std::size_t j = 0; j < s.kv_len; ++j) prow[j] /= z;

    double* orow = out.data() + (g * s.q_len + i) * W + col0;
    std::fill(orow, orow + dh, 0.0);
    const double* mrow = mask.empty() ? nullptr : mask.data() + pbase + i * s.kv_len;
    for (std::size_t j = 0; j < s.kv_len; ++j) {
      const double p = mrow ? prow[j] * mrow[j] : prow[j];
      const double* vrow = v.data() + (g * s.kv_len + j) * W + col0;
      for (std::size_t d = 0; d < dh; ++d) orow[d] += p * vrow[d];
    }
  }
}

void attention_backward_slice(const AttentionShape& s, std::size_t g, std::size_t h, std::span<const double> q,
                              std::span<const double> k, std::span<const double> v, std::span<const double> mask,
                              std::span<const double> probs, std::span<const double> d_out, std::span<double> dq,
                              std::span<double> dk, std::span<double> dv) {
  const std::size_t dh = s.head_dim();
  const std::size_t W = s.width;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t col0 = h * dh;
  const std::size_t pbase = (g * s.heads + h) * s.q_len * s.kv_len;
  std::vector<double> ds(s.kv_len);
  for (std::size_t i = 0; i < s.q_len; ++i) {
    const double* prow = probs.data() + pbase + i * s.kv_len;
    const double* mrow = mask.empty() ? nullptr : mask.data() + pbase + i * s.kv_len;
    const double* dorow = d_out.data() + (g * s.q_len + i) * W + col0;
    double r = 0.0;
    for (std::size_t j = 0; j < s.kv_len; ++j) {
      const double* vrow = v.data() + (g * s.kv_len + j) * W + col0;
      double dp = 0.0;
      for (std::size_t d = 0; d < dh; ++d) dp += dorow[d] * vrow[d];
      if (mrow) dp *= mrow[j];
      ds[j] = dp;
      r += dp * prow[j];
      const double pm = mrow ? prow[j] * mrow[j] : prow[j];
      double* dvrow = dv.data() + (g * s.kv_len + j) * W + col0;
      for (std::size_t d = 0; d < dh; ++d) dvrow[d] += pm * dorow[d];
    }
    const double* qrow = q.data() + (g * s.q_len + i) * W + col0;
    double* dqrow = dq.data() + (g * s.q_len + i) * W + col0;
    for (std::size_t j = 0; j < s.kv_len; ++j) {
      const double dsij = prow[j] * (ds[j] - r) * scale;
      const double* krow = k.data() + (g * s.kv_len + j) * W + col0;
      double* dkrow = dk.data() + (g * s.kv_len + j) * W + col0;
      for (std::size_t d = 0; d < dh; ++d) {
        dqrow[d] += dsij * krow[d];
        dkrow[d] += dsij * qrow[d];
      }
    }
  }
}

double crps_point(std::span<const double> ensemble, std::size_t members, std::size_t points, std::size_t j,
                  double y) {
  double spread = 0.0;
  double err = 0.0;
  for (std::size_t a = 0; a < members; ++a) {
    const double xa = ensemble[a * points + j];
    err += std::abs(xa - y);
    for (std::size_t b = 0; b < members; ++b) spread += std::abs(xa - ensemble[b * points + j]);
  }
  const double m = static_cast<double>(members);
  return err / m - 0.5 * spread / (m * m);
}

}  // namespace detail

namespace serial {

void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<const double> mask, std::span<double> probs,
                       std::span<double> out) {
  for (std::size_t g = 0; g < s.groups; ++g)
    for (std::size_t h = 0; h < s.heads; ++h) detail::attention_forward_slice(s, g, h, q, k, v, mask, probs, out);
}

void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> mask, std::span<const double> probs,
                        std::span<const double> d_out, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv) {
  for (std::size_t g = 0; g < s.groups; ++g)
    for (std::size_t h = 0; h < s.heads; ++h)
      detail::attention_backward_slice(s, g, h, q, k, v, mask, probs, d_out, dq, dk, dv);
}

void crps_pointwise(std::span<const double> ensemble, std::size_t members, std::size_t points,
                    std::span<const double> truth, std::span<double> per_point) {
  for (std::size_t j = 0; j < points; ++j) per_point[j] = detail::crps_point(ensemble, members, points, j, truth[j]);
}

}  // namespace serial

#define EVFLOW_DISPATCH(fn, ...) \
  return backend() == Backend::Serial ? serial::fn(__VA_ARGS__) : parallel::fn(__VA_ARGS__)

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
             std::size_t k, std::size_t m, bool accumulate) {
  EVFLOW_DISPATCH(gemm_nn, a, b, c, n, k, m, accumulate);
}
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n,
             std::size_t k, std::size_t m, bool accumulate) {
  EVFLOW_DISPATCH(gemm_nt, a, b, c, n, k, m, accumulate);
}
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t r,
             std::size_t n, std::size_t m, bool accumulate) {
  EVFLOW_DISPATCH(gemm_tn, a, b, c, r, n, m, accumulate);
}
void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                       std::span<const double> v, std::span<const double> mask, std::span<double> probs,
                       std::span<double> out) {
  EVFLOW_DISPATCH(attention_forward, s, q, k, v, mask, probs, out);
}
void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,
                        std::span<const double> v, std::span<const double> mask, std::span<const double> probs,
                        std::span<const double> d_out, std::span<double> dq, std::span<double> dk,
                        std::span<double> dv) {
  EVFLOW_DISPATCH(attention_backward, s, q, k, v, mask, probs, d_out, dq, dk, dv);
}
void crps_pointwise(std::span<const double> ensemble, std::size_t members, std::size_t points,
                    std::span<const double> truth, std::span<double> per_point) {
  EVFLOW_DISPATCH(crps_pointwise, ensemble, members, points, truth, per_point);
}

#undef EVFLOW_DISPATCH

}  // namespace evflow::kernels
