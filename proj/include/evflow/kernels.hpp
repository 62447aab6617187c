#pragma once

// Dense numeric kernels behind the autodiff tape and the metrics.
//
// Every kernel exists twice: `serial::` is the straightforward reference and
// `parallel::` is the OpenMP version. Both accumulate each output element in
// the same order, so the two backends agree bitwise; the tests and the
// benchmark rely on that. The unqualified functions dispatch on the process
// wide backend selected with set_backend().

#include <cstddef>
#include <span>

namespace evflow::kernels {

enum class Backend { Serial, Parallel };

void set_backend(Backend b) noexcept;
Backend backend() noexcept;

// Grouped multi-head attention layout. Queries are [groups*q_len x width],
// keys/values [groups*kv_len x width]; width splits into `heads` contiguous
// column blocks. Probabilities are stored [groups*heads*q_len x kv_len].
struct AttentionShape {
  std::size_t groups = 1;
  std::size_t heads = 1;
  std::size_t q_len = 1;
  std::size_t kv_len = 1;
  std::size_t width = 1;

  std::size_t head_dim() const noexcept { return width / heads; }
  std::size_t prob_size() const noexcept { return groups * heads * q_len * kv_len; }
};

#define EVFLOW_KERNEL_DECLS                                                                              \
  /* c[n x m] (+)= a[n x k] * b[k x m] */                                                                \
  void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n, \
               std::size_t k, std::size_t m, bool accumulate);                                           \
  /* c[n x m] (+)= a[n x k] * b[m x k]^T */                                                              \
  void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t n, \
               std::size_t k, std::size_t m, bool accumulate);                                           \
  /* c[n x m] (+)= a[r x n]^T * b[r x m] */                                                              \
  void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t r, \
               std::size_t n, std::size_t m, bool accumulate);                                           \
  /* mask is empty or holds one multiplier per probability (dropout). */                                 \
  void attention_forward(const AttentionShape& s, std::span<const double> q, std::span<const double> k,  \
                         std::span<const double> v, std::span<const double> mask, std::span<double> probs, \
                         std::span<double> out);                                                         \
  /* Accumulates into dq, dk, dv. */                                                                     \
  void attention_backward(const AttentionShape& s, std::span<const double> q, std::span<const double> k, \
                          std::span<const double> v, std::span<const double> mask,                       \
                          std::span<const double> probs, std::span<const double> d_out,                  \
                          std::span<double> dq, std::span<double> dk, std::span<double> dv);             \
  /* Pairwise ensemble CRPS per point; ensemble is [members x points]. */                                \
  void crps_pointwise(std::span<const double> ensemble, std::size_t members, std::size_t points,        \
                      std::span<const double> truth, std::span<double> per_point);

namespace serial {
EVFLOW_KERNEL_DECLS
}
namespace parallel {
EVFLOW_KERNEL_DECLS
}
EVFLOW_KERNEL_DECLS

#undef EVFLOW_KERNEL_DECLS

}  // namespace evflow::kernels
