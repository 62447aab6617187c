#pragma once

#include <cstddef>
#include <span>

#include "evflow/kernels.hpp"

namespace evflow::kernels::detail {

void attention_forward_slice(const AttentionShape& s, std::size_t g, std::size_t h, std::span<const double> q,
                             std::span<const double> k, std::span<const double> v, std::span<const double> mask,
                             std::span<double> probs, std::span<double> out);

void attention_backward_slice(const AttentionShape& s, std::size_t g, std::size_t h, std::span<const double> q,
                              std::span<const double> k, std::span<const double> v, std::span<const double> mask,
                              std::span<const double> probs, std::span<const double> d_out, std::span<double> dq,
                              std::span<double> dk, std::span<double> dv);

double crps_point(std::span<const double> ensemble, std::size_t members, std::size_t points, std::size_t j,
                  double y);

}  // namespace evflow::kernels::detail
