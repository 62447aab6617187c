#include "evflow/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "evflow/error.hpp"

namespace evflow::flow {

namespace {
void require_same_length(std::span<const double> a, std::span<const double> b, const char* op) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(op) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
}
}  // namespace

std::vector<double> ot_interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
  require_same_length(x0, x1, "ot_interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("ot_interpolate: t outside [0, 1]");
  std::vector<double> out(x0.size());
  const double s = 1.0 - t;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x0[i] * s + x1[i] * t;
  return out;
}

std::vector<double> velocity_target(std::span<const double> x0, std::span<const double> x1) {
  require_same_length(x0, x1, "velocity_target");
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x1[i] - x0[i];
  return out;
}

StepSchedule make_schedule(int base_steps, double delta) {
  if (base_steps < 1) throw std::invalid_argument("make_schedule: base_steps must be >= 1");
  if (!(delta >= 0.0 && delta < 1.0)) throw std::invalid_argument("make_schedule: delta must lie in [0, 1)");
  StepSchedule s;
  s.base_steps = base_steps;
  s.delta = delta;
  s.step_size = 1.0 / (static_cast<double>(base_steps) + delta);
  // With delta == 0 the last multiple lands on 1 up to rounding; it is
  // replaced by the exact endpoint below.
  for (int k = 1; k <= base_steps; ++k) {
    const double t = static_cast<double>(k) * s.step_size;
    if (t < 1.0 - 1e-12) s.grid.push_back(t);
  }
  s.grid.push_back(1.0);
  return s;
}

double event_delta(std::span<const double> event, const DeltaHead& head) {
  if (event.size() != head.weights.size())
    throw std::invalid_argument("event_delta: embedding length does not match the head");
  double a = head.bias;
  for (std::size_t i = 0; i < event.size(); ++i) a += head.weights[i] * event[i];
  if (!std::isfinite(a)) throw NumericalError("event_delta: non-finite affine output");
  return 1.0 / (1.0 + std::exp(-a));
}

StepSchedule event_step_size(std::span<const double> event, const DeltaHead& head, int base_steps) {
  return make_schedule(base_steps, event_delta(event, head));
}

std::vector<double> solve_ode(const VelocityFn& velocity, std::span<const double> x_init,
                              const StepSchedule& schedule) {
  std::vector<double> x(x_init.begin(), x_init.end());
  std::vector<double> v(x.size());
  double t_prev = 0.0;
  for (std::size_t k = 0; k < schedule.grid.size(); ++k) {
    const double t = schedule.grid[k];
    velocity(x, t_prev, v);
    const double dt = t - t_prev;
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += v[i] * dt;
      if (!std::isfinite(x[i]))
        throw NumericalError("solve_ode: non-finite state at step " + std::to_string(k) + " (t=" +
                             std::to_string(t_prev) + ")");
    }
    t_prev = t;
  }
  return x;
}

}  // namespace evflow::flow
