#pragma once

// Rectified-flow primitives: the straight noise-to-data path, its constant
// velocity, the event-controlled step schedule and the Euler integrator used
// at sampling time.

#include <functional>
#include <span>
#include <vector>

namespace evflow::flow {

/// (1 - t) * x0 + t * x1, elementwise. Exact at both endpoints.
std::vector<double> ot_interpolate(std::span<const double> x0, std::span<const double> x1, double t);

/// x1 - x0: the time-derivative of ot_interpolate, constant along the path.
std::vector<double> velocity_target(std::span<const double> x0, std::span<const double> x1);

/// Integration grid on (0, 1]. Interior increments equal step_size; the last
/// point is exactly 1 and the final increment may be shorter.
struct StepSchedule {
  int base_steps = 0;
  double delta = 0.0;
  double step_size = 0.0;
  std::vector<double> grid;

  std::size_t steps() const noexcept { return grid.size(); }
};

/// Schedule with step 1 / (base_steps + delta), delta in [0, 1).
/// delta == 0 gives the plain uniform 1/T grid.
StepSchedule make_schedule(int base_steps, double delta);

/// The affine event head: delta = sigmoid(<weights, c> + bias).
struct DeltaHead {
  std::span<const double> weights;
  double bias = 0.0;
};

double event_delta(std::span<const double> event, const DeltaHead& head);

/// Schedule whose step size is controlled by the event embedding.
StepSchedule event_step_size(std::span<const double> event, const DeltaHead& head, int base_steps);

/// v = f(x, t); writes the velocity into `v` (same length as x).
using VelocityFn = std::function<void(std::span<const double> x, double t, std::span<double> v)>;

/// Explicit Euler from t = 0 along the schedule grid, evaluating the field at
/// the left end of each interval. Throws NumericalError naming the step on a
/// non-finite state.
std::vector<double> solve_ode(const VelocityFn& velocity, std::span<const double> x_init,
                              const StepSchedule& schedule);

}  // namespace evflow::flow
