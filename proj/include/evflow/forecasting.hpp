#pragma once

// Autoregressive generation: a noise-free warm-up over the history builds the
// latent state, then each future segment is integrated from Gaussian noise
// along the learned velocity field.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "evflow/dataset.hpp"
#include "evflow/denoiser.hpp"
#include "evflow/flow.hpp"

namespace evflow::forecast {

/// What the generator needs from a trained network. Rows of x, c, t are
/// groups; z stacks each group's state block.
class SegmentModel {
 public:
  struct Step {
    Matrix v;  // [G x W]
    Matrix z;  // next state, same layout as the input state
  };
  virtual ~SegmentModel() = default;
  virtual std::size_t width() const = 0;
  virtual std::size_t text_dim() const = 0;
  virtual Matrix initial_state() const = 0;  // one group
  virtual Step step(const Matrix& x, const Matrix& z, const Matrix& c, const Matrix& t) const = 0;
  virtual double delta(std::span<const double> c) const = 0;
};

class DenoiserModel final : public SegmentModel {
 public:
  explicit DenoiserModel(model::Denoiser& m) : m_(m) {}
  std::size_t width() const override { return m_.config().W; }
  std::size_t text_dim() const override { return m_.config().d_text; }
  Matrix initial_state() const override { return model::initial_state(m_); }
  Step step(const Matrix& x, const Matrix& z, const Matrix& c, const Matrix& t) const override;
  double delta(std::span<const double> c) const override { return model::event_delta(m_, c); }

 private:
  model::Denoiser& m_;
};

struct ForecastConfig {
  int T = 50;
  std::size_t n_samples = 100;
  bool use_event_delta = true;
  /// Replace every event embedding with standard normal noise.
  bool no_text = false;
  std::size_t member_batch = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const ForecastConfig& c);

struct ForecastEnsemble {
  std::size_t n_samples = 0, q = 0, W = 0;
  Matrix trajectories;  // [n_samples x (q*W)], member-major, original units
  Matrix point;         // [q x W], ensemble mean
  data::ZScore normalization;
  std::vector<double> step_sizes;  // per future segment

  std::span<const double> member(std::size_t i) const { return trajectories.row(i); }
  /// Values of every member at flattened position j (segment * W + offset).
  std::vector<double> column(std::size_t j) const;
};

/// State after the clean history pass (t = 1 at every segment).
Matrix warmup_state(const SegmentModel& m, std::span<const std::vector<double>> history_values,
                    std::span<const std::vector<double>> history_events);

/// Generates n_samples trajectories in normalized units; `stream` keys the
/// per-member noise so windows draw independent ensembles.
ForecastEnsemble forecast(const SegmentModel& m, const Matrix& z_h, std::span<const std::vector<double>> future_events,
                          const ForecastConfig& cfg, std::uint64_t stream = 0);

/// Normalizes the history, warms up, forecasts and maps back to data units.
ForecastEnsemble forecast_window(const SegmentModel& m, const data::WindowSample& w, const ForecastConfig& cfg);

/// Event embeddings as the generator sees them: either as given or the
/// window's noise replacement when cfg.no_text is set.
std::vector<std::vector<double>> effective_events(std::span<const std::vector<double>> events, std::size_t text_dim,
                                                  const ForecastConfig& cfg, std::uint64_t stream, std::uint64_t part);

inline const std::vector<double> kBandQuantiles{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

/// forecast.json plus an optional ensemble.f64 sidecar ([window][member][q*W]).
void write_forecasts(const std::filesystem::path& dir, std::span<const data::WindowSample> windows,
                     std::span<const ForecastEnsemble> ensembles, const ForecastConfig& cfg,
                     const nlohmann::json& meta, bool write_ensemble);

}  // namespace evflow::forecast
