#pragma once

// Autoregressive flow-matching training: each window's segments are consumed
// in order, the latent state is threaded through every denoiser call, and
// the loss is the mean squared velocity error over all segments.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "evflow/dataset.hpp"
#include "evflow/denoiser.hpp"

namespace evflow::train {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t max_epochs = 1000;
  std::size_t eval_every = 5;
  std::size_t patience = 5;
  double lr_peak = 2e-4;
  double lr_init = 1e-5;
  double lr_final = 1e-7;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_frac = 0.2;
  double dropout_start = 0.6;
  double dropout_end = 0.05;
  int train_grid_steps = 100;
  double delta_grid_prob = 0.5;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  std::uint64_t seed = 0;
  bool no_text = false;
  bool fixed_timestep = false;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);
double dropout_at(std::size_t epoch, const TrainConfig& cfg);

/// A training timestep: either a uniform draw (k < 0) or grid point k of
/// {k / (T_g + delta(c))}, which stays differentiable in the delta head.
struct TimestepDraw {
  double t = 0.0;
  int k = -1;
};

TimestepDraw sample_timestep(std::span<const double> c, const model::Denoiser& m, std::mt19937_64& rng,
                             const TrainConfig& cfg);

/// A window z-scored with its own history statistics: p + q segments.
struct NormalizedWindow {
  std::size_t id = 0;  // keys the per-sample noise stream
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> events;
};

NormalizedWindow normalize_window(const data::WindowSample& w);
std::vector<NormalizedWindow> normalize_windows(std::span<const data::WindowSample> ws);

/// Handed to a velocity override; lets tests substitute the model output.
struct StepContext {
  model::Scope& scope;
  ad::Var x_t, x0, x1, z, c, t;
  std::size_t segment;
};
using VelocityOverride = std::function<ad::Var(const StepContext&)>;

struct AdamState {
  std::vector<Matrix> m, v;
  std::size_t t = 0;
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;  // completed epochs
  std::size_t total_steps = 0;
  AdamState adam;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t evals_since_best = 0;
  std::vector<Matrix> best_params;
  std::mt19937_64 rng;
};

TrainState init_state(const model::Denoiser& m, const TrainConfig& cfg, std::size_t total_steps);

/// Flow-matching loss of one batch; backpropagates when `grad` is set.
double batch_loss(model::Denoiser& m, std::span<const NormalizedWindow* const> batch, const TrainConfig& cfg,
                  std::uint64_t step_seed, double dropout, bool grad, const VelocityOverride& override_v = {});

/// AdamW update with global-norm clipping; consumes and clears the gradients.
/// Returns the pre-clip gradient norm.
double adamw_step(model::Denoiser& m, AdamState& st, double lr, const TrainConfig& cfg);

/// One optimizer step on a batch; returns the batch loss.
double train_step(model::Denoiser& m, std::span<const NormalizedWindow* const> batch, TrainState& st,
                  const TrainConfig& cfg, double dropout, const VelocityOverride& override_v = {});

/// Flow-matching MSE at t in {0.1, ..., 0.9} with fixed noise and no dropout.
double validation_loss(model::Denoiser& m, std::span<const NormalizedWindow> windows, const TrainConfig& cfg);

struct HistoryRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  double dropout = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // set on eval rows
};

struct FitHooks {
  std::function<double(model::Denoiser&, std::span<const NormalizedWindow>)> validator;
  std::function<void(const HistoryRow&)> on_row;
  /// Called after each completed epoch with the live model and state.
  std::function<void(const model::Denoiser&, const TrainState&)> on_epoch_end;
  VelocityOverride velocity;
};

struct FitResult {
  std::vector<HistoryRow> history;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t epochs_run = 0;
  bool stopped_early = false;
};

std::size_t steps_per_epoch(std::size_t n_train, const TrainConfig& cfg);

/// Trains until max_epochs or early stopping; leaves the best snapshot in
/// `m`. A non-null `resume` continues a previous run from its state.
FitResult fit(model::Denoiser& m, std::span<const NormalizedWindow> train, std::span<const NormalizedWindow> val,
              const TrainConfig& cfg, const FitHooks& hooks = {}, TrainState* resume = nullptr);

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> rows,
                       const std::string& comment = "");

/// Trainer state (live parameters, moments, counters, RNG) for resuming.
void save_train_state(const std::filesystem::path& path, const model::Denoiser& m, const TrainState& st,
                      const nlohmann::json& meta = {});
struct ResumePoint {
  model::Denoiser model;
  TrainState state;
  nlohmann::json meta;
};
ResumePoint load_train_state(const std::filesystem::path& path);

}  // namespace evflow::train
