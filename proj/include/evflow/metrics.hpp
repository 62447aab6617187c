#pragma once

// Point, probabilistic and joint-distribution metrics. All functions are pure;
// the Monte-Carlo ones take explicit seeds.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace evflow::metrics {

double mae(std::span<const double> y, std::span<const double> y_hat);
double mse(std::span<const double> y, std::span<const double> y_hat);
double rmse(std::span<const double> y, std::span<const double> y_hat);
double wape(std::span<const double> y, std::span<const double> y_hat);

/// mean|X - y| - 0.5 mean|X - X'| over all m^2 ordered pairs.
double crps_ensemble(std::span<const double> samples, double y);
/// Pointwise CRPS averaged over a series; ensemble is [m x n] row-major.
double crps_series(std::span<const double> ensemble, std::size_t m, std::span<const double> y);

/// Linear-interpolation quantile (the usual "type 7" definition).
double empirical_quantile(std::vector<double> samples, double q);
std::vector<double> empirical_quantiles(std::vector<double> samples, std::span<const double> qs);

struct WqlResult {
  double value = 0.0;
  std::size_t monotonicity_violations = 0;  // points where a higher level forecasts lower
};
/// Weighted quantile loss; forecasts maps level -> series.
WqlResult wql(const std::map<double, std::vector<double>>& forecasts, std::span<const double> y);

inline constexpr std::size_t kJointFeatureDim = 28;
inline constexpr std::size_t kFourierBins = 8;
inline constexpr std::size_t kEventProjDim = 16;

struct Pair {
  std::vector<double> values;
  std::vector<double> event;
};

/// Fixed d_text -> 16 Gaussian projection scaled by 1/sqrt(16).
std::vector<double> projection_matrix(std::size_t d_text, std::uint64_t seed);
std::vector<double> joint_feature(const Pair& pair, std::span<const double> projection);
std::vector<std::vector<double>> joint_features(std::span<const Pair> pairs, std::uint64_t seed);

/// Frechet distance between Gaussian fits of two feature clouds (rows).
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);
double j_ftsd(std::span<const Pair> real, std::span<const Pair> generated, std::uint64_t seed);

/// Mean over noise levels of J-FTSD with event context swapped for noise
/// minus J-FTSD with the original events.
double delta_j_ftsd(std::span<const Pair> real, std::span<const double> noise_levels, std::uint64_t seed);

struct WindowMetrics {
  std::size_t window = 0;
  double mae = 0, mse = 0, rmse = 0, wape = 0, crps = 0, wql = 0;
  std::size_t quantile_violations = 0;
};

struct MetricReport {
  std::vector<WindowMetrics> windows;
  WindowMetrics aggregate;  // per-metric mean over windows
  nlohmann::json meta;
};

/// Scores one ensemble ([m x n], original units) against its ground truth.
WindowMetrics score_window(std::span<const double> ensemble, std::size_t m, std::span<const double> y,
                           std::span<const double> point);
MetricReport aggregate(std::vector<WindowMetrics> windows, nlohmann::json meta);

nlohmann::json to_json(const MetricReport& r);
void write_report(const std::filesystem::path& dir, const MetricReport& r);

}  // namespace evflow::metrics
