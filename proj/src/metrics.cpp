#include "evflow/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "evflow/error.hpp"
#include "evflow/io.hpp"
#include "evflow/kernels.hpp"

namespace evflow::metrics {

namespace {

void check_pair(std::span<const double> y, std::span<const double> y_hat, const char* what) {
  if (y.size() != y_hat.size())
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(y.size()) + " vs " +
                                std::to_string(y_hat.size()) + ")");
  if (y.empty()) throw std::invalid_argument(std::string(what) + ": empty series");
}

double abs_sum(std::span<const double> y) {
  double s = 0.0;
  for (double v : y) s += std::abs(v);
  return s;
}

}  // namespace

double mae(std::span<const double> y, std::span<const double> y_hat) {
  check_pair(y, y_hat, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double mse(std::span<const double> y, std::span<const double> y_hat) {
  check_pair(y, y_hat, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
  return s / static_cast<double>(y.size());
}

double rmse(std::span<const double> y, std::span<const double> y_hat) { return std::sqrt(mse(y, y_hat)); }

double wape(std::span<const double> y, std::span<const double> y_hat) {
  check_pair(y, y_hat, "wape");
  const double denom = abs_sum(y);
  if (denom == 0.0) throw std::invalid_argument("wape: ground truth is all zero");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - y_hat[i]);
  return s / denom;
}

double crps_ensemble(std::span<const double> samples, double y) {
  if (samples.empty()) throw std::invalid_argument("crps: empty ensemble");
  double out = 0.0;
  kernels::crps_pointwise(samples, samples.size(), 1, std::span<const double>(&y, 1), std::span<double>(&out, 1));
  return out;
}

double crps_series(std::span<const double> ensemble, std::size_t m, std::span<const double> y) {
  if (m == 0) throw std::invalid_argument("crps: empty ensemble");
  if (ensemble.size() != m * y.size()) throw std::invalid_argument("crps: ensemble shape does not match the series");
  if (y.empty()) throw std::invalid_argument("crps: empty series");
  std::vector<double> per(y.size());
  kernels::crps_pointwise(ensemble, m, y.size(), y, per);
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(y.size());
}

double empirical_quantile(std::vector<double> samples, double q) {
  if (samples.empty()) throw std::invalid_argument("quantile: no samples");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile: level outside [0, 1]");
  std::sort(samples.begin(), samples.end());
  const double h = q * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  return samples[lo] + (h - static_cast<double>(lo)) * (samples[hi] - samples[lo]);
}

std::vector<double> empirical_quantiles(std::vector<double> samples, std::span<const double> qs) {
  if (samples.empty()) throw std::invalid_argument("quantile: no samples");
  std::sort(samples.begin(), samples.end());
  std::vector<double> out;
  for (double q : qs) out.push_back(empirical_quantile(samples, q));
  return out;
}

WqlResult wql(const std::map<double, std::vector<double>>& forecasts, std::span<const double> y) {
  if (forecasts.empty()) throw std::invalid_argument("wql: no quantile forecasts");
  const double denom = abs_sum(y);
  if (denom == 0.0) throw std::invalid_argument("wql: ground truth is all zero");
  WqlResult r;
  double total = 0.0;
  for (const auto& [q, f] : forecasts) {
    check_pair(y, f, "wql");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = y[i] - f[i];
      s += d > 0 ? q * d : (q - 1.0) * d;
    }
    total += s;
  }
  for (auto it = forecasts.begin(); std::next(it) != forecasts.end(); ++it)
    for (std::size_t i = 0; i < y.size(); ++i)
      if (std::next(it)->second[i] < it->second[i]) ++r.monotonicity_violations;
  r.value = 2.0 / denom * total / static_cast<double>(forecasts.size());
  return r;
}

std::vector<double> projection_matrix(std::size_t d_text, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(kEventProjDim)));
  std::vector<double> p(d_text * kEventProjDim);
  for (double& v : p) v = nd(rng);
  return p;
}

std::vector<double> joint_feature(const Pair& pair, std::span<const double> projection) {
  const auto& x = pair.values;
  if (x.empty()) throw std::invalid_argument("joint_feature: empty segment");
  if (projection.size() != pair.event.size() * kEventProjDim)
    throw std::invalid_argument("joint_feature: projection does not match the embedding length");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  std::vector<double> f{mean, std::sqrt(var / n), *std::min_element(x.begin(), x.end()),
                        *std::max_element(x.begin(), x.end())};
  for (std::size_t k = 0; k < kFourierBins; ++k) {
    std::complex<double> acc{0.0, 0.0};
    for (std::size_t j = 0; j < x.size(); ++j)
      acc += x[j] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * j) / n);
    f.push_back(std::abs(acc) / n);
  }
  for (std::size_t o = 0; o < kEventProjDim; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < pair.event.size(); ++i) s += pair.event[i] * projection[i * kEventProjDim + o];
    f.push_back(s);
  }
  return f;
}

std::vector<std::vector<double>> joint_features(std::span<const Pair> pairs, std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  if (pairs.empty()) return out;
  const auto proj = projection_matrix(pairs.front().event.size(), seed);
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(joint_feature(p, proj));
  return out;
}

namespace {

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

Gaussian fit(const std::vector<std::vector<double>>& rows, const char* side) {
  if (rows.size() < 2) throw std::invalid_argument(std::string("frechet: need at least 2 rows on the ") + side + " side");
  const auto d = static_cast<Eigen::Index>(rows.front().size());
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != d) throw std::invalid_argument("frechet: ragged feature rows");
    X.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), d);
  }
  Gaussian g;
  g.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd C = X.rowwise() - g.mean.transpose();
  g.cov = (C.transpose() * C) / static_cast<double>(rows.size() - 1);
  return g;
}

constexpr double kEigFloor = 1e-10;

// Eigenvalues below the floor count as zero; clearly negative ones mean the
// input was not positive semidefinite.
Eigen::VectorXd floored_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  Eigen::VectorXd out = ev;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -1e-6 * scale)
      throw NumericalError(std::string("frechet: ") + what + " is not positive semidefinite (eigenvalue " +
                           std::to_string(ev[i]) + ")");
    if (ev[i] < kEigFloor) out[i] = 0.0;
  }
  return out;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd l = floored_eigenvalues(es.eigenvalues(), what);
  return es.eigenvectors() * l.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  const Gaussian ga = fit(a, "first"), gb = fit(b, "second");
  if (ga.mean.size() != gb.mean.size()) throw std::invalid_argument("frechet: feature dimensions differ");
  const Eigen::MatrixXd sa = psd_sqrt(ga.cov, "first covariance"), sb = psd_sqrt(gb.cov, "second covariance");
  // tr((Sa Sb)^(1/2)) is the nuclear norm of Sb^(1/2) Sa^(1/2).
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(sb * sa);
  const double tr_sqrt = svd.singularValues().sum();
  const double d = (ga.mean - gb.mean).squaredNorm() + ga.cov.trace() + gb.cov.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(d)) throw NumericalError("frechet: non-finite distance");
  return d;
}

double j_ftsd(std::span<const Pair> real, std::span<const Pair> generated, std::uint64_t seed) {
  if (real.size() < 2 || generated.size() < 2) throw std::invalid_argument("j_ftsd: need at least 2 pairs per side");
  return frechet_distance(joint_features(real, seed), joint_features(generated, seed));
}

double delta_j_ftsd(std::span<const Pair> real, std::span<const double> noise_levels, std::uint64_t seed) {
  if (noise_levels.empty()) throw std::invalid_argument("delta_j_ftsd: no noise levels");
  if (real.size() < 4) throw std::invalid_argument("delta_j_ftsd: need at least 4 pairs");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  // Even pairs form the reference side, odd pairs seed the generated side.
  std::vector<Pair> ref, base;
  for (std::size_t i = 0; i < real.size(); ++i) (i % 2 == 0 ? ref : base).push_back(real[i]);
  auto drop_events = [&](std::vector<Pair> pairs) {
    for (auto& p : pairs)
      for (double& c : p.event) c = nd(rng);
    return pairs;
  };
  double total = 0.0;
  for (double nu : noise_levels) {
    if (!(nu >= 0.0)) throw std::invalid_argument("delta_j_ftsd: negative noise level");
    auto gen = base;
    for (auto& p : gen)
      for (double& v : p.values) v += nu * nd(rng);
    const auto ref_noise = drop_events(ref);
    const auto gen_noise = drop_events(gen);
    total += j_ftsd(ref_noise, gen_noise, seed) - j_ftsd(ref, gen, seed);
  }
  return total / static_cast<double>(noise_levels.size());
}

WindowMetrics score_window(std::span<const double> ensemble, std::size_t m, std::span<const double> y,
                           std::span<const double> point) {
  WindowMetrics w;
  w.mae = mae(y, point);
  w.mse = mse(y, point);
  w.rmse = std::sqrt(w.mse);
  w.wape = wape(y, point);
  w.crps = crps_series(ensemble, m, y);
  std::map<double, std::vector<double>> bands;
  for (double q : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}) bands[q].resize(y.size());
  std::vector<double> col(m);
  for (std::size_t j = 0; j < y.size(); ++j) {
    for (std::size_t i = 0; i < m; ++i) col[i] = ensemble[i * y.size() + j];
    std::sort(col.begin(), col.end());
    for (auto& [q, f] : bands) f[j] = empirical_quantile(col, q);
  }
  const auto r = wql(bands, y);
  w.wql = r.value;
  w.quantile_violations = r.monotonicity_violations;
  return w;
}

MetricReport aggregate(std::vector<WindowMetrics> windows, nlohmann::json meta) {
  if (windows.empty()) throw std::invalid_argument("aggregate: no windows");
  MetricReport r;
  r.meta = std::move(meta);
  const double n = static_cast<double>(windows.size());
  for (const auto& w : windows) {
    r.aggregate.mae += w.mae / n;
    r.aggregate.mse += w.mse / n;
    r.aggregate.rmse += w.rmse / n;
    r.aggregate.wape += w.wape / n;
    r.aggregate.crps += w.crps / n;
    r.aggregate.wql += w.wql / n;
    r.aggregate.quantile_violations += w.quantile_violations;
  }
  r.windows = std::move(windows);
  return r;
}

namespace {
nlohmann::json row_json(const WindowMetrics& w) {
  return {{"window", w.window}, {"mae", w.mae},   {"mse", w.mse}, {"rmse", w.rmse},
          {"wape", w.wape},     {"crps", w.crps}, {"wql", w.wql}, {"quantile_violations", w.quantile_violations}};
}
}  // namespace

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json agg = row_json(r.aggregate);
  agg.erase("window");
  nlohmann::json j = {{"tool_version", io::kToolVersion},
                      {"meta", r.meta.is_null() ? nlohmann::json::object() : r.meta},
                      {"aggregate", agg},
                      {"windows", nlohmann::json::array()}};
  for (const auto& w : r.windows) j["windows"].push_back(row_json(w));
  return j;
}

void write_report(const std::filesystem::path& dir, const MetricReport& r) {
  std::filesystem::create_directories(dir);
  io::write_text(dir / "report.json", to_json(r).dump(1));
  std::string csv = "# tool_version=" + std::string(io::kToolVersion) +
                    " config_hash=" + r.meta.value("config_hash", std::string("none")) + "\n";
  csv += "window,mae,mse,rmse,wape,crps,wql,quantile_violations\n";
  char buf[512];
  for (const auto& w : r.windows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", w.window, w.mae, w.mse, w.rmse,
                  w.wape, w.crps, w.wql, w.quantile_violations);
    csv += buf;
  }
  io::write_text(dir / "report.csv", csv);
}

}  // namespace evflow::metrics
