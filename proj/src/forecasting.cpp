#include "evflow/forecasting.hpp"

#include <algorithm>
#include <cmath>

#include "evflow/error.hpp"
#include "evflow/io.hpp"
#include "evflow/metrics.hpp"

namespace evflow::forecast {

namespace {

std::mt19937_64 keyed_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

Matrix tile(const Matrix& block, std::size_t times) {
  Matrix out(block.rows * times, block.cols);
  for (std::size_t i = 0; i < times; ++i)
    std::copy(block.data.begin(), block.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * block.size()));
  return out;
}

Matrix tile_row(std::span<const double> row, std::size_t times) {
  Matrix out(times, row.size());
  for (std::size_t i = 0; i < times; ++i) std::copy(row.begin(), row.end(), out.row(i).begin());
  return out;
}

void check_events(std::span<const std::vector<double>> events, std::size_t d) {
  for (const auto& c : events)
    if (c.size() != d)
      throw std::invalid_argument("event embedding has length " + std::to_string(c.size()) + ", model expects " +
                                  std::to_string(d));
}

}  // namespace

SegmentModel::Step DenoiserModel::step(const Matrix& x, const Matrix& z, const Matrix& c, const Matrix& t) const {
  ad::Graph g(false);
  model::Scope s(g, m_);
  auto out = m_.denoise(s, g.constant(x), g.constant(z), g.constant(c), g.constant(t));
  return {out.v_hat.value(), out.z_new.value()};
}

void ForecastConfig::validate() const {
  if (T < 1) throw ConfigError("forecast config: T must be >= 1");
  if (n_samples < 1) throw ConfigError("forecast config: n_samples must be >= 1");
  if (member_batch < 1) throw ConfigError("forecast config: member_batch must be >= 1");
}

nlohmann::json to_json(const ForecastConfig& c) {
  return {{"T", c.T},
          {"n_samples", c.n_samples},
          {"use_event_delta", c.use_event_delta},
          {"no_text", c.no_text},
          {"seed", c.seed}};
}

std::vector<double> ForecastEnsemble::column(std::size_t j) const {
  std::vector<double> out(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) out[i] = trajectories(i, j);
  return out;
}

std::vector<std::vector<double>> effective_events(std::span<const std::vector<double>> events, std::size_t text_dim,
                                                  const ForecastConfig& cfg, std::uint64_t stream, std::uint64_t part) {
  if (!cfg.no_text) return {events.begin(), events.end()};
  auto rng = keyed_rng({cfg.seed, stream, part, 0x7e47});
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> out(events.size(), std::vector<double>(text_dim));
  for (auto& c : out)
    for (double& x : c) x = nd(rng);
  return out;
}

Matrix warmup_state(const SegmentModel& m, std::span<const std::vector<double>> history_values,
                    std::span<const std::vector<double>> history_events) {
  if (history_values.empty()) throw std::invalid_argument("warmup_state: need at least one history segment");
  if (history_values.size() != history_events.size())
    throw std::invalid_argument("warmup_state: history values and events differ in count");
  check_events(history_events, m.text_dim());
  Matrix z = m.initial_state();
  const Matrix one(1, 1, 1.0);
  for (std::size_t s = 0; s < history_values.size(); ++s) {
    if (history_values[s].size() != m.width())
      throw std::invalid_argument("warmup_state: segment " + std::to_string(s + 1) + " has length " +
                                  std::to_string(history_values[s].size()));
    z = m.step(Matrix(1, m.width(), history_values[s]), z, Matrix(1, m.text_dim(), history_events[s]), one).z;
  }
  return z;
}

ForecastEnsemble forecast(const SegmentModel& m, const Matrix& z_h, std::span<const std::vector<double>> future_events,
                          const ForecastConfig& cfg, std::uint64_t stream) {
  cfg.validate();
  if (future_events.empty()) throw std::invalid_argument("forecast: q must be >= 1");
  check_events(future_events, m.text_dim());
  const std::size_t W = m.width(), q = future_events.size(), N = cfg.n_samples;
  const auto events = effective_events(future_events, m.text_dim(), cfg, stream, 1);

  ForecastEnsemble e;
  e.n_samples = N;
  e.q = q;
  e.W = W;
  e.trajectories = Matrix(N, q * W);
  std::vector<flow::StepSchedule> schedules;
  for (const auto& c : events) {
    schedules.push_back(flow::make_schedule(cfg.T, cfg.use_event_delta ? m.delta(c) : 0.0));
    e.step_sizes.push_back(schedules.back().step_size);
  }

  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t b0 = 0; b0 < N; b0 += cfg.member_batch) {
    const std::size_t G = std::min(N, b0 + cfg.member_batch) - b0;
    std::vector<std::mt19937_64> rngs;
    for (std::size_t i = 0; i < G; ++i) rngs.push_back(keyed_rng({cfg.seed, stream, b0 + i}));
    Matrix z = tile(z_h, G);
    for (std::size_t s = 0; s < q; ++s) {
      Matrix x0(G, W);
      for (std::size_t i = 0; i < G; ++i)
        for (double& v : x0.row(i)) v = nd(rngs[i]);
      const Matrix c = tile_row(events[s], G);
      const flow::VelocityFn field = [&](std::span<const double> x, double t, std::span<double> v) {
        auto out = m.step(Matrix(G, W, std::vector<double>(x.begin(), x.end())), z, c, Matrix(G, 1, t));
        for (std::size_t i = 0; i < G; ++i)
          for (double y : out.v.row(i))
            if (!std::isfinite(y))
              throw NumericalError("forecast: non-finite velocity for member " + std::to_string(b0 + i) +
                                   ", segment " + std::to_string(s + 1) + ", t = " + std::to_string(t));
        std::copy(out.v.data.begin(), out.v.data.end(), v.begin());
      };
      auto x = flow::solve_ode(field, x0.data, schedules[s]);
      Matrix xs(G, W, std::move(x));
      for (std::size_t i = 0; i < G; ++i)
        for (std::size_t k = 0; k < W; ++k) {
          if (!std::isfinite(xs(i, k)))
            throw NumericalError("forecast: non-finite sample for member " + std::to_string(b0 + i) + ", segment " +
                                 std::to_string(s + 1) + ", t = 1");
          e.trajectories(b0 + i, s * W + k) = xs(i, k);
        }
      // The clean endpoint produces the state handed to the next segment.
      z = m.step(xs, z, c, Matrix(G, 1, 1.0)).z;
    }
  }
  e.point = Matrix(q, W);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < q * W; ++j) e.point.data[j] += e.trajectories(i, j);
  for (double& v : e.point.data) v /= static_cast<double>(N);
  return e;
}

ForecastEnsemble forecast_window(const SegmentModel& m, const data::WindowSample& w, const ForecastConfig& cfg) {
  std::vector<std::vector<double>> hist;
  for (const auto& v : w.history_values) hist.push_back(data::zscore_apply(v, w.normalization));
  const auto hist_events = effective_events(w.history_events, m.text_dim(), cfg, w.first_segment, 0);
  const Matrix z_h = warmup_state(m, hist, hist_events);
  auto e = forecast(m, z_h, w.future_events, cfg, w.first_segment);
  e.normalization = w.normalization;
  for (std::size_t i = 0; i < e.n_samples; ++i) {
    auto row = e.trajectories.row(i);
    auto back = data::zscore_invert(row, w.normalization);
    std::copy(back.begin(), back.end(), row.begin());
  }
  std::fill(e.point.data.begin(), e.point.data.end(), 0.0);
  for (std::size_t i = 0; i < e.n_samples; ++i)
    for (std::size_t j = 0; j < e.point.size(); ++j) e.point.data[j] += e.trajectories(i, j);
  for (double& v : e.point.data) v /= static_cast<double>(e.n_samples);
  return e;
}

void write_forecasts(const std::filesystem::path& dir, std::span<const data::WindowSample> windows,
                     std::span<const ForecastEnsemble> ensembles, const ForecastConfig& cfg,
                     const nlohmann::json& meta, bool write_ensemble) {
  if (windows.size() != ensembles.size()) throw std::invalid_argument("write_forecasts: window/ensemble mismatch");
  std::filesystem::create_directories(dir);
  nlohmann::json out = {{"tool_version", io::kToolVersion},
                        {"meta", meta.is_null() ? nlohmann::json::object() : meta},
                        {"config", to_json(cfg)},
                        {"quantiles", kBandQuantiles},
                        {"ensemble_file", write_ensemble ? nlohmann::json("ensemble.f64") : nlohmann::json(nullptr)}};
  auto rows = [](const Matrix& m) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t r = 0; r < m.rows; ++r) a.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
    return a;
  };
  std::vector<double> flat;
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const auto& e = ensembles[k];
    std::vector<Matrix> bands(kBandQuantiles.size(), Matrix(e.q, e.W));
    for (std::size_t j = 0; j < e.q * e.W; ++j) {
      auto qs = metrics::empirical_quantiles(e.column(j), kBandQuantiles);
      for (std::size_t b = 0; b < qs.size(); ++b) bands[b].data[j] = qs[b];
    }
    nlohmann::json jb = nlohmann::json::object();
    for (std::size_t b = 0; b < bands.size(); ++b) {
      char key[16];
      std::snprintf(key, sizeof key, "%.1f", kBandQuantiles[b]);
      jb[key] = rows(bands[b]);
    }
    out["windows"].push_back({{"first_segment", windows[k].first_segment},
                              {"n_samples", e.n_samples},
                              {"step_sizes", e.step_sizes},
                              {"point", rows(e.point)},
                              {"bands", jb}});
    if (write_ensemble) flat.insert(flat.end(), e.trajectories.data.begin(), e.trajectories.data.end());
  }
  if (write_ensemble) io::write_bytes(dir / "ensemble.f64", io::encode_f64(flat));
  io::write_text(dir / "forecast.json", out.dump(1));
}

}  // namespace evflow::forecast
