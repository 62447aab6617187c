// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. `acceptance 3 7` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "evflow/dataset.hpp"
#include "evflow/denoiser.hpp"
#include "evflow/flow.hpp"
#include "evflow/forecasting.hpp"
#include "evflow/io.hpp"
#include "evflow/metrics.hpp"
#include "evflow/training.hpp"
#include "test_support.hpp"

using namespace evflow;
using namespace evflow::testing;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int cli_run(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  if (out) *out = o.str();
  if (code != 0) std::cerr << e.str();
  return code;
}

std::vector<std::string> sets(std::initializer_list<std::string> kv) {
  std::vector<std::string> a;
  for (const auto& s : kv) a.insert(a.end(), {"--set", s});
  return a;
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// ---- 1 -----------------------------------------------------------------------------

Outcome flow_identities() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0;
  for (int n = 0; n < 1000; ++n) {
    const std::size_t d = 1 + rng() % 64;
    auto x0 = random_vector(d, rng, 3.0), x1 = random_vector(d, rng, 3.0);
    const auto v = flow::velocity_target(x0, x1);
    const auto a = flow::ot_interpolate(x0, x1, 0.0), b = flow::ot_interpolate(x0, x1, 1.0);
    const double s = u(rng), t = u(rng);
    const auto xs = flow::ot_interpolate(x0, x1, s), xt = flow::ot_interpolate(x0, x1, t);
    for (std::size_t i = 0; i < d; ++i) {
      worst = std::max({worst, std::abs(a[i] - x0[i]), std::abs(b[i] - x1[i]),
                        std::abs((xt[i] - xs[i]) - (t - s) * v[i]), std::abs(v[i] - (x1[i] - x0[i]))});
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 1.0, fmt("max deviation %.2e, %.3f s", worst, secs)};
}

// ---- 2 -----------------------------------------------------------------------------

Outcome ode_oracle() {
  const auto t0 = Clock::now();
  auto field = [](std::span<const double>, double t, std::span<double> v) { std::fill(v.begin(), v.end(), 2 * t); };
  std::vector<double> x{0.0};
  const double e50 = std::abs(flow::solve_ode(field, x, flow::make_schedule(50, 0.0))[0] - 1.0);
  const double e100 = std::abs(flow::solve_ode(field, x, flow::make_schedule(100, 0.0))[0] - 1.0);
  const double ratio = e50 / e100, secs = seconds_since(t0);
  const bool ok = e50 <= 0.02 + 1e-12 && ratio >= 2.0 * 0.9 && ratio <= 2.0 * 1.1 && secs < 1.0;
  return {ok, fmt("err(T=50) %.6f, err ratio %.4f, %.3f s", e50, ratio, secs)};
}

// ---- 3 -----------------------------------------------------------------------------

// Two chained denoiser calls plus a delta-head-driven timestep.
double chained_loss(model::Denoiser& m, const Matrix& x0, const Matrix& x1, const Matrix& c, const Matrix& t,
                    bool grad) {
  const auto& cfg = m.config();
  ad::Graph g(grad);
  model::Scope s(g, m);
  ad::Var z = m.initial_state(s, x0.rows);
  ad::Var total;
  for (std::size_t seg = 0; seg < 2; ++seg) {
    ad::Var a = ad::slice_cols(g.constant(x0), seg * cfg.W, (seg + 1) * cfg.W);
    ad::Var b = ad::slice_cols(g.constant(x1), seg * cfg.W, (seg + 1) * cfg.W);
    ad::Var cc = ad::slice_cols(g.constant(c), seg * cfg.d_text, (seg + 1) * cfg.d_text);
    ad::Var tt = ad::slice_cols(g.constant(t), seg, seg + 1);
    if (seg == 1) tt = ad::scale(ad::reciprocal(ad::add_scalar(m.event_delta(s, cc), 3.0)), 2.0);
    ad::Var xt = ad::add(ad::group_mul(a, ad::add_scalar(ad::scale(tt, -1.0), 1.0)), ad::group_mul(b, tt));
    auto out = m.denoise(s, xt, z, cc, tt);
    z = out.z_new;
    ad::Var l = ad::mse(out.v_hat, ad::sub(b, a));
    total = total.valid() ? ad::add(total, l) : l;
  }
  total = ad::add(total, ad::scale(ad::mean(ad::square(z)), 0.1));
  if (grad) g.backward(total);
  return total.scalar();
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  auto cfg = tiny_config(8, 16, 2);
  model::Denoiser m(cfg, model::InitMode::Randomized, 31);
  std::mt19937_64 rng(32);
  const std::size_t G = 2;
  Matrix x0 = random_matrix(G, 2 * cfg.W, rng), x1 = random_matrix(G, 2 * cfg.W, rng),
         c = random_matrix(G, 2 * cfg.d_text, rng), t(G, 2);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (auto& v : t.data) v = u(rng);
  m.zero_grad();
  chained_loss(m, x0, x1, c, t, true);
  std::size_t checked = 0, agree = 0;
  const double h = 1e-5;
  for (auto& p : m.parameters()) {
    for (int k = 0; k < 6; ++k) {
      const std::size_t i = rng() % p.value.size();
      const double orig = p.value.data[i];
      p.value.data[i] = orig + h;
      const double up = chained_loss(m, x0, x1, c, t, false);
      p.value.data[i] = orig - h;
      const double dn = chained_loss(m, x0, x1, c, t, false);
      p.value.data[i] = orig;
      const double fd = (up - dn) / (2 * h), an = p.grad.data[i];
      ++checked;
      // Relative agreement with a floor for coordinates whose gradient is ~0.
      if (std::abs(fd - an) <= 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-6})) ++agree;
    }
  }
  const double frac = static_cast<double>(agree) / static_cast<double>(checked), secs = seconds_since(t0);
  return {frac >= 0.99 && secs < 60.0, fmt("%zu/%zu coordinates agree (%.2f%%), %.2f s", agree, checked, 100 * frac, secs)};
}

// ---- 4 -----------------------------------------------------------------------------

Outcome identity_at_init() {
  std::size_t total = 0, exact = 0;
  for (std::size_t M : {2, 3}) {
    auto cfg = tiny_config(24, 16, M);
    model::Denoiser m(cfg, model::InitMode::Standard, 41 + M);
    std::mt19937_64 rng(42 + M);
    for (double t : {0.0, 0.25, 0.9, 1.0}) {
      Matrix x = random_matrix(cfg.tokens(), cfg.d_model, rng);
      auto c = unit_vector(cfg.d_text, rng);
      ++total;
      if (model::u_dit_forward(m, x, t, c).data == x.data) ++exact;
    }
  }
  return {exact == total, fmt("%zu/%zu inputs returned bitwise", exact, total)};
}

// ---- 5 -----------------------------------------------------------------------------

Outcome overfit_smoke() {
  const auto t0 = Clock::now();
  auto cfg = tiny_config(8, 16, 2);
  model::Denoiser m(cfg, model::InitMode::Standard, 11);
  data::SyntheticConfig sc;
  sc.n_waves = 6;
  sc.points_per_wave = cfg.W;
  sc.d_text = cfg.d_text;
  sc.category_weights = {1.0, 0.0, 0.0, 0.0};
  sc.noise_levels = {0.0};
  sc.seed = 5;
  auto syn = data::generate_synthetic(sc);
  auto ws = train::normalize_windows(data::make_windows(syn.dataset, 2, 1, 1));
  train::TrainConfig tc;
  tc.batch_size = 4;
  tc.max_epochs = 20;
  tc.dropout_start = tc.dropout_end = 0.0;
  tc.seed = 3;
  tc.lr_init = 1e-4;
  tc.lr_peak = 1e-2;
  tc.lr_final = 1e-4;
  tc.warmup_frac = 0.05;
  tc.weight_decay = 0.0;
  auto st = train::init_state(m, tc, 200);
  std::vector<const train::NormalizedWindow*> batch;
  for (const auto& w : ws) batch.push_back(&w);
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) losses.push_back(train::train_step(m, batch, st, tc, 0.0));
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  const double reduction = 1.0 - tail / losses[0], secs = seconds_since(t0);
  const bool pinned = std::abs(losses[0] - 5.495985977792806) <= 1e-9 * 5.495985977792806 &&
                      std::abs(losses[199] - 0.039776655722931875) <= 1e-3 * 0.039776655722931875;
  const bool ok = ws.size() == 4 && reduction >= 0.8 && pinned && secs < 300.0;
  return {ok, fmt("%zu windows, loss %.4f -> %.4f (last-10 mean %.4f, -%.1f%%), curve %s, %.1f s", ws.size(),
                  losses[0], losses[199], tail, 100 * reduction, pinned ? "matches" : "DIFFERS", secs)};
}

// ---- 6 -----------------------------------------------------------------------------

// Scaled-down default config; see the README for the budget.
const std::vector<std::string> kEventAwareness = sets({
    "gen.n_waves=2000",      "model.d_model=32",      "model.d_state=16",      "model.m_state=4",
    "model.d_ff=64",         "model.n_heads=2",       "model.d_time=16",       "model.d_text=32",
    "train.max_epochs=20",   "train.eval_every=5",    "train.patience=0",      "train.lr_peak=1e-3",
    "train.lr_init=1e-4",    "train.lr_final=1e-5",   "train.dropout_start=0.1", "train.dropout_end=0.0",
    "forecast.n_samples=32", "forecast.T=20",         "forecast.max_windows=40",
});

Outcome event_awareness(const fs::path& root) {
  const auto t0 = Clock::now();
  const auto gen = root / "gen";
  const auto base = cat(kEventAwareness, sets({"data.dir=" + gen.string()}));
  if (cli_run(cat(base, {"gen", "--out", gen.string()})) != 0) return {false, "gen failed"};
  std::string detail;
  int passed = 0, ran = 0;
  for (int seed = 0; seed < 3; ++seed) {
    const auto seeds = sets({"train.seed=" + std::to_string(seed), "model.init_seed=" + std::to_string(seed),
                             "forecast.seed=" + std::to_string(seed)});
    json agg[2];
    for (int v = 0; v < 2; ++v) {
      const auto dir = root / fmt("seed%d_%s", seed, v ? "no_text" : "full");
      auto args = cat(base, seeds);
      if (v) args = cat(args, sets({"ablation.no_text=true"}));
      if (cli_run(cat(args, {"train", "--out", (dir / "train").string()})) != 0 ||
          cli_run(cat(args, {"forecast", "--checkpoint", (dir / "train" / "checkpoint.bin").string(), "--out",
                             (dir / "forecast").string()})) != 0 ||
          cli_run(cat(args, {"eval", "--forecast", (dir / "forecast").string(), "--out", (dir / "eval").string()})) != 0)
        return {false, fmt("seed %d: pipeline failed", seed)};
      agg[v] = json::parse(io::read_text(dir / "eval" / "report.json")).at("aggregate");
    }
    const double wql_ratio = agg[1]["wql"].get<double>() / agg[0]["wql"].get<double>();
    const double mae_ratio = agg[0]["mae"].get<double>() / agg[1]["mae"].get<double>();
    const bool ok = wql_ratio >= 1.5 && mae_ratio <= 0.7;
    passed += ok;
    ++ran;
    detail += fmt("seed %d: WQL no_text/full %.2f, MAE full/no_text %.2f%s; ", seed, wql_ratio, mae_ratio,
                  ok ? "" : " (miss)");
    if (passed >= 2 || ran - passed >= 2) break;
  }
  detail += fmt("%d/%d seeds, %.0f s", passed, ran, seconds_since(t0));
  return {passed >= 2, detail};
}

// ---- 7 -----------------------------------------------------------------------------

Outcome event_timesteps() {
  auto cfg = tiny_config(8, 16, 2);
  const int T = 50;
  model::Denoiser fresh(cfg, model::InitMode::Standard, 71);
  forecast::DenoiserModel fm(fresh);
  std::mt19937_64 rng(72);
  Matrix z_h = model::initial_state(fresh);
  std::vector<std::vector<double>> events{unit_vector(cfg.d_text, rng), unit_vector(cfg.d_text, rng)};
  forecast::ForecastConfig fc;
  fc.T = T;
  fc.n_samples = 4;
  auto e0 = forecast::forecast(fm, z_h, events, fc);
  bool exact = true;
  for (double s : e0.step_sizes) exact = exact && s == 1.0 / (T + 0.5);

  // Short training run on all four categories.
  data::SyntheticConfig sc;
  sc.n_waves = 40;
  sc.points_per_wave = cfg.W;
  sc.d_text = cfg.d_text;
  sc.seed = 73;
  auto syn = data::generate_synthetic(sc);
  auto ws = train::normalize_windows(data::make_windows(syn.dataset, 2, 1, 1));
  train::TrainConfig tc;
  tc.batch_size = 8;
  tc.max_epochs = 3;
  tc.lr_peak = 1e-3;
  tc.seed = 74;
  model::Denoiser m(cfg, model::InitMode::Standard, 75);
  auto st = train::init_state(m, tc, 3 * train::steps_per_epoch(ws.size(), tc));
  std::vector<const train::NormalizedWindow*> all;
  for (const auto& w : ws) all.push_back(&w);
  for (std::size_t b = 0; b + tc.batch_size <= all.size(); b += tc.batch_size)
    train::train_step(m, std::span(all).subspan(b, tc.batch_size), st, tc, 0.0);
  std::vector<double> deltas;
  for (std::size_t k = 0; k < data::kWaveCategories; ++k)
    deltas.push_back(model::event_delta(
        m, data::embed_event(data::describe(static_cast<data::WaveCategory>(k), false), cfg.d_text, sc.embed_seed)));
  const double mean = std::accumulate(deltas.begin(), deltas.end(), 0.0) / static_cast<double>(deltas.size());
  double var = 0;
  for (double d : deltas) var += (d - mean) * (d - mean) / static_cast<double>(deltas.size());

  forecast::DenoiserModel tm(m);
  const Matrix z = forecast::warmup_state(tm, std::span(ws[0].values).first(2), std::span(ws[0].events).first(2));
  auto with = forecast::forecast(tm, z, events, fc);
  fc.use_event_delta = false;
  auto without = forecast::forecast(tm, z, events, fc);
  const bool differs = with.trajectories.data != without.trajectories.data;
  const bool ok = exact && std::sqrt(var) > 0.0 && differs;
  return {ok, fmt("init step %.17g (1/(T+0.5) %s), trained delta std over categories %.3e, fixed-step trajectories %s",
                  e0.step_sizes[0], exact ? "exact" : "MISMATCH", std::sqrt(var), differs ? "differ" : "IDENTICAL")};
}

// ---- 8 -----------------------------------------------------------------------------

Outcome jftsd_direction() {
  const auto t0 = Clock::now();
  data::SyntheticConfig sc;  // default synthetic dataset
  auto syn = data::generate_synthetic(sc);
  std::vector<metrics::Pair> pairs;
  for (std::size_t s = 0; s < syn.dataset.segments.size(); ++s) {
    auto v = syn.dataset.segment_values(s);
    pairs.push_back({{v.begin(), v.end()}, syn.dataset.segments[s].embedding});
  }
  const std::vector<double> V{0.05, 0.1, 0.2};
  const double informative = metrics::delta_j_ftsd(pairs, V, 0);

  auto noisy = pairs;
  std::mt19937_64 rng(81);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& p : noisy)
    for (double& c : p.event) c = nd(rng);
  std::vector<double> runs;
  for (std::uint64_t s = 0; s < 20; ++s) runs.push_back(metrics::delta_j_ftsd(noisy, V, 1000 + s));
  const double mean = std::accumulate(runs.begin(), runs.end(), 0.0) / 20.0;
  double var = 0;
  for (double r : runs) var += (r - mean) * (r - mean) / 19.0;
  const double band = 3.0 * std::sqrt(var);
  const double probe = metrics::delta_j_ftsd(noisy, V, 0);
  const bool ok = informative > 0.0 && std::abs(probe) <= band;
  return {ok, fmt("informative %.4f; noise events %.4f vs band +/-%.4f (20 runs, mean %.4f); %.1f s", informative,
                  probe, band, mean, seconds_since(t0))};
}

// ---- 9 -----------------------------------------------------------------------------

Outcome metric_oracles() {
  const double crps = metrics::crps_ensemble(std::vector<double>{0, 2}, 1.0);
  std::mt19937_64 rng(91);
  double worst_rmse = 0, worst_wql = 0;
  for (int k = 0; k < 100; ++k) {
    auto a = random_vector(50, rng), b = random_vector(50, rng);
    const double r = metrics::rmse(a, b), m = metrics::mse(a, b);
    worst_rmse = std::max(worst_rmse, std::abs(r * r - m) / m);
    const double w = metrics::wql({{0.5, b}}, a).value, p = metrics::wape(a, b);
    worst_wql = std::max(worst_wql, std::abs(w - p) / p);
  }
  data::SyntheticConfig sc;
  sc.n_waves = 300;
  sc.d_text = 16;
  auto syn = data::generate_synthetic(sc);
  std::vector<metrics::Pair> pairs;
  for (std::size_t s = 0; s < 300; ++s) {
    auto v = syn.dataset.segment_values(s);
    pairs.push_back({{v.begin(), v.end()}, syn.dataset.segments[s].embedding});
  }
  const double self = std::abs(metrics::j_ftsd(pairs, pairs, 1));
  const bool ok = crps == 0.5 && worst_rmse <= 1e-12 && self < 1e-8 && worst_wql <= 1e-12;
  return {ok, fmt("crps %.17g, rmse^2/mse rel %.1e, j_ftsd(P,P) %.1e, wql-wape rel %.1e", crps, worst_rmse, self,
                  worst_wql)};
}

// ---- 10 ----------------------------------------------------------------------------

Outcome determinism(const fs::path& root) {
  const auto base = sets({"gen.n_waves=120", "model.d_model=16", "model.d_state=8", "model.d_ff=32",
                          "model.n_heads=2", "model.d_time=8", "model.d_text=16", "train.max_epochs=2",
                          "train.eval_every=1", "train.batch_size=16", "forecast.n_samples=8", "forecast.T=10",
                          "forecast.max_windows=4"});
  std::string sums[2];
  for (int run = 0; run < 2; ++run) {
    fs::remove_all(root);
    ::setenv("EVFLOW_OUT", root.c_str(), 1);
    for (const char* cmd : {"gen", "train", "forecast", "eval"})
      if (cli_run(cat(base, {cmd})) != 0) return {false, fmt("run %d: %s failed", run, cmd)};
    sums[run] = io::fnv1a_hex(io::read_text(root / "eval" / "report.json"));
  }
  auto ck = model::load_checkpoint(root / "train" / "checkpoint.bin");
  const auto rt = root / "roundtrip.bin";
  model::save_checkpoint(rt, ck.model, ck.meta);
  auto back = model::load_checkpoint(rt);
  std::size_t same = 0;
  const auto& a = ck.model.parameters();
  const auto& b = back.model.parameters();
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i)
    same += a[i].name == b[i].name && a[i].value.rows == b[i].value.rows && a[i].value.data == b[i].value.data;
  const bool ok = sums[0] == sums[1] && same == a.size() && a.size() == b.size();
  ::unsetenv("EVFLOW_OUT");
  return {ok, fmt("report.json %s / %s; checkpoint %zu/%zu tensors bitwise", sums[0].c_str(), sums[1].c_str(), same,
                  a.size())};
}

// ---- 11 ----------------------------------------------------------------------------

Outcome dataset_constraints() {
  std::size_t accepted = 0, generated = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    for (std::size_t W : {8, 24}) {
      data::SyntheticConfig sc;
      sc.seed = seed;
      sc.points_per_wave = W;
      sc.n_waves = seed == 0 && W == 24 ? 1095 : 200;
      ++generated;
      accepted += data::validate_dataset(data::generate_synthetic(sc).dataset).ok();
    }
  }
  auto tiled = [](std::size_t L, std::vector<std::pair<std::size_t, std::size_t>> spans) {
    data::MultimodalDataset d;
    d.values.assign(L, 0.0);
    for (auto [a, b] : spans) d.segments.push_back({a, b, "sine wave", data::embed_event("sine wave", 8, 0)});
    return d;
  };
  const bool overlap = data::validate_dataset(tiled(48, {{1, 24}, {20, 43}})).has(data::ViolationKind::Overlap);
  const bool gap = data::validate_dataset(tiled(52, {{1, 24}, {29, 52}})).has(data::ViolationKind::Gap);
  const bool ragged = data::validate_dataset(tiled(40, {{1, 24}, {25, 40}})).has(data::ViolationKind::RaggedLength);
  const bool ok = accepted == generated && overlap && gap && ragged;
  return {ok, fmt("%zu/%zu generated accepted; overlap %s, gap %s, ragged %s rejected", accepted, generated,
                  overlap ? "is" : "NOT", gap ? "is" : "NOT", ragged ? "is" : "NOT")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const auto scratch = temp_dir("acceptance");
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, flow_identities},
      {2, ode_oracle},
      {3, gradient_check},
      {4, identity_at_init},
      {5, overfit_smoke},
      {6, [&] { return event_awareness(scratch / "c6"); }},
      {7, event_timesteps},
      {8, jftsd_direction},
      {9, metric_oracles},
      {10, [&] { return determinism(scratch / "c10"); }},
      {11, dataset_constraints},
  };
  int failures = 0;
  for (const auto& [n, fn] : criteria) {
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  fs::remove_all(scratch);
  return failures == 0 ? 0 : 1;
}
