#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <sstream>

#include "evflow/error.hpp"
#include "evflow/io.hpp"
#include "evflow/metrics.hpp"

namespace evflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> d = {
      {"data.dir", ""},
      {"gen.n_waves", "1095"},
      {"gen.seed", "0"},
      {"gen.weights", "0.356,0.322,0.082,0.24"},
      {"gen.noise_levels", "0,0.05,0.1"},
      {"gen.embed_seed", "0"},
      {"model.W", "24"},
      {"model.M", "3"},
      {"model.d_model", "256"},
      {"model.d_state", "48"},
      {"model.m_state", "4"},
      {"model.d_text", "128"},
      {"model.d_ff", "1024"},
      {"model.n_heads", "4"},
      {"model.d_time", "64"},
      {"model.init_seed", "0"},
      {"train.batch_size", "64"},
      {"train.max_epochs", "1000"},
      {"train.eval_every", "5"},
      {"train.patience", "5"},
      {"train.lr_peak", "2e-4"},
      {"train.lr_init", "1e-5"},
      {"train.lr_final", "1e-7"},
      {"train.weight_decay", "1e-3"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.warmup_frac", "0.2"},
      {"train.dropout_start", "0.6"},
      {"train.dropout_end", "0.05"},
      {"train.grid_steps", "100"},
      {"train.delta_grid_prob", "0.5"},
      {"train.grad_clip", "1.0"},
      {"train.seed", "0"},
      {"window.p", "4"},
      {"window.q", "2"},
      {"window.stride", "1"},
      {"split.train", "0.7"},
      {"split.val", "0.1"},
      {"forecast.T", "50"},
      {"forecast.n_samples", "100"},
      {"forecast.seed", "0"},
      {"forecast.max_windows", "0"},
      {"ablation.no_text", "false"},
      {"ablation.stacked_dit", "false"},
      {"ablation.fixed_timestep", "false"},
      {"jftsd.V", "0.05,0.1,0.2"},
      {"jftsd.seed", "0"},
      {"jftsd.noise_events", "false"},
  };
  return d;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || !std::isfinite(v))
    throw ConfigError("config key '" + key + "': '" + text + "' is not a finite number");
  return v;
}

}  // namespace

RunConfig::RunConfig() : kv_(defaults()) {}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!kv_.count(key)) throw ConfigError("unknown config key '" + key + "'");
  kv_[key] = trim(value);
}

void RunConfig::assign(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::load_file(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  std::istringstream in(io::read_text(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      assign(line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::number(const std::string& key) const { return parse_double(key, get(key)); }

std::size_t RunConfig::count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

std::uint64_t RunConfig::u64(const std::string& key) const {
  const auto& text = get(key);
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': '" + text + "' is not a count");
  return v;
}

bool RunConfig::flag(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<double> RunConfig::list(const std::string& key) const {
  std::vector<double> out;
  std::istringstream in(get(key));
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_double(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

std::string RunConfig::hash() const {
  std::string text;
  for (const auto& [k, v] : kv_) text += k + "=" + v + "\n";  // std::map iterates sorted
  return io::fnv1a_hex(text);
}

json RunConfig::to_json() const { return json(kv_); }

data::SyntheticConfig RunConfig::synthetic() const {
  data::SyntheticConfig s;
  s.n_waves = count("gen.n_waves");
  s.points_per_wave = count("model.W");
  const auto w = list("gen.weights");
  if (w.size() != s.category_weights.size())
    throw ConfigError("gen.weights needs " + std::to_string(s.category_weights.size()) + " entries");
  std::copy(w.begin(), w.end(), s.category_weights.begin());
  s.noise_levels = list("gen.noise_levels");
  s.seed = u64("gen.seed");
  s.d_text = count("model.d_text");
  s.embed_seed = u64("gen.embed_seed");
  const auto m = model();
  s.required_divisor = m.token_divisor();
  s.validate();
  return s;
}

model::ModelConfig RunConfig::model() const {
  model::ModelConfig m;
  m.W = count("model.W");
  m.M = count("model.M");
  m.d_model = count("model.d_model");
  m.d_state = count("model.d_state");
  m.m_state = count("model.m_state");
  m.d_text = count("model.d_text");
  m.d_ff = count("model.d_ff");
  m.n_heads = count("model.n_heads");
  m.d_time = count("model.d_time");
  m.stacked = flag("ablation.stacked_dit");
  m.validate();
  return m;
}

train::TrainConfig RunConfig::train() const {
  train::TrainConfig t;
  t.batch_size = count("train.batch_size");
  t.max_epochs = count("train.max_epochs");
  t.eval_every = count("train.eval_every");
  t.patience = count("train.patience");
  t.lr_peak = number("train.lr_peak");
  t.lr_init = number("train.lr_init");
  t.lr_final = number("train.lr_final");
  t.weight_decay = number("train.weight_decay");
  t.beta1 = number("train.beta1");
  t.beta2 = number("train.beta2");
  t.warmup_frac = number("train.warmup_frac");
  t.dropout_start = number("train.dropout_start");
  t.dropout_end = number("train.dropout_end");
  t.train_grid_steps = static_cast<int>(count("train.grid_steps"));
  t.delta_grid_prob = number("train.delta_grid_prob");
  t.grad_clip = number("train.grad_clip");
  t.seed = u64("train.seed");
  t.no_text = flag("ablation.no_text");
  t.fixed_timestep = flag("ablation.fixed_timestep");
  t.validate();
  return t;
}

forecast::ForecastConfig RunConfig::forecast() const {
  forecast::ForecastConfig f;
  f.T = static_cast<int>(count("forecast.T"));
  f.n_samples = count("forecast.n_samples");
  f.seed = u64("forecast.seed");
  f.no_text = flag("ablation.no_text");
  f.use_event_delta = !flag("ablation.fixed_timestep");
  f.validate();
  return f;
}

fs::path output_root() {
  const char* env = std::getenv("EVFLOW_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::vector<data::WindowSample> split_windows(const data::MultimodalDataset& d, const RunConfig& cfg,
                                              const std::string& split) {
  const auto r = data::split_segments(d.segments.size(), cfg.number("split.train"), cfg.number("split.val"));
  std::size_t b = 0, e = r.train_end;
  if (split == "val") b = r.train_end, e = r.val_end;
  else if (split == "test") b = r.val_end, e = r.test_end;
  else if (split != "train") throw ConfigError("unknown split '" + split + "'");
  const std::size_t p = cfg.count("window.p"), q = cfg.count("window.q");
  if (e - b < p + q)
    throw ConfigError(split + " split has " + std::to_string(e - b) + " segments, windows need " +
                      std::to_string(p + q));
  return data::make_windows(d, p, q, cfg.count("window.stride"), b, e);
}

// ---- plotting -------------------------------------------------------------------

std::string render_svg(const data::WindowSample& w, const forecast::ForecastEnsemble& e, const std::string& caption) {
  const std::size_t W = w.segment_length(), p = w.p(), q = w.q(), n = (p + q) * W;
  std::vector<double> hist, truth;
  for (const auto& s : w.history_values) hist.insert(hist.end(), s.begin(), s.end());
  for (const auto& s : w.future_values) truth.insert(truth.end(), s.begin(), s.end());
  std::vector<double> lo(q * W), hi(q * W);
  for (std::size_t j = 0; j < q * W; ++j) {
    auto qs = metrics::empirical_quantiles(e.column(j), std::vector<double>{0.1, 0.9});
    lo[j] = qs[0];
    hi[j] = qs[1];
  }
  double ymin = INFINITY, ymax = -INFINITY;
  for (const std::vector<double>* v : std::initializer_list<const std::vector<double>*>{&hist, &truth, &lo, &hi, &e.point.data})
    for (double x : *v) ymin = std::min(ymin, x), ymax = std::max(ymax, x);
  if (ymax - ymin < 1e-12) ymin -= 1.0, ymax += 1.0;
  const double pad = 0.05 * (ymax - ymin);
  ymin -= pad;
  ymax += pad;

  constexpr double kW = 800, kH = 300, kL = 50, kR = 10, kT = 30, kB = 30;
  auto X = [&](double i) { return kL + (kW - kL - kR) * i / static_cast<double>(n - 1); };
  auto Y = [&](double v) { return kT + (kH - kT - kB) * (ymax - v) / (ymax - ymin); };
  char buf[160];
  auto pt = [&](double x, double y) {
    std::snprintf(buf, sizeof buf, "%.2f,%.2f ", x, y);
    return std::string(buf);
  };
  std::string svg;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                kW, kH, kW, kH);
  svg += buf;
  svg += "<!-- " + caption + " -->\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t k = 0; k <= p + q; ++k) {
    const double x = X(std::min<double>(static_cast<double>(k * W), static_cast<double>(n - 1)));
    std::snprintf(buf, sizeof buf,
                  "<line class=\"segment-edge\" x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"#bbb\"/>\n", x,
                  kT, x, kH - kB);
    svg += buf;
  }
  std::string band;
  for (std::size_t j = 0; j < q * W; ++j) band += pt(X(static_cast<double>(p * W + j)), Y(hi[j]));
  for (std::size_t j = q * W; j-- > 0;) band += pt(X(static_cast<double>(p * W + j)), Y(lo[j]));
  svg += "<polygon class=\"band\" fill=\"#9ecae1\" fill-opacity=\"0.6\" points=\"" + band + "\"/>\n";
  auto line = [&](const std::vector<double>& v, std::size_t offset, const char* cls, const char* style) {
    std::string pts;
    for (std::size_t j = 0; j < v.size(); ++j) pts += pt(X(static_cast<double>(offset + j)), Y(v[j]));
    svg += std::string("<polyline class=\"") + cls + "\" fill=\"none\" " + style + " points=\"" + pts + "\"/>\n";
  };
  line(hist, 0, "history", "stroke=\"black\"");
  line(truth, p * W, "truth", "stroke=\"black\" stroke-dasharray=\"4 3\"");
  line(e.point.data, p * W, "point", "stroke=\"#08519c\" stroke-width=\"1.5\"");
  std::snprintf(buf, sizeof buf, "<text x=\"%.0f\" y=\"18\" font-family=\"monospace\" font-size=\"12\">", kL);
  svg += buf + caption + "</text>\n</svg>\n";
  return svg;
}

namespace {

// ---- shared command plumbing ---------------------------------------------------

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::string hash;

  json stamp() const { return {{"config_hash", hash}, {"tool_version", io::kToolVersion}, {"config", cfg.to_json()}}; }
  void banner(const std::string& cmd) const {
    out << "evflow " << io::kToolVersion << " " << cmd << " config_hash=" << hash << "\n";
  }
};

fs::path data_dir(const Context& c) {
  const auto& d = c.cfg.get("data.dir");
  return d.empty() ? output_root() / "gen" : fs::path(d);
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ConfigError(what + " " + p.string() + " does not exist");
}

std::string hist_line(const std::vector<std::size_t>& counts) {
  std::string s;
  for (std::size_t k = 0; k < counts.size(); ++k)
    s += std::string(k ? " " : "") + data::category_name(static_cast<data::WaveCategory>(k)) + "=" +
         std::to_string(counts[k]);
  return s;
}

// ---- gen ---------------------------------------------------------------------------

void cmd_gen(const Context& c, const fs::path& out_dir) {
  c.banner("gen");
  const auto sc = c.cfg.synthetic();
  auto syn = data::generate_synthetic(sc);
  const auto report = data::validate_dataset(syn.dataset);
  if (!report.ok()) throw DataError("generated dataset failed validation: " + report.violations.front().message);
  data::save_dataset(syn.dataset, out_dir, c.hash);
  std::vector<std::size_t> counts(data::kWaveCategories, 0);
  for (auto k : syn.categories) ++counts[static_cast<std::size_t>(k)];
  c.out << "wrote " << out_dir.string() << "\n";
  c.out << "L=" << syn.dataset.values.size() << " segments=" << syn.dataset.segments.size() << "\n";
  c.out << "categories: " << hist_line(counts) << "\n";
}

// ---- train ---------------------------------------------------------------------------

struct TrainOutcome {
  fs::path checkpoint;
  train::FitResult result;
  bool paused = false;
};

struct Pause {};

std::vector<train::HistoryRow> read_history(const fs::path& path, std::size_t through_epoch) {
  std::vector<train::HistoryRow> rows;
  if (!fs::exists(path)) return rows;
  auto num = [](const json& v) { return v.is_null() ? NAN : v.get<double>(); };
  for (const auto& r : json::parse(io::read_text(path)))
    if (r.at(1).get<std::size_t>() <= through_epoch)
      rows.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>(), num(r.at(2)), num(r.at(3)),
                      num(r.at(4)), num(r.at(5))});
  return rows;
}

void write_history(const Context& c, const fs::path& dir, const std::vector<train::HistoryRow>& rows) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json hj = json::array();
  for (const auto& r : rows) hj.push_back({r.step, r.epoch, num(r.train_loss), r.lr, r.dropout, num(r.val_loss)});
  io::write_text(dir / "history.json", hj.dump());
  train::write_history_csv(dir / "history.csv", rows,
                           "tool_version=" + std::string(io::kToolVersion) + " config_hash=" + c.hash);
}

TrainOutcome cmd_train(const Context& c, const fs::path& out_dir, const std::string& resume, std::size_t stop_after) {
  c.banner("train");
  const auto d = data::load_dataset(data_dir(c));
  const auto mc = c.cfg.model();
  const auto tc = c.cfg.train();
  if (d.segment_length() != mc.W || d.embedding_dim() != mc.d_text)
    throw ConfigError("dataset has W=" + std::to_string(d.segment_length()) + ", d_text=" +
                      std::to_string(d.embedding_dim()) + " but the model config expects W=" + std::to_string(mc.W) +
                      ", d_text=" + std::to_string(mc.d_text));
  const auto tr = train::normalize_windows(split_windows(d, c.cfg, "train"));
  const auto va = train::normalize_windows(split_windows(d, c.cfg, "val"));
  fs::create_directories(out_dir);
  const auto state_path = out_dir / "train_state.bin";

  std::optional<train::ResumePoint> rp;
  if (!resume.empty()) {
    require_file(resume, "trainer state");
    rp = train::load_train_state(resume);
    if (rp->meta.value("config_hash", "") != c.hash)
      throw ConfigError("trainer state was written under config " + rp->meta.value("config_hash", std::string("?")) +
                        ", current config is " + c.hash);
  }
  model::Denoiser fresh(mc, model::InitMode::Standard, c.cfg.u64("model.init_seed"));
  model::Denoiser& m = rp ? rp->model : fresh;

  // Resumed runs continue the earlier history.
  std::vector<train::HistoryRow> rows;
  if (rp) rows = read_history(fs::path(resume).parent_path() / "history.json", rp->state.epoch);
  train::FitHooks hooks;
  hooks.on_row = [&](const train::HistoryRow& r) { rows.push_back(r); };
  hooks.on_epoch_end = [&](const model::Denoiser& live, const train::TrainState& st) {
    train::save_train_state(state_path, live, st, c.stamp());
    write_history(c, out_dir, rows);
    c.out << "epoch " << st.epoch << " step " << st.step << " best_val " << st.best_val << "\n";
    if (stop_after > 0 && st.epoch >= stop_after) throw Pause{};
  };
  TrainOutcome o{out_dir / "checkpoint.bin", {}, false};
  try {
    o.result = train::fit(m, tr, va, tc, hooks, rp ? &rp->state : nullptr);
  } catch (const Pause&) {
    c.out << "paused; resume with --resume " << state_path.string() << "\n";
    o.paused = true;
    return o;
  }
  json meta = c.stamp();
  meta["no_text"] = tc.no_text;
  meta["fixed_timestep"] = tc.fixed_timestep;
  meta["stacked_dit"] = mc.stacked;
  meta["best_val"] = o.result.best_val;
  model::save_checkpoint(o.checkpoint, m, meta);
  write_history(c, out_dir, rows);
  c.out << "epochs " << o.result.epochs_run << (o.result.stopped_early ? " (early stop)" : "") << " best_val "
        << o.result.best_val << "\n";
  c.out << "wrote " << o.checkpoint.string() << "\n";
  return o;
}

// ---- forecast ------------------------------------------------------------------------

struct Selector {
  std::size_t begin = 0, end = SIZE_MAX;
};

Selector parse_selector(const std::string& s) {
  Selector sel;
  if (s.empty() || s == "all") return sel;
  const auto colon = s.find(':');
  auto num = [&](const std::string& t) -> std::size_t {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size()) throw ConfigError("bad window selector '" + s + "'");
    return v;
  };
  if (colon == std::string::npos) {
    sel.begin = num(s);
    sel.end = sel.begin + 1;
  } else {
    sel.begin = colon ? num(s.substr(0, colon)) : 0;
    sel.end = colon + 1 < s.size() ? num(s.substr(colon + 1)) : SIZE_MAX;
  }
  if (sel.end <= sel.begin) throw ConfigError("empty window selector '" + s + "'");
  return sel;
}

void cmd_forecast(const Context& c, const fs::path& out_dir, const fs::path& ckpt_path, const std::string& windows) {
  c.banner("forecast");
  require_file(ckpt_path, "checkpoint");
  auto ck = model::load_checkpoint(ckpt_path);
  const auto d = data::load_dataset(data_dir(c));
  auto fc = c.cfg.forecast();
  fc.no_text = ck.meta.value("no_text", false);
  fc.use_event_delta = !ck.meta.value("fixed_timestep", false);
  auto all = split_windows(d, c.cfg, "test");
  const auto sel = parse_selector(windows);
  std::vector<data::WindowSample> ws;
  for (std::size_t i = sel.begin; i < std::min(sel.end, all.size()); ++i) ws.push_back(all[i]);
  if (const auto cap = c.cfg.count("forecast.max_windows"); cap > 0 && ws.size() > cap) ws.resize(cap);
  if (ws.empty()) throw ConfigError("window selector '" + windows + "' matches no test windows");

  forecast::DenoiserModel dm(ck.model);
  std::vector<forecast::ForecastEnsemble> es;
  for (const auto& w : ws) es.push_back(forecast::forecast_window(dm, w, fc));
  json meta = c.stamp();
  meta["checkpoint"] = ckpt_path.string();
  meta["checkpoint_config_hash"] = ck.meta.value("config_hash", std::string());
  meta["data_dir"] = data_dir(c).string();
  meta["p"] = c.cfg.count("window.p");
  meta["q"] = c.cfg.count("window.q");
  forecast::write_forecasts(out_dir, ws, es, fc, meta, true);
  c.out << "forecast " << ws.size() << " windows x " << fc.n_samples << " samples (T=" << fc.T
        << (fc.use_event_delta ? ", event-controlled" : ", fixed") << " schedule" << (fc.no_text ? ", no text" : "")
        << ")\n";
  c.out << "wrote " << (out_dir / "forecast.json").string() << "\n";
}

struct LoadedForecasts {
  json doc;
  std::vector<data::WindowSample> windows;
  std::vector<forecast::ForecastEnsemble> ensembles;
};

LoadedForecasts load_forecasts(const fs::path& dir, const fs::path& data_override) {
  const auto fpath = dir / "forecast.json", epath = dir / "ensemble.f64";
  require_file(fpath, "forecast file");
  require_file(epath, "ensemble file");
  LoadedForecasts lf;
  try {
    lf.doc = json::parse(io::read_text(fpath));
  } catch (const json::parse_error& e) {
    throw DataError(fpath.string() + ": parse error at byte offset " + std::to_string(e.byte));
  }
  const auto& meta = lf.doc.at("meta");
  const fs::path ddir = data_override.empty() ? fs::path(meta.at("data_dir").get<std::string>()) : data_override;
  const auto d = data::load_dataset(ddir);
  const std::size_t p = meta.at("p").get<std::size_t>(), q = meta.at("q").get<std::size_t>();
  const std::size_t W = d.segment_length();
  const auto bytes = io::read_bytes(epath);
  std::size_t offset = 0;
  for (const auto& jw : lf.doc.at("windows")) {
    const std::size_t first = jw.at("first_segment").get<std::size_t>();
    const std::size_t m = jw.at("n_samples").get<std::size_t>();
    if (first + p + q > d.segments.size())
      throw DataError(fpath.string() + ": window at segment " + std::to_string(first) + " exceeds the dataset");
    lf.windows.push_back(data::make_windows(d, p, q, 1, first, first + p + q).at(0));
    forecast::ForecastEnsemble e;
    e.n_samples = m;
    e.q = q;
    e.W = W;
    e.trajectories = Matrix(m, q * W);
    if (bytes.size() < (offset + e.trajectories.size()) * 8)
      throw DataError(epath.string() + ": truncated at byte offset " + std::to_string(bytes.size()));
    for (std::size_t k = 0; k < e.trajectories.size(); ++k)
      e.trajectories.data[k] = io::load_f64_le(bytes.data() + 8 * (offset + k));
    offset += e.trajectories.size();
    e.point = Matrix(q, W);
    const auto& jp = jw.at("point");
    for (std::size_t s = 0; s < q; ++s)
      for (std::size_t k = 0; k < W; ++k) e.point(s, k) = jp.at(s).at(k).get<double>();
    lf.ensembles.push_back(std::move(e));
  }
  if (offset * 8 != bytes.size())
    throw DataError(epath.string() + ": " + std::to_string(bytes.size() - offset * 8) + " trailing bytes at byte offset " +
                    std::to_string(offset * 8));
  return lf;
}

// ---- eval ----------------------------------------------------------------------------

metrics::MetricReport cmd_eval(const Context& c, const fs::path& out_dir, const fs::path& fdir,
                               const fs::path& data_override) {
  c.banner("eval");
  const auto lf = load_forecasts(fdir, data_override);
  std::vector<metrics::WindowMetrics> rows;
  for (std::size_t i = 0; i < lf.windows.size(); ++i) {
    const auto& w = lf.windows[i];
    const auto& e = lf.ensembles[i];
    std::vector<double> y;
    for (const auto& s : w.future_values) y.insert(y.end(), s.begin(), s.end());
    auto row = metrics::score_window(e.trajectories.data, e.n_samples, y, e.point.data);
    row.window = w.first_segment;
    rows.push_back(row);
  }
  json meta = c.stamp();
  meta["forecast_config_hash"] = lf.doc.at("meta").value("config_hash", std::string());
  meta["forecast_dir"] = fdir.string();
  meta["horizon_q"] = lf.doc.at("meta").at("q");
  meta["n_windows"] = rows.size();
  auto rep = metrics::aggregate(std::move(rows), meta);
  metrics::write_report(out_dir, rep);
  const auto& a = rep.aggregate;
  c.out << "windows " << rep.windows.size() << "\n";
  c.out << "MAE " << a.mae << " MSE " << a.mse << " RMSE " << a.rmse << " WAPE " << a.wape << " CRPS " << a.crps
        << " WQL " << a.wql << "\n";
  c.out << "wrote " << (out_dir / "report.json").string() << "\n";
  return rep;
}

// ---- plot ----------------------------------------------------------------------------

void cmd_plot(const Context& c, const fs::path& out_dir, const fs::path& fdir, const fs::path& data_override,
              const std::string& windows) {
  c.banner("plot");
  const auto lf = load_forecasts(fdir, data_override);
  const auto sel = parse_selector(windows);
  fs::create_directories(out_dir);
  std::size_t n = 0;
  for (std::size_t i = sel.begin; i < std::min(sel.end, lf.windows.size()); ++i) {
    const auto& w = lf.windows[i];
    const std::string caption = "window " + std::to_string(w.first_segment) + " | evflow " + io::kToolVersion +
                                " | config_hash " + c.hash;
    const auto path = out_dir / ("window_" + std::to_string(w.first_segment) + ".svg");
    io::write_text(path, render_svg(w, lf.ensembles[i], caption));
    ++n;
  }
  if (n == 0) throw ConfigError("window selector '" + windows + "' matches no forecast windows");
  c.out << "wrote " << n << " plots to " << out_dir.string() << "\n";
}

// ---- jftsd ---------------------------------------------------------------------------

void cmd_jftsd(const Context& c, const fs::path& out_dir) {
  c.banner("jftsd");
  const auto d = data::load_dataset(data_dir(c));
  const auto V = c.cfg.list("jftsd.V");
  const auto seed = c.cfg.u64("jftsd.seed");
  const bool noise = c.cfg.flag("jftsd.noise_events");
  std::vector<metrics::Pair> pairs;
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t s = 0; s < d.segments.size(); ++s) {
    auto v = d.segment_values(s);
    metrics::Pair p{{v.begin(), v.end()}, d.segments[s].embedding};
    if (noise)
      for (double& x : p.event) x = nd(rng);
    pairs.push_back(std::move(p));
  }
  const double delta = metrics::delta_j_ftsd(pairs, V, seed);
  json j = c.stamp();
  j["delta_j_ftsd"] = delta;
  j["V"] = V;
  j["seed"] = seed;
  j["noise_events"] = noise;
  j["n_pairs"] = pairs.size();
  fs::create_directories(out_dir);
  io::write_text(out_dir / "jftsd.json", j.dump(1));
  c.out << j.dump() << "\n";
}

// ---- ablate --------------------------------------------------------------------------

void cmd_ablate(const Context& c, const fs::path& out_dir) {
  c.banner("ablate");
  struct Variant {
    const char* name;
    const char* key;
  };
  const Variant variants[] = {{"full", nullptr},
                              {"no_text", "ablation.no_text"},
                              {"stacked_dit", "ablation.stacked_dit"},
                              {"fixed_timestep", "ablation.fixed_timestep"}};
  json table = json::array();
  std::string csv = "# tool_version=" + std::string(io::kToolVersion) + " config_hash=" + c.hash + "\n";
  csv += "variant,config_hash,best_val,mae,mse,rmse,wape,crps,wql\n";
  for (const auto& v : variants) {
    Context vc{c.cfg, c.out, ""};
    for (const auto& k : {"ablation.no_text", "ablation.stacked_dit", "ablation.fixed_timestep"})
      vc.cfg.set(k, v.key && std::string(k) == v.key ? "true" : "false");
    vc.hash = vc.cfg.hash();
    const auto dir = out_dir / v.name;
    auto tr = cmd_train(vc, dir / "train", "", 0);
    cmd_forecast(vc, dir / "forecast", tr.checkpoint, "all");
    auto rep = cmd_eval(vc, dir / "eval", dir / "forecast", "");
    const auto& a = rep.aggregate;
    table.push_back({{"variant", v.name}, {"config_hash", vc.hash}, {"best_val", tr.result.best_val},
                     {"mae", a.mae}, {"mse", a.mse}, {"rmse", a.rmse}, {"wape", a.wape}, {"crps", a.crps},
                     {"wql", a.wql}});
    char buf[400];
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", v.name, vc.hash.c_str(),
                  tr.result.best_val, a.mae, a.mse, a.rmse, a.wape, a.crps, a.wql);
    csv += buf;
  }
  json doc = c.stamp();
  doc["variants"] = table;
  io::write_text(out_dir / "ablation.json", doc.dump(1));
  io::write_text(out_dir / "ablation.csv", csv);
  c.out << "\nvariant          MAE        WQL        CRPS\n";
  for (const auto& r : table) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-15s %10.5f %10.5f %10.5f\n", r["variant"].get<std::string>().c_str(),
                  r["mae"].get<double>(), r["wql"].get<double>(), r["crps"].get<double>());
    c.out << buf;
  }
}

}  // namespace

int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Event-conditioned flow-matching forecaster", "evflow"};
  app.set_version_flag("--version", std::string("evflow ") + io::kToolVersion);
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out_opt;
  app.add_option("-c,--config", config_file, "key = value config file");
  app.add_option("-s,--set", overrides, "override, key=value (repeatable)");
  app.add_option("-o,--out", out_opt, "output directory (default: $EVFLOW_OUT/<command>)");

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  auto* trn = app.add_subcommand("train", "train the denoiser");
  std::string resume;
  std::size_t stop_after = 0;
  trn->add_option("--resume", resume, "trainer state to resume from");
  trn->add_option("--stop-after", stop_after, "pause after this epoch, keeping the trainer state");
  auto* fct = app.add_subcommand("forecast", "forecast test windows");
  std::string ckpt, windows = "all";
  fct->add_option("--checkpoint", ckpt, "checkpoint (default: $EVFLOW_OUT/train/checkpoint.bin)");
  fct->add_option("--windows", windows, "test-window selector: all, i, a:b");
  auto* evl = app.add_subcommand("eval", "score forecasts");
  std::string fdir, data_opt;
  evl->add_option("--forecast", fdir, "forecast directory (default: $EVFLOW_OUT/forecast)");
  evl->add_option("--data", data_opt, "dataset directory (default: the one recorded in forecast.json)");
  auto* plt = app.add_subcommand("plot", "render forecast windows as SVG");
  std::string plot_windows = "all";
  plt->add_option("--forecast", fdir, "forecast directory (default: $EVFLOW_OUT/forecast)");
  plt->add_option("--data", data_opt, "dataset directory");
  plt->add_option("--windows", plot_windows, "window selector: all, i, a:b");
  auto* jft = app.add_subcommand("jftsd", "event predictability (delta J-FTSD) of a dataset");
  auto* abl = app.add_subcommand("ablate", "train/forecast/eval the four ablation variants");
  for (auto* sub : {gen, trn, fct, evl, plt, jft, abl}) sub->fallthrough();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << "evflow " << io::kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "evflow: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::Usage);
  }

  try {
    Context c{RunConfig{}, out, ""};
    if (!config_file.empty()) c.cfg.load_file(config_file);
    for (const auto& o : overrides) c.cfg.assign(o);
    c.hash = c.cfg.hash();
    const auto root = output_root();
    auto dir = [&](const char* name) { return out_opt.empty() ? root / name : fs::path(out_opt); };
    if (*gen) cmd_gen(c, dir("gen"));
    else if (*trn) cmd_train(c, dir("train"), resume, stop_after);
    else if (*fct) cmd_forecast(c, dir("forecast"), ckpt.empty() ? root / "train" / "checkpoint.bin" : fs::path(ckpt), windows);
    else if (*evl) cmd_eval(c, dir("eval"), fdir.empty() ? root / "forecast" : fs::path(fdir), data_opt);
    else if (*plt) cmd_plot(c, dir("plot"), fdir.empty() ? root / "forecast" : fs::path(fdir), data_opt, plot_windows);
    else if (*jft) cmd_jftsd(c, dir("jftsd"));
    else if (*abl) cmd_ablate(c, dir("ablate"));
    return 0;
  } catch (const Error& e) {
    err << "evflow: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::invalid_argument& e) {
    err << "evflow: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::Usage);
  } catch (const fs::filesystem_error& e) {
    err << "evflow: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::Data);
  } catch (const json::exception& e) {
    err << "evflow: malformed JSON input: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::Data);
  }
}

}  // namespace evflow::cli
