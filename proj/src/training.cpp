#include "evflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "evflow/error.hpp"
#include "evflow/flow.hpp"
#include "evflow/io.hpp"

namespace evflow::train {

using ad::Var;
using model::Denoiser;
using model::Scope;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (batch_size == 0) fail("batch_size must be positive");
  if (max_epochs == 0) fail("max_epochs must be positive");
  if (eval_every == 0) fail("eval_every must be positive");
  if (!(lr_init > 0.0 && lr_init < lr_peak)) fail("need 0 < lr_init < lr_peak");
  if (!(lr_final >= 0.0)) fail("lr_final must be nonnegative");
  if (!(dropout_start >= dropout_end && dropout_end >= 0.0 && dropout_start < 1.0))
    fail("need 1 > dropout_start >= dropout_end >= 0");
  if (!(delta_grid_prob >= 0.0 && delta_grid_prob <= 1.0)) fail("delta_grid_prob must lie in [0, 1]");
  if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) fail("warmup_frac must lie in [0, 1]");
  if (train_grid_steps < 1) fail("train_grid_steps must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be nonnegative");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"eval_every", c.eval_every},
          {"patience", c.patience},
          {"lr_peak", c.lr_peak},
          {"lr_init", c.lr_init},
          {"lr_final", c.lr_final},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"warmup_frac", c.warmup_frac},
          {"dropout_start", c.dropout_start},
          {"dropout_end", c.dropout_end},
          {"train_grid_steps", c.train_grid_steps},
          {"delta_grid_prob", c.delta_grid_prob},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"no_text", c.no_text},
          {"fixed_timestep", c.fixed_timestep}};
}

double lr_at(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  if (total == 0) throw std::invalid_argument("lr_at: total_steps must be positive");
  if (step > total) throw std::invalid_argument("lr_at: step beyond total_steps");
  const double s = static_cast<double>(step);
  const double warm = cfg.warmup_frac * static_cast<double>(total);
  if (s < warm) return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * (s / warm);
  const double rest = static_cast<double>(total) - warm;
  if (rest <= 0.0) return cfg.lr_peak;
  return cfg.lr_peak + (cfg.lr_final - cfg.lr_peak) * ((s - warm) / rest);
}

double dropout_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch > cfg.max_epochs) throw std::invalid_argument("dropout_at: epoch beyond max_epochs");
  const double f = static_cast<double>(epoch) / static_cast<double>(cfg.max_epochs);
  return cfg.dropout_start + (cfg.dropout_end - cfg.dropout_start) * f;
}

TimestepDraw sample_timestep(std::span<const double> c, const Denoiser& m, std::mt19937_64& rng,
                             const TrainConfig& cfg) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (unif(rng) >= cfg.delta_grid_prob) return {unif(rng), -1};
  const int T = cfg.train_grid_steps;
  if (cfg.fixed_timestep) {
    const int k = std::uniform_int_distribution<int>(0, T - 1)(rng);
    return {static_cast<double>(k) / static_cast<double>(T), k};
  }
  const int k = std::uniform_int_distribution<int>(0, T)(rng);
  const double delta = model::event_delta(m, c);
  // Same expression as the graph: k * (1 / (T + delta)).
  return {static_cast<double>(k) * (1.0 / (delta + static_cast<double>(T))), k};
}

NormalizedWindow normalize_window(const data::WindowSample& w) {
  NormalizedWindow n;
  n.id = w.first_segment;
  for (const auto& v : w.history_values) n.values.push_back(data::zscore_apply(v, w.normalization));
  for (const auto& v : w.future_values) n.values.push_back(data::zscore_apply(v, w.normalization));
  n.events = w.history_events;
  n.events.insert(n.events.end(), w.future_events.begin(), w.future_events.end());
  return n;
}

std::vector<NormalizedWindow> normalize_windows(std::span<const data::WindowSample> ws) {
  std::vector<NormalizedWindow> out;
  out.reserve(ws.size());
  for (const auto& w : ws) out.push_back(normalize_window(w));
  return out;
}

namespace {

std::mt19937_64 sample_rng(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

void fill_normal(std::span<double> out, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double& x : out) x = nd(rng);
}

struct SegmentInputs {
  Matrix x0, x1, c, t_fixed, k;
  bool any_grid = false;
};

std::size_t check_batch(std::span<const NormalizedWindow* const> batch, const model::ModelConfig& mc) {
  if (batch.empty()) throw std::invalid_argument("batch is empty");
  const std::size_t S = batch.front()->values.size();
  for (const auto* w : batch) {
    if (w->values.size() != S || w->events.size() != S) throw std::invalid_argument("batch windows differ in length");
    for (std::size_t s = 0; s < S; ++s)
      if (w->values[s].size() != mc.W || w->events[s].size() != mc.d_text)
        throw std::invalid_argument("batch segment shape does not match the model config");
  }
  return S;
}

Var interpolate(Var x0, Var x1, Var t) {
  return ad::add(ad::group_mul(x0, ad::add_scalar(ad::scale(t, -1.0), 1.0)), ad::group_mul(x1, t));
}

}  // namespace

double batch_loss(Denoiser& m, std::span<const NormalizedWindow* const> batch, const TrainConfig& cfg,
                  std::uint64_t step_seed, double dropout, bool grad, const VelocityOverride& override_v) {
  const auto& mc = m.config();
  const std::size_t B = batch.size();
  const std::size_t S = check_batch(batch, mc);
  const std::size_t W = mc.W, D = mc.d_text;

  std::vector<SegmentInputs> seg(S);
  for (auto& si : seg) si = {Matrix(B, W), Matrix(B, W), Matrix(B, D), Matrix(B, 1), Matrix(B, 1), false};
  for (std::size_t b = 0; b < B; ++b) {
    const auto& w = *batch[b];
    auto rng = sample_rng(step_seed, w.id);
    for (std::size_t s = 0; s < S; ++s) {
      auto c = seg[s].c.row(b);
      if (cfg.no_text) fill_normal(c, rng);
      else std::copy(w.events[s].begin(), w.events[s].end(), c.begin());
      const auto draw = sample_timestep(c, m, rng, cfg);
      if (draw.k >= 0 && !cfg.fixed_timestep) {
        seg[s].k(b, 0) = draw.k;
        seg[s].any_grid = true;
      } else {
        seg[s].t_fixed(b, 0) = draw.t;
      }
      fill_normal(seg[s].x0.row(b), rng);
      std::copy(w.values[s].begin(), w.values[s].end(), seg[s].x1.row(b).begin());
    }
  }

  ad::Rng drop_rng(step_seed ^ 0xd1b54a32d192ed03ULL);
  ad::Graph g(grad);
  Scope scope(g, m, dropout, dropout > 0.0 ? &drop_rng : nullptr);
  Var z = m.initial_state(scope, B);
  Var total;
  std::vector<Var> v_hats;
  for (std::size_t s = 0; s < S; ++s) {
    auto& si = seg[s];
    Var c = g.constant(si.c);
    Var t = g.constant(si.t_fixed);
    if (si.any_grid) {
      Var step = ad::reciprocal(ad::add_scalar(m.event_delta(scope, c), static_cast<double>(cfg.train_grid_steps)));
      t = ad::add(t, ad::mul(g.constant(si.k), step));
    }
    Var x0 = g.constant(si.x0);
    Var x1 = g.constant(si.x1);
    Var xt = interpolate(x0, x1, t);
    Matrix target(B, W);
    for (std::size_t b = 0; b < B; ++b) {
      auto v = flow::velocity_target(si.x0.row(b), si.x1.row(b));
      std::copy(v.begin(), v.end(), target.row(b).begin());
    }
    auto out = m.denoise(scope, xt, z, c, t);
    Var v_hat = out.v_hat;
    if (override_v) v_hat = override_v(StepContext{scope, xt, x0, x1, z, c, t, s});
    z = out.z_new;
    v_hats.push_back(v_hat);
    Var l = ad::mse(v_hat, g.constant(std::move(target)));
    total = total.valid() ? ad::add(total, l) : l;
  }
  total = ad::scale(total, 1.0 / static_cast<double>(S));
  const double loss = total.scalar();
  if (!std::isfinite(loss)) {
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t b = 0; b < B; ++b)
        for (double v : v_hats[s].value().row(b))
          if (!std::isfinite(v))
            throw NumericalError("non-finite training loss: sample id " + std::to_string(batch[b]->id) +
                                 ", segment " + std::to_string(s + 1));
    throw NumericalError("non-finite training loss");
  }
  if (grad) g.backward(total);
  return loss;
}

double adamw_step(Denoiser& m, AdamState& st, double lr, const TrainConfig& cfg) {
  auto& params = m.parameters();
  if (st.m.size() != params.size()) throw std::invalid_argument("adamw_step: optimizer state does not match model");
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad.data) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("adamw_step: non-finite gradient norm");
  const double clip = cfg.grad_clip > 0.0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& mm = st.m[i].data;
    auto& vv = st.v[i].data;
    const bool has_grad = !p.grad.empty();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = has_grad ? p.grad.data[k] * clip : 0.0;
      mm[k] = cfg.beta1 * mm[k] + (1.0 - cfg.beta1) * g;
      vv[k] = cfg.beta2 * vv[k] + (1.0 - cfg.beta2) * g * g;
      double& w = p.value.data[k];
      w -= lr * cfg.weight_decay * w;
      w -= lr * (mm[k] / bc1) / (std::sqrt(vv[k] / bc2) + cfg.eps);
    }
    p.grad = Matrix();
  }
  return norm;
}

TrainState init_state(const Denoiser& m, const TrainConfig& cfg, std::size_t total_steps) {
  TrainState st;
  st.total_steps = total_steps;
  for (const auto& p : m.parameters()) {
    st.adam.m.emplace_back(p.value.rows, p.value.cols);
    st.adam.v.emplace_back(p.value.rows, p.value.cols);
  }
  st.rng.seed(cfg.seed);
  return st;
}

double train_step(Denoiser& m, std::span<const NormalizedWindow* const> batch, TrainState& st, const TrainConfig& cfg,
                  double dropout, const VelocityOverride& override_v) {
  m.zero_grad();
  const std::uint64_t step_seed = st.rng();
  double loss;
  try {
    loss = batch_loss(m, batch, cfg, step_seed, dropout, true, override_v);
  } catch (const NumericalError& e) {
    throw NumericalError("step " + std::to_string(st.step) + ": " + e.what());
  }
  const double lr = lr_at(std::min(st.step, st.total_steps), std::max<std::size_t>(st.total_steps, 1), cfg);
  adamw_step(m, st.adam, lr, cfg);
  ++st.step;
  return loss;
}

double validation_loss(Denoiser& m, std::span<const NormalizedWindow> windows, const TrainConfig& cfg) {
  if (windows.empty()) throw std::invalid_argument("validation_loss: no windows");
  const auto& mc = m.config();
  constexpr std::size_t kT = 9;
  constexpr std::size_t kChunk = 8;
  double weighted = 0.0;
  for (std::size_t begin = 0; begin < windows.size(); begin += kChunk) {
    const std::size_t end = std::min(windows.size(), begin + kChunk);
    std::vector<const NormalizedWindow*> chunk;
    for (std::size_t i = begin; i < end; ++i) chunk.push_back(&windows[i]);
    const std::size_t S = check_batch(chunk, mc);
    const std::size_t G = chunk.size() * kT;

    std::vector<Matrix> x0(S, Matrix(G, mc.W)), x1(S, Matrix(G, mc.W)), c(S, Matrix(G, mc.d_text));
    Matrix t(G, 1);
    for (std::size_t w = 0; w < chunk.size(); ++w) {
      auto rng = sample_rng(cfg.seed ^ 0x76a15e1dULL, chunk[w]->id);
      for (std::size_t s = 0; s < S; ++s) {
        std::vector<double> noise(mc.W), ev(mc.d_text);
        fill_normal(noise, rng);
        if (cfg.no_text) fill_normal(ev, rng);
        else ev = chunk[w]->events[s];
        for (std::size_t j = 0; j < kT; ++j) {
          const std::size_t r = w * kT + j;
          std::copy(noise.begin(), noise.end(), x0[s].row(r).begin());
          std::copy(chunk[w]->values[s].begin(), chunk[w]->values[s].end(), x1[s].row(r).begin());
          std::copy(ev.begin(), ev.end(), c[s].row(r).begin());
          t(r, 0) = 0.1 * static_cast<double>(j + 1);
        }
      }
    }
    ad::Graph g(false);
    Scope scope(g, m);
    Var z = m.initial_state(scope, G);
    Var tv = g.constant(t);
    double sum = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      Var a = g.constant(x0[s]), b = g.constant(x1[s]);
      auto out = m.denoise(scope, interpolate(a, b, tv), z, g.constant(c[s]), tv);
      z = out.z_new;
      sum += ad::mse(out.v_hat, ad::sub(b, a)).scalar();
    }
    weighted += sum / static_cast<double>(S) * static_cast<double>(chunk.size());
  }
  const double v = weighted / static_cast<double>(windows.size());
  if (!std::isfinite(v)) throw NumericalError("non-finite validation loss");
  return v;
}

std::size_t steps_per_epoch(std::size_t n_train, const TrainConfig& cfg) {
  return (n_train + cfg.batch_size - 1) / cfg.batch_size;
}

namespace {
std::vector<Matrix> snapshot(const Denoiser& m) {
  std::vector<Matrix> out;
  for (const auto& p : m.parameters()) out.push_back(p.value);
  return out;
}
}  // namespace

FitResult fit(Denoiser& m, std::span<const NormalizedWindow> train, std::span<const NormalizedWindow> val,
              const TrainConfig& cfg, const FitHooks& hooks, TrainState* resume) {
  cfg.validate();
  if (train.empty() || val.empty()) throw ConfigError("fit: train and validation splits must be nonempty");
  const std::size_t spe = steps_per_epoch(train.size(), cfg);
  TrainState local;
  TrainState& st = resume ? *resume : local;
  if (!resume) st = init_state(m, cfg, spe * cfg.max_epochs);
  auto validate = [&]() { return hooks.validator ? hooks.validator(m, val) : validation_loss(m, val, cfg); };

  FitResult res;
  auto emit = [&](const HistoryRow& r) {
    res.history.push_back(r);
    if (hooks.on_row) hooks.on_row(r);
  };

  if (st.epoch == 0 && st.step == 0 && !std::isfinite(st.best_val)) {
    st.best_val = validate();
    st.best_params = snapshot(m);
    HistoryRow r;
    r.lr = lr_at(0, std::max<std::size_t>(st.total_steps, 1), cfg);
    r.dropout = dropout_at(0, cfg);
    r.train_loss = std::numeric_limits<double>::quiet_NaN();
    r.val_loss = st.best_val;
    emit(r);
  }

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = st.epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
    const double dropout = dropout_at(epoch - 1, cfg);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), st.rng);
    HistoryRow last;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      std::vector<const NormalizedWindow*> batch;
      for (std::size_t i = b0; i < std::min(order.size(), b0 + cfg.batch_size); ++i) batch.push_back(&train[order[i]]);
      HistoryRow r;
      r.lr = lr_at(std::min(st.step, st.total_steps), std::max<std::size_t>(st.total_steps, 1), cfg);
      r.train_loss = train_step(m, batch, st, cfg, dropout, hooks.velocity);
      r.step = st.step;
      r.epoch = epoch;
      r.dropout = dropout;
      if (b0 + cfg.batch_size < order.size()) emit(r);
      else last = r;
    }
    st.epoch = epoch;
    if (epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs) {
      const double v = validate();
      last.val_loss = v;
      if (v < st.best_val) {
        st.best_val = v;
        st.best_params = snapshot(m);
        st.evals_since_best = 0;
      } else {
        ++st.evals_since_best;
      }
    }
    emit(last);
    res.epochs_run = epoch;
    if (hooks.on_epoch_end) hooks.on_epoch_end(m, st);
    if (cfg.patience > 0 && st.evals_since_best >= cfg.patience) {
      res.stopped_early = true;
      break;
    }
  }
  if (!st.best_params.empty())
    for (std::size_t i = 0; i < st.best_params.size(); ++i) m.parameters()[i].value = st.best_params[i];
  res.best_val = st.best_val;
  return res;
}

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> rows, const std::string& comment) {
  std::string out;
  if (!comment.empty()) out += "# " + comment + "\n";
  out += "step,epoch,train_loss,lr,dropout,val_loss\n";
  char buf[256];
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", v);
    return std::string(b);
  };
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,", r.step, r.epoch);
    out += buf + num(r.train_loss) + "," + num(r.lr) + "," + num(r.dropout) + "," + num(r.val_loss) + "\n";
  }
  io::write_text(path, out);
}

void save_train_state(const std::filesystem::path& path, const Denoiser& m, const TrainState& st,
                      const nlohmann::json& meta) {
  model::TensorFile f;
  std::ostringstream rng;
  rng << st.rng;
  f.header = {{"kind", "evflow-train-state"},
              {"tool_version", io::kToolVersion},
              {"model", model::to_json(m.config())},
              {"step", st.step},
              {"epoch", st.epoch},
              {"total_steps", st.total_steps},
              {"adam_t", st.adam.t},
              {"best_val", std::isfinite(st.best_val) ? nlohmann::json(st.best_val) : nlohmann::json(nullptr)},
              {"evals_since_best", st.evals_since_best},
              {"rng", rng.str()},
              {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
  const auto& ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    f.tensors.emplace_back("param/" + ps[i].name, ps[i].value);
    f.tensors.emplace_back("adam_m/" + ps[i].name, st.adam.m[i]);
    f.tensors.emplace_back("adam_v/" + ps[i].name, st.adam.v[i]);
    if (!st.best_params.empty()) f.tensors.emplace_back("best/" + ps[i].name, st.best_params[i]);
  }
  model::write_tensor_file(path, f);
}

ResumePoint load_train_state(const std::filesystem::path& path) {
  auto f = model::read_tensor_file(path);
  const std::string where = path.string();
  if (f.header.value("kind", "") != "evflow-train-state") throw DataError(where + ": not a trainer state file");
  ResumePoint rp{Denoiser(model::model_config_from_json(f.header.at("model"))), TrainState{},
                 f.header.value("meta", nlohmann::json::object())};
  auto& ps = rp.model.parameters();
  TrainState& st = rp.state;
  st.step = f.header.at("step").get<std::size_t>();
  st.epoch = f.header.at("epoch").get<std::size_t>();
  st.total_steps = f.header.at("total_steps").get<std::size_t>();
  st.adam.t = f.header.at("adam_t").get<std::size_t>();
  st.best_val = f.header.at("best_val").is_null() ? std::numeric_limits<double>::infinity()
                                                   : f.header.at("best_val").get<double>();
  st.evals_since_best = f.header.at("evals_since_best").get<std::size_t>();
  std::istringstream rng(f.header.at("rng").get<std::string>());
  rng >> st.rng;
  if (!rng) throw DataError(where + ": bad rng state");

  std::unordered_map<std::string, Matrix*> slots;
  st.adam.m.resize(ps.size());
  st.adam.v.resize(ps.size());
  const bool has_best = std::any_of(f.tensors.begin(), f.tensors.end(),
                                    [](const auto& t) { return t.first.rfind("best/", 0) == 0; });
  if (has_best) st.best_params.resize(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    slots["param/" + ps[i].name] = &ps[i].value;
    slots["adam_m/" + ps[i].name] = &st.adam.m[i];
    slots["adam_v/" + ps[i].name] = &st.adam.v[i];
    if (has_best) slots["best/" + ps[i].name] = &st.best_params[i];
  }
  if (f.tensors.size() != slots.size())
    throw DataError(where + ": " + std::to_string(f.tensors.size()) + " tensors, expected " +
                    std::to_string(slots.size()));
  for (auto& [name, mtx] : f.tensors) {
    auto it = slots.find(name);
    if (it == slots.end()) throw DataError(where + ": unexpected tensor '" + name + "'");
    *it->second = std::move(mtx);
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& shape = ps[i].value;
    if (!st.adam.m[i].same_shape(shape) || !st.adam.v[i].same_shape(shape) ||
        (has_best && !st.best_params[i].same_shape(shape)))
      throw DataError(where + ": optimizer tensors for '" + ps[i].name + "' do not match the parameter shape");
  }
  return rp;
}

}  // namespace evflow::train
