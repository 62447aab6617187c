#include "evflow/denoiser.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "evflow/error.hpp"
#include "evflow/flow.hpp"

namespace evflow::model {

using ad::Var;

std::size_t ModelConfig::token_divisor() const noexcept {
  std::size_t d = 1;
  for (std::size_t l = 1; l < M; ++l) d *= resample;
  return d;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (W == 0 || patch == 0 || M == 0 || d_model == 0 || d_state == 0 || m_state == 0 || d_text == 0 || d_ff == 0 ||
      n_heads == 0 || d_time == 0)
    fail("all sizes must be positive");
  if (W % patch != 0) fail("W=" + std::to_string(W) + " is not divisible by patch=" + std::to_string(patch));
  if (resample != 2) fail("only resample=2 is supported (token pairs are merged and split)");
  if (!stacked && tokens() % token_divisor() != 0)
    fail("W/patch=" + std::to_string(tokens()) + " is not divisible by resample^(M-1)=" +
         std::to_string(token_divisor()));
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_time % 2 != 0) fail("d_time must be even");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"W", c.W},
          {"patch", c.patch},
          {"M", c.M},
          {"d_model", c.d_model},
          {"d_state", c.d_state},
          {"m_state", c.m_state},
          {"d_text", c.d_text},
          {"d_ff", c.d_ff},
          {"n_heads", c.n_heads},
          {"resample", c.resample},
          {"d_time", c.d_time},
          {"stacked", c.stacked}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.W = j.at("W").get<std::size_t>();
    c.patch = j.at("patch").get<std::size_t>();
    c.M = j.at("M").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_state = j.at("d_state").get<std::size_t>();
    c.m_state = j.at("m_state").get<std::size_t>();
    c.d_text = j.at("d_text").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.resample = j.at("resample").get<std::size_t>();
    c.d_time = j.at("d_time").get<std::size_t>();
    c.stacked = j.at("stacked").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- scope -------------------------------------------------------------------------

Scope::Scope(ad::Graph& g, Denoiser& model, double dropout, ad::Rng* rng)
    : graph_(&g), model_(&model), dropout_(dropout), rng_(rng), bound_(model.parameters().size()) {
  if (dropout > 0.0 && rng == nullptr) throw std::invalid_argument("Scope: dropout requires an rng");
}

Var Scope::p(int index) {
  auto& slot = bound_.at(static_cast<std::size_t>(index));
  if (!slot.valid()) slot = graph_->param(model_->parameters()[static_cast<std::size_t>(index)]);
  return slot;
}

// ---- construction ----------------------------------------------------------------------

int Denoiser::add(std::string name, std::size_t rows, std::size_t cols) {
  const int idx = static_cast<int>(params_.size());
  index_.emplace(name, idx);
  params_.push_back({std::move(name), Matrix(rows, cols), {}});
  return idx;
}

Denoiser::Denoiser(const ModelConfig& config, InitMode mode, std::uint64_t seed) : config_(config) {
  config_.validate();
  const auto& c = config_;
  const std::size_t d = c.d_model;

  // Tensors that start at zero in Standard mode.
  std::vector<int> zero_init;
  std::vector<int> biases;

  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    const int w = add(name + ".w", in, out);
    const int b = add(name + ".b", 1, out);
    biases.push_back(b);
    return std::pair<int, int>{w, b};
  };
  auto cond = [&](const std::string& name) {
    CondParams p{};
    std::tie(p.t1_w, p.t1_b) = linear(name + ".time1", c.d_time, d);
    std::tie(p.t2_w, p.t2_b) = linear(name + ".time2", d, d);
    std::tie(p.c_w, p.c_b) = linear(name + ".event", c.d_text, d);
    return p;
  };
  auto attn = [&](const std::string& name, std::size_t dq, std::size_t dkv, std::size_t dout) {
    AttnParams p{};
    std::tie(p.q_w, p.q_b) = linear(name + ".q", dq, d);
    std::tie(p.k_w, p.k_b) = linear(name + ".k", dkv, d);
    std::tie(p.v_w, p.v_b) = linear(name + ".v", dkv, d);
    std::tie(p.o_w, p.o_b) = linear(name + ".o", d, dout);
    return p;
  };
  auto block = [&](const std::string& name) {
    BlockParams b{};
    std::tie(b.mod_w, b.mod_b) = linear(name + ".mod", d, 6 * d);
    zero_init.push_back(b.mod_w);
    zero_init.push_back(b.mod_b);
    std::tie(b.qkv_w, b.qkv_b) = linear(name + ".qkv", d, 3 * d);
    std::tie(b.attn_w, b.attn_b) = linear(name + ".attn_out", d, d);
    std::tie(b.ff1_w, b.ff1_b) = linear(name + ".ff1", d, c.d_ff);
    std::tie(b.ff2_w, b.ff2_b) = linear(name + ".ff2", c.d_ff, d);
    return b;
  };

  std::tie(embed_w, embed_b) = linear("embed", c.patch, d);
  pos = add("pos", c.tokens(), d);
  z0 = add("z0", c.m_state, c.d_state);
  std::tie(zproj_w, zproj_b) = linear("fuse.zproj", c.d_state, d);
  fuse = attn("fuse", d, d, d);
  cond_e = cond("cond_e");
  cond_b = cond("cond_b");
  cond_d = cond("cond_d");
  for (std::size_t l = 1; l <= c.M; ++l) {
    enc.push_back(block("enc" + std::to_string(l)));
    if (!c.stacked && l < c.M) down.push_back(linear("down" + std::to_string(l), 2 * d, d).first);
  }
  bottleneck = block("mid");
  for (std::size_t l = 1; l <= c.M; ++l) {
    if (!c.stacked && l > 1) up.push_back(linear("up" + std::to_string(l), d, 2 * d).first);
    if (!c.stacked) {
      skip_alpha.push_back(add("skip" + std::to_string(l) + ".alpha", 1, d));
      zero_init.push_back(skip_alpha.back());
    }
    dec.push_back(block("dec" + std::to_string(l)));
  }
  out_gate = add("out_gate", 1, d);
  zero_init.push_back(out_gate);
  std::tie(head_w, head_b) = linear("head", d, c.patch);
  state = attn("state", c.d_state, d, c.d_state);
  std::tie(delta_w, delta_b) = linear("delta", c.d_text, 1);
  zero_init.push_back(delta_w);
  zero_init.push_back(delta_b);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<bool> is_zero(params_.size(), false), is_bias(params_.size(), false);
  for (int i : zero_init) is_zero[static_cast<std::size_t>(i)] = true;
  for (int i : biases) is_bias[static_cast<std::size_t>(i)] = true;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Matrix& v = params_[i].value;
    const bool randomized = mode == InitMode::Randomized;
    if (static_cast<int>(i) == pos || static_cast<int>(i) == z0) {
      const double sd = mode == InitMode::Randomized ? 0.5 : 0.02;
      for (double& x : v.data) x = sd * normal(rng);
    } else if (is_zero[i] || is_bias[i]) {
      if (randomized)
        for (double& x : v.data) x = (is_bias[i] && !is_zero[i] ? 0.1 : 0.2) * normal(rng);
    } else {
      // Xavier uniform on [in x out] weights.
      const double a = std::sqrt(6.0 / static_cast<double>(v.rows + v.cols));
      std::uniform_real_distribution<double> u(-a, a);
      for (double& x : v.data) x = u(rng);
    }
  }
}

ad::Parameter& Denoiser::param(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return params_[static_cast<std::size_t>(it->second)];
}

const ad::Parameter& Denoiser::param(std::string_view name) const {
  return const_cast<Denoiser*>(this)->param(name);
}

bool Denoiser::has_param(std::string_view name) const { return index_.count(std::string(name)) != 0; }

std::size_t Denoiser::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Denoiser::zero_grad() {
  for (auto& p : params_) p.grad = Matrix();
}

// ---- forward pieces ---------------------------------------------------------------------

Conditioning Denoiser::condition(Scope& s, Var t, Var c) {
  auto& g = s.graph();
  const std::size_t half = config_.d_time / 2;
  Matrix freqs(1, half);
  for (std::size_t j = 0; j < half; ++j)
    freqs.data[j] = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
  Var arg = ad::matmul(ad::scale(t, 100.0), g.constant(std::move(freqs)));
  Var emb = ad::concat_cols(ad::sin(arg), ad::cos(arg));
  auto one = [&](const CondParams& p) {
    Var phi = ad::linear(ad::silu(ad::linear(emb, s.p(p.t1_w), s.p(p.t1_b))), s.p(p.t2_w), s.p(p.t2_b));
    return ad::add(phi, ad::linear(c, s.p(p.c_w), s.p(p.c_b)));
  };
  return {one(cond_e), one(cond_b), one(cond_d)};
}

Var Denoiser::tokenize(Scope& s, Var x_t) {
  if (x_t.cols() != config_.W)
    throw std::invalid_argument("tokenize: segment length " + std::to_string(x_t.cols()) + ", expected " +
                                std::to_string(config_.W));
  Var patches = ad::reshape(x_t, x_t.rows() * config_.tokens(), config_.patch);
  return ad::add_tiled(ad::linear(patches, s.p(embed_w), s.p(embed_b)), s.p(pos));
}

Var Denoiser::attend(Scope& s, const AttnParams& a, Var queries, Var kv, std::size_t groups) {
  Var q = ad::linear(queries, s.p(a.q_w), s.p(a.q_b));
  Var k = ad::linear(kv, s.p(a.k_w), s.p(a.k_b));
  Var v = ad::linear(kv, s.p(a.v_w), s.p(a.v_b));
  Var o = ad::attention(q, k, v, groups, config_.n_heads, s.dropout(), s.rng());
  return ad::linear(o, s.p(a.o_w), s.p(a.o_b));
}

Var Denoiser::fuse_history(Scope& s, Var tokens, Var z_prev, std::size_t groups) {
  if (tokens.cols() != config_.d_model || z_prev.cols() != config_.d_state || z_prev.rows() != groups * config_.m_state)
    throw std::invalid_argument("fuse_history: shape mismatch tokens" + tokens.value().shape_str() + " state" +
                                z_prev.value().shape_str());
  Var zp = ad::linear(z_prev, s.p(zproj_w), s.p(zproj_b));
  return ad::add(tokens, attend(s, fuse, tokens, zp, groups));
}

Var Denoiser::dit_block(Scope& s, const BlockParams& b, Var x, Var g, std::size_t groups) {
  const std::size_t d = config_.d_model;
  if (x.cols() != d || g.cols() != d || g.rows() != groups || x.rows() % groups != 0)
    throw std::invalid_argument("dit_block: shape mismatch x" + x.value().shape_str() + " g" + g.value().shape_str());
  Var mod = ad::linear(ad::silu(g), s.p(b.mod_w), s.p(b.mod_b));
  auto chunk = [&](std::size_t i) { return ad::slice_cols(mod, i * d, (i + 1) * d); };
  Var shift1 = chunk(0), scale1 = chunk(1), gate1 = chunk(2), shift2 = chunk(3), scale2 = chunk(4), gate2 = chunk(5);

  Var h = ad::group_add(ad::group_mul(ad::layer_norm(x), ad::add_scalar(scale1, 1.0)), shift1);
  Var qkv = ad::linear(h, s.p(b.qkv_w), s.p(b.qkv_b));
  Var a = ad::attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, 2 * d), ad::slice_cols(qkv, 2 * d, 3 * d),
                        groups, config_.n_heads, s.dropout(), s.rng());
  a = ad::linear(a, s.p(b.attn_w), s.p(b.attn_b));
  x = ad::add(x, ad::group_mul(a, gate1));

  Var h2 = ad::group_add(ad::group_mul(ad::layer_norm(x), ad::add_scalar(scale2, 1.0)), shift2);
  Var f = ad::gelu(ad::linear(h2, s.p(b.ff1_w), s.p(b.ff1_b)));
  f = ad::dropout(f, s.dropout(), s.rng());
  f = ad::linear(f, s.p(b.ff2_w), s.p(b.ff2_b));
  return ad::add(x, ad::group_mul(f, gate2));
}

Var Denoiser::downsample(Scope& s, std::size_t level, Var x) {
  if (x.rows() % 2 != 0) throw std::invalid_argument("downsample: odd token count " + std::to_string(x.rows()));
  const int w = down.at(level - 1);
  Var merged = ad::reshape(x, x.rows() / 2, 2 * x.cols());
  return ad::linear(merged, s.p(w), s.p(w + 1));
}

Var Denoiser::upsample(Scope& s, std::size_t level, Var x) {
  const int w = up.at(level - 2);
  Var wide = ad::linear(x, s.p(w), s.p(w + 1));
  return ad::reshape(wide, x.rows() * 2, x.cols());
}

Var Denoiser::u_dit(Scope& s, Var x_e0, const Conditioning& g, std::size_t groups) {
  const std::size_t M = config_.M;
  if (x_e0.rows() % groups != 0 || (x_e0.rows() / groups) % config_.token_divisor() != 0)
    throw std::invalid_argument("u_dit: token count is not divisible by resample^(M-1)");
  Var x = x_e0;
  if (config_.stacked) {
    for (std::size_t l = 0; l < M; ++l) x = dit_block(s, enc[l], x, g.g_e, groups);
    x = dit_block(s, bottleneck, x, g.g_b, groups);
    for (std::size_t l = 0; l < M; ++l) x = dit_block(s, dec[l], x, g.g_d, groups);
  } else {
    std::vector<Var> skips;
    for (std::size_t l = 1; l <= M; ++l) {
      Var xt = dit_block(s, enc[l - 1], x, g.g_e, groups);
      skips.push_back(xt);
      x = l < M ? downsample(s, l, xt) : xt;
    }
    x = dit_block(s, bottleneck, x, g.g_b, groups);
    for (std::size_t l = 1; l <= M; ++l) {
      if (l > 1) x = upsample(s, l, x);
      Var skip = ad::mul_row(skips[M - l], s.p(skip_alpha[l - 1]));
      x = dit_block(s, dec[l - 1], ad::add(x, skip), g.g_d, groups);
    }
  }
  return ad::add(x_e0, ad::mul_row(x, s.p(out_gate)));
}

Var Denoiser::state_update(Scope& s, Var out_tokens, Var z_prev, std::size_t groups) {
  return ad::add(z_prev, attend(s, state, z_prev, ad::layer_norm(out_tokens), groups));
}

Var Denoiser::event_delta(Scope& s, Var c) { return ad::sigmoid(ad::linear(c, s.p(delta_w), s.p(delta_b))); }

Var Denoiser::initial_state(Scope& s, std::size_t groups) { return ad::tile_rows(s.p(z0), groups); }

DenoiseOutput Denoiser::denoise(Scope& s, Var x_t, Var z_prev, Var c, Var t) {
  const std::size_t G = x_t.rows();
  if (c.rows() != G || c.cols() != config_.d_text)
    throw std::invalid_argument("denoise: event embedding shape " + c.value().shape_str());
  if (t.rows() != G || t.cols() != 1) throw std::invalid_argument("denoise: timestep shape " + t.value().shape_str());
  Var tokens = tokenize(s, x_t);
  Var x_e0 = fuse_history(s, tokens, z_prev, G);
  Conditioning g = condition(s, t, c);
  Var out = u_dit(s, x_e0, g, G);
  Var v = ad::reshape(ad::linear(ad::layer_norm(out), s.p(head_w), s.p(head_b)), G, config_.W);
  Var z_new = state_update(s, out, z_prev, G);
  return {v, z_new};
}

// ---- plain-value wrappers ------------------------------------------------------------------

namespace {
Matrix row_matrix(std::span<const double> v) { return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end())); }

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite input");
}
}  // namespace

ConditioningVectors condition_vectors(Denoiser& m, double t, std::span<const double> c) {
  if (!std::isfinite(t)) throw NumericalError("condition_vectors: non-finite t");
  require_finite(c, "condition_vectors");
  ad::Graph g(false);
  Scope s(g, m);
  auto cv = m.condition(s, g.constant(Matrix(1, 1, t)), g.constant(row_matrix(c)));
  return {cv.g_e.value().data, cv.g_b.value().data, cv.g_d.value().data};
}

Matrix fuse_history(Denoiser& m, const Matrix& tokens, const Matrix& z_prev) {
  ad::Graph g(false);
  Scope s(g, m);
  return m.fuse_history(s, g.constant(tokens), g.constant(z_prev), 1).value();
}

Matrix u_dit_forward(Denoiser& m, const Matrix& x_e0, double t, std::span<const double> c) {
  ad::Graph g(false);
  Scope s(g, m);
  auto cv = m.condition(s, g.constant(Matrix(1, 1, t)), g.constant(row_matrix(c)));
  return m.u_dit(s, g.constant(x_e0), cv, 1).value();
}

DenoiseResult denoise(Denoiser& m, std::span<const double> x_t, const Matrix& z_prev, std::span<const double> c,
                      double t, double dropout, ad::Rng* rng) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("denoise: t outside [0, 1]");
  ad::Graph g(false);
  Scope s(g, m, dropout, rng);
  auto out = m.denoise(s, g.constant(row_matrix(x_t)), g.constant(z_prev), g.constant(row_matrix(c)),
                       g.constant(Matrix(1, 1, t)));
  return {out.v_hat.value().data, out.z_new.value()};
}

Matrix initial_state(const Denoiser& m) { return m.parameters()[static_cast<std::size_t>(m.z0)].value; }

double event_delta(const Denoiser& m, std::span<const double> c) {
  const auto& w = m.parameters()[static_cast<std::size_t>(m.delta_w)].value;
  const auto& b = m.parameters()[static_cast<std::size_t>(m.delta_b)].value;
  return flow::event_delta(c, flow::DeltaHead{w.data, b.data[0]});
}

}  // namespace evflow::model
