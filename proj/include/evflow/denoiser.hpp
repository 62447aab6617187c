#pragma once

// Multimodal U-shaped diffusion transformer. One call maps a noisy segment,
// the latent state, the event embedding and the diffusion time to a velocity
// estimate and the next latent state.
//
// All graph-level entry points work on a batch of G independent samples laid
// out row-block-wise: tokens are [G*n x d_model], the state is
// [G*m_state x d_state], per-sample vectors are [G x .].

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "evflow/autograd.hpp"
#include "evflow/matrix.hpp"

namespace evflow::model {

struct ModelConfig {
  std::size_t W = 24;
  std::size_t patch = 1;
  std::size_t M = 3;
  std::size_t d_model = 256;
  std::size_t d_state = 48;
  std::size_t m_state = 4;
  std::size_t d_text = 128;
  std::size_t d_ff = 1024;
  std::size_t n_heads = 4;
  std::size_t resample = 2;
  std::size_t d_time = 64;
  /// 2M+1 full-resolution blocks with no resampling or skips.
  bool stacked = false;

  std::size_t tokens() const noexcept { return W / patch; }
  /// resample^(M-1), the divisor tokens() must honor.
  std::size_t token_divisor() const noexcept;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class InitMode {
  /// Zero gates, zero skip scales, zero output gate and zero delta head.
  Standard,
  /// Every tensor random; used to exercise all gradient paths.
  Randomized,
};

struct BlockParams {
  int mod_w, mod_b, qkv_w, qkv_b, attn_w, attn_b, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct CondParams {
  int t1_w, t1_b, t2_w, t2_b, c_w, c_b;
};

struct AttnParams {
  int q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
};

struct Conditioning {
  ad::Var g_e, g_b, g_d;
};

struct DenoiseOutput {
  ad::Var v_hat;  // [G x W]
  ad::Var z_new;  // [G*m_state x d_state]
};

class Denoiser;

/// Graph-side view of the parameters: binds each tensor to one leaf per graph.
class Scope {
 public:
  Scope(ad::Graph& g, Denoiser& model, double dropout = 0.0, ad::Rng* rng = nullptr);

  ad::Graph& graph() const noexcept { return *graph_; }
  Denoiser& model() const noexcept { return *model_; }
  double dropout() const noexcept { return dropout_; }
  ad::Rng* rng() const noexcept { return rng_; }
  ad::Var p(int index);

 private:
  ad::Graph* graph_;
  Denoiser* model_;
  double dropout_;
  ad::Rng* rng_;
  std::vector<ad::Var> bound_;
};

class Denoiser {
 public:
  explicit Denoiser(const ModelConfig& config, InitMode mode = InitMode::Standard, std::uint64_t seed = 0);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<ad::Parameter>& parameters() noexcept { return params_; }
  const std::vector<ad::Parameter>& parameters() const noexcept { return params_; }
  ad::Parameter& param(std::string_view name);
  const ad::Parameter& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  std::size_t scalar_count() const;
  void zero_grad();

  // ---- graph-level pieces -------------------------------------------------
  /// t is [G x 1], c is [G x d_text].
  Conditioning condition(Scope& s, ad::Var t, ad::Var c);
  /// x_t [G x W] -> tokens [G*n x d_model] with positional encoding.
  ad::Var tokenize(Scope& s, ad::Var x_t);
  ad::Var fuse_history(Scope& s, ad::Var tokens, ad::Var z_prev, std::size_t groups);
  ad::Var dit_block(Scope& s, const BlockParams& b, ad::Var x, ad::Var g, std::size_t groups);
  /// level is 1-based: down_l follows encoder layer l (l < M), up_l precedes decoder layer l (l > 1).
  ad::Var downsample(Scope& s, std::size_t level, ad::Var x);
  ad::Var upsample(Scope& s, std::size_t level, ad::Var x);
  ad::Var u_dit(Scope& s, ad::Var x_e0, const Conditioning& g, std::size_t groups);
  ad::Var state_update(Scope& s, ad::Var out_tokens, ad::Var z_prev, std::size_t groups);
  /// sigmoid(affine(c)), [G x 1].
  ad::Var event_delta(Scope& s, ad::Var c);
  /// Z_0 repeated for G samples.
  ad::Var initial_state(Scope& s, std::size_t groups);
  DenoiseOutput denoise(Scope& s, ad::Var x_t, ad::Var z_prev, ad::Var c, ad::Var t);

  // ---- parameter-index tables -----------------------------------------------
  std::vector<BlockParams> enc, dec;
  BlockParams bottleneck{};
  std::vector<int> down, up, skip_alpha;  // down[l-1] for l<M; up[l-2] for l>1; skip_alpha[l-1]
  CondParams cond_e{}, cond_b{}, cond_d{};
  AttnParams fuse{}, state{};
  int embed_w = -1, embed_b = -1, pos = -1, zproj_w = -1, zproj_b = -1, out_gate = -1;
  int head_w = -1, head_b = -1, delta_w = -1, delta_b = -1, z0 = -1;

 private:
  int add(std::string name, std::size_t rows, std::size_t cols);
  ad::Var attend(Scope& s, const AttnParams& a, ad::Var queries, ad::Var keys_values, std::size_t groups);

  ModelConfig config_;
  std::vector<ad::Parameter> params_;
  std::unordered_map<std::string, int> index_;
};

// ---- plain-value conveniences (single sample, no gradients) --------------------

struct ConditioningVectors {
  std::vector<double> g_e, g_b, g_d;
};

ConditioningVectors condition_vectors(Denoiser& m, double t, std::span<const double> c);
Matrix fuse_history(Denoiser& m, const Matrix& tokens, const Matrix& z_prev);
Matrix u_dit_forward(Denoiser& m, const Matrix& x_e0, double t, std::span<const double> c);

struct DenoiseResult {
  std::vector<double> v_hat;
  Matrix z_new;
};
DenoiseResult denoise(Denoiser& m, std::span<const double> x_t, const Matrix& z_prev, std::span<const double> c,
                      double t, double dropout = 0.0, ad::Rng* rng = nullptr);

/// Z_0 as a plain matrix.
Matrix initial_state(const Denoiser& m);
double event_delta(const Denoiser& m, std::span<const double> c);

// ---- checkpoint ----------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named-tensor container: header JSON plus tensors, with a trailing CRC32.
struct TensorFile {
  nlohmann::json header;
  std::vector<std::pair<std::string, Matrix>> tensors;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

/// Saves the config (plus free-form metadata) and every parameter.
void save_checkpoint(const std::filesystem::path& path, const Denoiser& model, const nlohmann::json& meta = {});

struct LoadedCheckpoint {
  Denoiser model;
  nlohmann::json meta;
};
/// Rebuilds the model from the stored config and checks every tensor shape.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evflow::model
