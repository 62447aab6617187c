#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evflow/dataset.hpp"
#include "evflow/denoiser.hpp"
#include "evflow/forecasting.hpp"
#include "evflow/training.hpp"

namespace evflow::cli {

/// Flat key=value run configuration. Every key has a default; unknown keys
/// are rejected.
class RunConfig {
 public:
  RunConfig();

  /// Reads "key = value" lines; '#' starts a comment.
  void load_file(const std::filesystem::path& path);
  /// Applies one "key=value" override.
  void assign(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  double number(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> list(const std::string& key) const;

  /// FNV-1a over the sorted "key=value" lines.
  std::string hash() const;
  nlohmann::json to_json() const;
  const std::map<std::string, std::string>& values() const noexcept { return kv_; }

  data::SyntheticConfig synthetic() const;
  model::ModelConfig model() const;
  train::TrainConfig train() const;
  forecast::ForecastConfig forecast() const;

 private:
  std::map<std::string, std::string> kv_;
};

/// Output root: $EVFLOW_OUT or "runs".
std::filesystem::path output_root();

/// Windows of a split ("train", "val" or "test") under the config's p, q,
/// stride and split fractions.
std::vector<data::WindowSample> split_windows(const data::MultimodalDataset& d, const RunConfig& cfg,
                                              const std::string& split);

/// Deterministic SVG of one forecast window.
std::string render_svg(const data::WindowSample& w, const forecast::ForecastEnsemble& e, const std::string& caption);

/// Runs the command line; returns the process exit code.
int run(std::vector<std::string> args, std::ostream& out, std::ostream& err);

}  // namespace evflow::cli
