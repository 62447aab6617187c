#pragma once

// Multimodal dataset model: a univariate series tiled by event segments, each
// carrying a text description and its embedding.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace evflow::data {

/// One event span. Indices are 1-based and inclusive.
struct EventSegment {
  std::size_t start = 1;
  std::size_t end = 1;
  std::string description;
  std::vector<double> embedding;

  std::size_t length() const noexcept { return end - start + 1; }
};

struct MultimodalDataset {
  std::vector<double> values;
  std::vector<EventSegment> segments;
  std::string name = "dataset";
  std::string frequency = "";
  std::uint64_t seed = 0;

  std::size_t length() const noexcept { return values.size(); }
  /// Common segment length; 0 when there are no segments.
  std::size_t segment_length() const noexcept { return segments.empty() ? 0 : segments.front().length(); }
  std::size_t embedding_dim() const noexcept { return segments.empty() ? 0 : segments.front().embedding.size(); }
  std::span<const double> segment_values(std::size_t s) const {
    const auto& seg = segments.at(s);
    return std::span<const double>(values).subspan(seg.start - 1, seg.length());
  }
};

enum class ViolationKind { Empty, BadBounds, Ordering, Overlap, Gap, RaggedLength, Embedding, NonFinite };

const char* violation_name(ViolationKind k);

struct Violation {
  ViolationKind kind;
  std::size_t segment = 0;  // 0-based segment the violation was detected at
  std::size_t first = 0;    // 1-based timestamp range involved
  std::size_t last = 0;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const noexcept { return violations.empty(); }
  bool has(ViolationKind k) const;
};

/// Checks ordering, overlap, coverage of [1, L] (uncovered ranges are Gap
/// violations), uniform segment length and unit-norm embeddings. Never throws; every problem becomes a Violation.
ValidationReport validate_dataset(const MultimodalDataset& dataset);

// ---- synthetic waveforms ------------------------------------------------------

enum class WaveCategory { Sine = 0, Triangle = 1, Sawtooth = 2, NearSquare = 3 };
inline constexpr std::size_t kWaveCategories = 4;

const char* category_name(WaveCategory c);
/// One period of the category's waveform at phase tau in [0, 1), amplitude 1.
double waveform(WaveCategory c, double tau);
/// "<category> wave" or "<category> wave with noise".
std::string describe(WaveCategory c, bool noisy);

struct SyntheticConfig {
  std::size_t n_waves = 1095;
  std::size_t points_per_wave = 24;
  // Indexed by WaveCategory: sine, triangle, sawtooth, near-square.
  std::array<double, kWaveCategories> category_weights{0.356, 0.322, 0.082, 0.24};
  std::vector<double> noise_levels{0.0, 0.05, 0.10};
  std::uint64_t seed = 0;
  std::size_t d_text = 128;
  std::uint64_t embed_seed = 0;
  /// points_per_wave must be divisible by this (resample^(M-1) of the model).
  std::size_t required_divisor = 4;

  void validate() const;
};

/// Generated dataset plus the per-segment category labels.
struct SyntheticDataset {
  MultimodalDataset dataset;
  std::vector<WaveCategory> categories;
  std::vector<double> noise_std;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& config);

// ---- event embeddings -----------------------------------------------------------

/// 64-bit FNV-1a; the hash behind embed_event.
std::uint64_t fnv1a(std::string_view text) noexcept;

/// Deterministic unit-norm embedding of a description: standard normals from a
/// generator seeded by (hash(description), d_text, seed), then normalized.
std::vector<double> embed_event(std::string_view description, std::size_t d_text, std::uint64_t seed);

// ---- normalization ---------------------------------------------------------------

struct ZScore {
  double mean = 0.0;
  double std = 1.0;
};

/// Population mean/std of the values; std below 1e-8 is replaced by 1.
ZScore zscore_fit(std::span<const double> values);
std::vector<double> zscore_apply(std::span<const double> x, const ZScore& stats);
std::vector<double> zscore_invert(std::span<const double> x, const ZScore& stats);

// ---- windows -----------------------------------------------------------------------

/// p history pairs followed by q future pairs, consecutive in the source.
/// Values are stored in original units; `normalization` is fit on history only.
struct WindowSample {
  std::size_t first_segment = 0;  // 0-based index of the first history segment
  std::vector<std::vector<double>> history_values;
  std::vector<std::vector<double>> history_events;
  std::vector<std::vector<double>> future_events;
  std::vector<std::vector<double>> future_values;
  ZScore normalization;

  std::size_t p() const noexcept { return history_values.size(); }
  std::size_t q() const noexcept { return future_values.size(); }
  std::size_t segment_length() const noexcept { return history_values.empty() ? 0 : history_values.front().size(); }
};

/// Sliding windows of p + q consecutive segments starting every `stride`
/// segments, restricted to segments [begin, end) when given.
std::vector<WindowSample> make_windows(const MultimodalDataset& dataset, std::size_t p, std::size_t q,
                                       std::size_t stride, std::size_t begin = 0, std::size_t end = SIZE_MAX);

/// Chronological segment ranges for train / validation / test.
struct SplitRanges {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t test_end = 0;
};
SplitRanges split_segments(std::size_t n_segments, double train_frac, double val_frac);

/// Replaces every event embedding with fresh N(0, I) draws.
void replace_events_with_noise(WindowSample& sample, std::mt19937_64& rng);

// ---- persistence ---------------------------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

/// Writes manifest.json, series.f64 and events.jsonl into `dir`.
void save_dataset(const MultimodalDataset& dataset, const std::filesystem::path& dir,
                  std::string_view config_hash = {});
/// Reads and validates a dataset directory; throws DataError on any problem.
MultimodalDataset load_dataset(const std::filesystem::path& dir);

}  // namespace evflow::data
