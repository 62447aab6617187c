#include "evflow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "evflow/error.hpp"
#include "evflow/io.hpp"

namespace evflow::data {

namespace fs = std::filesystem;
using nlohmann::json;

const char* violation_name(ViolationKind k) {
  switch (k) {
    case ViolationKind::Empty: return "empty";
    case ViolationKind::BadBounds: return "bounds";
    case ViolationKind::Ordering: return "ordering";
    case ViolationKind::Overlap: return "overlap";
    case ViolationKind::Gap: return "gap";
    case ViolationKind::RaggedLength: return "ragged-length";
    case ViolationKind::Embedding: return "embedding";
    case ViolationKind::NonFinite: return "non-finite";
  }
  return "unknown";
}

bool ValidationReport::has(ViolationKind k) const {
  return std::any_of(violations.begin(), violations.end(), [k](const Violation& v) { return v.kind == k; });
}

namespace {
std::string range_str(std::size_t a, std::size_t b) {
  return "[" + std::to_string(a) + ", " + std::to_string(b) + "]";
}
}  // namespace

ValidationReport validate_dataset(const MultimodalDataset& d) {
  ValidationReport r;
  auto add = [&r](ViolationKind k, std::size_t seg, std::size_t first, std::size_t last, std::string msg) {
    r.violations.push_back({k, seg, first, last, std::move(msg)});
  };
  const std::size_t L = d.values.size();
  if (d.segments.empty()) {
    add(ViolationKind::Empty, 0, 0, 0, "dataset has no segments");
    return r;
  }
  for (std::size_t i = 0; i < L; ++i)
    if (!std::isfinite(d.values[i])) {
      add(ViolationKind::NonFinite, 0, i + 1, i + 1, "non-finite value at index " + std::to_string(i + 1));
      break;
    }

  const std::size_t W = d.segments.front().length();
  const std::size_t dt = d.segments.front().embedding.size();
  std::size_t covered_to = 0;  // highest index covered so far
  for (std::size_t s = 0; s < d.segments.size(); ++s) {
    const auto& seg = d.segments[s];
    const std::string tag = "segment " + std::to_string(s + 1) + " " + range_str(seg.start, seg.end);
    if (seg.start < 1 || seg.start > seg.end || seg.end > L) {
      add(ViolationKind::BadBounds, s, seg.start, seg.end, tag + " lies outside [1, " + std::to_string(L) + "]");
      continue;
    }
    if (seg.length() != W)
      add(ViolationKind::RaggedLength, s, seg.start, seg.end,
          tag + " has length " + std::to_string(seg.length()) + ", expected " + std::to_string(W));
    if (s > 0 && seg.start < d.segments[s - 1].start)
      add(ViolationKind::Ordering, s, seg.start, seg.end, tag + " starts before its predecessor");
    if (seg.start <= covered_to) {
      const std::size_t last = std::min(covered_to, seg.end);
      add(ViolationKind::Overlap, s, seg.start, last, tag + " overlaps earlier segments on " + range_str(seg.start, last));
    } else if (seg.start > covered_to + 1) {
      add(ViolationKind::Gap, s, covered_to + 1, seg.start - 1,
          "coverage gap " + range_str(covered_to + 1, seg.start - 1));
    }
    covered_to = std::max(covered_to, seg.end);

    if (seg.embedding.size() != dt || dt == 0) {
      add(ViolationKind::Embedding, s, seg.start, seg.end,
          tag + " embedding length " + std::to_string(seg.embedding.size()) + ", expected " + std::to_string(dt));
    } else {
      double n2 = 0.0;
      bool finite = true;
      for (double v : seg.embedding) {
        finite = finite && std::isfinite(v);
        n2 += v * v;
      }
      if (!finite || std::abs(std::sqrt(n2) - 1.0) > 1e-9)
        add(ViolationKind::Embedding, s, seg.start, seg.end, tag + " embedding is not unit norm");
    }
  }
  if (covered_to < L)
    add(ViolationKind::Gap, d.segments.size() - 1, covered_to + 1, L, "coverage gap " + range_str(covered_to + 1, L));
  return r;
}

// ---- synthetic ------------------------------------------------------------------

const char* category_name(WaveCategory c) {
  switch (c) {
    case WaveCategory::Sine: return "sine";
    case WaveCategory::Triangle: return "triangle";
    case WaveCategory::Sawtooth: return "sawtooth";
    case WaveCategory::NearSquare: return "near-square";
  }
  return "unknown";
}

double waveform(WaveCategory c, double tau) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (c) {
    case WaveCategory::Sine: return std::sin(two_pi * tau);
    case WaveCategory::Triangle:
      if (tau < 0.25) return 4.0 * tau;
      if (tau < 0.75) return 2.0 - 4.0 * tau;
      return 4.0 * tau - 4.0;
    case WaveCategory::Sawtooth: {
      const double u = tau + 0.5;
      return 2.0 * (u - std::floor(u)) - 1.0;
    }
    case WaveCategory::NearSquare: return std::tanh(5.0 * std::sin(two_pi * tau));
  }
  return 0.0;
}

std::string describe(WaveCategory c, bool noisy) {
  std::string s = std::string(category_name(c)) + " wave";
  if (noisy) s += " with noise";
  return s;
}

void SyntheticConfig::validate() const {
  if (n_waves == 0) throw ConfigError("n_waves must be positive");
  if (points_per_wave == 0) throw ConfigError("points_per_wave must be positive");
  if (d_text == 0) throw ConfigError("d_text must be positive");
  if (required_divisor == 0 || points_per_wave % required_divisor != 0)
    throw ConfigError("points_per_wave=" + std::to_string(points_per_wave) + " is not divisible by " +
                      std::to_string(required_divisor));
  double total = 0.0;
  for (double w : category_weights) {
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("category weights must be finite and nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("category weights sum to " + std::to_string(total) + ", not 1");
  if (noise_levels.empty()) throw ConfigError("noise_levels must not be empty");
  for (double v : noise_levels)
    if (!std::isfinite(v) || v < 0.0) throw ConfigError("noise levels must be finite and nonnegative");
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticDataset out;
  auto& d = out.dataset;
  d.name = "synthetic";
  d.frequency = "wave";
  d.seed = cfg.seed;
  const std::size_t W = cfg.points_per_wave;
  d.values.reserve(cfg.n_waves * W);
  d.segments.reserve(cfg.n_waves);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_noise(0, cfg.noise_levels.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::unordered_map<std::string, std::vector<double>> embeddings;

  for (std::size_t w = 0; w < cfg.n_waves; ++w) {
    const double u = unif(rng);
    std::size_t k = 0;
    double acc = cfg.category_weights[0];
    while (k + 1 < kWaveCategories && (u >= acc || cfg.category_weights[k] == 0.0)) acc += cfg.category_weights[++k];
    const auto cat = static_cast<WaveCategory>(k);
    const double sigma = cfg.noise_levels[pick_noise(rng)];

    EventSegment seg;
    seg.start = d.values.size() + 1;
    for (std::size_t l = 0; l < W; ++l) {
      double v = waveform(cat, static_cast<double>(l) / static_cast<double>(W));
      if (sigma > 0.0) v += sigma * normal(rng);
      d.values.push_back(v);
    }
    seg.end = d.values.size();
    seg.description = describe(cat, sigma > 0.0);
    auto it = embeddings.find(seg.description);
    if (it == embeddings.end())
      it = embeddings.emplace(seg.description, embed_event(seg.description, cfg.d_text, cfg.embed_seed)).first;
    seg.embedding = it->second;
    d.segments.push_back(std::move(seg));
    out.categories.push_back(cat);
    out.noise_std.push_back(sigma);
  }
  return out;
}

// ---- embeddings ------------------------------------------------------------------

std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<double> embed_event(std::string_view description, std::size_t d_text, std::uint64_t seed) {
  if (d_text == 0) throw ConfigError("embed_event: d_text must be positive");
  if (description.empty()) throw ConfigError("embed_event: empty description");
  const std::uint64_t h = fnv1a(description);
  std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(d_text);
  double n2 = 0.0;
  for (auto& x : v) {
    x = normal(rng);
    n2 += x * x;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (auto& x : v) x *= inv;
  return v;
}

// ---- normalization -------------------------------------------------------------------

ZScore zscore_fit(std::span<const double> values) {
  if (values.empty()) throw DataError("zscore_fit: empty history");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  double sd = std::sqrt(ss / n);
  if (!(sd >= 1e-8)) sd = 1.0;
  return {mean, sd};
}

std::vector<double> zscore_apply(std::span<const double> x, const ZScore& st) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - st.mean) / st.std;
  return out;
}

std::vector<double> zscore_invert(std::span<const double> x, const ZScore& st) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * st.std + st.mean;
  return out;
}

// ---- windows ---------------------------------------------------------------------------

std::vector<WindowSample> make_windows(const MultimodalDataset& d, std::size_t p, std::size_t q, std::size_t stride,
                                       std::size_t begin, std::size_t end) {
  if (p == 0 || q == 0) throw ConfigError("make_windows: p and q must be positive");
  if (stride == 0) throw ConfigError("make_windows: stride must be positive");
  end = std::min(end, d.segments.size());
  const std::size_t span_len = end > begin ? end - begin : 0;
  if (p + q > span_len)
    throw ConfigError("make_windows: p+q=" + std::to_string(p + q) + " exceeds the " + std::to_string(span_len) +
                      " available segments");
  std::vector<WindowSample> out;
  for (std::size_t s0 = begin; s0 + p + q <= end; s0 += stride) {
    WindowSample w;
    w.first_segment = s0;
    std::vector<double> hist;
    for (std::size_t s = s0; s < s0 + p; ++s) {
      auto v = d.segment_values(s);
      w.history_values.emplace_back(v.begin(), v.end());
      w.history_events.push_back(d.segments[s].embedding);
      hist.insert(hist.end(), v.begin(), v.end());
    }
    for (std::size_t s = s0 + p; s < s0 + p + q; ++s) {
      auto v = d.segment_values(s);
      w.future_values.emplace_back(v.begin(), v.end());
      w.future_events.push_back(d.segments[s].embedding);
    }
    w.normalization = zscore_fit(hist);
    out.push_back(std::move(w));
  }
  return out;
}

SplitRanges split_segments(std::size_t n, double train_frac, double val_frac) {
  if (!(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0))
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1");
  SplitRanges r;
  r.train_end = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_frac));
  r.val_end = static_cast<std::size_t>(std::floor(static_cast<double>(n) * (train_frac + val_frac)));
  r.test_end = n;
  return r;
}

void replace_events_with_noise(WindowSample& w, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto* events : {&w.history_events, &w.future_events})
    for (auto& e : *events)
      for (auto& x : e) x = normal(rng);
}

// ---- persistence -----------------------------------------------------------------------

void save_dataset(const MultimodalDataset& d, const fs::path& dir, std::string_view config_hash) {
  fs::create_directories(dir);
  json manifest = {{"format_version", kDatasetFormatVersion},
                   {"name", d.name},
                   {"frequency", d.frequency},
                   {"seed", d.seed},
                   {"L", d.values.size()},
                   {"W", d.segment_length()},
                   {"n_segments", d.segments.size()},
                   {"d_text", d.embedding_dim()},
                   {"tool_version", io::kToolVersion}};
  if (!config_hash.empty()) manifest["config_hash"] = config_hash;
  io::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  io::write_bytes(dir / "series.f64", io::encode_f64(d.values));
  std::string events;
  for (const auto& s : d.segments) {
    json j = {{"start", s.start}, {"end", s.end}, {"description", s.description}, {"embedding", s.embedding}};
    events += j.dump();
    events += '\n';
  }
  io::write_text(dir / "events.jsonl", events);
}

namespace {
json parse_json(const std::string& text, const std::string& where, std::size_t base_offset) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(where + ": parse error at byte offset " + std::to_string(base_offset + e.byte) + ": " + e.what());
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(where + ": bad field '" + key + "': " + e.what());
  }
}
}  // namespace

MultimodalDataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  const std::string mpath = (dir / "manifest.json").string();
  const json m = parse_json(io::read_text(dir / "manifest.json"), mpath, 0);
  const int version = field<int>(m, "format_version", mpath);
  if (version != kDatasetFormatVersion)
    throw DataError(mpath + ": format_version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kDatasetFormatVersion) + ")");
  MultimodalDataset d;
  d.name = field<std::string>(m, "name", mpath);
  d.frequency = field<std::string>(m, "frequency", mpath);
  d.seed = field<std::uint64_t>(m, "seed", mpath);
  const auto L = field<std::size_t>(m, "L", mpath);
  const auto W = field<std::size_t>(m, "W", mpath);
  const auto n_seg = field<std::size_t>(m, "n_segments", mpath);
  const auto d_text = field<std::size_t>(m, "d_text", mpath);
  if (W == 0 || n_seg * W != L)
    throw DataError(mpath + ": inconsistent shape L=" + std::to_string(L) + ", W=" + std::to_string(W) +
                    ", n_segments=" + std::to_string(n_seg));

  const std::string spath = (dir / "series.f64").string();
  const auto bytes = io::read_bytes(dir / "series.f64");
  if (bytes.size() != L * 8) {
    if (bytes.size() < L * 8)
      throw DataError(spath + ": truncated at byte offset " + std::to_string(bytes.size() - bytes.size() % 8) +
                      ", expected " + std::to_string(L * 8) + " bytes");
    throw DataError(spath + ": " + std::to_string(bytes.size() - L * 8) + " trailing bytes after byte offset " +
                    std::to_string(L * 8));
  }
  d.values.resize(L);
  for (std::size_t i = 0; i < L; ++i) d.values[i] = io::load_f64_le(bytes.data() + 8 * i);

  const std::string epath = (dir / "events.jsonl").string();
  const std::string events = io::read_text(dir / "events.jsonl");
  std::size_t pos = 0, line_no = 0;
  while (pos < events.size()) {
    std::size_t nl = events.find('\n', pos);
    if (nl == std::string::npos) nl = events.size();
    const std::string line = events.substr(pos, nl - pos);
    ++line_no;
    if (!line.empty()) {
      const std::string where = epath + " line " + std::to_string(line_no);
      const json j = parse_json(line, where, pos);
      const std::string at = where + " (byte offset " + std::to_string(pos) + ")";
      EventSegment s;
      s.start = field<std::size_t>(j, "start", at);
      s.end = field<std::size_t>(j, "end", at);
      s.description = field<std::string>(j, "description", at);
      s.embedding = field<std::vector<double>>(j, "embedding", at);
      if (s.embedding.size() != d_text)
        throw DataError(at + ": embedding length " +
                        std::to_string(s.embedding.size()) + " does not match d_text=" + std::to_string(d_text));
      d.segments.push_back(std::move(s));
    }
    pos = nl + 1;
  }
  if (d.segments.size() != n_seg)
    throw DataError(epath + ": " + std::to_string(d.segments.size()) + " segments, manifest declares " +
                    std::to_string(n_seg) + " (file ends at byte offset " + std::to_string(events.size()) + ")");

  const auto report = validate_dataset(d);
  if (!report.ok()) {
    std::ostringstream msg;
    msg << dir.string() << ": " << report.violations.size() << " constraint violation(s)";
    for (std::size_t i = 0; i < std::min<std::size_t>(report.violations.size(), 5); ++i)
      msg << "; " << report.violations[i].message;
    throw DataError(msg.str());
  }
  return d;
}

}  // namespace evflow::data
