#include <cstring>

#include "evflow/denoiser.hpp"
#include "evflow/error.hpp"
#include "evflow/io.hpp"

namespace evflow::model {

namespace {
constexpr char kMagic[8] = {'E', 'V', 'F', 'L', 'O', 'W', 'C', 'K'};

// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end, std::string where)
      : bytes_(bytes), end_(end), where_(std::move(where)) {}

  std::size_t offset() const noexcept { return pos_; }

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > end_ - pos_)
      throw DataError(where_ + ": truncated while reading " + what + " at byte offset " + std::to_string(pos_));
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) { return io::load_u32_le(take(4, what)); }
  std::uint64_t u64(const char* what) { return io::load_u64_le(take(8, what)); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::string where_;
  std::size_t pos_ = 0;
};
}  // namespace

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  io::append_u32_le(out, kCheckpointVersion);
  const std::string header = file.header.dump();
  io::append_u64_le(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  io::append_u64_le(out, file.tensors.size());
  for (const auto& [name, m] : file.tensors) {
    io::append_u32_le(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    io::append_u64_le(out, m.rows);
    io::append_u64_le(out, m.cols);
    for (double v : m.data) io::append_f64_le(out, v);
  }
  io::append_u32_le(out, io::crc32(out));
  io::write_bytes(path, out);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  const std::string where = path.string();
  const auto bytes = io::read_bytes(path);
  if (bytes.size() < 8 + 4 + 4) throw DataError(where + ": file too short (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw DataError(where + ": bad magic at byte offset 0");
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = io::load_u32_le(bytes.data() + body);
  const std::uint32_t actual = io::crc32(std::span<const std::uint8_t>(bytes.data(), body));
  if (stored != actual) throw DataError(where + ": CRC32 mismatch (file corrupt or truncated)");

  Reader r(bytes, body, where);
  r.take(8, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw DataError(where + ": version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  TensorFile f;
  const std::uint64_t hlen = r.u64("header length");
  const std::size_t hpos = r.offset();
  const auto* h = r.take(hlen, "header");
  try {
    f.header = nlohmann::json::parse(h, h + hlen);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + ": header parse error at byte offset " + std::to_string(hpos + e.byte));
  }
  const std::uint64_t n = r.u64("tensor count");
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint32_t nlen = r.u32("name length");
    const auto* np = r.take(nlen, "tensor name");
    std::string name(reinterpret_cast<const char*>(np), nlen);
    const std::uint64_t rows = r.u64("rows");
    const std::uint64_t cols = r.u64("cols");
    if (cols != 0 && rows > (body - r.offset()) / 8 / cols)
      throw DataError(where + ": tensor '" + name + "' shape exceeds the file at byte offset " +
                      std::to_string(r.offset()));
    const auto* dp = r.take(rows * cols * 8, "tensor data");
    Matrix m(rows, cols);
    for (std::size_t k = 0; k < m.size(); ++k) m.data[k] = io::load_f64_le(dp + 8 * k);
    f.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (r.offset() != body) throw DataError(where + ": trailing bytes at byte offset " + std::to_string(r.offset()));
  return f;
}

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model, const nlohmann::json& meta) {
  TensorFile f;
  f.header = {{"kind", "evflow-checkpoint"},
              {"tool_version", io::kToolVersion},
              {"model", to_json(model.config())},
              {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
  for (const auto& p : model.parameters()) f.tensors.emplace_back(p.name, p.value);
  write_tensor_file(path, f);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto f = read_tensor_file(path);
  const std::string where = path.string();
  if (!f.header.contains("model")) throw DataError(where + ": header has no model config");
  LoadedCheckpoint out{Denoiser(model_config_from_json(f.header["model"])), f.header.value("meta", nlohmann::json::object())};
  auto& params = out.model.parameters();
  if (f.tensors.size() != params.size())
    throw DataError(where + ": " + std::to_string(f.tensors.size()) + " tensors, config implies " +
                    std::to_string(params.size()));
  for (auto& [name, m] : f.tensors) {
    if (!out.model.has_param(name)) throw DataError(where + ": unexpected tensor '" + name + "'");
    auto& p = out.model.param(name);
    if (!p.value.same_shape(m))
      throw DataError(where + ": tensor '" + name + "' has shape " + m.shape_str() + ", config expects " +
                      p.value.shape_str());
    if (!all_finite(m)) throw DataError(where + ": tensor '" + name + "' has non-finite entries");
    p.value = std::move(m);
  }
  return out;
}

}  // namespace evflow::model
