#pragma once

// Small file helpers shared by the on-disk formats.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace evflow::io {

inline constexpr const char* kToolVersion = "0.3.0";

std::string read_text(const std::filesystem::path& path);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_text(const std::filesystem::path& path, std::string_view text);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void append_f64_le(std::vector<std::uint8_t>& out, double v);
void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v);
void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v);
double load_f64_le(const std::uint8_t* p) noexcept;
std::uint32_t load_u32_le(const std::uint8_t* p) noexcept;
std::uint64_t load_u64_le(const std::uint8_t* p) noexcept;

std::vector<std::uint8_t> encode_f64(std::span<const double> values);

std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept;
/// Hex digest of a 64-bit FNV-1a hash.
std::string fnv1a_hex(std::string_view text);

}  // namespace evflow::io
