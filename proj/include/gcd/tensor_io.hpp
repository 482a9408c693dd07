#pragma once

// "GCDT" tensor container:
//   magic "GCDT" | u8 version=1 | u8 dtype | u8 rank | rank x u64 LE dims | row-major payload
// dtype 0 is little-endian f32 (datasets); dtype 1 is little-endian f64
// (checkpoints, which must round-trip training state exactly).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gcd::io {

enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1 };

inline constexpr std::uint8_t kBlobVersion = 1;

struct TensorBlob {
  Dtype dtype = Dtype::kF32;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;
  std::vector<double> f64;

  std::uint64_t element_count() const;
};

std::size_t header_size(std::size_t rank);

std::string encode_blob(std::span<const std::uint64_t> dims, std::span<const float> data);
std::string encode_blob(std::span<const std::uint64_t> dims, std::span<const double> data);

// Decodes one blob starting at bytes[0]; *consumed receives its byte length.
// Throws FormatError (bad magic, truncated, dim overflow, ...).
TensorBlob decode_blob(std::span<const char> bytes, std::size_t* consumed = nullptr);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace gcd::io
