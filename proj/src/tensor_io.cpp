#include "gcd/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "gcd/errors.hpp"

static_assert(std::endian::native == std::endian::little, "GCDT payloads assume a little-endian host");

namespace gcd {

const char* to_string(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kUnsupportedVersion: return "unsupported version";
    case FormatErrorKind::kUnsupportedDtype: return "unsupported dtype";
    case FormatErrorKind::kTruncated: return "truncated blob";
    case FormatErrorKind::kDimOverflow: return "dim overflow";
    case FormatErrorKind::kInconsistentManifest: return "inconsistent manifest";
    case FormatErrorKind::kMalformedJson: return "malformed json";
  }
  return "format error";
}

namespace io {

namespace {

constexpr char kMagic[4] = {'G', 'C', 'D', 'T'};

template <typename T>
std::string encode_impl(std::span<const std::uint64_t> dims, std::span<const T> data, Dtype dtype) {
  std::uint64_t count = 1;
  for (auto d : dims) count *= d;
  if (count != data.size()) throw std::invalid_argument("encode_blob: dims do not match payload size");
  if (dims.size() > 255) throw std::invalid_argument("encode_blob: rank exceeds 255");
  std::string out;
  out.reserve(header_size(dims.size()) + data.size_bytes());
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kBlobVersion));
  out.push_back(static_cast<char>(dtype));
  out.push_back(static_cast<char>(dims.size()));
  for (auto d : dims) out.append(reinterpret_cast<const char*>(&d), sizeof(d));
  out.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  return out;
}

}  // namespace

std::uint64_t TensorBlob::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::size_t header_size(std::size_t rank) { return 4 + 3 + 8 * rank; }

std::string encode_blob(std::span<const std::uint64_t> dims, std::span<const float> data) {
  return encode_impl(dims, data, Dtype::kF32);
}

std::string encode_blob(std::span<const std::uint64_t> dims, std::span<const double> data) {
  return encode_impl(dims, data, Dtype::kF64);
}

TensorBlob decode_blob(std::span<const char> bytes, std::size_t* consumed) {
  if (bytes.size() < 7) throw FormatError(FormatErrorKind::kTruncated, "header shorter than 7 bytes");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(FormatErrorKind::kBadMagic, "expected GCDT");
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kBlobVersion) {
    throw FormatError(FormatErrorKind::kUnsupportedVersion, "version " + std::to_string(version));
  }
  const auto dtype_byte = static_cast<std::uint8_t>(bytes[5]);
  if (dtype_byte > 1) throw FormatError(FormatErrorKind::kUnsupportedDtype, "dtype " + std::to_string(dtype_byte));
  TensorBlob blob;
  blob.dtype = static_cast<Dtype>(dtype_byte);
  const std::size_t rank = static_cast<std::uint8_t>(bytes[6]);
  const std::size_t header = header_size(rank);
  if (bytes.size() < header) throw FormatError(FormatErrorKind::kTruncated, "dims cut short");

  const std::size_t elem = blob.dtype == Dtype::kF32 ? 4 : 8;
  const std::uint64_t max_elems = std::numeric_limits<std::uint64_t>::max() / elem;
  std::uint64_t count = 1;
  blob.dims.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint64_t d;
    std::memcpy(&d, bytes.data() + 7 + 8 * i, 8);
    blob.dims[i] = d;
    if (d != 0 && count > max_elems / d) throw FormatError(FormatErrorKind::kDimOverflow, "element count overflows");
    count *= d;
  }
  const std::uint64_t payload = count * elem;
  if (payload > bytes.size() - header) {
    throw FormatError(FormatErrorKind::kTruncated,
                      "payload needs " + std::to_string(payload) + " bytes, have " + std::to_string(bytes.size() - header));
  }
  if (blob.dtype == Dtype::kF32) {
    blob.f32.resize(count);
    std::memcpy(blob.f32.data(), bytes.data() + header, payload);
  } else {
    blob.f64.resize(count);
    std::memcpy(blob.f64.data(), bytes.data() + header, payload);
  }
  if (consumed) *consumed = header + payload;
  return blob;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

}  // namespace io
}  // namespace gcd
