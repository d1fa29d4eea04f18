#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "depthot/tensor.hpp"

namespace depthot {

/// Malformed serialized data; `offset` is the byte position where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Shortest decimal text that round-trips the value; zero prints as "0".
inline std::string format_number(double v) {
  if (v == 0.0) return "0";
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf.data(), end);
}

inline std::string csv_join(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_number(values[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DTEN v1: "DTEN", u32 rank, rank x u32 extents, row-major f64 values; all little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline constexpr std::string_view kDtenMagic = "DTEN";
inline constexpr std::uint32_t kDtenMaxRank = 16;

inline std::string encode_dten(const Tensor& t) {
  std::string out(kDtenMagic);
  out.reserve(8 + 4 * t.rank() + 8 * t.size());
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > UINT32_MAX) throw std::invalid_argument("extent too large for DTEN");
    detail::put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (double v : t.data()) detail::put_f64(out, v);
  return out;
}

inline Tensor decode_dten(std::string_view bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw FormatError(std::string("truncated DTEN ") + what, pos);
  };
  need(4, "magic");
  if (bytes.substr(0, 4) != kDtenMagic) throw FormatError("bad DTEN magic", 0);
  pos = 4;
  need(4, "rank");
  const auto rank = static_cast<std::uint32_t>(detail::get_le(bytes, pos, 4));
  if (rank > kDtenMaxRank) throw FormatError("DTEN rank " + std::to_string(rank) + " exceeds limit", pos);
  pos += 4;
  Shape shape;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    need(4, "extent");
    const auto e = static_cast<std::size_t>(detail::get_le(bytes, pos, 4));
    if (e == 0) throw FormatError("DTEN extent must be positive", pos);
    if (e > (bytes.size() / 8) / count) throw FormatError("DTEN extents exceed payload", pos);
    count *= e;
    shape.push_back(e);
    pos += 4;
  }
  if ((bytes.size() - pos) / 8 < count) throw FormatError("truncated DTEN payload", bytes.size());
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i, pos += 8) {
    data[i] = std::bit_cast<double>(detail::get_le(bytes, pos, 8));
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after DTEN payload", pos);
  return Tensor(std::move(shape), std::move(data));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes the whole file under a temporary name, then renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Tensor read_dten(const std::filesystem::path& path) {
  try {
    return decode_dten(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

inline void write_dten(const std::filesystem::path& path, const Tensor& t) {
  write_file_atomic(path, encode_dten(t));
}

/// Binary 8-bit PGM (P5) of an [H,W] or [1,H,W] map, min-max normalized to 0..255.
/// A constant map encodes as all zeros.
inline std::string encode_pgm(const Tensor& t) {
  const PlanarDims d = planar_dims(t.shape(), "encode_pgm");
  if (d.channels != 1) throw ShapeError("PGM needs a single channel, got " + to_string(t.shape()));
  const double lo = t.min(), hi = t.max();
  std::string out = "P5\n" + std::to_string(d.width) + " " + std::to_string(d.height) + "\n255\n";
  for (double v : t.data()) {
    const double s = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * s))));
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const Tensor& t) { write_file_atomic(path, encode_pgm(t)); }

}  // namespace depthot
