#pragma once

#include <cstdint>
#include <cstring>
#include <regex>
#include <string>
#include <vector>

#include "dualstream/fsutil.hpp"
#include "dualstream/tensor.hpp"

namespace dualstream {

/// An NPY v1.0 array held as raw little-endian bytes.
struct NpyArray {
  std::string descr;  ///< e.g. "|u1", "<f4", "<i8"
  Shape shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const { return shape_numel(shape); }
};

template <typename T>
constexpr const char* npy_descr() {
  if constexpr (std::is_same_v<T, std::uint8_t>) return "|u1";
  else if constexpr (std::is_same_v<T, float>) return "<f4";
  else if constexpr (std::is_same_v<T, double>) return "<f8";
  else if constexpr (std::is_same_v<T, std::int64_t>) return "<i8";
  else if constexpr (std::is_same_v<T, std::int32_t>) return "<i4";
  else static_assert(sizeof(T) == 0, "unsupported NPY element type");
}

inline std::size_t npy_item_size(const std::string& descr) {
  if (descr.size() < 3) return 0;
  return static_cast<std::size_t>(std::stoul(descr.substr(2)));
}

inline std::string encode_npy(const NpyArray& a) {
  std::string shape = "(";
  for (std::size_t i = 0; i < a.shape.size(); ++i) shape += std::to_string(a.shape[i]) + (a.shape.size() == 1 ? "," : i + 1 < a.shape.size() ? ", " : "");
  shape += ")";
  std::string header = "{'descr': '" + a.descr + "', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  std::string out("\x93NUMPY\x01\x00", 8);
  append_le<std::uint16_t>(out, static_cast<std::uint16_t>(header.size()));
  out += header;
  out.append(reinterpret_cast<const char*>(a.bytes.data()), a.bytes.size());
  return out;
}

/// Parses an NPY v1.x/2.x file. Errors use CorruptCache since NPY is the cache format.
inline NpyArray decode_npy(const std::vector<std::uint8_t>& data, const std::string& origin = "npy") {
  auto corrupt = [&](const std::string& why) -> void { fail(ErrorCode::CorruptCache, origin + ": " + why); };
  if (data.size() < 10 || std::memcmp(data.data(), "\x93NUMPY", 6) != 0) corrupt("not an NPY file");
  const std::uint8_t major = data[6];
  std::size_t hlen = 0, start = 0;
  if (major == 1) {
    hlen = load_le<std::uint16_t>(data.data() + 8);
    start = 10;
  } else if (major == 2 || major == 3) {
    if (data.size() < 12) corrupt("truncated header");
    hlen = load_le<std::uint32_t>(data.data() + 8);
    start = 12;
  } else {
    corrupt("unsupported NPY version " + std::to_string(major));
  }
  if (data.size() < start + hlen) corrupt("truncated header");
  const std::string header(data.begin() + static_cast<std::ptrdiff_t>(start),
                           data.begin() + static_cast<std::ptrdiff_t>(start + hlen));
  std::smatch m;
  NpyArray a;
  if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([^']+)')"))) corrupt("missing descr");
  a.descr = m[1];
  if (std::regex_search(header, m, std::regex(R"('fortran_order'\s*:\s*True)"))) corrupt("fortran order unsupported");
  if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(([^)]*)\))"))) corrupt("missing shape");
  const std::string dims = m[1];
  static const std::regex digits(R"(\d+)");
  for (std::sregex_iterator it(dims.begin(), dims.end(), digits), end; it != end; ++it)
    a.shape.push_back(static_cast<std::size_t>(std::stoull(it->str())));
  const std::size_t item = npy_item_size(a.descr);
  if (item == 0) corrupt("bad descr " + a.descr);
  const std::size_t nbytes = a.numel() * item;
  if (data.size() - start - hlen != nbytes)
    corrupt("payload is " + std::to_string(data.size() - start - hlen) + " bytes, shape " + shape_str(a.shape) +
            " needs " + std::to_string(nbytes));
  a.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(start + hlen), data.end());
  return a;
}

template <typename T>
NpyArray make_npy(Shape shape, const std::vector<T>& values) {
  NpyArray a{npy_descr<T>(), std::move(shape), {}};
  std::string buf;
  buf.reserve(values.size() * sizeof(T));
  for (T v : values) append_le(buf, v);
  a.bytes.assign(buf.begin(), buf.end());
  return a;
}

template <typename T>
std::vector<T> npy_values(const NpyArray& a) {
  if (a.descr != npy_descr<T>()) fail(ErrorCode::CorruptCache, "dtype " + a.descr + ", expected " + npy_descr<T>());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = load_le<T>(a.bytes.data() + i * sizeof(T));
  return out;
}

template <typename T>
void write_npy(const fs::path& path, Shape shape, const std::vector<T>& values) {
  atomic_write(path, encode_npy(make_npy(std::move(shape), values)));
}

inline NpyArray read_npy(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const Error&) {
    fail(ErrorCode::CorruptCache, "cannot read " + path.string());
  }
  return decode_npy(bytes, path.string());
}

}  // namespace dualstream
