#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualstream/fsutil.hpp"
#include "dualstream/nn.hpp"

namespace dualstream {

/// Archive layout: "DSCKPT01", uint64 LE index length, JSON index, then the raw
/// little-endian tensor payload. Index entries carry name, kind (param|buffer),
/// dtype (f32|f64), shape, offset and nbytes relative to the payload start.
inline constexpr char kCheckpointMagic[9] = "DSCKPT01";

struct CheckpointEntry {
  std::string name;
  std::string kind;
  std::string dtype;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  std::size_t element_size() const { return dtype == "f64" ? 8 : 4; }

  template <typename T>
  std::vector<T> values() const {
    const std::size_t n = bytes.size() / element_size();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t* p = bytes.data() + i * element_size();
      out[i] = dtype == "f64" ? static_cast<T>(load_le<double>(p)) : static_cast<T>(load_le<float>(p));
    }
    return out;
  }
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
Checkpoint snapshot(const Module<T>& module, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  auto add = [&](const std::vector<NamedTensor<T>>& list, const char* kind) {
    for (const auto& nt : list) {
      CheckpointEntry e{nt.name, kind, dtype_name<T>(), nt.tensor.shape(), {}};
      std::string buf;
      buf.reserve(nt.tensor.numel() * sizeof(T));
      for (T v : nt.tensor.data()) append_le(buf, v);
      e.bytes.assign(buf.begin(), buf.end());
      ck.entries.push_back(std::move(e));
    }
  };
  add(module.named_parameters(), "param");
  add(module.named_buffers(), "buffer");
  return ck;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json index;
  index["meta"] = ck.meta;
  index["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ck.entries) {
    index["tensors"].push_back({{"name", e.name},
                                {"kind", e.kind},
                                {"dtype", e.dtype},
                                {"shape", e.shape},
                                {"offset", offset},
                                {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string header = index.dump();
  std::string out(kCheckpointMagic, 8);
  append_le<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& e : ck.entries) out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& data, const std::string& origin = "checkpoint") {
  auto corrupt = [&](const std::string& why) { fail(ErrorCode::IoError, origin + ": corrupt archive (" + why + ")"); };
  if (data.size() < 16 || std::memcmp(data.data(), kCheckpointMagic, 8) != 0) corrupt("bad magic");
  const std::uint64_t hlen = load_le<std::uint64_t>(data.data() + 8);
  if (hlen > data.size() - 16) corrupt("index length exceeds file");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(data.begin() + 16, data.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    corrupt(e.what());
  }
  const std::size_t payload = 16 + hlen;
  Checkpoint ck;
  ck.meta = index.value("meta", nlohmann::json::object());
  for (const auto& t : index.at("tensors")) {
    CheckpointEntry e;
    e.name = t.at("name").get<std::string>();
    e.kind = t.at("kind").get<std::string>();
    e.dtype = t.at("dtype").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto nbytes = t.at("nbytes").get<std::uint64_t>();
    if (e.dtype != "f32" && e.dtype != "f64") corrupt("dtype " + e.dtype);
    if (nbytes != shape_numel(e.shape) * e.element_size()) corrupt(e.name + " size does not match shape");
    if (offset > data.size() - payload || nbytes > data.size() - payload - offset) corrupt(e.name + " truncated");
    const auto* begin = data.data() + payload + offset;
    e.bytes.assign(begin, begin + nbytes);
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

inline void write_checkpoint(const fs::path& path, const Checkpoint& ck) { atomic_write(path, encode_checkpoint(ck)); }

inline Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path), path.string()); }

/// Copies archive values into the module's parameters and buffers. Every tensor
/// of the module must be present with the same shape; dtype converts.
template <typename T>
void restore(Module<T>& module, const Checkpoint& ck) {
  auto load = [&](std::vector<NamedTensor<T>> list) {
    for (auto& nt : list) {
      const CheckpointEntry* e = ck.find(nt.name);
      if (!e) fail(ErrorCode::ConfigMismatch, "checkpoint has no tensor '" + nt.name + "'");
      if (e->shape != nt.tensor.shape())
        fail(ErrorCode::ShapeMismatch, "checkpoint tensor '" + nt.name + "' has shape " + shape_str(e->shape) +
                                           ", model expects " + shape_str(nt.tensor.shape()));
      auto v = e->values<T>();
      std::copy(v.begin(), v.end(), nt.tensor.data().begin());
    }
  };
  load(module.named_parameters());
  load(module.named_buffers());
}

template <typename T>
void save_module(const fs::path& path, const Module<T>& module, nlohmann::json meta = nlohmann::json::object()) {
  write_checkpoint(path, snapshot(module, std::move(meta)));
}

}  // namespace dualstream
