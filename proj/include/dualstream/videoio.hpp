#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualstream/image.hpp"

namespace dualstream {

enum class Split { Train, Val, Test, Unassigned };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "";
  }
  return "";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s.empty()) return Split::Unassigned;
  fail(ErrorCode::InvalidArgument, "unknown split '" + s + "'");
}

struct ClipEntry {
  std::string id;
  std::string class_name;
  int class_index = 0;
  Split split = Split::Unassigned;
  std::string path;  ///< frame directory, relative to the dataset root
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::vector<ClipEntry> clips;

  std::size_t num_classes() const { return classes.size(); }
  std::vector<const ClipEntry*> in_split(Split s) const {
    std::vector<const ClipEntry*> out;
    for (const auto& c : clips)
      if (c.split == s) out.push_back(&c);
    return out;
  }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["classes"] = m.classes;
  j["clips"] = nlohmann::json::array();
  for (const auto& c : m.clips)
    j["clips"].push_back({{"id", c.id},
                          {"class_name", c.class_name},
                          {"class_index", c.class_index},
                          {"split", to_string(c.split)},
                          {"path", c.path}});
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.classes = j.at("classes").get<std::vector<std::string>>();
  for (const auto& c : j.at("clips")) {
    ClipEntry e;
    e.id = c.at("id").get<std::string>();
    e.class_name = c.at("class_name").get<std::string>();
    e.class_index = c.at("class_index").get<int>();
    e.split = parse_split(c.value("split", std::string()));
    e.path = c.value("path", e.class_name + "/" + e.id);
    if (e.class_index < 0 || static_cast<std::size_t>(e.class_index) >= m.classes.size())
      fail(ErrorCode::InvalidArgument, "clip " + e.id + " has class index out of range");
    m.clips.push_back(std::move(e));
  }
  return m;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) { atomic_write(path, to_json(m).dump(2) + "\n"); }

inline DatasetManifest read_manifest(const fs::path& path) {
  try {
    return manifest_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoError, path.string() + ": " + e.what());
  }
}

/// Builds a manifest from `<root>/<class_name>/<clip_id>/`, classes and clips in
/// lexicographic order. Clip ids must be unique across classes.
inline DatasetManifest scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) fail(ErrorCode::IoError, "dataset root " + root.string() + " is not a directory");
  DatasetManifest m;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) m.classes.push_back(entry.path().filename().string());
  std::sort(m.classes.begin(), m.classes.end());
  std::set<std::string> seen;
  for (std::size_t k = 0; k < m.classes.size(); ++k) {
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(root / m.classes[k]))
      if (entry.is_directory()) ids.push_back(entry.path().filename().string());
    std::sort(ids.begin(), ids.end());
    for (auto& id : ids) {
      if (!seen.insert(id).second) fail(ErrorCode::InvalidArgument, "duplicate clip id " + id);
      m.clips.push_back({id, m.classes[k], static_cast<int>(k), Split::Unassigned, m.classes[k] + "/" + id});
    }
  }
  return m;
}

struct Clip {
  std::string id;
  int label = 0;
  std::vector<Image> frames;
  std::string source_path;
};

/// Sorted frame files `frame_%05d.png|ppm` in a clip directory.
inline std::vector<fs::path> list_frames(const fs::path& dir) {
  static const std::regex pattern(R"(frame_(\d+)\.(png|ppm))");
  std::vector<std::pair<long, fs::path>> found;
  if (fs::is_directory(dir))
    for (const auto& entry : fs::directory_iterator(dir)) {
      std::smatch m;
      const std::string name = entry.path().filename().string();
      if (entry.is_regular_file() && std::regex_match(name, m, pattern)) found.emplace_back(std::stol(m[1]), entry.path());
    }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(std::move(f.second));
  return out;
}

inline Clip ingest_clip(const fs::path& dir, int label) {
  const auto files = list_frames(dir);
  if (files.size() < 2)
    fail(ErrorCode::MissingFrames, dir.string() + " has " + std::to_string(files.size()) + " frame(s), need at least 2");
  Clip clip{dir.filename().string(), label, {}, dir.string()};
  clip.frames.reserve(files.size());
  for (const auto& f : files) {
    clip.frames.push_back(read_image(f));
    const Image& first = clip.frames.front();
    const Image& last = clip.frames.back();
    if (last.width != first.width || last.height != first.height)
      fail(ErrorCode::DimensionMismatch, f.string() + " is " + std::to_string(last.width) + "x" +
                                             std::to_string(last.height) + ", first frame is " +
                                             std::to_string(first.width) + "x" + std::to_string(first.height));
  }
  return clip;
}

struct SampledClip {
  std::vector<Image> frames;
  std::vector<std::size_t> indices;
  std::size_t middle_index = 0;

  const Image& middle() const { return frames.at(middle_index); }
};

/// round(i * (T - 1) / (n - 1)) for i in [0, n), rounding halves away from zero.
inline std::vector<std::size_t> uniform_indices(std::size_t total, std::size_t n) {
  std::vector<std::size_t> idx(n, 0);
  if (n < 2) return idx;
  for (std::size_t i = 0; i < n; ++i)
    idx[i] = static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(total - 1) / static_cast<double>(n - 1)));
  return idx;
}

inline SampledClip sample_uniform(const Clip& clip, std::size_t n = 16, std::size_t size = 224) {
  if (clip.frames.size() < 2)
    fail(ErrorCode::TooFewFrames, "clip " + clip.id + " has " + std::to_string(clip.frames.size()) + " frame(s)");
  SampledClip s;
  s.indices = uniform_indices(clip.frames.size(), n);
  s.middle_index = n / 2;
  s.frames.reserve(n);
  for (std::size_t i : s.indices) s.frames.push_back(resize_bilinear(clip.frames[i], size, size));
  return s;
}

}  // namespace dualstream
