#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <numbers>
#include <thread>
#include <vector>

#include "dualstream/flow.hpp"
#include "dualstream/rng.hpp"
#include "dualstream/tensor.hpp"
#include "dualstream/videoio.hpp"

namespace dualstream {

struct SplitFractions {
  double train = 0.7, val = 0.1, test = 0.2;
};

/// Largest-remainder apportionment of n items into the three splits. Equal
/// remainders go to the earlier split.
inline std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
  const double total = f.train + f.val + f.test;
  const double share[3] = {f.train / total, f.val / total, f.test / total};
  std::array<std::size_t, 3> counts{};
  double rem[3];
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = share[i] * static_cast<double>(n);
    counts[static_cast<std::size_t>(i)] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(counts[static_cast<std::size_t>(i)]);
    assigned += counts[static_cast<std::size_t>(i)];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best] + 1e-12) best = i;
    ++counts[static_cast<std::size_t>(best)];
    rem[best] = -1;
    ++assigned;
  }
  return counts;
}

/// Per class: seeded shuffle, then contiguous train / val / test blocks.
inline void stratified_split(DatasetManifest& m, const SplitFractions& f = {}, std::uint64_t seed = 42) {
  for (std::size_t k = 0; k < m.classes.size(); ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < m.clips.size(); ++i)
      if (m.clips[i].class_index == static_cast<int>(k)) members.push_back(i);
    if (members.size() < 3)
      fail(ErrorCode::ClassTooSmall, "class " + m.classes[k] + " has " + std::to_string(members.size()) +
                                         " clip(s), need at least 3");
    CounterRng rng(CounterRng::hash(seed, k));
    rng.shuffle(std::span<std::size_t>(members));
    const auto counts = split_counts(members.size(), f);
    for (std::size_t j = 0; j < members.size(); ++j)
      m.clips[members[j]].split = j < counts[0] ? Split::Train : j < counts[0] + counts[1] ? Split::Val : Split::Test;
  }
}

inline constexpr std::array<double, 3> kImageNetMean = {0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kImageNetStd = {0.229, 0.224, 0.225};

struct AugmentPolicy {
  double flip_p = 0.5;
  double max_rotation_deg = 10.0;
  double max_translate = 0.1;  ///< fraction of the image side
};

struct AugmentDraw {
  bool flip = false;
  double angle_deg = 0, tx = 0, ty = 0;  ///< tx, ty in pixels
};

inline AugmentDraw draw_augment(CounterRng& rng, const AugmentPolicy& p, std::size_t size) {
  AugmentDraw d;
  d.flip = rng.bernoulli(p.flip_p);
  d.angle_deg = rng.uniform(-p.max_rotation_deg, p.max_rotation_deg);
  const double t = p.max_translate * static_cast<double>(size);
  d.tx = rng.uniform(-t, t);
  d.ty = rng.uniform(-t, t);
  return d;
}

/// [3, S, S] channel-major values (v / 255 - mean) / std.
inline std::vector<float> normalize_rgb(const Image& img) {
  const std::size_t n = img.width * img.height;
  std::vector<float> out(3 * n);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i)
      out[c * n + i] = static_cast<float>((img.pixels[i * 3 + c] / 255.0 - kImageNetMean[c]) / kImageNetStd[c]);
  return out;
}

/// Horizontal flip, then rotation about the centre and translation, sampled
/// bilinearly with black outside the frame.
inline Image apply_augment(const Image& src, const AugmentDraw& d) {
  const std::size_t W = src.width, H = src.height;
  Image flipped = src;
  if (d.flip)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < 3; ++c) flipped.at(x, y, c) = src.at(W - 1 - x, y, c);
  if (d.angle_deg == 0 && d.tx == 0 && d.ty == 0) return flipped;
  Image out(W, H);
  const double a = d.angle_deg * std::numbers::pi / 180.0, ca = std::cos(a), sa = std::sin(a);
  const double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;
  auto sample = [&](long x, long y, std::size_t c) -> double {
    if (x < 0 || y < 0 || x >= static_cast<long>(W) || y >= static_cast<long>(H)) return 0.0;
    return flipped.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c);
  };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      // inverse map: output pixel -> source location
      const double ox = static_cast<double>(x) - cx - d.tx, oy = static_cast<double>(y) - cy - d.ty;
      const double sx = ca * ox + sa * oy + cx, sy = -sa * ox + ca * oy + cy;
      const long x0 = static_cast<long>(std::floor(sx)), y0 = static_cast<long>(std::floor(sy));
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - fx) * (1 - fy) * sample(x0, y0, c) + fx * (1 - fy) * sample(x0 + 1, y0, c) +
                         (1 - fx) * fy * sample(x0, y0 + 1, c) + fx * fy * sample(x0 + 1, y0 + 1, c);
        out.at(x, y, c) = saturate_u8(v);
      }
    }
  return out;
}

inline std::vector<float> augment_rgb(const Image& frame, const AugmentDraw& d) {
  return normalize_rgb(apply_augment(frame, d));
}

/// One clip ready for training: the middle RGB frame and the uncentred flow stack.
struct Sample {
  std::string id;
  int label = 0;
  Image frame;
  FlowStack flow;
};

struct LoaderOptions {
  fs::path dataset_root;
  fs::path cache_root;  ///< empty: always compute flow
  std::size_t frames = 16;
  std::size_t size = 224;
  FarnebackParams params;
  bool fallback = true;  ///< compute flow when the cache entry is missing or unreadable
  bool need_flow = true;
  std::size_t workers = 1;
};

inline Sample load_sample(const ClipEntry& clip, const LoaderOptions& opt) {
  const SampledClip sampled = sample_uniform(ingest_clip(opt.dataset_root / clip.path, clip.class_index), opt.frames, opt.size);
  Sample s{clip.id, clip.class_index, sampled.middle(), {}};
  if (!opt.need_flow) return s;
  if (!opt.cache_root.empty()) {
    const fs::path p = flow_cache_path(opt.cache_root, clip.id);
    try {
      s.flow = read_flow_cache(p, opt.size);
      return s;
    } catch (const Error&) {
      if (!opt.fallback) throw;
    }
  }
  s.flow = build_flow_stack(sampled, opt.params);
  return s;
}

/// Loads every clip in the split. Results are placed by index, so the order
/// is the manifest order regardless of the worker count.
inline std::vector<Sample> load_split(const DatasetManifest& m, Split split, const LoaderOptions& opt) {
  const auto clips = m.in_split(split);
  std::vector<Sample> out(clips.size());
  std::vector<std::string> errors(clips.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < clips.size(); i = next++) {
      try {
        out[i] = load_sample(*clips[i], opt);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::max<std::size_t>(opt.workers, 1); ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < clips.size(); ++i)
    if (!errors[i].empty()) throw std::runtime_error(errors[i]);
  return out;
}

/// Batched model inputs. Flow is always centred and never augmented.
template <typename T>
struct Batch {
  Tensor<T> rgb, flow;
  std::vector<int> labels;
};

/// `draws` empty means evaluation (normalisation only).
template <typename T>
Batch<T> make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> idx,
                    const std::vector<AugmentDraw>& draws, bool with_rgb, bool with_flow) {
  Batch<T> b;
  const std::size_t B = idx.size();
  if (B == 0) fail(ErrorCode::InvalidArgument, "empty batch");
  const std::size_t S = samples[idx[0]].frame.width;
  std::vector<T> rgb, flow;
  if (with_rgb) rgb.reserve(B * 3 * S * S);
  if (with_flow) flow.reserve(B * kFlowChannels * S * S);
  for (std::size_t j = 0; j < B; ++j) {
    const Sample& s = samples[idx[j]];
    b.labels.push_back(s.label);
    if (with_rgb) {
      const auto v = draws.empty() ? normalize_rgb(s.frame) : augment_rgb(s.frame, draws[j]);
      rgb.insert(rgb.end(), v.begin(), v.end());
    }
    if (with_flow) {
      if (s.flow.values.empty()) fail(ErrorCode::InvalidArgument, "sample " + s.id + " has no flow stack");
      for (float v : s.flow.values) flow.push_back(static_cast<T>(v - kFlowCenter));
    }
  }
  if (with_rgb) b.rgb = Tensor<T>::from({B, 3, S, S}, std::move(rgb));
  if (with_flow) b.flow = Tensor<T>::from({B, kFlowChannels, S, S}, std::move(flow));
  return b;
}

}  // namespace dualstream
