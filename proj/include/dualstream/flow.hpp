#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "dualstream/farneback.hpp"
#include "dualstream/npy.hpp"
#include "dualstream/videoio.hpp"

namespace dualstream {

inline constexpr std::size_t kFlowPairs = 10;
inline constexpr std::size_t kFlowChannels = 2 * kFlowPairs;
inline constexpr double kFlowClip = 20.0;
inline constexpr double kFlowCenter = 127.5;

/// (clip(o, -20, 20) + 20) / 40 * 255
inline double normalize_flow(double o) {
  return (std::clamp(o, -kFlowClip, kFlowClip) + kFlowClip) / (2 * kFlowClip) * 255.0;
}

/// Start frame of each consecutive pair: round(i * (n - 2) / (k - 1)).
inline std::vector<std::size_t> flow_pair_starts(std::size_t n = 16, std::size_t k = kFlowPairs) {
  if (n < 2) fail(ErrorCode::TooFewFrames, "need at least 2 frames for a flow pair");
  std::vector<std::size_t> starts(k, 0);
  if (k < 2) return starts;
  for (std::size_t i = 0; i < k; ++i)
    starts[i] = static_cast<std::size_t>(
        std::llround(static_cast<double>(i) * static_cast<double>(n - 2) / static_cast<double>(k - 1)));
  return starts;
}

/// 20 x S x S interleaved [u0, v0, ..., u9, v9]. Uncentred values are whole
/// numbers in [0, 255] so that the byte cache reproduces them exactly.
struct FlowStack {
  std::size_t size = 0;
  std::vector<float> values;
  bool centered = false;

  FlowStack() = default;
  explicit FlowStack(std::size_t s) : size(s), values(kFlowChannels * s * s, 0.f) {}

  float* channel(std::size_t c) { return values.data() + c * size * size; }
  const float* channel(std::size_t c) const { return values.data() + c * size * size; }
  bool operator==(const FlowStack&) const = default;
};

inline FlowStack build_flow_stack(const SampledClip& sampled, const FarnebackParams& params = {}) {
  if (sampled.frames.size() < 2) fail(ErrorCode::TooFewFrames, "sampled clip has fewer than 2 frames");
  const std::size_t S = sampled.frames.front().width;
  for (const auto& f : sampled.frames)
    if (f.width != S || f.height != S) fail(ErrorCode::DimensionMismatch, "sampled frames must be square and equal");
  FlowStack stack(S);
  const auto starts = flow_pair_starts(sampled.frames.size());
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const FlowField f = estimate_flow(to_luma(sampled.frames[starts[i]]), to_luma(sampled.frames[starts[i] + 1]), params);
    float* u = stack.channel(2 * i);
    float* v = stack.channel(2 * i + 1);
    for (std::size_t p = 0; p < S * S; ++p) {
      u[p] = static_cast<float>(std::nearbyint(normalize_flow(f.u[p])));
      v[p] = static_cast<float>(std::nearbyint(normalize_flow(f.v[p])));
    }
  }
  return stack;
}

inline FlowStack center_stack(FlowStack stack) {
  if (stack.centered) fail(ErrorCode::AlreadyCentered, "flow stack is already centred");
  for (auto& v : stack.values) v -= static_cast<float>(kFlowCenter);
  stack.centered = true;
  return stack;
}

inline void write_flow_cache(const fs::path& path, const FlowStack& stack) {
  if (stack.centered) fail(ErrorCode::InvalidArgument, "the cache stores uncentred stacks");
  std::vector<std::uint8_t> bytes(stack.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = saturate_u8(stack.values[i]);
  write_npy(path, {kFlowChannels, stack.size, stack.size}, bytes);
}

/// Reads an uncentred stack, checking dtype and shape (20, size, size).
inline FlowStack read_flow_cache(const fs::path& path, std::size_t size = 224) {
  const NpyArray a = read_npy(path);
  if (a.descr != "|u1") fail(ErrorCode::CorruptCache, path.string() + ": dtype " + a.descr + ", expected |u1");
  const Shape want{kFlowChannels, size, size};
  if (a.shape != want)
    fail(ErrorCode::CorruptCache, path.string() + ": shape " + shape_str(a.shape) + ", expected " + shape_str(want));
  FlowStack stack(size);
  for (std::size_t i = 0; i < a.bytes.size(); ++i) stack.values[i] = static_cast<float>(a.bytes[i]);
  return stack;
}

inline fs::path flow_cache_path(const fs::path& cache_root, const std::string& clip_id) {
  return cache_root / (clip_id + ".npy");
}

/// Colour-wheel rendering: hue follows direction, brightness follows magnitude
/// relative to the largest displacement in the field.
inline Image flow_to_rgb(const FlowField& f) {
  Image out(f.width, f.height);
  float max_mag = 0.f;
  for (std::size_t i = 0; i < f.u.size(); ++i) max_mag = std::max(max_mag, std::hypot(f.u[i], f.v[i]));
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    const double angle = std::atan2(-static_cast<double>(f.v[i]), static_cast<double>(f.u[i]));
    const double h = (angle < 0 ? angle + 2 * std::numbers::pi : angle) / (std::numbers::pi / 3);
    const double val = max_mag > 0 ? std::hypot(f.u[i], f.v[i]) / max_mag : 0.0;
    const int sector = static_cast<int>(h) % 6;
    const double frac = h - std::floor(h);
    const double p = 0, q = val * (1 - frac), t = val * frac;
    double rgb[3];
    switch (sector) {
      case 0: rgb[0] = val, rgb[1] = t, rgb[2] = p; break;
      case 1: rgb[0] = q, rgb[1] = val, rgb[2] = p; break;
      case 2: rgb[0] = p, rgb[1] = val, rgb[2] = t; break;
      case 3: rgb[0] = p, rgb[1] = q, rgb[2] = val; break;
      case 4: rgb[0] = t, rgb[1] = p, rgb[2] = val; break;
      default: rgb[0] = val, rgb[1] = p, rgb[2] = q; break;
    }
    for (int c = 0; c < 3; ++c) out.pixels[i * 3 + static_cast<std::size_t>(c)] = saturate_u8(rgb[c] * 255.0);
  }
  return out;
}

struct FlowExtractOptions {
  fs::path dataset_root;
  fs::path cache_root;
  std::size_t frames = 16;
  std::size_t size = 224;
  FarnebackParams params;
  std::size_t workers = 1;
};

struct FlowExtractSummary {
  std::size_t computed = 0, skipped = 0;
  std::vector<std::pair<std::string, std::string>> failed;  ///< clip id, reason
};

inline bool flow_cache_valid(const fs::path& path, std::size_t size) {
  if (!fs::exists(path)) return false;
  try {
    read_flow_cache(path, size);
    return true;
  } catch (const Error&) {
    return false;
  }
}

inline FlowStack compute_clip_flow(const fs::path& clip_dir, std::size_t frames, std::size_t size,
                                   const FarnebackParams& params) {
  return build_flow_stack(sample_uniform(ingest_clip(clip_dir, 0), frames, size), params);
}

/// Fills the cache with one stack per clip. Valid files are left alone,
/// missing or unreadable ones are (re)computed. Each clip's result depends only
/// on its own frames, so the cache bytes do not depend on the worker count.
inline FlowExtractSummary extract_flow_cache(const DatasetManifest& manifest, const FlowExtractOptions& opt) {
  enum class Outcome { Computed, Skipped, Failed };
  const std::size_t n = manifest.clips.size();
  std::vector<Outcome> outcome(n, Outcome::Failed);
  std::vector<std::string> reason(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const ClipEntry& clip = manifest.clips[i];
      const fs::path out = flow_cache_path(opt.cache_root, clip.id);
      try {
        if (flow_cache_valid(out, opt.size)) {
          outcome[i] = Outcome::Skipped;
          continue;
        }
        write_flow_cache(out, compute_clip_flow(opt.dataset_root / clip.path, opt.frames, opt.size, opt.params));
        outcome[i] = Outcome::Computed;
      } catch (const std::exception& e) {
        reason[i] = e.what();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(opt.workers, 1, std::max<std::size_t>(n, 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  FlowExtractSummary s;
  for (std::size_t i = 0; i < n; ++i) {
    if (outcome[i] == Outcome::Computed) ++s.computed;
    else if (outcome[i] == Outcome::Skipped) ++s.skipped;
    else s.failed.emplace_back(manifest.clips[i].id, reason[i]);
  }
  return s;
}

}  // namespace dualstream
