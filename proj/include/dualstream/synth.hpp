#pragma once

#include <array>
#include <cstdio>
#include <atomic>
#include <cmath>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dualstream/rng.hpp"
#include "dualstream/videoio.hpp"

namespace dualstream {

enum class CueMode { Appearance, Motion, Mixed };

inline std::string to_string(CueMode m) {
  switch (m) {
    case CueMode::Appearance: return "appearance";
    case CueMode::Motion: return "motion";
    case CueMode::Mixed: return "mixed";
  }
  return "?";
}

inline CueMode parse_cue_mode(const std::string& s) {
  if (s == "appearance") return CueMode::Appearance;
  if (s == "motion") return CueMode::Motion;
  if (s == "mixed") return CueMode::Mixed;
  fail(ErrorCode::InvalidArgument, "unknown cue mode '" + s + "' (appearance|motion|mixed)");
}

struct SynthSpec {
  std::size_t num_classes = 4;
  std::size_t clips_per_class = 40;
  std::size_t frames_per_clip = 16;
  std::size_t image_size = 32;
  CueMode cue_mode = CueMode::Mixed;
  double noise_level = 2.0;  ///< std-dev of per-pixel noise, in 8-bit units
  double speed = 3.0;        ///< pixels per frame for moving classes
  std::uint64_t seed = 42;

  void validate() const {
    if (num_classes < 2 || num_classes > 8)
      fail(ErrorCode::InvalidArgument, "synthetic datasets support 2 to 8 classes");
    if (cue_mode == CueMode::Mixed && num_classes % 2 != 0)
      fail(ErrorCode::InvalidArgument, "mixed datasets need an even class count (appearance x 2 directions)");
    if (clips_per_class == 0 || frames_per_clip < 2 || image_size < 16 || noise_level < 0 || speed < 0)
      fail(ErrorCode::InvalidArgument, "invalid synthetic dataset spec");
  }
};

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"num_classes", s.num_classes}, {"clips_per_class", s.clips_per_class},
          {"frames_per_clip", s.frames_per_clip}, {"image_size", s.image_size},
          {"cue_mode", to_string(s.cue_mode)}, {"noise_level", s.noise_level},
          {"speed", s.speed}, {"seed", s.seed}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.num_classes = j.value("num_classes", s.num_classes);
  s.clips_per_class = j.value("clips_per_class", s.clips_per_class);
  s.frames_per_clip = j.value("frames_per_clip", s.frames_per_clip);
  s.image_size = j.value("image_size", s.image_size);
  s.cue_mode = parse_cue_mode(j.value("cue_mode", to_string(s.cue_mode)));
  s.noise_level = j.value("noise_level", s.noise_level);
  s.speed = j.value("speed", s.speed);
  s.seed = j.value("seed", s.seed);
  return s;
}

namespace synth {

enum class Shape { Disc, Square, Triangle, Ring };

struct Look {
  Shape shape;
  std::array<double, 3> colour;
  const char* name;
};

inline const std::array<Look, 8>& looks() {
  static const std::array<Look, 8> table = {{
      {Shape::Disc, {230, 40, 40}, "red_disc"},
      {Shape::Square, {40, 90, 230}, "blue_square"},
      {Shape::Triangle, {40, 200, 60}, "green_triangle"},
      {Shape::Ring, {235, 220, 40}, "yellow_ring"},
      {Shape::Square, {230, 40, 220}, "magenta_square"},
      {Shape::Disc, {40, 220, 220}, "cyan_disc"},
      {Shape::Ring, {250, 250, 250}, "white_ring"},
      {Shape::Triangle, {240, 130, 20}, "orange_triangle"},
  }};
  return table;
}

struct Direction {
  double dx, dy;
  const char* name;
};

// Image coordinates: y grows downward, so "up" is negative dy.
inline const std::array<Direction, 8>& directions() {
  static const double d = std::numbers::sqrt2 / 2;
  static const std::array<Direction, 8> table = {{
      {1, 0, "right"}, {-1, 0, "left"}, {0, -1, "up"}, {0, 1, "down"},
      {d, -d, "up_right"}, {-d, d, "down_left"}, {-d, -d, "up_left"}, {d, d, "down_right"},
  }};
  return table;
}

struct ClassCue {
  int look = -1;       ///< fixed look, or -1 for a random look per clip
  int direction = -1;  ///< fixed direction, or -1 for a static scene
};

inline ClassCue class_cue(const SynthSpec& spec, std::size_t k) {
  switch (spec.cue_mode) {
    case CueMode::Appearance: return {static_cast<int>(k), -1};
    case CueMode::Motion: return {-1, static_cast<int>(k)};
    case CueMode::Mixed: return {static_cast<int>(k / 2), static_cast<int>(k % 2)};
  }
  return {};
}

inline std::string class_name(const SynthSpec& spec, std::size_t k) {
  const ClassCue cue = class_cue(spec, k);
  std::string name = (k < 10 ? "0" : "") + std::to_string(k);
  if (cue.look >= 0) name += std::string("_") + looks()[static_cast<std::size_t>(cue.look)].name;
  if (cue.direction >= 0) name += std::string("_") + directions()[static_cast<std::size_t>(cue.direction)].name;
  return name;
}

/// Periodic colour texture: a few plane waves with whole cycle counts per
/// image so the scene can wrap around the borders seamlessly.
struct Texture {
  struct Wave {
    double fx, fy, phase;
    std::array<double, 3> amp;
  };
  std::array<double, 3> base;
  std::vector<Wave> waves;

  std::array<double, 3> at(double x, double y) const {
    std::array<double, 3> c = base;
    for (const auto& w : waves) {
      const double s = std::sin(w.fx * x + w.fy * y + w.phase);
      for (int i = 0; i < 3; ++i) c[i] += w.amp[i] * s;
    }
    return c;
  }
};

inline Texture random_texture(CounterRng& rng, double size) {
  Texture t;
  const double b = rng.uniform(90, 130);
  t.base = {b, b, b};
  const double k = 2 * std::numbers::pi / size;
  for (int i = 0; i < 4; ++i) {
    double cx = 0, cy = 0;
    while (cx == 0 && cy == 0) {
      cx = static_cast<double>(rng.below(7)) - 3;
      cy = static_cast<double>(rng.below(7)) - 3;
    }
    const double a = rng.uniform(12, 24);
    t.waves.push_back({cx * k, cy * k, rng.uniform(0, 2 * std::numbers::pi),
                       {a * rng.uniform(0.6, 1.0), a * rng.uniform(0.6, 1.0), a * rng.uniform(0.6, 1.0)}});
  }
  return t;
}

// Signed toroidal offset in [-size/2, size/2).
inline double wrap_delta(double d, double size) {
  d = std::fmod(d, size);
  if (d < -size / 2) d += size;
  if (d >= size / 2) d -= size;
  return d;
}

inline bool inside(Shape shape, double x, double y, double r) {
  switch (shape) {
    case Shape::Disc: return x * x + y * y <= r * r;
    case Shape::Square: return std::abs(x) <= r * 0.85 && std::abs(y) <= r * 0.85;
    case Shape::Ring: {
      const double d2 = x * x + y * y;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    case Shape::Triangle: {
      // upward-pointing isosceles triangle inscribed in radius r
      const double top = -r, bottom = 0.6 * r;
      if (y < top || y > bottom) return false;
      const double half = (y - top) / (bottom - top) * r;
      return std::abs(x) <= half;
    }
  }
  return false;
}

/// Fraction of a pixel covered by the shape, from 4x4 supersampling.
inline double coverage(Shape shape, double px, double py, double cx, double cy, double r, double size) {
  int hits = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx) {
      const double x = wrap_delta(px + (sx + 0.5) / 4 - 0.5 - cx, size);
      const double y = wrap_delta(py + (sy + 0.5) / 4 - 0.5 - cy, size);
      hits += inside(shape, x, y, r);
    }
  return hits / 16.0;
}

}  // namespace synth

/// Renders one clip. Moving classes translate the whole scene (texture and
/// object) with toroidal wrap; static classes keep every frame identical up to
/// sensor noise. The clip's content depends only on (seed, clip id, class).
inline std::vector<Image> render_synthetic_clip(const SynthSpec& spec, std::size_t class_index, const std::string& clip_id) {
  using namespace synth;
  CounterRng rng(CounterRng::hash(spec.seed, CounterRng::hash_string(clip_id)));
  const ClassCue cue = class_cue(spec, class_index);
  const double S = static_cast<double>(spec.image_size);
  const Texture tex = random_texture(rng, S);
  const Look& look = looks()[cue.look >= 0 ? static_cast<std::size_t>(cue.look)
                                           : static_cast<std::size_t>(rng.below(std::min<std::size_t>(spec.num_classes, 8)))];
  const double cx = rng.uniform(0, S), cy = rng.uniform(0, S);
  const double radius = S * rng.uniform(0.16, 0.22);
  const double ox0 = rng.uniform(0, S), oy0 = rng.uniform(0, S);
  double dx = 0, dy = 0;
  if (cue.direction >= 0) {
    dx = directions()[static_cast<std::size_t>(cue.direction)].dx * spec.speed;
    dy = directions()[static_cast<std::size_t>(cue.direction)].dy * spec.speed;
  }
  CounterRng noise = rng.derive(7);
  std::vector<Image> frames;
  frames.reserve(spec.frames_per_clip);
  for (std::size_t t = 0; t < spec.frames_per_clip; ++t) {
    Image img(spec.image_size, spec.image_size);
    const double ox = ox0 + dx * static_cast<double>(t), oy = oy0 + dy * static_cast<double>(t);
    for (std::size_t y = 0; y < spec.image_size; ++y)
      for (std::size_t x = 0; x < spec.image_size; ++x) {
        // scene coordinates of this pixel
        const double sx = static_cast<double>(x) - ox, sy = static_cast<double>(y) - oy;
        const auto bg = tex.at(sx, sy);
        const double cov = coverage(look.shape, sx, sy, cx, cy, radius, S);
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = bg[c] * (1 - cov) + look.colour[c] * cov + spec.noise_level * noise.normal();
          img.at(x, y, c) = saturate_u8(v);
        }
      }
    frames.push_back(std::move(img));
  }
  return frames;
}

/// Writes `<out_root>/<class>/<clip>/frame_%05d.png` and `<out_root>/manifest.json`.
inline DatasetManifest generate_synthetic(const SynthSpec& spec, const fs::path& out_root, std::size_t workers = 1) {
  spec.validate();
  DatasetManifest m;
  for (std::size_t k = 0; k < spec.num_classes; ++k) m.classes.push_back(synth::class_name(spec, k));
  for (std::size_t k = 0; k < spec.num_classes; ++k)
    for (std::size_t i = 0; i < spec.clips_per_class; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "c%02zu_%04zu", k, i);
      m.clips.push_back({id, m.classes[k], static_cast<int>(k), Split::Unassigned, m.classes[k] + "/" + id});
    }
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(m.clips.size());
  auto work = [&] {
    for (std::size_t i = next++; i < m.clips.size(); i = next++) {
      const ClipEntry& clip = m.clips[i];
      try {
        const auto frames = render_synthetic_clip(spec, static_cast<std::size_t>(clip.class_index), clip.id);
        for (std::size_t t = 0; t < frames.size(); ++t) {
          char name[32];
          std::snprintf(name, sizeof name, "frame_%05zu.png", t);
          write_image(out_root / clip.path / name, frames[t]);
        }
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::max<std::size_t>(workers, 1); ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (!e.empty()) fail(ErrorCode::IoError, e);
  write_manifest(out_root / "manifest.json", m);
  atomic_write(out_root / "synth_spec.json", to_json(spec).dump(2) + "\n");
  return m;
}

}  // namespace dualstream
