#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dualstream/flow.hpp"
#include "dualstream/synth.hpp"

using namespace dualstream;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dualstream_test_synth_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<fs::path> all_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

SampledClip as_sampled(std::vector<Image> frames) {
  SampledClip s;
  for (std::size_t t = 0; t < frames.size(); ++t) s.indices.push_back(t);
  s.frames = std::move(frames);
  s.middle_index = s.frames.size() / 2;
  return s;
}

// Mean displacement over every frame pair of a clip.
std::pair<double, double> mean_motion(const std::vector<Image>& frames) {
  double u = 0, v = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t + 1 < frames.size(); ++t) {
    const FlowField f = estimate_flow(to_luma(frames[t]), to_luma(frames[t + 1]));
    for (std::size_t i = 0; i < f.u.size(); ++i, ++n) {
      u += f.u[i];
      v += f.v[i];
    }
  }
  return {u / static_cast<double>(n), v / static_cast<double>(n)};
}

double angle_between(double ax, double ay, double bx, double by) {
  const double c = (ax * bx + ay * by) / (std::hypot(ax, ay) * std::hypot(bx, by));
  return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

}  // namespace

TEST(Synth, SameSeedGivesIdenticalFiles) {
  auto root = scratch_dir("det");
  SynthSpec spec;
  spec.num_classes = 2;
  spec.clips_per_class = 2;
  spec.frames_per_clip = 4;
  generate_synthetic(spec, root / "a", 1);
  generate_synthetic(spec, root / "b", 3);
  const auto files = all_files(root / "a");
  ASSERT_EQ(files, all_files(root / "b"));
  EXPECT_EQ(files.size(), 2u * 2 * 4 + 2);
  for (const auto& f : files) EXPECT_EQ(read_file(root / "a" / f), read_file(root / "b" / f)) << f;

  spec.seed = 43;
  generate_synthetic(spec, root / "c", 1);
  const fs::path some = files.front();
  EXPECT_NE(read_file(root / "a" / some), read_file(root / "c" / some));
}

TEST(Synth, ManifestMatchesDirectoryScan) {
  auto root = scratch_dir("scan");
  SynthSpec spec;
  spec.num_classes = 4;
  spec.clips_per_class = 2;
  spec.frames_per_clip = 3;
  const auto m = generate_synthetic(spec, root);
  const auto scanned = scan_dataset(root);
  EXPECT_EQ(scanned.classes, m.classes);
  ASSERT_EQ(scanned.clips.size(), m.clips.size());
  for (std::size_t i = 0; i < m.clips.size(); ++i) {
    EXPECT_EQ(scanned.clips[i].id, m.clips[i].id);
    EXPECT_EQ(scanned.clips[i].class_index, m.clips[i].class_index);
  }
  EXPECT_EQ(read_manifest(root / "manifest.json").classes, m.classes);
  EXPECT_EQ(synth_spec_from_json(nlohmann::json::parse(read_text(root / "synth_spec.json"))).seed, spec.seed);
}

TEST(Synth, MixedClassesPairLookWithOpposedDirections) {
  SynthSpec spec;
  spec.num_classes = 6;
  for (std::size_t k = 0; k < 6; ++k) {
    const auto cue = synth::class_cue(spec, k);
    EXPECT_EQ(cue.look, static_cast<int>(k / 2));
    const auto& d = synth::directions()[static_cast<std::size_t>(cue.direction)];
    EXPECT_EQ(d.dx, k % 2 == 0 ? 1.0 : -1.0);
  }
}

TEST(Synth, MotionClassesMoveInTheirDirection) {
  SynthSpec spec;
  spec.num_classes = 8;
  spec.cue_mode = CueMode::Motion;
  spec.frames_per_clip = 6;
  for (std::size_t k = 0; k < 8; ++k)
    for (int clip = 0; clip < 2; ++clip) {
      const auto frames = render_synthetic_clip(spec, k, "probe_" + std::to_string(k) + "_" + std::to_string(clip));
      const auto [u, v] = mean_motion(frames);
      const auto& d = synth::directions()[k];
      EXPECT_LE(angle_between(u, v, d.dx, d.dy), 30.0) << synth::class_name(spec, k) << " got " << u << "," << v;
      EXPECT_GT(std::hypot(u, v), 1.0);
    }
}

TEST(Synth, AppearanceClipsAreStatic) {
  SynthSpec spec;
  spec.num_classes = 8;
  spec.cue_mode = CueMode::Appearance;
  for (std::size_t k = 0; k < 8; ++k) {
    const FlowStack s = build_flow_stack(as_sampled(render_synthetic_clip(spec, k, "still_" + std::to_string(k))));
    double mean = 0;
    for (float x : s.values) mean += x;
    mean /= static_cast<double>(s.values.size());
    EXPECT_NEAR(mean, 127.5, 3.0) << synth::class_name(spec, k);
  }
}

TEST(Synth, AppearanceClassesDifferInColour) {
  SynthSpec spec;
  spec.cue_mode = CueMode::Appearance;
  spec.noise_level = 0;
  // the shape colour shows up as the most saturated pixels of the frame
  for (std::size_t k = 0; k < 4; ++k) {
    const Image img = render_synthetic_clip(spec, k, "colour")[0];
    const auto& want = synth::looks()[k].colour;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < img.width * img.height; ++i) {
      bool same = true;
      for (std::size_t c = 0; c < 3; ++c) same = same && std::abs(img.pixels[i * 3 + c] - want[c]) <= 1;
      hits += same;
    }
    EXPECT_GT(hits, 5u) << synth::class_name(spec, k);
  }
}

TEST(Synth, SpecValidation) {
  SynthSpec s;
  s.num_classes = 1;
  EXPECT_THROW(s.validate(), Error);
  s.num_classes = 9;
  EXPECT_THROW(s.validate(), Error);
  s.num_classes = 3;
  EXPECT_THROW(s.validate(), Error);
  s.cue_mode = CueMode::Motion;
  EXPECT_NO_THROW(s.validate());
  s.frames_per_clip = 1;
  EXPECT_THROW(s.validate(), Error);
  EXPECT_THROW(parse_cue_mode("both"), Error);
}

TEST(Synth, SpecJsonRoundTrip) {
  SynthSpec s;
  s.num_classes = 6;
  s.cue_mode = CueMode::Motion;
  s.noise_level = 0.5;
  s.seed = 7;
  const SynthSpec r = synth_spec_from_json(to_json(s));
  EXPECT_EQ(r.num_classes, 6u);
  EXPECT_EQ(r.cue_mode, CueMode::Motion);
  EXPECT_EQ(r.noise_level, 0.5);
  EXPECT_EQ(r.seed, 7u);
}
