#pragma once

#include <cstdlib>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualstream/dataset.hpp"
#include "dualstream/farneback.hpp"
#include "dualstream/fsutil.hpp"
#include "dualstream/model.hpp"

namespace dualstream {

using json = nlohmann::json;

struct TrainConfig {
  double lr = 1e-4;
  double flow_only_lr = 5e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 10;
  std::size_t flow_only_max_epochs = 50;
  std::size_t patience = 5;
  double min_delta = 1e-4;
  bool freeze_rgb_backbone = false;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(lr > 0) || !(flow_only_lr > 0) || weight_decay < 0 || batch_size == 0 || max_epochs == 0 ||
        flow_only_max_epochs == 0 || patience == 0 || min_delta < 0)
      fail(ErrorCode::InvalidArgument, "invalid training config");
    if (patience >= max_epochs || patience >= flow_only_max_epochs)
      fail(ErrorCode::InvalidArgument, "patience must be smaller than the epoch budget");
  }
};

/// Defaults for every key a config file may set. Files and --set overrides are
/// merged on top of this document.
inline json default_config() {
  return json::parse(R"({
    "dataset": {"root": "", "cache_root": "", "frames": 16, "size": 224,
                "split": {"train": 0.7, "val": 0.1, "test": 0.2}, "seed": 42},
    "flow": {"pyr_scale": 0.5, "levels": 5, "winsize": 11, "iterations": 5, "poly_n": 5, "poly_sigma": 1.1},
    "model": {
      "vit": {"patch_size": 16, "embed_dim": 192, "depth": 12, "heads": 3, "mlp_ratio": 4.0},
      "mobilenet": {"width_multiplier": 1.0, "stem_channels": 32, "final_dim": null, "stages": null},
      "attention_heads": 4,
      "projection_dropout": 0.1,
      "seed": 42
    },
    "train": {"lr": 1e-4, "flow_only_lr": 5e-4, "weight_decay": 1e-4, "batch_size": 8, "max_epochs": 10,
              "flow_only_max_epochs": 50, "patience": 5, "min_delta": 1e-4, "freeze_rgb_backbone": false, "seed": 42},
    "run": {"mode": "fusion", "head": "weighted"},
    "workers": 1,
    "deterministic": false
  })");
}

/// Parses the right-hand side of key=value as JSON when possible, otherwise as a string.
inline json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail(ErrorCode::InvalidArgument, "override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCode::InvalidArgument, "empty path segment in '" + key + "'");
    if (node->is_null()) *node = json::object();
    if (!node->is_object()) fail(ErrorCode::InvalidArgument, "'" + key + "' descends into a non-object");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = parse_override_value(assignment.substr(eq + 1));
}

/// model.vit and model.mobilenet may name a JSON file instead of holding the
/// settings inline. Relative paths are taken from `base`. The file is merged
/// over the defaults, so the resolved config never refers to other files.
inline void inline_encoder_files(json& cfg, const fs::path& base) {
  const json defaults = default_config();
  for (const char* enc : {"vit", "mobilenet"}) {
    json& node = cfg["model"][enc];
    if (!node.is_string()) continue;
    fs::path p = node.get<std::string>();
    if (p.is_relative()) p = base / p;
    json merged = defaults["model"][enc];
    try {
      merged.merge_patch(json::parse(read_text(p)));
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidArgument, p.string() + ": " + e.what());
    }
    node = merged;
  }
}

/// defaults <- file (if any) <- overrides, in that order.
inline json resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
  json cfg = default_config();
  if (!file.empty()) {
    try {
      cfg.merge_patch(json::parse(read_text(file)));
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidArgument, file + ": " + e.what());
    }
    inline_encoder_files(cfg, fs::path(file).parent_path());
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  inline_encoder_files(cfg, fs::current_path());
  if (cfg["dataset"]["cache_root"].get<std::string>().empty())
    if (const char* env = std::getenv("DUALSTREAM_CACHE")) cfg["dataset"]["cache_root"] = env;
  return cfg;
}

inline FarnebackParams flow_params_from(const json& cfg) {
  const json& f = cfg.at("flow");
  FarnebackParams p;
  p.pyr_scale = f.at("pyr_scale").get<double>();
  p.levels = f.at("levels").get<int>();
  p.winsize = f.at("winsize").get<int>();
  p.iterations = f.at("iterations").get<int>();
  p.poly_n = f.at("poly_n").get<int>();
  p.poly_sigma = f.at("poly_sigma").get<double>();
  p.validate();
  return p;
}

inline TrainConfig train_config_from(const json& cfg) {
  const json& t = cfg.at("train");
  TrainConfig c;
  c.lr = t.at("lr").get<double>();
  c.flow_only_lr = t.at("flow_only_lr").get<double>();
  c.weight_decay = t.at("weight_decay").get<double>();
  c.batch_size = t.at("batch_size").get<std::size_t>();
  c.max_epochs = t.at("max_epochs").get<std::size_t>();
  c.flow_only_max_epochs = t.at("flow_only_max_epochs").get<std::size_t>();
  c.patience = t.at("patience").get<std::size_t>();
  c.min_delta = t.at("min_delta").get<double>();
  c.freeze_rgb_backbone = t.at("freeze_rgb_backbone").get<bool>();
  c.seed = t.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

/// Model settings; `mode` and `head` come from run.* unless given.
inline ModelConfig model_config_from(const json& cfg, std::size_t num_classes) {
  const json& m = cfg.at("model");
  ModelConfig mc;
  mc.mode = parse_stream_mode(cfg.at("run").at("mode").get<std::string>());
  mc.head = parse_fusion_kind(cfg.at("run").at("head").get<std::string>());
  const std::size_t size = cfg.at("dataset").at("size").get<std::size_t>();
  const json& v = m.at("vit");
  mc.vit.image_size = v.value("image_size", size);
  mc.vit.patch_size = v.at("patch_size").get<std::size_t>();
  mc.vit.embed_dim = v.at("embed_dim").get<std::size_t>();
  mc.vit.depth = v.at("depth").get<std::size_t>();
  mc.vit.heads = v.at("heads").get<std::size_t>();
  mc.vit.mlp_ratio = v.at("mlp_ratio").get<double>();
  if (v.value("in_channels", std::size_t{3}) != 3) fail(ErrorCode::ConfigMismatch, "the RGB encoder takes 3 channels");
  const json& mb = m.at("mobilenet");
  mc.mobilenet.input_size = mb.value("input_size", size);
  if (mb.value("in_channels", kFlowChannels) != kFlowChannels)
    fail(ErrorCode::ConfigMismatch, "the flow encoder takes " + std::to_string(kFlowChannels) + " channels");
  mc.mobilenet.width_multiplier = mb.at("width_multiplier").get<double>();
  mc.mobilenet.stem_channels = mb.at("stem_channels").get<std::size_t>();
  if (!mb.at("final_dim").is_null()) mc.mobilenet.final_dim = mb.at("final_dim").get<std::size_t>();
  if (!mb.at("stages").is_null()) {
    mc.mobilenet.stages.clear();
    for (const auto& s : mb.at("stages")) {
      const auto v4 = s.get<std::vector<std::size_t>>();
      if (v4.size() != 4) fail(ErrorCode::ConfigMismatch, "a stage is [expansion, channels, repeats, stride]");
      mc.mobilenet.stages.push_back({v4[0], v4[1], v4[2], v4[3]});
    }
  }
  mc.num_classes = num_classes;
  mc.attention_heads = m.at("attention_heads").get<std::size_t>();
  mc.projection_dropout = m.at("projection_dropout").get<double>();
  mc.seed = m.at("seed").get<std::uint64_t>();
  if (mc.vit.image_size != size || mc.mobilenet.input_size != size)
    fail(ErrorCode::ConfigMismatch, "encoder input sizes must equal dataset.size (" + std::to_string(size) + ")");
  mc.vit.validate();
  mc.mobilenet.validate();
  return mc;
}

inline SplitFractions split_fractions_from(const json& cfg) {
  const json& s = cfg.at("dataset").at("split");
  return {s.at("train").get<double>(), s.at("val").get<double>(), s.at("test").get<double>()};
}

inline std::size_t workers_from(const json& cfg) {
  if (cfg.value("deterministic", false)) return 1;
  return std::max<std::size_t>(1, cfg.value("workers", std::size_t{1}));
}

inline void write_resolved_config(const fs::path& dir, const json& cfg) {
  atomic_write(dir / "resolved_config.json", cfg.dump(2) + "\n");
}

}  // namespace dualstream
