#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dualstream/fusion.hpp"
#include "dualstream/mobilenet.hpp"
#include "dualstream/vit.hpp"

namespace dualstream {

enum class StreamMode { RgbOnly, FlowOnly, Fusion };

inline std::string_view to_string(StreamMode m) {
  switch (m) {
    case StreamMode::RgbOnly: return "rgb_only";
    case StreamMode::FlowOnly: return "flow_only";
    case StreamMode::Fusion: return "fusion";
  }
  return "?";
}

inline StreamMode parse_stream_mode(std::string_view s) {
  if (s == "rgb_only") return StreamMode::RgbOnly;
  if (s == "flow_only") return StreamMode::FlowOnly;
  if (s == "fusion") return StreamMode::Fusion;
  fail(ErrorCode::ConfigMismatch, "unknown stream mode '" + std::string(s) + "'");
}

struct ModelConfig {
  StreamMode mode = StreamMode::Fusion;
  FusionKind head = FusionKind::Weighted;
  ViTConfig vit;
  MobileNetV2Config mobilenet;
  std::size_t num_classes = 2;
  std::size_t attention_heads = 4;
  double projection_dropout = 0.1;
  std::uint64_t seed = 42;

  bool uses_rgb() const { return mode != StreamMode::FlowOnly; }
  bool uses_flow() const { return mode != StreamMode::RgbOnly; }

  /// Short identifier used for report rows: rgb_only, flow_only or the head name.
  std::string id() const { return mode == StreamMode::Fusion ? std::string(to_string(head)) : std::string(to_string(mode)); }
};

template <typename T>
struct ModelOutput {
  Tensor<T> values;  ///< [B, C]
  bool probabilities = false;
};

/// Appearance encoder + motion encoder/projection + fusion head, or a single
/// stream with a linear classifier for the baselines.
template <typename T>
class DualStreamModel : public Module<T> {
 public:
  explicit DualStreamModel(const ModelConfig& cfg) : cfg_(cfg) {
    CounterRng root(cfg.seed);
    if (cfg.uses_rgb()) {
      rgb_ = std::make_unique<ViTEncoder<T>>(cfg.vit, root.derive(1));
      this->add_child("rgb", *rgb_);
    }
    if (cfg.uses_flow()) {
      flow_ = std::make_unique<MobileNetV2Encoder<T>>(cfg.mobilenet, root.derive(2));
      this->add_child("flow", *flow_);
    }
    CounterRng head_rng = root.derive(4);
    switch (cfg.mode) {
      case StreamMode::RgbOnly:
        classifier_ = std::make_unique<Linear<T>>(cfg.vit.embed_dim, cfg.num_classes, head_rng);
        this->add_child("classifier", *classifier_);
        break;
      case StreamMode::FlowOnly:
        classifier_ = std::make_unique<Linear<T>>(flow_->output_dim(), cfg.num_classes, head_rng);
        this->add_child("classifier", *classifier_);
        break;
      case StreamMode::Fusion: {
        CounterRng proj_rng = root.derive(3);
        projection_ = std::make_unique<Projection<T>>(flow_->output_dim(), cfg.vit.embed_dim, proj_rng,
                                                      cfg.projection_dropout);
        this->add_child("projection", *projection_);
        head_ = make_fusion_head<T>(cfg.head, cfg.vit.embed_dim, cfg.num_classes, head_rng, cfg.attention_heads);
        this->add_child("fusion", *head_);
        break;
      }
    }
  }

  /// rgb: [B, 3, S, S] normalised frames; flow: [B, 20, S, S] centred stacks.
  /// Inputs for an unused stream are ignored and may be undefined.
  ModelOutput<T> forward(const Tensor<T>& rgb, const Tensor<T>& flow) const {
    switch (cfg_.mode) {
      case StreamMode::RgbOnly: return {classifier_->forward(rgb_->forward(rgb)), false};
      case StreamMode::FlowOnly: return {classifier_->forward(flow_->forward(flow)), false};
      case StreamMode::Fusion: {
        Tensor<T> h_rgb = rgb_->forward(rgb);
        Tensor<T> h_flow = projection_->forward(flow_->forward(flow));
        return {head_->forward(h_rgb, h_flow), head_->outputs_probabilities()};
      }
    }
    fail(ErrorCode::ConfigMismatch, "unreachable stream mode");
  }

  static Tensor<T> loss(const ModelOutput<T>& out, std::span<const int> labels) {
    return out.probabilities ? nll_from_probs(out.values, labels) : cross_entropy(out.values, labels);
  }

  /// Class probabilities for reporting; logits go through softmax.
  static Tensor<T> probabilities(const ModelOutput<T>& out) {
    return out.probabilities ? out.values : softmax(out.values);
  }

  /// Parameters the optimiser updates; the appearance backbone is skipped when frozen.
  std::vector<Tensor<T>> trainable_parameters(bool freeze_rgb_backbone) const {
    std::vector<Tensor<T>> out;
    for (auto& p : this->named_parameters())
      if (!(freeze_rgb_backbone && p.name.rfind("rgb.", 0) == 0)) out.push_back(p.tensor);
    return out;
  }

  std::optional<std::pair<double, double>> stream_weights() const {
    return head_ ? head_->stream_weights() : std::nullopt;
  }

  const ModelConfig& config() const { return cfg_; }
  ViTEncoder<T>* rgb_encoder() { return rgb_.get(); }
  MobileNetV2Encoder<T>* flow_encoder() { return flow_.get(); }
  Projection<T>* projection() { return projection_.get(); }
  FusionHead<T>* head() { return head_.get(); }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ViTEncoder<T>> rgb_;
  std::unique_ptr<MobileNetV2Encoder<T>> flow_;
  std::unique_ptr<Projection<T>> projection_;
  std::unique_ptr<FusionHead<T>> head_;
  std::unique_ptr<Linear<T>> classifier_;
};

}  // namespace dualstream
