#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dualstream/nn.hpp"

namespace dualstream {

struct InvertedResidualStage {
  std::size_t expansion;  ///< t
  std::size_t channels;   ///< c
  std::size_t repeats;    ///< n
  std::size_t stride;     ///< s
};

/// Rounds to the nearest multiple of `divisor`, never dropping more than 10%.
inline std::size_t make_divisible(double value, std::size_t divisor = 8) {
  const double d = static_cast<double>(divisor);
  auto rounded = static_cast<std::size_t>(std::max(d, std::floor((value + d / 2.0) / d) * d));
  if (static_cast<double>(rounded) < 0.9 * value) rounded += divisor;
  return rounded;
}

struct MobileNetV2Config {
  std::size_t in_channels = 20;
  std::size_t input_size = 224;
  double width_multiplier = 1.0;
  std::size_t stem_channels = 32;
  /// Width of the final 1x1 conv. Unset means 1280 * max(1, width_multiplier).
  std::optional<std::size_t> final_dim;
  std::vector<InvertedResidualStage> stages = {
      {1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2}, {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1},
  };

  std::size_t resolved_final_dim() const {
    return final_dim ? *final_dim : make_divisible(1280.0 * std::max(1.0, width_multiplier));
  }
  std::size_t resolved_stem_channels() const {
    return make_divisible(static_cast<double>(stem_channels) * width_multiplier);
  }

  void validate() const {
    if (in_channels == 0 || input_size == 0 || width_multiplier <= 0.0 || stages.empty() || resolved_final_dim() == 0)
      fail(ErrorCode::ConfigMismatch, "degenerate MobileNetV2 config");
    for (const auto& s : stages)
      if (s.expansion == 0 || s.channels == 0 || s.repeats == 0 || s.stride == 0)
        fail(ErrorCode::ConfigMismatch, "invalid inverted-residual stage");
  }
};

/// conv -> batchnorm -> optional relu6
template <typename T>
class ConvBnAct : public Module<T> {
 public:
  ConvBnAct(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t groups, bool act,
            CounterRng& rng)
      : conv_(in, out, kernel, stride, (kernel - 1) / 2, groups, rng), bn_(out), act_(act) {
    this->add_child("conv", conv_);
    this->add_child("bn", bn_);
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = bn_.forward(conv_.forward(x));
    return act_ ? relu6(y) : y;
  }
  Conv2d<T>& conv() { return conv_; }

 private:
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  bool act_;
};

/// expand 1x1 -> depthwise 3x3 -> linear 1x1 bottleneck, with identity shortcut
/// when the stride is 1 and channel counts match.
template <typename T>
class InvertedResidual : public Module<T> {
 public:
  InvertedResidual(std::size_t in, std::size_t out, std::size_t stride, std::size_t expansion, CounterRng& rng)
      : hidden_(static_cast<std::size_t>(std::lround(static_cast<double>(in * expansion)))),
        residual_(stride == 1 && in == out) {
    if (expansion != 1) {
      expand_ = std::make_unique<ConvBnAct<T>>(in, hidden_, 1, 1, 1, true, rng);
      this->add_child("expand", *expand_);
    }
    depthwise_ = std::make_unique<ConvBnAct<T>>(hidden_, hidden_, 3, stride, hidden_, true, rng);
    project_ = std::make_unique<ConvBnAct<T>>(hidden_, out, 1, 1, 1, false, rng);
    this->add_child("depthwise", *depthwise_);
    this->add_child("project", *project_);
  }

  Tensor<T> branch(const Tensor<T>& x) const {
    Tensor<T> h = expand_ ? expand_->forward(x) : x;
    return project_->forward(depthwise_->forward(h));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return residual_ ? add(x, branch(x)) : branch(x); }

  bool has_residual() const { return residual_; }
  ConvBnAct<T>& project() { return *project_; }

 private:
  std::size_t hidden_;
  bool residual_;
  std::unique_ptr<ConvBnAct<T>> expand_, depthwise_, project_;
};

/// Convolutional motion encoder over a centred flow stack; returns the pooled
/// final feature [B, final_dim].
template <typename T>
class MobileNetV2Encoder : public Module<T> {
 public:
  MobileNetV2Encoder(const MobileNetV2Config& cfg, CounterRng rng) : cfg_((cfg.validate(), cfg)) {
    std::size_t channels = cfg.resolved_stem_channels();
    stem_ = std::make_unique<ConvBnAct<T>>(cfg.in_channels, channels, 3, 2, 1, true, rng);
    this->add_child("stem", *stem_);
    for (const auto& stage : cfg.stages) {
      const std::size_t out = make_divisible(static_cast<double>(stage.channels) * cfg.width_multiplier);
      for (std::size_t i = 0; i < stage.repeats; ++i) {
        blocks_.push_back(
            std::make_unique<InvertedResidual<T>>(channels, out, i == 0 ? stage.stride : 1, stage.expansion, rng));
        this->add_child("blocks." + std::to_string(blocks_.size() - 1), *blocks_.back());
        channels = out;
      }
    }
    head_ = std::make_unique<ConvBnAct<T>>(channels, cfg.resolved_final_dim(), 1, 1, 1, true, rng);
    this->add_child("head", *head_);
  }

  Tensor<T> forward(const Tensor<T>& stack) const {
    if (stack.rank() != 4 || stack.dim(1) != cfg_.in_channels || stack.dim(2) != cfg_.input_size ||
        stack.dim(3) != cfg_.input_size)
      fail(ErrorCode::ConfigMismatch, "MobileNetV2 expects [B, " + std::to_string(cfg_.in_channels) + ", " +
                                          std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) +
                                          "], got " + shape_str(stack.shape()));
    Tensor<T> x = stem_->forward(stack);
    for (const auto& block : blocks_) x = block->forward(x);
    return global_avg_pool(head_->forward(x));
  }

  const MobileNetV2Config& config() const { return cfg_; }
  std::size_t output_dim() const { return cfg_.resolved_final_dim(); }
  std::size_t num_blocks() const { return blocks_.size(); }
  InvertedResidual<T>& block(std::size_t i) { return *blocks_.at(i); }

 private:
  MobileNetV2Config cfg_;
  std::unique_ptr<ConvBnAct<T>> stem_;
  std::vector<std::unique_ptr<InvertedResidual<T>>> blocks_;
  std::unique_ptr<ConvBnAct<T>> head_;
};

}  // namespace dualstream
