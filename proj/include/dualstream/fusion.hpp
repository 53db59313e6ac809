#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "dualstream/nn.hpp"

namespace dualstream {

enum class FusionKind { Late, Concat, Attention, Weighted, Gated };

inline constexpr std::array<FusionKind, 5> kAllFusionKinds = {FusionKind::Late, FusionKind::Concat, FusionKind::Attention,
                                                              FusionKind::Weighted, FusionKind::Gated};

inline std::string_view to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::Late: return "late";
    case FusionKind::Concat: return "concat";
    case FusionKind::Attention: return "attention";
    case FusionKind::Weighted: return "weighted";
    case FusionKind::Gated: return "gated";
  }
  return "?";
}

inline FusionKind parse_fusion_kind(std::string_view s) {
  for (FusionKind k : kAllFusionKinds)
    if (to_string(k) == s) return k;
  fail(ErrorCode::ConfigMismatch, "unknown fusion head '" + std::string(s) + "'");
}

/// Motion-feature projection: Dropout(ReLU(W f + b)).
template <typename T>
class Projection : public Module<T> {
 public:
  Projection(std::size_t in, std::size_t out, CounterRng& rng, double dropout = 0.1)
      : fc_(in, out, rng), dropout_(dropout) {
    this->add_child("fc", fc_);
    this->add_child("dropout", dropout_);
  }
  Tensor<T> forward(const Tensor<T>& f) const { return dropout_.forward(relu(fc_.forward(f))); }
  Linear<T>& fc() { return fc_; }

 private:
  Linear<T> fc_;
  Dropout<T> dropout_;
};

/// Common interface: (h_rgb [B, d], h_flow [B, d]) -> [B, C].
template <typename T>
class FusionHead : public Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const = 0;
  virtual FusionKind kind() const = 0;
  /// True when forward() yields class probabilities rather than logits.
  virtual bool outputs_probabilities() const { return false; }
  /// (alpha_rgb, alpha_flow) for heads that learn stream weights.
  virtual std::optional<std::pair<double, double>> stream_weights() const { return std::nullopt; }

 protected:
  FusionHead(std::size_t dim, std::size_t classes) : dim_(dim), classes_(classes) {}

  void check_inputs(const Tensor<T>& a, const Tensor<T>& b) const {
    if (a.rank() != 2 || a.shape() != b.shape() || a.dim(1) != dim_)
      fail(ErrorCode::ShapeMismatch, std::string(to_string(kind())) + " fusion expects two [B, " +
                                         std::to_string(dim_) + "] inputs, got " + shape_str(a.shape()) + " and " +
                                         shape_str(b.shape()));
  }

  std::size_t dim_, classes_;
};

template <typename T>
class LateFusion : public FusionHead<T> {
 public:
  LateFusion(std::size_t dim, std::size_t classes, CounterRng& rng)
      : FusionHead<T>(dim, classes), rgb_(dim, classes, rng), flow_(dim, classes, rng) {
    this->add_child("rgb_classifier", rgb_);
    this->add_child("flow_classifier", flow_);
  }
  Tensor<T> forward(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const override {
    this->check_inputs(h_rgb, h_flow);
    return mul_scalar(add(softmax(rgb_.forward(h_rgb)), softmax(flow_.forward(h_flow))), T(0.5));
  }
  FusionKind kind() const override { return FusionKind::Late; }
  bool outputs_probabilities() const override { return true; }
  Linear<T>& rgb_classifier() { return rgb_; }
  Linear<T>& flow_classifier() { return flow_; }

 private:
  Linear<T> rgb_, flow_;
};

template <typename T>
class ConcatFusion : public FusionHead<T> {
 public:
  ConcatFusion(std::size_t dim, std::size_t classes, CounterRng& rng, double dropout = 0.3)
      : FusionHead<T>(dim, classes), fc1_(2 * dim, dim, rng), dropout_(dropout), fc2_(dim, classes, rng) {
    this->add_child("fc1", fc1_);
    this->add_child("dropout", dropout_);
    this->add_child("fc2", fc2_);
  }
  Tensor<T> forward(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const override {
    this->check_inputs(h_rgb, h_flow);
    Tensor<T> hidden = relu(fc1_.forward(concat<T>({h_rgb, h_flow}, 1)));
    return fc2_.forward(dropout_.forward(hidden));
  }
  FusionKind kind() const override { return FusionKind::Concat; }
  Linear<T>& fc1() { return fc1_; }
  Linear<T>& fc2() { return fc2_; }

 private:
  Linear<T> fc1_;
  Dropout<T> dropout_;
  Linear<T> fc2_;
};

/// RGB queries attend over flow keys/values; LN(h_rgb + attn) feeds a linear classifier.
template <typename T>
class AttentionFusion : public FusionHead<T> {
 public:
  AttentionFusion(std::size_t dim, std::size_t classes, CounterRng& rng, std::size_t heads = 4)
      : FusionHead<T>(dim, classes), attn_(dim, heads, rng, LinearInit::UniformFanIn), norm_(dim),
        classifier_(dim, classes, rng) {
    this->add_child("attn", attn_);
    this->add_child("norm", norm_);
    this->add_child("classifier", classifier_);
  }
  Tensor<T> cross_features(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const {
    this->check_inputs(h_rgb, h_flow);
    const std::size_t B = h_rgb.dim(0);
    Tensor<T> q = reshape(h_rgb, {B, 1, this->dim_});
    Tensor<T> kv = reshape(h_flow, {B, 1, this->dim_});
    Tensor<T> attended = reshape(attn_.forward(q, kv, kv), {B, this->dim_});
    return norm_.forward(add(h_rgb, attended));
  }
  Tensor<T> forward(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const override {
    return classifier_.forward(cross_features(h_rgb, h_flow));
  }
  FusionKind kind() const override { return FusionKind::Attention; }
  MultiHeadAttention<T>& attention() { return attn_; }
  Linear<T>& classifier() { return classifier_; }

 private:
  MultiHeadAttention<T> attn_;
  LayerNorm<T> norm_;
  Linear<T> classifier_;
};

/// Convex combination with (alpha_rgb, alpha_flow) = softmax([w1, w2]).
template <typename T>
class WeightedFusion : public FusionHead<T> {
 public:
  WeightedFusion(std::size_t dim, std::size_t classes, CounterRng& rng)
      : FusionHead<T>(dim, classes), classifier_(dim, classes, rng) {
    w_ = this->add_parameter("w", Tensor<T>::zeros({2}));
    this->add_child("classifier", classifier_);
  }
  Tensor<T> fused(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const {
    this->check_inputs(h_rgb, h_flow);
    Tensor<T> alpha = softmax(w_);
    return add(scale(h_rgb, select(alpha, 0, 0)), scale(h_flow, select(alpha, 0, 1)));
  }
  Tensor<T> forward(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const override {
    return classifier_.forward(fused(h_rgb, h_flow));
  }
  FusionKind kind() const override { return FusionKind::Weighted; }
  /// softmax(w) in 64-bit. The smaller weight is taken as the complement of
  /// the larger one, which is exact, so the pair always sums to 1.
  std::optional<std::pair<double, double>> stream_weights() const override {
    const double w0 = static_cast<double>(w_[0]), w1 = static_cast<double>(w_[1]);
    const double big = 1.0 / (1.0 + std::exp(-std::abs(w0 - w1)));
    return w0 >= w1 ? std::make_pair(big, 1.0 - big) : std::make_pair(1.0 - big, big);
  }
  Tensor<T>& logits_w() { return w_; }
  Linear<T>& classifier() { return classifier_; }

 private:
  Tensor<T> w_;
  Linear<T> classifier_;
};

/// Per-dimension gate g = sigmoid(W_g [h_rgb; h_flow] + b_g) blending the streams.
template <typename T>
class GatedFusion : public FusionHead<T> {
 public:
  GatedFusion(std::size_t dim, std::size_t classes, CounterRng& rng)
      : FusionHead<T>(dim, classes), gate_(2 * dim, dim, rng), classifier_(dim, classes, rng) {
    this->add_child("gate", gate_);
    this->add_child("classifier", classifier_);
  }
  Tensor<T> gate_values(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const {
    this->check_inputs(h_rgb, h_flow);
    return sigmoid(gate_.forward(concat<T>({h_rgb, h_flow}, 1)));
  }
  Tensor<T> fused(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const {
    Tensor<T> g = gate_values(h_rgb, h_flow);
    Tensor<T> one_minus_g = add_scalar(mul_scalar(g, T(-1)), T(1));
    return add(mul(g, h_rgb), mul(one_minus_g, h_flow));
  }
  Tensor<T> forward(const Tensor<T>& h_rgb, const Tensor<T>& h_flow) const override {
    return classifier_.forward(fused(h_rgb, h_flow));
  }
  FusionKind kind() const override { return FusionKind::Gated; }
  Linear<T>& gate() { return gate_; }
  Linear<T>& classifier() { return classifier_; }

 private:
  Linear<T> gate_;
  Linear<T> classifier_;
};

template <typename T>
std::unique_ptr<FusionHead<T>> make_fusion_head(FusionKind kind, std::size_t dim, std::size_t classes, CounterRng rng,
                                                std::size_t attention_heads = 4) {
  switch (kind) {
    case FusionKind::Late: return std::make_unique<LateFusion<T>>(dim, classes, rng);
    case FusionKind::Concat: return std::make_unique<ConcatFusion<T>>(dim, classes, rng);
    case FusionKind::Attention: return std::make_unique<AttentionFusion<T>>(dim, classes, rng, attention_heads);
    case FusionKind::Weighted: return std::make_unique<WeightedFusion<T>>(dim, classes, rng);
    case FusionKind::Gated: return std::make_unique<GatedFusion<T>>(dim, classes, rng);
  }
  fail(ErrorCode::ConfigMismatch, "unknown fusion head");
}

}  // namespace dualstream
