#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "dualstream/nn.hpp"

namespace dualstream {

struct ViTConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t in_channels = 3;
  std::size_t embed_dim = 192;
  std::size_t depth = 12;
  std::size_t heads = 3;
  double mlp_ratio = 4.0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t sequence_length() const { return num_patches() + 1; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(static_cast<double>(embed_dim) * mlp_ratio); }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
      fail(ErrorCode::ConfigMismatch, "image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                                          std::to_string(patch_size));
    if (heads == 0 || embed_dim % heads != 0)
      fail(ErrorCode::HeadsMismatch, "embed_dim " + std::to_string(embed_dim) + " is not divisible by " +
                                         std::to_string(heads) + " heads");
    if (depth == 0 || in_channels == 0 || mlp_hidden() == 0) fail(ErrorCode::ConfigMismatch, "degenerate ViT config");
  }
};

/// Pre-norm encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)) with GELU.
template <typename T>
class TransformerBlock : public Module<T> {
 public:
  TransformerBlock(std::size_t dim, std::size_t heads, std::size_t hidden, CounterRng& rng)
      : norm1_(dim), attn_(dim, heads, rng, LinearInit::TruncNormal), norm2_(dim),
        fc1_(dim, hidden, rng, LinearInit::TruncNormal), fc2_(hidden, dim, rng, LinearInit::TruncNormal) {
    this->add_child("norm1", norm1_);
    this->add_child("attn", attn_);
    this->add_child("norm2", norm2_);
    this->add_child("mlp.fc1", fc1_);
    this->add_child("mlp.fc2", fc2_);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = norm1_.forward(x);
    Tensor<T> y = add(x, attn_.forward(h, h, h));
    return add(y, fc2_.forward(gelu(fc1_.forward(norm2_.forward(y)))));
  }

  MultiHeadAttention<T>& attention() { return attn_; }

 private:
  LayerNorm<T> norm1_;
  MultiHeadAttention<T> attn_;
  LayerNorm<T> norm2_;
  Linear<T> fc1_, fc2_;
};

/// Patch-embedding transformer; returns the layer-normalised class token.
template <typename T>
class ViTEncoder : public Module<T> {
 public:
  ViTEncoder(const ViTConfig& cfg, CounterRng rng)
      : cfg_((cfg.validate(), cfg)),
        patch_embed_(cfg.in_channels * cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng, LinearInit::TruncNormal),
        norm_(cfg.embed_dim) {
    const std::size_t d = cfg.embed_dim;
    this->add_child("patch_embed", patch_embed_);
    cls_ = this->add_parameter("cls_token", Tensor<T>::from({1, 1, d}, init::trunc_normal<T>(d, 0.02, rng)));
    pos_ = this->add_parameter("pos_embed", Tensor<T>::from({1, cfg.sequence_length(), d},
                                                            init::trunc_normal<T>(cfg.sequence_length() * d, 0.02, rng)));
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      blocks_.push_back(std::make_unique<TransformerBlock<T>>(d, cfg.heads, cfg.mlp_hidden(), rng));
      this->add_child("blocks." + std::to_string(i), *blocks_.back());
    }
    this->add_child("norm", norm_);
  }

  /// Token sequence after embedding and positional encoding: [B, P + 1, d].
  Tensor<T> embed(const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size)
      fail(ErrorCode::ConfigMismatch, "ViT expects [B, " + std::to_string(cfg_.in_channels) + ", " +
                                          std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) +
                                          "], got " + shape_str(images.shape()));
    const std::size_t B = images.dim(0);
    Tensor<T> tokens = patch_embed_.forward(patchify(images, cfg_.patch_size));
    Tensor<T> seq = concat<T>({repeat_leading(cls_, B), tokens}, 1);
    return add(seq, pos_);
  }

  /// [B, C, S, S] -> [B, embed_dim]
  Tensor<T> forward(const Tensor<T>& images) const {
    Tensor<T> x = embed(images);
    for (const auto& block : blocks_) x = block->forward(x);
    return select(norm_.forward(x), 1, 0);
  }

  const ViTConfig& config() const { return cfg_; }
  Tensor<T>& pos_embed() { return pos_; }
  Tensor<T>& cls_token() { return cls_; }
  TransformerBlock<T>& block(std::size_t i) { return *blocks_.at(i); }

 private:
  ViTConfig cfg_;
  Linear<T> patch_embed_;
  Tensor<T> cls_, pos_;
  std::vector<std::unique_ptr<TransformerBlock<T>>> blocks_;
  LayerNorm<T> norm_;
};

}  // namespace dualstream
