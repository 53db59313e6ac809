#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualstream/ops.hpp"
#include "dualstream/rng.hpp"

namespace dualstream {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Base for every layer. Children are registered by pointer, so a module must
/// stay at a fixed address once built (copy and move are deleted).
template <typename T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  void train(bool on = true) {
    training_ = on;
    for (auto& [name, child] : children_) child->train(on);
  }
  void eval() { train(false); }
  bool is_training() const { return training_; }

  std::vector<NamedTensor<T>> named_parameters(const std::string& prefix = "") const {
    std::vector<NamedTensor<T>> out;
    collect(prefix, out, false);
    return out;
  }

  std::vector<NamedTensor<T>> named_buffers(const std::string& prefix = "") const {
    std::vector<NamedTensor<T>> out;
    collect(prefix, out, true);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : named_parameters()) p.tensor.zero_grad();
  }

  /// Seeds every dropout site under this module (see Dropout).
  virtual void set_dropout_seed(std::uint64_t seed) {
    std::uint64_t i = 0;
    for (auto& [name, child] : children_) child->set_dropout_seed(CounterRng::hash(seed, i++));
  }

 protected:
  Tensor<T> add_parameter(std::string name, Tensor<T> t) {
    t.set_requires_grad(true);
    params_.push_back({std::move(name), t});
    return t;
  }
  Tensor<T> add_buffer(std::string name, Tensor<T> t) {
    buffers_.push_back({std::move(name), t});
    return t;
  }
  template <typename M>
  M& add_child(std::string name, M& child) {
    children_.emplace_back(std::move(name), &child);
    return child;
  }

 private:
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out, bool buffers) const {
    const std::string dot = prefix.empty() ? "" : prefix + ".";
    for (const auto& p : buffers ? buffers_ : params_) out.push_back({dot + p.name, p.tensor});
    for (const auto& [name, child] : children_) child->collect(dot + name, out, buffers);
  }

  bool training_ = true;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
};

// ---------------------------------------------------------------------------
// Initialisers

namespace init {

template <typename T>
std::vector<T> trunc_normal(std::size_t n, double std, CounterRng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    x = static_cast<T>(z * std);
  }
  return v;
}

template <typename T>
std::vector<T> uniform(std::size_t n, double bound, CounterRng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

/// Kaiming normal, fan-out mode, ReLU gain.
template <typename T>
std::vector<T> kaiming_fan_out(std::size_t n, std::size_t fan_out, CounterRng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_out));
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal() * std);
  return v;
}

}  // namespace init

enum class LinearInit {
  TruncNormal,     ///< std 0.02 weights, zero bias (transformer convention)
  UniformFanIn,    ///< U(-1/sqrt(in), 1/sqrt(in)) for weight and bias
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(std::size_t in, std::size_t out, CounterRng& rng, LinearInit how = LinearInit::UniformFanIn, bool bias = true)
      : in_(in), out_(out) {
    if (how == LinearInit::TruncNormal) {
      weight_ = this->add_parameter("weight", Tensor<T>::from({out, in}, init::trunc_normal<T>(out * in, 0.02, rng)));
      if (bias) bias_ = this->add_parameter("bias", Tensor<T>::zeros({out}));
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      weight_ = this->add_parameter("weight", Tensor<T>::from({out, in}, init::uniform<T>(out * in, bound, rng)));
      if (bias) bias_ = this->add_parameter("bias", Tensor<T>::from({out}, init::uniform<T>(out, bound, rng)));
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_, out_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(std::size_t dim, T eps = T(1e-5)) : eps_(eps) {
    gamma_ = this->add_parameter("weight", Tensor<T>::full({dim}, T(1)));
    beta_ = this->add_parameter("bias", Tensor<T>::zeros({dim}));
  }
  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma_, beta_, eps_); }

 private:
  T eps_;
  Tensor<T> gamma_, beta_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::size_t channels, T momentum = T(0.1), T eps = T(1e-5)) : momentum_(momentum), eps_(eps) {
    gamma_ = this->add_parameter("weight", Tensor<T>::full({channels}, T(1)));
    beta_ = this->add_parameter("bias", Tensor<T>::zeros({channels}));
    running_mean_ = this->add_buffer("running_mean", Tensor<T>::zeros({channels}));
    running_var_ = this->add_buffer("running_var", Tensor<T>::full({channels}, T(1)));
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, this->is_training(), momentum_, eps_);
  }
  Tensor<T>& weight() { return gamma_; }
  Tensor<T>& bias() { return beta_; }

 private:
  T momentum_, eps_;
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

/// Bias-free convolution with Kaiming fan-out initialisation.
template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
         std::size_t groups, CounterRng& rng)
      : opt_{stride, padding, groups} {
    const std::size_t n = out * (in / groups) * kernel * kernel;
    weight_ = this->add_parameter(
        "weight", Tensor<T>::from({out, in / groups, kernel, kernel}, init::kaiming_fan_out<T>(n, out * kernel * kernel, rng)));
  }
  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight_, Tensor<T>(), opt_); }
  Tensor<T>& weight() { return weight_; }

 private:
  Conv2dOptions opt_;
  Tensor<T> weight_;
};

/// Dropout with a per-call counter: call k of a site seeded s uses key hash(s, k).
template <typename T>
class Dropout : public Module<T> {
 public:
  explicit Dropout(double p) : p_(p) {}
  Tensor<T> forward(const Tensor<T>& x) const {
    if (!this->is_training() || p_ <= 0.0) return x;
    return dropout(x, p_, true, CounterRng::hash(seed_, calls_++));
  }
  void set_dropout_seed(std::uint64_t seed) override {
    seed_ = seed;
    calls_ = 0;
  }
  double p() const { return p_; }

 private:
  double p_;
  std::uint64_t seed_ = 0;
  mutable std::uint64_t calls_ = 0;
};

/// Multi-head attention with separate biased Q/K/V/output projections (d -> d).
template <typename T>
class MultiHeadAttention : public Module<T> {
 public:
  MultiHeadAttention(std::size_t dim, std::size_t heads, CounterRng& rng, LinearInit how)
      : dim_(dim), heads_(heads), q_(dim, dim, rng, how), k_(dim, dim, rng, how), v_(dim, dim, rng, how),
        out_(dim, dim, rng, how) {
    if (heads == 0 || dim % heads != 0)
      fail(ErrorCode::HeadsMismatch, "embedding dim " + std::to_string(dim) + " is not divisible by " +
                                         std::to_string(heads) + " heads");
    this->add_child("q_proj", q_);
    this->add_child("k_proj", k_);
    this->add_child("v_proj", v_);
    this->add_child("out_proj", out_);
  }

  /// query [B, Sq, d], key/value [B, Sk, d] -> [B, Sq, d]
  Tensor<T> forward(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value) const {
    if (query.rank() != 3 || key.rank() != 3 || value.shape() != key.shape() || query.dim(2) != dim_ ||
        key.dim(2) != dim_ || query.dim(0) != key.dim(0))
      detail::shape_error("multi_head_attention", query.shape(), key.shape());
    const std::size_t B = query.dim(0), Sq = query.dim(1), Sk = key.dim(1), hd = dim_ / heads_;
    auto split = [&](const Tensor<T>& x, std::size_t S) { return permute_0213(reshape(x, {B, S, heads_, hd})); };
    Tensor<T> q = split(q_.forward(query), Sq);
    Tensor<T> k = split(k_.forward(key), Sk);
    Tensor<T> v = split(v_.forward(value), Sk);
    Tensor<T> scores = mul_scalar(bmm(q, k, true), T(1) / std::sqrt(static_cast<T>(hd)));
    Tensor<T> weights = softmax(scores);
    last_weights_ = weights.detach();
    Tensor<T> ctx = reshape(permute_0213(bmm(weights, v)), {B, Sq, dim_});
    return out_.forward(ctx);
  }

  /// Attention weights [B, heads, Sq, Sk] of the most recent forward.
  const Tensor<T>& last_weights() const { return last_weights_; }
  Linear<T>& out_proj() { return out_; }
  std::size_t heads() const { return heads_; }

 private:
  std::size_t dim_, heads_;
  Linear<T> q_, k_, v_, out_;
  mutable Tensor<T> last_weights_;
};

}  // namespace dualstream
