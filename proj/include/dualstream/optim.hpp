#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <vector>

#include "dualstream/tensor.hpp"

namespace dualstream {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay: p <- p * (1 - lr * wd), then the
/// bias-corrected Adam update.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
    for (auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T decay = static_cast<T>(1.0 - opt_.lr * opt_.weight_decay);
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T step_size = static_cast<T>(opt_.lr / c1);
    const T root_c2 = static_cast<T>(std::sqrt(c2));
    const T eps = static_cast<T>(opt_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto value = params_[k].data();
      auto grad = params_[k].grad();
      if (grad.empty()) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        if (opt_.weight_decay != 0.0) value[i] *= decay;
        const T g = grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        value[i] -= step_size * m[i] / (std::sqrt(v[i]) / root_c2 + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamWOptions opt_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Cosine annealing to zero over `t_max` epochs: base * (1 + cos(pi * epoch / t_max)) / 2.
inline double cosine_lr(double base, std::size_t epoch, std::size_t t_max) {
  if (t_max == 0) return base;
  const double t = static_cast<double>(std::min(epoch, t_max)) / static_cast<double>(t_max);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Patience counts epochs since the metric last exceeded the reference by more
/// than min_delta. The best epoch is tracked separately (strictly greater wins,
/// so ties keep the earliest epoch).
class EarlyStopping {
 public:
  EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  /// Records the metric for the next epoch (1-based); returns true when training should stop.
  bool update(double metric) {
    ++epoch_;
    if (epoch_ == 1 || metric > best_value_) {
      best_value_ = metric;
      best_epoch_ = epoch_;
    }
    if (metric > reference_ + min_delta_) {
      reference_ = metric;
      wait_ = 0;
    } else {
      ++wait_;
    }
    stopped_ = wait_ >= patience_;
    return stopped_;
  }

  std::size_t epochs_seen() const { return epoch_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_value() const { return best_value_; }
  std::size_t wait() const { return wait_; }
  bool stopped() const { return stopped_; }

 private:
  std::size_t patience_;
  double min_delta_;
  std::size_t epoch_ = 0, best_epoch_ = 0, wait_ = 0;
  double best_value_ = -std::numeric_limits<double>::infinity();
  double reference_ = -std::numeric_limits<double>::infinity();
  bool stopped_ = false;
};

}  // namespace dualstream
