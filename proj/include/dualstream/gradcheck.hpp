#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dualstream/rng.hpp"
#include "dualstream/tensor.hpp"

namespace dualstream {

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Denominator floor for the relative error, so exact zeros compare as absolute.
  double abs_floor = 1e-6;
  /// Coordinates checked per input; larger tensors are subsampled.
  std::size_t max_coords = 64;
  std::uint64_t seed = 7;
};

struct GradcheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst;  ///< "input[i] coord j: analytic a vs numeric n"
};

/// Compares reverse-mode gradients of the scalar `loss_fn()` against central
/// differences (f(x+eps) - f(x-eps)) / (2 eps) for each input coordinate.
/// `inputs` must be leaves (requires_grad) that `loss_fn` reads.
template <typename LossFn>
GradcheckReport gradcheck(LossFn&& loss_fn, std::vector<Tensor<double>> inputs, const GradcheckOptions& opt = {}) {
  for (auto& in : inputs) {
    if (!in.requires_grad()) in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tensor<double> loss = loss_fn();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

  GradcheckReport report;
  CounterRng rng(opt.seed);
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > opt.max_coords) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double saved = values[c];
      values[c] = saved + opt.eps;
      const double up = loss_fn().item();
      values[c] = saved - opt.eps;
      const double down = loss_fn().item();
      values[c] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double a = analytic[t][c];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
      ++report.coords_checked;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = "input[" + std::to_string(t) + "] coord " + std::to_string(c) + ": analytic " +
                       std::to_string(a) + " vs numeric " + std::to_string(numeric);
      }
    }
  }
  report.passed = report.max_rel_error < opt.tol;
  return report;
}

}  // namespace dualstream
