#pragma once

#include <string>
#include <vector>

#include "dualstream/gradcheck.hpp"
#include "dualstream/model.hpp"

namespace dualstream {

struct GradcheckCase {
  std::string name;
  GradcheckReport report;
};

namespace detail {

inline Tensor<double> random_leaf(Shape shape, CounterRng& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  auto t = Tensor<double>::from(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

// Random linear functional of y, so every output coordinate contributes.
inline Tensor<double> random_probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  CounterRng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.normal();
  return sum(mul(y, Tensor<double>::from(y.shape(), std::move(w))));
}

template <typename M>
std::vector<Tensor<double>> with_parameters(std::vector<Tensor<double>> inputs, const M& module) {
  for (auto& p : module.named_parameters()) inputs.push_back(p.tensor);
  return inputs;
}

}  // namespace detail

/// 64-bit finite-difference checks of every fusion head, the projection layer,
/// a transformer block and an inverted-residual block.
inline std::vector<GradcheckCase> run_gradcheck_suite(double tol = 1e-4) {
  using detail::random_leaf;
  using detail::random_probe;
  std::vector<GradcheckCase> out;
  GradcheckOptions opt;
  opt.tol = tol;

  for (FusionKind kind : kAllFusionKinds) {
    CounterRng rng(19);
    auto head = make_fusion_head<double>(kind, 8, 3, rng, 2);
    head->train(true);
    for (auto& p : head->named_parameters())
      for (auto& v : p.tensor.data()) v = rng.normal() * 0.7;
    auto r = random_leaf({3, 8}, rng), f = random_leaf({3, 8}, rng);
    const std::vector<int> labels{0, 2, 1};
    auto loss = [&] {
      head->set_dropout_seed(5);
      ModelOutput<double> o{head->forward(r, f), head->outputs_probabilities()};
      return DualStreamModel<double>::loss(o, labels);
    };
    out.push_back({"fusion." + std::string(to_string(kind)), gradcheck(loss, detail::with_parameters({r, f}, *head), opt)});
  }
  {
    CounterRng rng(21);
    Projection<double> proj(12, 8, rng);
    proj.train(true);
    auto x = random_leaf({3, 12}, rng);
    auto loss = [&] {
      proj.set_dropout_seed(3);
      return random_probe(proj.forward(x));
    };
    out.push_back({"projection", gradcheck(loss, detail::with_parameters({x}, proj), opt)});
  }
  {
    CounterRng rng(22);
    TransformerBlock<double> block(8, 2, 16, rng);
    auto x = random_leaf({2, 3, 8}, rng);
    out.push_back({"transformer_block", gradcheck([&] { return random_probe(block.forward(x)); },
                                                  detail::with_parameters({x}, block), opt)});
  }
  {
    CounterRng rng(23);
    InvertedResidual<double> block(4, 4, 1, 3, rng);
    // Non-trivial batchnorm statistics and shifts keep pre-activations away
    // from the ReLU6 kinks, where central differences are not meaningful.
    for (auto& b : block.named_buffers())
      for (auto& v : b.tensor.data())
        v = b.name.find("running_var") != std::string::npos ? 0.5 + rng.uniform() : 0.2 * rng.normal();
    for (auto& p : block.named_parameters())
      if (p.name.find("bn.bias") != std::string::npos)
        for (auto& v : p.tensor.data()) v = 0.2 * rng.normal();
    auto x = random_leaf({2, 4, 5, 5}, rng);
    GradcheckOptions block_opt = opt;
    block_opt.abs_floor = 1e-3;
    for (bool training : {false, true}) {
      block.train(training);
      out.push_back({std::string("inverted_residual.") + (training ? "train" : "eval"),
                     gradcheck([&] { return random_probe(block.forward(x)); }, detail::with_parameters({x}, block),
                               block_opt)});
    }
  }
  return out;
}

}  // namespace dualstream
