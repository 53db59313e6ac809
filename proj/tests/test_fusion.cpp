#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "dualstream/gradcheck.hpp"
#include "dualstream/model.hpp"
#include "fusion_reference.hpp"

using namespace dualstream;
using namespace dualstream::reference;

TEST(Projection, ZeroWeightsGiveZeroVector) {
  CounterRng rng(1);
  Projection<double> proj(20, 8, rng);
  fill(proj.fc().weight(), 0.0);
  fill(proj.fc().bias(), 0.0);
  proj.train(false);
  auto y = proj.forward(random_input({3, 20}, rng));
  EXPECT_EQ(y.shape(), (Shape{3, 8}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Projection, EvalOutputIsNonNegative) {
  CounterRng rng(2);
  Projection<double> proj(1280, 192, rng);
  proj.train(false);
  auto y = proj.forward(random_input({4, 1280}, rng, 3.0));
  EXPECT_EQ(y.shape(), (Shape{4, 192}));
  for (double v : y.data()) EXPECT_GE(v, 0.0);
}

TEST(Projection, TrainExpectationMatchesEvalOutput) {
  CounterRng rng(3);
  Projection<double> proj(16, 8, rng);
  auto x = random_input({1, 16}, rng, 2.0);
  proj.train(false);
  auto eval = proj.forward(x);
  proj.train(true);
  proj.set_dropout_seed(77);
  const int masks = 20000;
  Vec mean(8, 0.0);
  for (int k = 0; k < masks; ++k) {
    auto y = proj.forward(x);
    for (std::size_t i = 0; i < 8; ++i) mean[i] += y[i] / masks;
  }
  for (std::size_t i = 0; i < 8; ++i) {
    if (eval[i] == 0.0) {
      EXPECT_EQ(mean[i], 0.0);
    } else {
      EXPECT_NEAR(mean[i] / eval[i], 1.0, 0.02) << "unit " << i;
    }
  }
}

TEST(LateFusion, IdenticalLogitsGiveSingleSoftmax) {
  CounterRng rng(4);
  LateFusion<double> head(6, 3, rng);
  std::copy(head.rgb_classifier().weight().data().begin(), head.rgb_classifier().weight().data().end(),
            head.flow_classifier().weight().data().begin());
  std::copy(head.rgb_classifier().bias().data().begin(), head.rgb_classifier().bias().data().end(),
            head.flow_classifier().bias().data().begin());
  auto h = random_input({2, 6}, rng);
  auto p = head.forward(h, h);
  auto single = softmax(head.rgb_classifier().forward(h));
  for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(p[i], single[i], 1e-15);
}

TEST(LateFusion, ConfidentDisagreementSplitsMass) {
  CounterRng rng(5);
  LateFusion<double> head(2, 4, rng);
  fill(head.rgb_classifier().weight(), 0.0);
  fill(head.flow_classifier().weight(), 0.0);
  fill(head.rgb_classifier().bias(), 0.0);
  fill(head.flow_classifier().bias(), 0.0);
  head.rgb_classifier().bias().data()[0] = 60.0;
  head.flow_classifier().bias().data()[1] = 60.0;
  auto p = head.forward(Tensor<double>::zeros({1, 2}), Tensor<double>::zeros({1, 2}));
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
  EXPECT_NEAR(p[2], 0.0, 1e-12);
  EXPECT_NEAR(p[3], 0.0, 1e-12);
}

TEST(LateFusion, ShiftingOneStreamsLogitsChangesNothing) {
  CounterRng rng(6);
  LateFusion<double> head(5, 3, rng);
  auto r = random_input({3, 5}, rng), f = random_input({3, 5}, rng);
  auto before = head.forward(r, f);
  for (auto& v : head.flow_classifier().bias().data()) v += 4.25;
  auto after = head.forward(r, f);
  for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_NEAR(before[i], after[i], 1e-12);
}

TEST(ConcatFusion, ZeroFirstLayerIsConstant) {
  CounterRng rng(7);
  ConcatFusion<double> head(4, 3, rng);
  head.train(false);
  fill(head.fc1().weight(), 0.0);
  auto a = head.forward(random_input({1, 4}, rng), random_input({1, 4}, rng));
  auto b = head.forward(random_input({1, 4}, rng), random_input({1, 4}, rng));
  Vec hidden(4);
  for (std::size_t i = 0; i < 4; ++i) hidden[i] = std::max(0.0, head.fc1().bias()[i]);
  Vec expect = ref_linear(head.fc2().weight(), head.fc2().bias(), hidden);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(a[i], expect[i], 1e-12);
    EXPECT_EQ(a[i], b[i]);
  }
}

TEST(ConcatFusion, ZeroInputsAndBiasesGiveZeroLogits) {
  CounterRng rng(8);
  ConcatFusion<double> head(4, 3, rng);
  head.train(false);
  fill(head.fc1().bias(), 0.0);
  fill(head.fc2().bias(), 0.0);
  auto y = head.forward(Tensor<double>::zeros({2, 4}), Tensor<double>::zeros({2, 4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(AttentionFusion, SingleKeyWeightsAreOne) {
  CounterRng rng(9);
  AttentionFusion<double> head(8, 3, rng);
  (void)head.forward(random_input({5, 8}, rng), random_input({5, 8}, rng));
  const auto& w = head.attention().last_weights();
  EXPECT_EQ(w.shape(), (Shape{5, 4, 1, 1}));
  for (double v : w.data()) EXPECT_EQ(v, 1.0);
}

TEST(AttentionFusion, ZeroOutputProjectionIsolatesFlow) {
  CounterRng rng(10);
  AttentionFusion<double> head(8, 3, rng);
  fill(head.attention().out_proj().weight(), 0.0);
  fill(head.attention().out_proj().bias(), 0.0);
  auto r = random_input({2, 8}, rng);
  auto a = head.forward(r, random_input({2, 8}, rng));
  auto b = head.forward(r, random_input({2, 8}, rng, 10.0));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  auto cross = head.cross_features(r, random_input({2, 8}, rng));
  for (std::size_t bi = 0; bi < 2; ++bi) {
    Vec ln = ref_layer_norm(row(r, bi), param(head, "norm.weight"), param(head, "norm.bias"));
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(cross[bi * 8 + i], ln[i], 1e-12);
  }
}

TEST(AttentionFusion, IndivisibleDimIsHeadsMismatch) {
  CounterRng rng(11);
  try {
    AttentionFusion<double> head(10, 3, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::HeadsMismatch);
  }
}

TEST(WeightedFusion, EqualWeightsGiveEvenSplit) {
  CounterRng rng(12);
  WeightedFusion<double> head(4, 2, rng);
  auto alpha = head.stream_weights();
  ASSERT_TRUE(alpha.has_value());
  EXPECT_EQ(alpha->first, 0.5);
  EXPECT_EQ(alpha->second, 0.5);
  head.logits_w().data()[0] = 1.3;
  head.logits_w().data()[1] = 1.3;
  EXPECT_EQ(head.stream_weights()->first, 0.5);
}

TEST(WeightedFusion, SaturatedWeightSelectsRgb) {
  CounterRng rng(13);
  WeightedFusion<double> head(4, 3, rng);
  head.logits_w().data()[0] = 40.0;
  head.logits_w().data()[1] = -40.0;
  auto r = random_input({2, 4}, rng), f = random_input({2, 4}, rng);
  auto y = head.forward(r, f);
  auto ref = head.classifier().forward(r);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(GatedFusion, SaturatedGateSelectsRgb) {
  CounterRng rng(14);
  GatedFusion<double> head(4, 3, rng);
  fill(head.gate().weight(), 0.0);
  fill(head.gate().bias(), 50.0);
  auto r = random_input({2, 4}, rng), f = random_input({2, 4}, rng);
  auto h = head.fused(r, f);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(h[i], r[i], 1e-12);
}

TEST(GatedFusion, ZeroGateParametersAverageStreams) {
  CounterRng rng(15);
  GatedFusion<double> head(4, 3, rng);
  fill(head.gate().weight(), 0.0);
  fill(head.gate().bias(), 0.0);
  auto r = random_input({2, 4}, rng), f = random_input({2, 4}, rng);
  auto h = head.fused(r, f);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(h[i], 0.5 * (r[i] + f[i]), 1e-15);
}

TEST(FusionHeads, MismatchedInputsAreShapeMismatch) {
  CounterRng rng(16);
  for (FusionKind kind : kAllFusionKinds) {
    auto head = make_fusion_head<double>(kind, 8, 3, rng);
    try {
      (void)head->forward(Tensor<double>::zeros({2, 8}), Tensor<double>::zeros({2, 6}));
      FAIL() << to_string(kind);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch) << to_string(kind);
    }
  }
}

TEST(FusionHeads, ParseRoundTrips) {
  for (FusionKind kind : kAllFusionKinds) EXPECT_EQ(parse_fusion_kind(to_string(kind)), kind);
  EXPECT_THROW(parse_fusion_kind("sum"), Error);
}

TEST(FusionHeads, InterfaceInvariantsOnRandomInstances) {
  CounterRng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 4 * (1 + rng.below(4)), C = 2 + rng.below(5), B = 1 + rng.below(3);
    const FusionKind kind = kAllFusionKinds[static_cast<std::size_t>(trial) % kAllFusionKinds.size()];
    auto head = make_fusion_head<double>(kind, d, C, rng.derive(static_cast<std::uint64_t>(trial)));
    head->train(false);
    scramble(*head, rng);
    auto r = random_input({B, d}, rng, 2.0), f = random_input({B, d}, rng, 2.0);
    auto y = head->forward(r, f);
    ASSERT_EQ(y.shape(), (Shape{B, C})) << to_string(kind);
    for (double v : y.data()) ASSERT_TRUE(std::isfinite(v));
    if (kind == FusionKind::Late) {
      for (std::size_t b = 0; b < B; ++b) {
        double s = 0;
        for (double v : row(y, b)) {
          EXPECT_GT(v, 0.0);
          EXPECT_LT(v, 1.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
    if (kind == FusionKind::Weighted) {
      auto alpha = head->stream_weights();
      ASSERT_TRUE(alpha.has_value());
      EXPECT_EQ(alpha->first + alpha->second, 1.0);
      EXPECT_GT(alpha->first, 0.0);
      EXPECT_GT(alpha->second, 0.0);
    }
    if (kind == FusionKind::Gated) {
      auto& gated = dynamic_cast<GatedFusion<double>&>(*head);
      auto g = gated.gate_values(r, f);
      auto h = gated.fused(r, f);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        EXPECT_GT(g[i], 0.0);
        EXPECT_LT(g[i], 1.0);
        EXPECT_GE(h[i], std::min(r[i], f[i]) - 1e-12);
        EXPECT_LE(h[i], std::max(r[i], f[i]) + 1e-12);
      }
    }
  }
}

TEST(FusionHeads, MatchScalarReference) {
  CounterRng rng(18);
  for (FusionKind kind : kAllFusionKinds) {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t d = 4, C = 2 + rng.below(2), B = 2;
      auto head = make_fusion_head<double>(kind, d, C, rng.derive(static_cast<std::uint64_t>(trial)));
      head->train(false);
      scramble(*head, rng);
      auto r = random_input({B, d}, rng), f = random_input({B, d}, rng);
      auto y = head->forward(r, f);
      for (std::size_t b = 0; b < B; ++b) {
        Vec expect = reference_head(*head, row(r, b), row(f, b));
        for (std::size_t c = 0; c < C; ++c) ASSERT_NEAR(y[b * C + c], expect[c], 1e-6) << to_string(kind);
      }
    }
  }
}

TEST(FusionHeads, Gradcheck) {
  for (FusionKind kind : kAllFusionKinds) {
    CounterRng rng(19);
    auto head = make_fusion_head<double>(kind, 8, 3, rng);
    head->train(false);
    scramble(*head, rng);
    auto r = random_input({3, 8}, rng), f = random_input({3, 8}, rng);
    std::vector<Tensor<double>> inputs{r, f};
    for (auto& p : head->named_parameters()) inputs.push_back(p.tensor);
    auto report = gradcheck([&] { return probe(head->forward(r, f)); }, inputs);
    EXPECT_TRUE(report.passed) << to_string(kind) << ": " << report.worst;
  }
}

TEST(FusionHeads, GradcheckWithLossAndDropout) {
  // Dropout masks are reseeded before every evaluation so each call sees the same mask.
  const std::vector<int> labels{0, 2, 1};
  for (FusionKind kind : kAllFusionKinds) {
    CounterRng rng(20);
    auto head = make_fusion_head<double>(kind, 8, 3, rng);
    head->train(true);
    auto r = random_input({3, 8}, rng), f = random_input({3, 8}, rng);
    std::vector<Tensor<double>> inputs{r, f};
    for (auto& p : head->named_parameters()) inputs.push_back(p.tensor);
    auto loss = [&] {
      head->set_dropout_seed(5);
      ModelOutput<double> out{head->forward(r, f), head->outputs_probabilities()};
      return DualStreamModel<double>::loss(out, labels);
    };
    auto report = gradcheck(loss, inputs);
    EXPECT_TRUE(report.passed) << to_string(kind) << ": " << report.worst;
  }
}

TEST(Projection, Gradcheck) {
  CounterRng rng(21);
  Projection<double> proj(12, 8, rng);
  proj.train(true);
  auto x = random_input({3, 12}, rng);
  std::vector<Tensor<double>> inputs{x, proj.fc().weight(), proj.fc().bias()};
  auto report = gradcheck(
      [&] {
        proj.set_dropout_seed(3);
        return probe(proj.forward(x));
      },
      inputs);
  EXPECT_TRUE(report.passed) << report.worst;
}

namespace {

ModelConfig tiny_model(StreamMode mode, FusionKind head) {
  ModelConfig c;
  c.mode = mode;
  c.head = head;
  c.num_classes = 3;
  c.vit.image_size = 8;
  c.vit.patch_size = 4;
  c.vit.embed_dim = 8;
  c.vit.depth = 1;
  c.vit.heads = 2;
  c.mobilenet.in_channels = 20;
  c.mobilenet.input_size = 8;
  c.mobilenet.width_multiplier = 0.25;
  c.mobilenet.final_dim = 12;
  c.mobilenet.stages = {{1, 8, 1, 1}, {2, 8, 1, 2}};
  return c;
}

}  // namespace

TEST(Model, FullModelGradcheckInEvalMode) {
  const std::vector<int> labels{1, 0};
  std::vector<ModelConfig> configs{tiny_model(StreamMode::RgbOnly, FusionKind::Late),
                                   tiny_model(StreamMode::FlowOnly, FusionKind::Late)};
  for (FusionKind k : kAllFusionKinds) configs.push_back(tiny_model(StreamMode::Fusion, k));
  for (const auto& cfg : configs) {
    DualStreamModel<double> model(cfg);
    model.train(false);
    CounterRng rng(22);
    for (auto& b : model.named_buffers())
      for (auto& v : b.tensor.data()) v = b.name.find("running_var") != std::string::npos ? 0.5 + rng.uniform() : 0.2 * rng.normal();
    auto rgb = random_input({2, 3, 8, 8}, rng), flow = random_input({2, 20, 8, 8}, rng);
    std::vector<Tensor<double>> inputs{rgb, flow};
    for (auto& p : model.named_parameters()) inputs.push_back(p.tensor);
    GradcheckOptions opt;
    opt.tol = 1e-3;
    opt.max_coords = 8;
    opt.abs_floor = 1e-3;
    auto report = gradcheck([&] { return DualStreamModel<double>::loss(model.forward(rgb, flow), labels); }, inputs, opt);
    EXPECT_TRUE(report.passed) << cfg.id() << ": " << report.worst;
  }
}

TEST(Model, FreezingSkipsAppearanceBackbone) {
  DualStreamModel<float> model(tiny_model(StreamMode::Fusion, FusionKind::Gated));
  std::size_t all = 0, frozen = 0;
  for (auto& p : model.trainable_parameters(false)) all += p.numel();
  for (auto& p : model.trainable_parameters(true)) frozen += p.numel();
  EXPECT_EQ(all, model.parameter_count());
  EXPECT_EQ(all - frozen, model.rgb_encoder()->parameter_count());
}

TEST(Model, SeedDeterminesInitialisation) {
  auto cfg = tiny_model(StreamMode::Fusion, FusionKind::Attention);
  DualStreamModel<float> a(cfg), b(cfg);
  cfg.seed = 43;
  DualStreamModel<float> c(cfg);
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  ASSERT_EQ(pa.size(), pc.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    for (std::size_t k = 0; k < pa[i].tensor.numel(); ++k) {
      EXPECT_EQ(pa[i].tensor[k], pb[i].tensor[k]);
      differs = differs || pa[i].tensor[k] != pc[i].tensor[k];
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Gradcheck, DetectsWrongBackward) {
  auto x = Tensor<double>::from({3}, {0.3, -1.2, 2.0});
  x.set_requires_grad(true);
  auto bad_square = [](const Tensor<double>& in) {
    Vec y(in.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * in[i];
    return record<double>(in.shape(), std::move(y), {in}, [](Node<double>& out) {
      Node<double>& a = *out.inputs[0];
      for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += out.grad[i] * 3.0 * a.value[i];
    });
  };
  auto report = gradcheck([&] { return sum(bad_square(x)); }, {x});
  EXPECT_FALSE(report.passed);
  EXPECT_NEAR(report.max_rel_error, 1.0 / 3.0, 1e-6);
}
