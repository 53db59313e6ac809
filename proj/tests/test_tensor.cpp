#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dualstream/gradcheck.hpp"
#include "dualstream/nn.hpp"
#include "dualstream/ops.hpp"

using namespace dualstream;

namespace {

Tensor<double> random_tensor(Shape shape, CounterRng& rng, double scale = 1.0, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  auto t = Tensor<double>::from(std::move(shape), std::move(v));
  if (grad) t.set_requires_grad(true);
  return t;
}

// Random linear functional of the output, so every output element matters.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  CounterRng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.normal();
  return sum(mul(y, Tensor<double>::from(y.shape(), std::move(w))));
}

}  // namespace

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  auto y = softmax(Tensor<float>::from({2}, {0.f, 0.f}));
  EXPECT_FLOAT_EQ(y[0], 0.5f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
}

TEST(Ops, LayerNormOfConstantVectorIsZero) {
  auto y = layer_norm(Tensor<double>::full({7}, 3.25), Tensor<double>(), Tensor<double>());
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, IdentityOneByOneConvolutionReturnsInput) {
  CounterRng rng(1);
  auto x = random_tensor({2, 3, 5, 4}, rng, 1.0, false);
  std::vector<double> w(9, 0.0);
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  auto y = conv2d(x, Tensor<double>::from({3, 3, 1, 1}, w), Tensor<double>());
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({3, 3});
  try {
    (void)sub(a, b);
    FAIL() << "expected ShapeMismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(3, 3)"), std::string::npos);
  }
}

TEST(Ops, SoftmaxRowsAreDistributions) {
  CounterRng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor({4, 9}, rng, 5.0, false);
    auto y = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 9; ++c) {
        const double p = y[r * 9 + c];
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Ops, Relu6IsBounded) {
  CounterRng rng(6);
  auto y = relu6(random_tensor({1000}, rng, 10.0, false));
  for (double v : y.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 6.0);
  }
}

TEST(Ops, DropoutIsIdentityOutsideTraining) {
  CounterRng rng(8);
  auto x = random_tensor({50}, rng, 1.0, false);
  auto y = dropout(x, 0.5, false, 123);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Backward, LinearFunctionalGradientIsInput) {
  auto w = Tensor<double>::parameter({3, 4}, std::vector<double>(12, 0.5));
  auto x = Tensor<double>::from({4, 1}, {1.0, -2.0, 3.0, 0.25});
  backward(sum(matmul(w, x)));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(w.grad()[o * 4 + i], x[i]);
}

TEST(Backward, CrossEntropyAtEqualLogits) {
  const std::size_t C = 5;
  auto logits = Tensor<double>::parameter({1, C}, std::vector<double>(C, 0.7));
  const int label[] = {2};
  backward(cross_entropy(logits, std::span<const int>(label)));
  for (std::size_t c = 0; c < C; ++c) {
    const double expected = 1.0 / C - (c == 2 ? 1.0 : 0.0);
    EXPECT_NEAR(logits.grad()[c], expected, 1e-15);
  }
}

TEST(Backward, RequiresRecordedGraph) {
  auto x = Tensor<double>::from({2}, {1.0, 2.0});
  try {
    backward(sum(x));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoGraph);
  }
  auto p = Tensor<double>::parameter({2}, {1.0, 2.0});
  Tensor<double> loss;
  {
    NoGradGuard guard;
    loss = sum(p);
  }
  EXPECT_THROW(backward(loss), Error);
}

TEST(Backward, RepeatedCallsAccumulate) {
  CounterRng rng(11);
  auto w = random_tensor({6, 5}, rng);
  auto x = random_tensor({3, 5}, rng, 1.0, false);
  auto loss = probe(gelu(linear(x, w)));
  backward(loss);
  std::vector<double> once(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(loss);
  backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(w.grad()[i], 2.0 * once[i], 1e-14);
}

TEST(Gradcheck, IdentityIsExact) {
  auto x = Tensor<double>::parameter({4}, {0.1, -0.3, 2.0, 5.0});
  auto report = gradcheck([&] { return sum(x); }, {x});
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_rel_error, 1e-9);
}

TEST(Gradcheck, GeluAtHalf) {
  auto x = Tensor<double>::parameter({1}, {0.5});
  auto report = gradcheck([&] { return sum(gelu(x)); }, {x});
  EXPECT_TRUE(report.passed) << report.worst;
}

// Every primitive against central differences in 64-bit.
class OpGradients : public ::testing::Test {
 protected:
  CounterRng rng{2024};
  void expect_passes(const GradcheckReport& r) { EXPECT_TRUE(r.passed) << r.max_rel_error << " " << r.worst; }
};

TEST_F(OpGradients, Elementwise) {
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto row = random_tensor({4}, rng);
  auto s = random_tensor({1}, rng);
  expect_passes(gradcheck([&] { return probe(add(mul(a, b), row)); }, {a, b, row}));
  expect_passes(gradcheck([&] { return probe(sub(sigmoid(a), relu(b))); }, {a, b}));
  expect_passes(gradcheck([&] { return probe(scale(relu6(mul_scalar(a, 4.0)), s)); }, {a, s}));
  auto pos = Tensor<double>::parameter({3, 4}, std::vector<double>(12, 0.0));
  for (std::size_t i = 0; i < 12; ++i) pos.data()[i] = 0.5 + rng.uniform();
  expect_passes(gradcheck([&] { return probe(log(pos)); }, {pos}));
}

TEST_F(OpGradients, LinearAlgebra) {
  auto x = random_tensor({2, 3, 5}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto b = random_tensor({4}, rng);
  expect_passes(gradcheck([&] { return probe(linear(x, w, b)); }, {x, w, b}));
  auto p = random_tensor({2, 3, 4}, rng);
  auto q = random_tensor({2, 5, 4}, rng);
  auto r = random_tensor({2, 4, 5}, rng);
  expect_passes(gradcheck([&] { return probe(bmm(p, q, true)); }, {p, q}));
  expect_passes(gradcheck([&] { return probe(bmm(p, r)); }, {p, r}));
}

TEST_F(OpGradients, Convolution) {
  auto x = random_tensor({2, 4, 7, 6}, rng);
  auto w = random_tensor({6, 2, 3, 3}, rng);
  auto b = random_tensor({6}, rng);
  expect_passes(gradcheck([&] { return probe(conv2d(x, w, b, {2, 1, 2})); }, {x, w, b}));
  auto dw = random_tensor({4, 1, 3, 3}, rng);
  expect_passes(gradcheck([&] { return probe(conv2d(x, dw, Tensor<double>(), {1, 1, 4})); }, {x, dw}));
  expect_passes(gradcheck([&] { return probe(global_avg_pool(x)); }, {x}));
  auto img = random_tensor({2, 3, 4, 4}, rng);
  expect_passes(gradcheck([&] { return probe(patchify(img, 2)); }, {img}));
}

TEST_F(OpGradients, Normalisation) {
  auto x = random_tensor({3, 2, 6}, rng);
  auto g = random_tensor({6}, rng);
  auto b = random_tensor({6}, rng);
  expect_passes(gradcheck([&] { return probe(layer_norm(x, g, b)); }, {x, g, b}));
  auto img = random_tensor({3, 4, 3, 3}, rng);
  auto gamma = random_tensor({4}, rng);
  auto beta = random_tensor({4}, rng);
  auto rm = Tensor<double>::zeros({4});
  auto rv = Tensor<double>::full({4}, 1.0);
  expect_passes(gradcheck([&] { return probe(batch_norm2d(img, gamma, beta, rm, rv, true)); }, {img, gamma, beta}));
  expect_passes(gradcheck([&] { return probe(batch_norm2d(img, gamma, beta, rm, rv, false)); }, {img, gamma, beta}));
}

TEST_F(OpGradients, ProbabilitiesAndLosses) {
  auto z = random_tensor({3, 5}, rng);
  const int labels[] = {4, 0, 2};
  expect_passes(gradcheck([&] { return probe(softmax(z)); }, {z}));
  expect_passes(gradcheck([&] { return cross_entropy(z, std::span<const int>(labels)); }, {z}));
  expect_passes(gradcheck([&] { return nll_from_probs(softmax(z), std::span<const int>(labels)); }, {z}));
}

TEST_F(OpGradients, ShapeOps) {
  auto x = random_tensor({2, 3, 4, 2}, rng);
  auto y = random_tensor({2, 1, 4, 2}, rng);
  auto c = random_tensor({1, 4, 2}, rng);
  expect_passes(gradcheck([&] { return probe(permute_0213(x)); }, {x}));
  expect_passes(gradcheck([&] { return probe(concat<double>({x, y}, 1)); }, {x, y}));
  expect_passes(gradcheck([&] { return probe(select(x, 1, 2)); }, {x}));
  expect_passes(gradcheck([&] { return probe(repeat_leading(c, 3)); }, {c}));
  expect_passes(gradcheck([&] { return probe(reshape(x, {6, 8})); }, {x}));
}

TEST(Modules, AttentionWithSingleKeyHasUnitWeights) {
  CounterRng rng(3);
  MultiHeadAttention<double> mha(8, 4, rng, LinearInit::UniformFanIn);
  auto q = random_tensor({2, 3, 8}, rng, 1.0, false);
  auto kv = random_tensor({2, 1, 8}, rng, 1.0, false);
  (void)mha.forward(q, kv, kv);
  for (double w : mha.last_weights().data()) EXPECT_EQ(w, 1.0);
}

TEST(Modules, AttentionRejectsIndivisibleHeads) {
  CounterRng rng(3);
  try {
    MultiHeadAttention<float> mha(10, 4, rng, LinearInit::UniformFanIn);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::HeadsMismatch);
  }
}

TEST(Modules, DropoutSiteIsReproducibleAfterReseed) {
  Dropout<float> site(0.5);
  auto x = Tensor<float>::full({64}, 1.f);
  site.set_dropout_seed(17);
  auto a = site.forward(x);
  auto b = site.forward(x);
  site.set_dropout_seed(17);
  auto c = site.forward(x);
  bool differs = false;
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_EQ(a[i], c[i]);
    differs = differs || a[i] != b[i];
  }
  EXPECT_TRUE(differs);
}
