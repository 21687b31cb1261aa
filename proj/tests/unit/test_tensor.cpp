#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "flat/error.hpp"
#include "flat/ops.hpp"
#include "flat/optim.hpp"
#include "flat/tensor.hpp"

using namespace flat;
namespace fo = flat::ops;

namespace {

Tensor from(Shape shape, std::vector<Scalar> v, bool grad = false) { return Tensor(std::move(shape), std::move(v), grad); }

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad = false) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Scalar> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Scalar>(u(rng));
  return Tensor(std::move(shape), std::move(v), grad);
}

// Direct-summation convolution, independent of the im2col path.
std::vector<double> naive_conv(const Tensor& x, const Tensor& k, int stride, int pad) {
  const int B = int(x.dim(0)), C = int(x.dim(1)), H = int(x.dim(2)), W = int(x.dim(3));
  const int F = int(k.dim(0)), K = int(k.dim(2));
  const int Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  std::vector<double> out(std::size_t(B * F * Ho * Wo), 0.0);
  auto xv = x.data();
  auto kv = k.data();
  for (int b = 0; b < B; ++b)
    for (int f = 0; f < F; ++f)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double s = 0;
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                s += double(xv[((b * C + c) * H + iy) * W + ix]) * kv[((f * C + c) * K + ky) * K + kx];
              }
          out[((b * F + f) * Ho + oy) * Wo + ox] = s;
        }
  return out;
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
  EXPECT_THROW(from({2, 3}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
  const Tensor t = Tensor::full({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(shape_to_string(t.shape()), "[2x3]");
}

TEST(Tensor, CloneIsIndependent) {
  Tensor a = from({2}, {1, 2}, true);
  Tensor b = a.clone();
  b.data()[0] = 7;
  EXPECT_EQ(a.data()[0], 1);
  EXPECT_TRUE(b.requires_grad());
  Tensor alias = a;
  alias.data()[1] = 9;
  EXPECT_EQ(a.data()[1], 9);
}

TEST(Matmul, Examples) {
  const Tensor eye = from({2, 2}, {1, 0, 0, 1});
  const Tensor m = from({2, 2}, {5, 6, 7, 8});
  const Tensor r1 = fo::matmul(eye, m);
  EXPECT_EQ(std::vector<Scalar>(r1.data().begin(), r1.data().end()), (std::vector<Scalar>{5, 6, 7, 8}));
  const Tensor r0 = fo::matmul(Tensor::zeros({2, 2}), m);
  for (Scalar v : r0.data()) EXPECT_EQ(v, 0);
  const Tensor r = fo::matmul(from({2, 2}, {1, 2, 3, 4}), m);
  EXPECT_EQ(std::vector<Scalar>(r.data().begin(), r.data().end()), (std::vector<Scalar>{19, 22, 43, 50}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    fo::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, Examples) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({1, 1, 4, 5}, rng);
  const Tensor id = fo::conv2d(x, from({1, 1, 1, 1}, {1}), 1, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(id.data()[i], x.data()[i]);

  const Tensor zero = fo::conv2d(Tensor::zeros({2, 3, 5, 5}), random_tensor({4, 3, 3, 3}, rng), 1, 1);
  for (Scalar v : zero.data()) EXPECT_EQ(v, 0);

  const Tensor nine = fo::conv2d(Tensor::full({1, 1, 3, 3}, 1), Tensor::full({1, 1, 3, 3}, 1), 1, 0);
  ASSERT_EQ(nine.numel(), 1u);
  EXPECT_EQ(nine.item(), 9);
}

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(2);
  for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}, {2, 0}, {3, 2}}) {
    const Tensor x = random_tensor({2, 3, 7, 6}, rng);
    const Tensor k = random_tensor({4, 3, 3, 3}, rng);
    const Tensor y = fo::conv2d(x, k, stride, pad);
    const auto ref = naive_conv(x, k, stride, pad);
    ASSERT_EQ(y.numel(), ref.size());
    EXPECT_EQ(y.dim(2), std::size_t((7 + 2 * pad - 3) / stride + 1));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-5);
  }
}

TEST(Conv2d, GeometryErrors) {
  EXPECT_THROW(fo::conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), DimensionError);
  EXPECT_THROW(fo::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 1, 0), DimensionError);
  EXPECT_THROW(fo::conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 0, 0), DimensionError);
}

TEST(Relu, ExamplesAndZeroSubgradient) {
  Tensor x = from({3}, {-1, 0, 2}, true);
  const Tensor y = fo::relu(x);
  EXPECT_EQ(std::vector<Scalar>(y.data().begin(), y.data().end()), (std::vector<Scalar>{0, 0, 2}));
  backward(fo::sum(y));
  EXPECT_EQ(x.grad()[0], 0);
  EXPECT_EQ(x.grad()[1], 0);
  EXPECT_EQ(x.grad()[2], 1);
}

TEST(MaxPool, TiesRouteGradientToFirstMaximum) {
  Tensor x = from({1, 1, 2, 2}, {3, 3, 3, 3}, true);
  const Tensor y = fo::max_pool2d(x, 2);
  EXPECT_EQ(y.item(), 3);
  backward(fo::sum(y));
  EXPECT_EQ(x.grad()[0], 1);
  EXPECT_EQ(x.grad()[1] + x.grad()[2] + x.grad()[3], 0);
}

TEST(MaxPool, FloorsOddSizes) {
  const Tensor y = fo::max_pool2d(from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), 2);
  ASSERT_EQ(y.numel(), 1u);
  EXPECT_EQ(y.item(), 5);
}

TEST(SoftmaxCrossEntropy, Examples) {
  const std::vector<int> l0{0};
  EXPECT_NEAR(fo::softmax_cross_entropy(Tensor::zeros({1, 4}), l0).item(), std::log(4.0), 1e-6);
  EXPECT_LT(fo::softmax_cross_entropy(from({1, 3}, {30, 0, 0}), l0).item(), 1e-9);
  const std::vector<int> l2{2};
  const double oracle = -3.0 + std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(fo::softmax_cross_entropy(from({1, 3}, {1, 2, 3}), l2).item(), oracle, 1e-6);
  EXPECT_NEAR(oracle, 0.40761, 1e-5);
  const std::vector<int> bad{3};
  EXPECT_THROW(fo::softmax_cross_entropy(Tensor::zeros({1, 3}), bad), IndexError);
}

TEST(SoftmaxCrossEntropy, StableAndNonNegativeForLargeLogits) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({4, 6}, rng);
    for (auto& v : logits.data()) v *= 500;
    const std::vector<int> labels{0, 1, 2, 5};
    const double loss = fo::softmax_cross_entropy(logits, labels).item();
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_GE(loss, 0.0);
  }
}

TEST(Mse, Examples) {
  const Tensor t = from({2}, {1, 2});
  EXPECT_EQ(fo::mse(t, t).item(), 0);
  EXPECT_EQ(fo::mse(Tensor::zeros({2}), Tensor::full({2}, 1)).item(), 1);
  EXPECT_FLOAT_EQ(fo::mse(t, from({2}, {4, 6})).item(), 12.5f);
  EXPECT_THROW(fo::mse(t, Tensor::zeros({3})), DimensionError);
}

TEST(L2Normalize, Examples) {
  const Tensor e = fo::l2_normalize(from({3}, {0, 1, 0}));
  EXPECT_EQ(e.data()[1], 1);
  const Tensor v = fo::l2_normalize(from({2}, {3, 4}));
  EXPECT_FLOAT_EQ(v.data()[0], 0.6f);
  EXPECT_FLOAT_EQ(v.data()[1], 0.8f);
  EXPECT_THROW(fo::l2_normalize(Tensor::zeros({2})), DegenerateError);
  const Tensor clamped = fo::l2_normalize_clamped(Tensor::zeros({1, 2}));
  EXPECT_EQ(clamped.data()[0], 0);
}

TEST(L2Normalize, UnitNormProperty) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({5, 17}, rng);
    for (auto& v : x.data()) v *= static_cast<Scalar>(std::pow(10.0, trial % 7 - 3));
    const Tensor y = fo::l2_normalize(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 17; ++c) s += double(y.data()[r * 17 + c]) * y.data()[r * 17 + c];
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
    }
  }
}

TEST(BatchNorm, TrainingNormalisesPerChannelAndUpdatesRunningStats) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 2, 3, 3}, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = x.data()[i] * 3 + (i % 18 < 9 ? 5 : -2);
  Tensor gamma = Tensor::full({2}, 1), beta = Tensor::zeros({2});
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1);
  const Tensor y = fo::batch_norm2d(x, gamma, beta, rm, rv, true, 0.1);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, m2 = 0, xm = 0, xm2 = 0;
    const double n = 36;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t p = 0; p < 9; ++p) {
        const std::size_t i = (b * 2 + c) * 9 + p;
        m += y.data()[i];
        m2 += double(y.data()[i]) * y.data()[i];
        xm += x.data()[i];
        xm2 += double(x.data()[i]) * x.data()[i];
      }
    EXPECT_NEAR(m / n, 0.0, 1e-5);
    EXPECT_NEAR(m2 / n, 1.0, 1e-3);
    const double mean = xm / n, var = xm2 / n - mean * mean;
    EXPECT_NEAR(rm.data()[c], 0.1 * mean, 1e-4);
    EXPECT_NEAR(rv.data()[c], 0.9 + 0.1 * var * n / (n - 1), 1e-3);
  }
}

TEST(BatchNorm, EvalUsesRunningStats) {
  Tensor x = from({1, 1, 1, 2}, {3, 5});
  Tensor gamma = Tensor::full({1}, 2), beta = Tensor::full({1}, 1);
  Tensor rm = Tensor::full({1}, 1), rv = Tensor::full({1}, 4);
  const Tensor y = fo::batch_norm2d(x, gamma, beta, rm, rv, false);
  const double inv = 1.0 / std::sqrt(4.0 + fo::kBatchNormEpsilon);
  EXPECT_NEAR(y.data()[0], 2 * 2 * inv + 1, 1e-6);
  EXPECT_NEAR(y.data()[1], 2 * 4 * inv + 1, 1e-6);
  EXPECT_EQ(rm.data()[0], 1);
  EXPECT_THROW(fo::batch_norm2d(from({1, 1, 1, 1}, {3}), gamma, beta, rm, rv, true), DimensionError) << "one value per channel";
}

TEST(Backward, SimpleGradients) {
  Tensor x = from({3}, {1, -2, 4}, true);
  backward(fo::sum(x));
  for (Scalar g : x.grad()) EXPECT_EQ(g, 1);

  Tensor y = from({4}, {1, -2, 4, 0.5f}, true);
  backward(fo::mse(y, Tensor::zeros({4})));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(y.grad()[i], 2 * y.data()[i] / 4);
}

TEST(Backward, LeafGradientsAccumulateUntilReset) {
  Tensor x = from({2}, {1, 2}, true);
  backward(fo::sum(x));
  backward(fo::sum(x));
  EXPECT_EQ(x.grad()[0], 2);
  x.zero_grad();
  backward(fo::sum(x));
  EXPECT_EQ(x.grad()[0], 1);
}

TEST(Backward, ContractErrors) {
  Tensor x = from({2}, {1, 2}, true);
  EXPECT_THROW(backward(fo::mul_scalar(x, 2)), ContractError);
  EXPECT_THROW(backward(fo::sum(from({2}, {1, 2}))), ContractError);
}

TEST(Backward, DiamondGraphVisitsSharedNodeOnce) {
  Tensor x = from({2}, {1, 2}, true);
  const Tensor h = fo::mul_scalar(x, 3);
  const Tensor loss = fo::sum(fo::add(h, h));
  backward(loss);
  EXPECT_EQ(x.grad()[0], 6);
  const Tape tape = Tape::record(loss);
  // x, h, add, sum
  EXPECT_EQ(tape.size(), 4u);
}

TEST(Tape, InputsPrecedeNodes) {
  std::mt19937_64 rng(6);
  Tensor w = random_tensor({3, 4}, rng, true);
  Tensor x = random_tensor({2, 4}, rng);
  const Tensor h = fo::relu(fo::linear(x, w));
  const std::vector<int> labels{0, 2};
  const Tensor loss = fo::add(fo::softmax_cross_entropy(h, labels), fo::mse(h, fo::mul_scalar(h, 0.5f)));
  const Tape tape = Tape::record(loss);
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const Tensor& in : nodes[i].inputs()) {
      bool earlier = false;
      for (std::size_t j = 0; j < i; ++j) earlier = earlier || nodes[j].same_node(in);
      EXPECT_TRUE(earlier) << nodes[i].op();
    }
    for (std::size_t j = 0; j < i; ++j) EXPECT_FALSE(nodes[j].same_node(nodes[i]));
  }
  EXPECT_TRUE(nodes.back().same_node(loss));
}

TEST(GradMode, NoGradGuardSkipsRecording) {
  Tensor x = from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    const Tensor y = fo::mul_scalar(x, 2);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.inputs().empty());
  }
  EXPECT_TRUE(GradMode::enabled());
  EXPECT_TRUE(fo::mul_scalar(x, 2).requires_grad());
}

TEST(Backward, ValuesStayFiniteOnValidInputs) {
  std::mt19937_64 rng(7);
  Tensor k = random_tensor({4, 3, 3, 3}, rng, true);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng);
  const Tensor f = fo::global_avg_pool(fo::max_pool2d(fo::relu(fo::conv2d(x, k, 1, 1)), 2));
  const std::vector<int> labels{1, 3};
  backward(fo::softmax_cross_entropy(f, labels));
  for (Scalar g : k.grad()) EXPECT_TRUE(std::isfinite(g));
  for (Scalar v : f.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Sgd, Examples) {
  Parameter p{"p", from({2}, {1, -1}, true)};
  p.tensor.zero_grad();
  SgdState s;
  s.learning_rate = 0.5;
  s.momentum = 0.9;
  s.weight_decay = 0;
  std::vector<Parameter> ps{p};
  sgd_step(ps, s);
  EXPECT_EQ(p.tensor.data()[0], 1);

  SgdState vanilla;
  vanilla.learning_rate = 0.1;
  vanilla.momentum = 0;
  vanilla.weight_decay = 0;
  p.tensor.grad()[0] = 2;
  p.tensor.grad()[1] = -3;
  sgd_step(ps, vanilla);
  EXPECT_FLOAT_EQ(p.tensor.data()[0], 1 - 0.2f);
  EXPECT_FLOAT_EQ(p.tensor.data()[1], -1 + 0.3f);

  Parameter q{"q", from({1}, {0}, true)};
  std::vector<Parameter> qs{q};
  SgdState mom;
  mom.learning_rate = 1;
  mom.momentum = 0.9;
  mom.weight_decay = 0;
  for (int i = 0; i < 2; ++i) {
    q.tensor.zero_grad();
    q.tensor.grad()[0] = 1;
    sgd_step(qs, mom);
  }
  EXPECT_FLOAT_EQ(q.tensor.data()[0], -2.9f);
}

TEST(Sgd, WeightDecayAndZeroLearningRate) {
  Parameter p{"p", from({1}, {2}, true)};
  p.tensor.zero_grad();
  std::vector<Parameter> ps{p};
  SgdState s;
  s.learning_rate = 0.1;
  s.momentum = 0;
  s.weight_decay = 0.5;
  sgd_step(ps, s);
  EXPECT_FLOAT_EQ(p.tensor.data()[0], 2 - 0.1f * 1.0f);

  // lr = 0 is rejected by validate(); the update itself is then a no-op.
  SgdState frozen;
  frozen.learning_rate = 0;
  EXPECT_THROW(frozen.validate(), ConfigError);
  p.tensor.grad()[0] = 123;
  const Scalar before = p.tensor.data()[0];
  sgd_step(ps, frozen);
  EXPECT_EQ(p.tensor.data()[0], before);
}

TEST(Sgd, ContractErrors) {
  Parameter p{"p", from({1}, {2}, true)};
  std::vector<Parameter> ps{p};
  SgdState s;
  EXPECT_THROW(sgd_step(ps, s), ContractError);
  SgdState bad;
  bad.momentum = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.momentum = 0.5;
  bad.weight_decay = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(LrSchedule, Examples) {
  EXPECT_DOUBLE_EQ(lr_at_epoch(0.001, 0, 0.1, 30), 0.001);
  EXPECT_NEAR(lr_at_epoch(0.001, 30, 0.1, 30), 0.0001, 1e-15);
  EXPECT_NEAR(lr_at_epoch(0.001, 29, 0.1, 30), 0.001, 1e-15);
  for (int e : {0, 7, 30, 299}) EXPECT_DOUBLE_EQ(lr_at_epoch(0.05, e, 1.0, 30), 0.05);
}
