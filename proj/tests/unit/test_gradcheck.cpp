// Built against the double-precision library.
#include <gtest/gtest.h>

#include <random>

#include "flat/model.hpp"
#include "flat/ops.hpp"
#include "flat/training.hpp"
#include "support/gradcheck.hpp"
#include "support/mini_model.hpp"

using namespace flat;
namespace fo = flat::ops;
using flat::testing::check_gradients;

static_assert(sizeof(Scalar) == 8, "gradient checks need the double build");

namespace {

constexpr double kStep = 1e-3;
constexpr double kTolerance = 1e-3;
constexpr int kCoords = 100;

Tensor rand_t(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Scalar> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// sum(y * w) for a fixed random w, so every output element carries a
// distinct upstream gradient.
Tensor probe(const Tensor& y) {
  Rng rng(1234);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<Scalar> w(y.numel());
  for (auto& x : w) x = u(rng);
  const Tensor row = fo::reshape(y, {1, y.numel()});
  return fo::sum(fo::matmul(row, Tensor({y.numel(), 1}, std::move(w))));
}

void expect_sound(const std::function<Tensor()>& f, std::vector<Tensor> inputs, std::uint64_t seed = 0) {
  Rng rng(seed);
  const auto r = check_gradients(f, std::move(inputs), kCoords, rng, kStep, kTolerance);
  EXPECT_EQ(r.failed, 0) << "max relative error " << r.max_rel_error;
  EXPECT_EQ(r.checked, kCoords) << r.skipped << " stencils straddled a kink";
}

}  // namespace

TEST(GradCheck, Matmul) {
  Rng rng(1);
  Tensor a = rand_t({3, 4}, rng), b = rand_t({4, 2}, rng);
  expect_sound([&] { return probe(fo::matmul(a, b)); }, {a, b});
}

TEST(GradCheck, TransposeAndLinear) {
  Rng rng(2);
  Tensor x = rand_t({3, 4}, rng), w = rand_t({5, 4}, rng), b = rand_t({5}, rng);
  expect_sound([&] { return probe(fo::transpose(fo::linear(x, w, b))); }, {x, w, b});
}

TEST(GradCheck, Conv2dStridedPadded) {
  Rng rng(3);
  Tensor x = rand_t({2, 2, 6, 5}, rng), k = rand_t({3, 2, 3, 3}, rng), b = rand_t({3}, rng);
  expect_sound([&] { return probe(fo::conv2d(x, k, b, 2, 1)); }, {x, k, b});
  expect_sound([&] { return probe(fo::conv2d(x, k, 1, 0)); }, {x, k}, 1);
}

TEST(GradCheck, MaxPoolAndGlobalAverage) {
  Rng rng(4);
  Tensor x = rand_t({2, 3, 5, 4}, rng);
  expect_sound([&] { return probe(fo::max_pool2d(x, 2)); }, {x});
  expect_sound([&] { return probe(fo::global_avg_pool(x)); }, {x});
}

TEST(GradCheck, BatchNormTrainingAndEval) {
  Rng rng(5);
  Tensor x = rand_t({3, 2, 3, 3}, rng), g = rand_t({2}, rng, 0.5, 1.5), b = rand_t({2}, rng);
  Tensor rm = Tensor::zeros({2}), rv = Tensor::full({2}, 1.0);
  expect_sound([&] { return probe(fo::batch_norm2d(x, g, b, rm, rv, true)); }, {x, g, b});
  Tensor em = Tensor({2}, {0.1, -0.2}), ev = Tensor({2}, {0.5, 2.0});
  expect_sound([&] { return probe(fo::batch_norm2d(x, g, b, em, ev, false)); }, {x, g, b});
}

TEST(GradCheck, Elementwise) {
  Rng rng(6);
  Tensor a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng), s = rand_t({1}, rng, 1.0, 2.0);
  expect_sound([&] { return probe(fo::relu(a)); }, {a});
  expect_sound([&] { return probe(fo::add(a, b)); }, {a, b});
  expect_sound([&] { return probe(fo::sub(a, b)); }, {a, b});
  expect_sound([&] { return probe(fo::mul_scalar(a, -2.5)); }, {a});
  expect_sound([&] { return probe(fo::scale_by(a, s)); }, {a, s});
  expect_sound([&] { return probe(fo::reshape(a, {2, 6})); }, {a});
  expect_sound([&] { return probe(fo::concat_columns(a, b)); }, {a, b});
}

TEST(GradCheck, Reductions) {
  Rng rng(7);
  Tensor a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
  expect_sound([&] { return fo::mul_scalar(fo::sum(fo::relu(a)), 1.0); }, {a});
  expect_sound([&] { return fo::mean(fo::sub(a, b)); }, {a, b});
  expect_sound([&] { return fo::mse(a, b); }, {a, b});
}

TEST(GradCheck, Normalisation) {
  Rng rng(8);
  Tensor a = rand_t({3, 4}, rng);
  expect_sound([&] { return probe(fo::l2_normalize(a)); }, {a});
  expect_sound([&] { return probe(fo::l2_normalize_clamped(a)); }, {a});
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  Rng rng(9);
  Tensor logits = rand_t({4, 5}, rng, -3.0, 3.0);
  const std::vector<int> labels{0, 4, 2, 2};
  expect_sound([&] { return fo::softmax_cross_entropy(logits, labels); }, {logits});
}

TEST(GradCheck, CosineClassifier) {
  FlatModel model(flat::testing::mini_config(), 3);
  Rng rng(10);
  Tensor f = rand_t({4, 5}, rng);
  const std::vector<int> labels{0, 1, 2, 1};
  std::vector<Tensor> inputs{f, model.base_head(), model.scale()};
  expect_sound([&] { return fo::softmax_cross_entropy(model.classify(f, Head::base), labels); }, inputs);
}

TEST(GradCheck, FullObjectiveOnMiniModel) {
  FlatModel model(flat::testing::mini_config(), 11);
  flat::testing::randomize_decoder_output(model, 12);
  const auto images = flat::testing::random_images(4, 8, 13);
  const auto ptrs = flat::testing::pointers(images);
  const std::vector<int> labels{0, 1, 2, 0};
  PretrainConfig config;
  config.mode = PretrainMode::flat;
  config.lambda = 4.0;
  std::vector<Tensor> params;
  for (const Parameter& p : model.parameters()) params.push_back(p.tensor);
  auto objective = [&] {
    Rng transforms(14);
    return pretrain_losses(model, ptrs, labels, config, transforms).total;
  };
  expect_sound(objective, params, 15);
}
