#include <gtest/gtest.h>

#include <cmath>

#include "flat/error.hpp"
#include "flat/ops.hpp"
#include "flat/training.hpp"
#include "support/mini_model.hpp"
#include "support/temp_dir.hpp"

using namespace flat;
using flat::testing::tiny_data_config;
using flat::testing::tiny_model_config;
using flat::testing::TempDir;

namespace {

PretrainConfig quick_config(PretrainMode mode, int epochs = 2) {
  PretrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.base_lr = 0.05;
  c.mode = mode;
  c.seed = 17;
  return c;
}

void expect_bitwise_models(const FlatModel& a, const FlatModel& b) {
  auto pa = a.parameters(), pb = b.parameters();
  const auto ba = a.buffers(), bb = b.buffers();
  pa.insert(pa.end(), ba.begin(), ba.end());
  pb.insert(pb.end(), bb.begin(), bb.end());
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i].tensor.shape(), pb[i].tensor.shape()) << pa[i].name;
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()))
        << pa[i].name;
  }
}

std::vector<const Image*> base_batch(const ImageDataset& d, std::vector<int>& labels, std::size_t n) {
  std::vector<const Image*> out;
  for (std::size_t i : d.indices(Split::base_train)) {
    if (out.size() == n) break;
    out.push_back(&d[i].image);
    labels.push_back(d[i].label);
  }
  return out;
}

}  // namespace

TEST(PretrainConfig, ValidationNamesTheField) {
  PretrainConfig c;
  c.lambda = -1;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("pretrain.lambda"), std::string::npos);
  }
  c = PretrainConfig{};
  c.transform_magnitude = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(PretrainConfig{}.lambda, 4.0);
  EXPECT_EQ(parse_pretrain_mode("naive_augment"), PretrainMode::naive_augment);
  EXPECT_THROW(parse_pretrain_mode("flat2"), ConfigError);
  c = PretrainConfig{};
  c.mode = PretrainMode::baseline;
  EXPECT_EQ(c.effective_lambda(), 0.0);
}

TEST(PretrainStep, LambdaZeroEqualsBaselineOnABatch) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  std::vector<int> labels;
  const auto batch = base_batch(d, labels, 6);
  FlatModel a(tiny_model_config(), 1), b(tiny_model_config(), 1);
  PretrainConfig flat0 = quick_config(PretrainMode::flat);
  flat0.lambda = 0.0;
  const PretrainConfig base = quick_config(PretrainMode::baseline);
  Rng ra(5), rb(5);
  SgdState oa, ob;
  const StepLosses la = pretrain_step(a, batch, labels, flat0, ra, oa);
  const StepLosses lb = pretrain_step(b, batch, labels, base, rb, ob);
  EXPECT_EQ(la.total, lb.total);
  EXPECT_EQ(la.class_loss, lb.class_loss);
  EXPECT_EQ(la.decode_loss, 0.0);
  EXPECT_EQ(ra, rb);
  expect_bitwise_models(a, b);
}

TEST(PretrainStep, FreshModelClassLossIsLogC) {
  SyntheticShapesConfig dc;
  dc.n_base_classes = 8;
  dc.n_novel_classes = 4;
  const ImageDataset d = generate_synthetic(dc);
  std::vector<int> labels;
  const auto batch = base_batch(d, labels, 32);
  ModelConfig mc;
  mc.n_base_classes = 8;
  FlatModel model(mc, 2);
  Rng rng(3);
  const PretrainLosses l = pretrain_losses(model, batch, labels, quick_config(PretrainMode::flat), rng);
  EXPECT_NEAR(l.class_loss.item(), std::log(8.0), 0.02 * std::log(8.0));
}

TEST(PretrainStep, ZeroDecoderLossIsTargetEnergy) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  std::vector<int> labels;
  const auto batch = base_batch(d, labels, 6);
  FlatModel model(tiny_model_config(), 4);
  Rng rng(6), replay(6);
  const PretrainLosses l = pretrain_losses(model, batch, labels, quick_config(PretrainMode::flat), rng);
  double sq = 0;
  for (int i = 0; i < 6; ++i)
    for (const Tensor t = transform_target(sample_transform(replay)); Scalar v : t.data()) sq += double(v) * v;
  ASSERT_TRUE(l.decode_loss.has_value());
  EXPECT_NEAR(l.decode_loss->item(), sq / (6 * 8), 1e-6);
  EXPECT_NEAR(l.total.item(), l.class_loss.item() + 4.0 * l.decode_loss->item(), 1e-5);
}

TEST(PretrainStep, NaiveAugmentHasNoDecodingTerm) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  std::vector<int> labels;
  const auto batch = base_batch(d, labels, 6);
  FlatModel model(tiny_model_config(), 4);
  Rng rng(7);
  const PretrainLosses l = pretrain_losses(model, batch, labels, quick_config(PretrainMode::naive_augment), rng);
  EXPECT_FALSE(l.decode_loss.has_value());
  EXPECT_TRUE(l.total.same_node(l.class_loss));
}

TEST(PretrainStep, RejectsLabelsOutsideBaseRange) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  std::vector<int> labels;
  const auto batch = base_batch(d, labels, 4);
  labels[2] = 3;
  FlatModel model(tiny_model_config(), 4);
  Rng rng(8);
  SgdState opt;
  EXPECT_THROW(pretrain_step(model, batch, labels, quick_config(PretrainMode::flat), rng, opt), IndexError);
}

TEST(Pretrain, LambdaZeroReproducesBaselineBitwise) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  FlatModel a(tiny_model_config(), 9), b(tiny_model_config(), 9);
  PretrainConfig flat0 = quick_config(PretrainMode::flat);
  flat0.lambda = 0.0;
  const auto ra = pretrain(a, d, flat0);
  const auto rb = pretrain(b, d, quick_config(PretrainMode::baseline));
  expect_bitwise_models(a, b);
  ASSERT_EQ(ra.metrics.size(), rb.metrics.size());
  for (std::size_t e = 0; e < ra.metrics.size(); ++e) {
    EXPECT_EQ(ra.metrics[e].total_loss, rb.metrics[e].total_loss);
    EXPECT_EQ(ra.metrics[e].decode_loss, 0.0);
  }
}

TEST(Pretrain, ZeroEpochsLeaveTheModelUnchanged) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  FlatModel model(tiny_model_config(), 10);
  const FlatModel before = model.clone();
  const auto r = pretrain(model, d, quick_config(PretrainMode::flat, 0));
  EXPECT_TRUE(r.metrics.empty());
  expect_bitwise_models(model, before);
}

TEST(Pretrain, LossDecreasesOnSeparableToySet) {
  SyntheticShapesConfig dc = tiny_data_config();
  dc.n_base_classes = 2;
  dc.n_novel_classes = 2;
  const ImageDataset d = generate_synthetic(dc);
  FlatModel model(tiny_model_config(2), 11);
  const auto r = pretrain(model, d, quick_config(PretrainMode::baseline, 6));
  EXPECT_LT(r.metrics.back().class_loss, r.metrics.front().class_loss);
  ASSERT_TRUE(r.metrics.back().eval_acc.has_value());
}

TEST(Pretrain, DeterministicAndDecodeLossNonNegative) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  FlatModel a(tiny_model_config(), 12), b(tiny_model_config(), 12);
  const auto ra = pretrain(a, d, quick_config(PretrainMode::flat));
  const auto rb = pretrain(b, d, quick_config(PretrainMode::flat));
  for (std::size_t e = 0; e < ra.metrics.size(); ++e) {
    EXPECT_EQ(ra.metrics[e].to_json(), rb.metrics[e].to_json());
    EXPECT_GT(ra.metrics[e].decode_loss, 0.0);
    EXPECT_TRUE(std::isfinite(ra.metrics[e].total_loss));
  }
  expect_bitwise_models(a, b);
}

TEST(Pretrain, ResumeFromCheckpointIsBitwiseIdentical) {
  TempDir tmp;
  const ImageDataset d = generate_synthetic(tiny_data_config());
  const PretrainConfig config = quick_config(PretrainMode::flat, 3);

  FlatModel straight(tiny_model_config(), 13);
  pretrain(straight, d, config);

  FlatModel first(tiny_model_config(), 13);
  pretrain(first, d, quick_config(PretrainMode::flat, 3), std::nullopt,
           [&](const FlatModel& m, const TrainState& s, const EpochMetrics&) {
             if (s.epoch != 2) return;
             CheckpointMeta meta;
             meta.epoch = s.epoch;
             store_train_state(s, m, meta);
             save_checkpoint(m, tmp / "epoch2", meta);
           });
  LoadedCheckpoint loaded = load_checkpoint(tmp / "epoch2");
  TrainState state = restore_train_state(loaded.meta, loaded.model);
  EXPECT_EQ(state.epoch, 2);
  const auto rest = pretrain(loaded.model, d, config, std::move(state));
  EXPECT_EQ(rest.metrics.size(), 1u);
  expect_bitwise_models(straight, loaded.model);
}

TEST(Pretrain, RejectsMismatchedDataset) {
  const ImageDataset d = generate_synthetic(tiny_data_config());
  FlatModel model(tiny_model_config(4), 14);
  EXPECT_THROW(pretrain(model, d, quick_config(PretrainMode::flat)), ConfigError);
  FlatModel ok(tiny_model_config(), 14);
  EXPECT_THROW(pretrain(ok, ImageDataset{}, quick_config(PretrainMode::flat)), ConfigError);
}

TEST(TrainState, RestoreWithoutStateFails) {
  TempDir tmp;
  FlatModel model(tiny_model_config(), 15);
  save_checkpoint(model, tmp / "plain");
  const LoadedCheckpoint loaded = load_checkpoint(tmp / "plain");
  EXPECT_THROW(restore_train_state(loaded.meta, loaded.model), LoadError);
}

namespace {

struct FinetuneFixture : ::testing::Test {
  ImageDataset data = generate_synthetic(tiny_data_config());
  FlatModel model{tiny_model_config(), 20};

  void SetUp() override { pretrain(model, data, quick_config(PretrainMode::flat, 2)); }

  std::vector<std::size_t> support(int k) {
    Rng rng(21);
    return sample_k_shot(data, k, rng).support;
  }

  double support_accuracy(const FlatModel& m, const std::vector<std::size_t>& idx, Head head, int offset) {
    std::vector<const Image*> imgs;
    std::vector<int> labels;
    for (std::size_t i : idx) {
      imgs.push_back(&data[i].image);
      labels.push_back(data[i].label + offset);
    }
    NoGradGuard g;
    const Tensor logits = m.classify(encode_images(m, imgs), head);
    std::size_t hit = 0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const auto row = logits.data().subspan(r * logits.dim(1), logits.dim(1));
      hit += std::size_t(std::max_element(row.begin(), row.end()) - row.begin()) == std::size_t(labels[r]);
    }
    return double(hit) / double(labels.size());
  }
};

}  // namespace

TEST_F(FinetuneFixture, ZeroEpochImprintEqualsPureImprinting) {
  const auto idx = support(2);
  FinetuneConfig c;
  c.epochs = 0;
  c.k_shot = 2;
  FlatModel tuned = model.clone();
  finetune(tuned, data, idx, c);

  FlatModel manual = model.clone();
  std::vector<Tensor> feats;
  for (int cls = 0; cls < 3; ++cls) {
    std::vector<const Image*> imgs{&data[idx[2 * cls]].image, &data[idx[2 * cls + 1]].image};
    feats.push_back(encode_images(manual, imgs));
  }
  manual.imprint(feats);
  expect_bitwise_models(tuned, manual);
}

TEST_F(FinetuneFixture, TransferReplacesOnlyTheHead) {
  FinetuneConfig c;
  c.epochs = 2;
  c.setting = Setting::transfer;
  FlatModel tuned = model.clone();
  finetune(tuned, data, support(1), c);
  EXPECT_FALSE(tuned.has_base_head());
  EXPECT_EQ(tuned.novel_head().shape(), (Shape{3, 8}));
  const auto before = model.encoder_parameters(), after = tuned.encoder_parameters();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].tensor.shape(), after[i].tensor.shape());
  const auto db = model.decoder_parameters(), da = tuned.decoder_parameters();
  for (std::size_t i = 0; i < db.size(); ++i) EXPECT_EQ(db[i].tensor.shape(), da[i].tensor.shape());
}

TEST_F(FinetuneFixture, BaseHeadDecoderAndFrozenEncoderStayFixed) {
  FinetuneConfig c;
  c.epochs = 3;
  c.freeze_encoder = true;
  FlatModel tuned = model.clone();
  const FlatModel reference = model.clone();
  finetune(tuned, data, support(1), c);
  auto same = [](const std::vector<Parameter>& a, const std::vector<Parameter>& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin())) return false;
    return true;
  };
  EXPECT_TRUE(same(tuned.encoder_parameters(), reference.encoder_parameters()));
  EXPECT_TRUE(same(tuned.decoder_parameters(), reference.decoder_parameters()));
  EXPECT_TRUE(std::equal(tuned.base_head().data().begin(), tuned.base_head().data().end(),
                         reference.base_head().data().begin()));
  EXPECT_TRUE(tuned.base_head().requires_grad()) << "freezing is scoped to fine-tuning";

  FlatModel whole = model.clone();
  c.freeze_encoder = false;
  finetune(whole, data, support(1), c);
  EXPECT_FALSE(same(whole.encoder_parameters(), reference.encoder_parameters()));
}

TEST_F(FinetuneFixture, RandomInitGivesUnitRows) {
  FinetuneConfig c;
  c.epochs = 0;
  c.init = HeadInit::random;
  c.setting = Setting::transfer;
  FlatModel tuned = model.clone();
  finetune(tuned, data, support(1), c);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < 8; ++i) s += std::pow(double(tuned.novel_head().data()[r * 8 + i]), 2);
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST_F(FinetuneFixture, TrainingKeepsSupportAccuracyAtLeastImprinted) {
  const auto idx = support(3);
  FinetuneConfig c;
  c.k_shot = 3;
  c.setting = Setting::transfer;
  c.epochs = 0;
  FlatModel imprinted = model.clone();
  finetune(imprinted, data, idx, c);
  const double before = support_accuracy(imprinted, idx, Head::novel, 0);
  c.epochs = 30;
  c.lr = 0.01;
  c.crop_pad = 0;
  c.flip_prob = 0;
  FlatModel tuned = model.clone();
  const auto metrics = finetune(tuned, data, idx, c);
  EXPECT_GE(support_accuracy(tuned, idx, Head::novel, 0), before);
  EXPECT_LT(metrics.back().class_loss, metrics.front().class_loss);
}

TEST_F(FinetuneFixture, Errors) {
  auto idx = support(2);
  FinetuneConfig c;
  c.k_shot = 2;
  idx.pop_back();
  FlatModel m = model.clone();
  EXPECT_THROW(finetune(m, data, idx, c), DataError);
  std::vector<std::size_t> base_idx{data.indices(Split::base_train)[0]};
  c.k_shot = 1;
  EXPECT_THROW(finetune(m, data, base_idx, c), DataError);
  m.drop_base_head();
  c.setting = Setting::novel_classes;
  EXPECT_THROW(finetune(m, data, support(1), c), StateError);
  c.k_shot = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Setting, Parsing) {
  EXPECT_EQ(parse_setting("transfer"), Setting::transfer);
  EXPECT_THROW(parse_setting("novel"), ConfigError);
  EXPECT_EQ(parse_head_init("random"), HeadInit::random);
  EXPECT_THROW(parse_head_init("zeros"), ConfigError);
}
