#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flat/data.hpp"
#include "flat/model.hpp"
#include "flat/optim.hpp"

namespace flat {
FLAT_ABI_BEGIN

enum class PretrainMode { flat, baseline, naive_augment };
const char* to_string(PretrainMode mode);
/// Throws ConfigError for unknown names.
PretrainMode parse_pretrain_mode(const std::string& name);

struct PretrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double base_lr = 0.05;
  double decay_rate = 0.1;
  int decay_every = 30;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lambda = 4.0;
  double transform_magnitude = kDefaultTransformMagnitude;
  PretrainMode mode = PretrainMode::flat;
  std::uint64_t seed = 0;
  int crop_pad = 4;
  double flip_prob = 0.5;

  void validate() const;
  /// Weight of the decoding term actually applied; 0 unless mode is flat.
  double effective_lambda() const { return mode == PretrainMode::flat ? lambda : 0.0; }
};

enum class Setting { all_classes, novel_classes, transfer };
const char* to_string(Setting setting);
Setting parse_setting(const std::string& name);

enum class HeadInit { imprint, random };
const char* to_string(HeadInit init);
HeadInit parse_head_init(const std::string& name);

struct FinetuneConfig {
  int epochs = 15;
  int batch_size = 32;
  double lr = 0.002;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Setting setting = Setting::novel_classes;
  bool freeze_encoder = false;
  HeadInit init = HeadInit::imprint;
  int k_shot = 1;
  std::uint64_t seed = 0;
  int crop_pad = 4;
  double flip_prob = 0.5;

  void validate() const;
};

struct EpochMetrics {
  std::string stage;
  int epoch = 0;
  double lr = 0.0;
  double class_loss = 0.0;
  double decode_loss = 0.0;
  double total_loss = 0.0;
  std::optional<double> eval_acc;

  /// {"stage", "epoch", "lr", "class_loss", "decode_loss", "total_loss", "eval_acc"?}
  std::string to_json() const;
};

/// Everything needed to continue a pretraining run bit-for-bit.
struct TrainState {
  int epoch = 0;  // completed epochs
  std::uint64_t step = 0;
  double class_loss = 0.0;  // last epoch's mean components
  double decode_loss = 0.0;
  Rng rng;
  SgdState optimizer;
  double best_eval_acc = -1.0;
  int best_epoch = -1;
};

TrainState initial_train_state(const PretrainConfig& config);

/// Stores the state as the checkpoint's "state" object plus one velocity
/// array per parameter.
void store_train_state(const TrainState& state, const FlatModel& model, CheckpointMeta& meta);
/// Throws LoadError when the checkpoint carries no usable training state.
TrainState restore_train_state(const CheckpointMeta& meta, const FlatModel& model);

struct StepLosses {
  double total = 0.0;
  double class_loss = 0.0;
  double decode_loss = 0.0;
};

/// Loss graph for one pretraining batch. `total` is what gets
/// backpropagated. One transform per image is drawn from `rng` in every
/// mode so random streams stay aligned across modes.
struct PretrainLosses {
  Tensor total;
  Tensor class_loss;
  std::optional<Tensor> decode_loss;
};

PretrainLosses pretrain_losses(FlatModel& model, const std::vector<const Image*>& images,
                               std::span<const int> labels, const PretrainConfig& config, Rng& rng);

/// pretrain_losses, backward, sgd_step at optimizer.learning_rate, then
/// head renormalisation. Throws IndexError for labels outside the base head.
StepLosses pretrain_step(FlatModel& model, const std::vector<const Image*>& images, std::span<const int> labels,
                         const PretrainConfig& config, Rng& rng, SgdState& optimizer);

using PretrainCallback = std::function<void(const FlatModel&, const TrainState&, const EpochMetrics&)>;

struct PretrainResult {
  std::vector<EpochMetrics> metrics;
  TrainState state;
};

/// Runs epochs [state.epoch, config.epochs). Each epoch shuffles base_train,
/// applies crop/flip augmentation, steps through mini-batches and reports
/// base_test accuracy when that split is non-empty. `on_epoch` runs after
/// every epoch with the updated state.
PretrainResult pretrain(FlatModel& model, const ImageDataset& dataset, const PretrainConfig& config,
                        std::optional<TrainState> resume = std::nullopt, const PretrainCallback& on_epoch = {});

using FinetuneCallback = std::function<void(const EpochMetrics&)>;

/// Trains the novel head on a labelled support set (labels are novel-local,
/// 0..n_novel-1). Every class must have exactly config.k_shot examples.
/// init=imprint imprints first; transfer drops the base head. Base head and
/// decoder stay fixed; the encoder is trained unless freeze_encoder.
std::vector<EpochMetrics> finetune(FlatModel& model, const std::vector<const Image*>& support,
                                   std::span<const int> labels, int n_novel, const FinetuneConfig& config,
                                   const FinetuneCallback& on_epoch = {});

/// Convenience overload taking dataset indices of novel examples.
std::vector<EpochMetrics> finetune(FlatModel& model, const ImageDataset& dataset,
                                   std::span<const std::size_t> support, const FinetuneConfig& config,
                                   const FinetuneCallback& on_epoch = {});

/// Features of every image without recording gradients, in batches.
Tensor encode_images(const FlatModel& model, const std::vector<const Image*>& images, std::size_t batch_size = 128);

FLAT_ABI_END
}  // namespace flat
