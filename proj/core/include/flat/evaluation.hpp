#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flat/data.hpp"
#include "flat/model.hpp"
#include "flat/training.hpp"

namespace flat {
FLAT_ABI_BEGIN

/// Fraction of rows whose label is among the k largest logits. Equal
/// logits rank the lower class index first. Throws ConfigError unless
/// 1 <= k <= C.
double topk_accuracy(const Tensor& logits, std::span<const int> labels, int k);

/// One few-shot task. Indices point into the dataset; labels are
/// episode-local (position of the class in `classes`).
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  int n_query = 0;
  /// Novel class label of each episode class.
  std::vector<int> classes;
  std::vector<std::size_t> support;
  std::vector<int> support_labels;
  std::vector<std::size_t> query;
  std::vector<int> query_labels;
};

/// Uniformly picks n_way novel classes, then k_shot + n_query distinct
/// examples of each from the novel pool. Throws DataError naming the first
/// class with too few examples.
Episode sample_episode(const ImageDataset& dataset, int n_way, int k_shot, int n_query, Rng& rng);

struct EvalReport {
  std::string setting;
  std::optional<int> n_way;
  int k_shot = 0;
  int n_runs = 0;
  double mean = 0.0;
  double ci95 = 0.0;
  std::vector<double> per_run;

  std::string to_json(bool include_per_run = true) const;
};

/// mean and 1.96 * s / sqrt(n) with the n-1 sample deviation (0 for n=1).
EvalReport summarize(std::string setting, std::vector<double> per_run, int k_shot, std::optional<int> n_way = {});

struct EpisodeProtocol {
  int n_way = 5;
  int k_shot = 1;
  int n_query = 15;
  int n_runs = 600;
  std::uint64_t seed = 0;
  /// Per-episode fine-tuning after imprinting; epochs = 0 is pure imprinting.
  int finetune_epochs = 0;
  int batch_size = 32;
  double lr = 0.002;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool freeze_encoder = true;
  int crop_pad = 4;
  double flip_prob = 0.5;

  void validate() const;
};

/// Episode e draws from its own stream seeded by (seed, e). Every episode
/// works on a clone of `model` with a fresh n_way novel head, so the input
/// model is never modified. Errors are rethrown with the episode index.
EvalReport run_episodes(const FlatModel& model, const ImageDataset& dataset, const EpisodeProtocol& protocol);

/// Top-1 accuracy over the fixed test split. all_classes scores base_test
/// and novel_test with the joint head; novel_classes scores novel_test with
/// the joint head; transfer scores novel_test with the novel-only head.
/// Throws StateError when the model's heads do not match the setting.
EvalReport evaluate_setting(const FlatModel& model, const ImageDataset& dataset, Setting setting, int k_shot);

FLAT_ABI_END
}  // namespace flat
