#include "flat/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flat/error.hpp"
#include "json.hpp"

namespace flat {
FLAT_ABI_BEGIN

using json = nlohmann::json;

namespace {

Rng episode_rng(std::uint64_t seed, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 3u};
  return Rng(seq);
}

[[noreturn]] void rethrow_with_episode(int index) {
  const std::string prefix = "episode " + std::to_string(index) + ": ";
  try {
    throw;
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const StateError& e) {
    throw StateError(prefix + e.what());
  } catch (const Error& e) {
    throw NumericError(prefix + e.what());
  }
}

std::vector<const Image*> images_of(const ImageDataset& dataset, const std::vector<std::size_t>& indices) {
  std::vector<const Image*> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(&dataset[i].image);
  return out;
}

Tensor gather_rows(const Tensor& features, const std::vector<std::size_t>& rows) {
  const std::size_t d = features.dim(1);
  std::vector<Scalar> values;
  values.reserve(rows.size() * d);
  for (std::size_t r : rows) {
    const auto row = features.data().subspan(r * d, d);
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), d}, std::move(values));
}

double score_episode(FlatModel& model, const Tensor& support_features, const Tensor& query_features,
                     const Episode& episode) {
  const std::size_t d = support_features.dim(1);
  const auto k = static_cast<std::size_t>(episode.k_shot);
  std::vector<std::vector<Scalar>> per_class(static_cast<std::size_t>(episode.n_way));
  for (std::size_t i = 0; i < episode.support.size(); ++i) {
    const auto row = support_features.data().subspan(i * d, d);
    auto& dst = per_class[static_cast<std::size_t>(episode.support_labels[i])];
    dst.insert(dst.end(), row.begin(), row.end());
  }
  std::vector<Tensor> grouped;
  for (auto& rows : per_class) grouped.emplace_back(Shape{k, d}, std::move(rows));
  model.imprint(grouped);
  NoGradGuard no_grad;
  return topk_accuracy(model.classify(query_features, Head::novel), episode.query_labels, 1);
}

}  // namespace

double topk_accuracy(const Tensor& logits, std::span<const int> labels, int k) {
  if (logits.rank() != 2) throw DimensionError("topk_accuracy: logits must be [B x C], got " + shape_to_string(logits.shape()));
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (k < 1 || static_cast<std::size_t>(k) > cols) {
    throw ConfigError("top-k needs 1 <= k <= " + std::to_string(cols) + ", got k = " + std::to_string(k));
  }
  if (labels.size() != rows) throw DimensionError("topk_accuracy: label count differs from logit rows");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) throw IndexError("label " + std::to_string(y) + " outside [0, C)");
    const auto row = logits.data().subspan(r * cols, cols);
    const Scalar target = row[static_cast<std::size_t>(y)];
    std::size_t rank = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (row[c] > target || (row[c] == target && c < static_cast<std::size_t>(y))) ++rank;
    }
    if (rank < static_cast<std::size_t>(k)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

Episode sample_episode(const ImageDataset& dataset, int n_way, int k_shot, int n_query, Rng& rng) {
  if (n_way < 1 || k_shot < 1 || n_query < 1) throw ConfigError("episodes need n_way, k_shot and n_query >= 1");
  if (dataset.n_novel() < n_way) {
    throw DataError(std::to_string(n_way) + "-way episodes need " + std::to_string(n_way) + " novel classes, dataset has " +
                    std::to_string(dataset.n_novel()));
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.n_novel()));
  for (std::size_t idx : dataset.novel_pool()) by_class[static_cast<std::size_t>(dataset[idx].label)].push_back(idx);
  const auto needed = static_cast<std::size_t>(k_shot + n_query);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < needed) {
      throw DataError("novel class '" + dataset.novel_classes()[c] + "' has " + std::to_string(by_class[c].size()) +
                      " examples, episodes need " + std::to_string(needed));
    }
  }

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.n_query = n_query;
  std::vector<int> classes(static_cast<std::size_t>(dataset.n_novel()));
  std::iota(classes.begin(), classes.end(), 0);
  std::shuffle(classes.begin(), classes.end(), rng);
  ep.classes.assign(classes.begin(), classes.begin() + n_way);
  for (int w = 0; w < n_way; ++w) {
    auto pool = by_class[static_cast<std::size_t>(ep.classes[static_cast<std::size_t>(w)])];
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int i = 0; i < k_shot; ++i) {
      ep.support.push_back(pool[static_cast<std::size_t>(i)]);
      ep.support_labels.push_back(w);
    }
    for (int i = 0; i < n_query; ++i) {
      ep.query.push_back(pool[static_cast<std::size_t>(k_shot + i)]);
      ep.query_labels.push_back(w);
    }
  }
  return ep;
}

std::string EvalReport::to_json(bool include_per_run) const {
  json j{{"setting", setting}, {"k_shot", k_shot}, {"n_runs", n_runs}, {"mean", mean}, {"ci95", ci95}};
  if (n_way) j["n_way"] = *n_way;
  if (include_per_run) j["per_run"] = per_run;
  return j.dump(2);
}

EvalReport summarize(std::string setting, std::vector<double> per_run, int k_shot, std::optional<int> n_way) {
  if (per_run.empty()) throw ConfigError("cannot summarise zero runs");
  EvalReport r;
  r.setting = std::move(setting);
  r.n_way = n_way;
  r.k_shot = k_shot;
  r.n_runs = static_cast<int>(per_run.size());
  const auto n = static_cast<double>(per_run.size());
  double sum = 0.0;
  for (double a : per_run) sum += a;
  r.mean = sum / n;
  if (per_run.size() > 1) {
    double sq = 0.0;
    for (double a : per_run) sq += (a - r.mean) * (a - r.mean);
    r.ci95 = 1.96 * std::sqrt(sq / (n - 1.0)) / std::sqrt(n);
  }
  r.per_run = std::move(per_run);
  return r;
}

void EpisodeProtocol::validate() const {
  if (n_way < 2) throw ConfigError("eval.n_way must be >= 2");
  if (k_shot < 1) throw ConfigError("eval.k_shot must be >= 1");
  if (n_query < 1) throw ConfigError("eval.n_query must be >= 1");
  if (n_runs < 1) throw ConfigError("eval.n_runs must be >= 1");
  if (finetune_epochs < 0) throw ConfigError("eval.finetune_epochs must be >= 0");
}

EvalReport run_episodes(const FlatModel& model, const ImageDataset& dataset, const EpisodeProtocol& protocol) {
  protocol.validate();
  const bool pure_imprint = protocol.finetune_epochs == 0;

  // Without fine-tuning the encoder is fixed, so the pool is encoded once.
  std::vector<std::size_t> row_of;
  Tensor pool_features;
  if (pure_imprint) {
    const auto pool = dataset.novel_pool();
    if (pool.empty()) throw DataError("dataset has no novel examples");
    row_of.assign(dataset.size(), 0);
    for (std::size_t r = 0; r < pool.size(); ++r) row_of[pool[r]] = r;
    pool_features = encode_images(model, images_of(dataset, pool));
  }

  std::vector<double> per_run;
  per_run.reserve(static_cast<std::size_t>(protocol.n_runs));
  for (int e = 0; e < protocol.n_runs; ++e) {
    try {
      Rng rng = episode_rng(protocol.seed, e);
      const Episode ep = sample_episode(dataset, protocol.n_way, protocol.k_shot, protocol.n_query, rng);
      FlatModel local = model.clone();
      local.drop_base_head();
      if (pure_imprint) {
        std::vector<std::size_t> support_rows, query_rows;
        for (std::size_t i : ep.support) support_rows.push_back(row_of[i]);
        for (std::size_t i : ep.query) query_rows.push_back(row_of[i]);
        per_run.push_back(score_episode(local, gather_rows(pool_features, support_rows),
                                        gather_rows(pool_features, query_rows), ep));
        continue;
      }
      FinetuneConfig ft;
      ft.epochs = protocol.finetune_epochs;
      ft.batch_size = protocol.batch_size;
      ft.lr = protocol.lr;
      ft.momentum = protocol.momentum;
      ft.weight_decay = protocol.weight_decay;
      ft.setting = Setting::transfer;
      ft.freeze_encoder = protocol.freeze_encoder;
      ft.init = HeadInit::imprint;
      ft.k_shot = protocol.k_shot;
      ft.seed = rng();
      ft.crop_pad = protocol.crop_pad;
      ft.flip_prob = protocol.flip_prob;
      finetune(local, images_of(dataset, ep.support), ep.support_labels, ep.n_way, ft);
      NoGradGuard no_grad;
      const Tensor query = encode_images(local, images_of(dataset, ep.query));
      per_run.push_back(topk_accuracy(local.classify(query, Head::novel), ep.query_labels, 1));
    } catch (const Error&) {
      rethrow_with_episode(e);
    }
  }
  return summarize("episodic", std::move(per_run), protocol.k_shot, protocol.n_way);
}

EvalReport evaluate_setting(const FlatModel& model, const ImageDataset& dataset, Setting setting, int k_shot) {
  if (!model.has_novel_head()) throw StateError("model has no novel head; fine-tune or imprint before evaluating");
  if (model.n_novel() != dataset.n_novel()) {
    throw StateError("novel head has " + std::to_string(model.n_novel()) + " rows, dataset has " +
                     std::to_string(dataset.n_novel()) + " novel classes");
  }
  const bool transfer = setting == Setting::transfer;
  if (transfer && model.has_base_head()) {
    throw StateError("transfer evaluation needs a model whose base head was replaced (fine-tune with setting=transfer)");
  }
  if (!transfer && !model.has_base_head()) {
    throw StateError(std::string(to_string(setting)) + " evaluation needs the joint head, but the base head was dropped");
  }
  if (!transfer && model.n_base() != dataset.n_base()) throw StateError("base head does not match the dataset");

  std::vector<std::size_t> indices;
  if (setting == Setting::all_classes) indices = dataset.indices(Split::base_test);
  const auto novel = dataset.indices(Split::novel_test);
  indices.insert(indices.end(), novel.begin(), novel.end());
  if (indices.empty()) throw DataError("no test examples for setting " + std::string(to_string(setting)));

  std::vector<int> labels;
  for (std::size_t i : indices) {
    const Example& ex = dataset[i];
    labels.push_back(is_base(ex.split) || transfer ? ex.label : ex.label + model.n_base());
  }
  NoGradGuard no_grad;
  const Tensor features = encode_images(model, images_of(dataset, indices));
  const double acc = topk_accuracy(model.classify(features, transfer ? Head::novel : Head::joint), labels, 1);
  return summarize(to_string(setting), {acc}, k_shot);
}

FLAT_ABI_END
}  // namespace flat
