#include "flat/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "flat/error.hpp"
#include "flat/ops.hpp"
#include "json.hpp"

namespace flat {
FLAT_ABI_BEGIN

using json = nlohmann::json;

namespace {

constexpr std::uint32_t kPretrainStream = 1;
constexpr std::uint32_t kFinetuneStream = 2;
const std::string kVelocityPrefix = "optim.velocity.";

Rng stream_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return Rng(seq);
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

// Temporarily excludes tensors from gradient recording.
class FreezeGuard {
 public:
  void freeze(Tensor t) {
    if (!t.defined() || !t.requires_grad()) return;
    t.set_requires_grad(false);
    frozen_.push_back(std::move(t));
  }
  ~FreezeGuard() {
    for (Tensor& t : frozen_) t.set_requires_grad(true);
  }

 private:
  std::vector<Tensor> frozen_;
};

std::vector<Image> warped_copies(const std::vector<const Image*>& images, const std::vector<ProjectiveTransform>& ts) {
  std::vector<Image> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(warp_image(*images[i], corners_to_homography(ts[i], images[i]->width, images[i]->height)));
  }
  return out;
}

Tensor stacked_targets(const std::vector<ProjectiveTransform>& ts) {
  std::vector<Scalar> values;
  values.reserve(ts.size() * kTransformDim);
  for (const auto& t : ts) {
    const Tensor target = transform_target(t);
    values.insert(values.end(), target.data().begin(), target.data().end());
  }
  return Tensor({ts.size(), kTransformDim}, std::move(values));
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = logits.data().subspan(r * cols, cols);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double base_test_accuracy(const FlatModel& model, const ImageDataset& dataset, const std::vector<std::size_t>& test) {
  std::vector<const Image*> images;
  for (std::size_t i : test) images.push_back(&dataset[i].image);
  NoGradGuard no_grad;
  const auto predicted = argmax_rows(model.classify(encode_images(model, images), Head::base));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    correct += predicted[i] == static_cast<std::size_t>(dataset[test[i]].label) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace

const char* to_string(PretrainMode mode) {
  switch (mode) {
    case PretrainMode::flat: return "flat";
    case PretrainMode::baseline: return "baseline";
    case PretrainMode::naive_augment: return "naive_augment";
  }
  return "unknown";
}

PretrainMode parse_pretrain_mode(const std::string& name) {
  if (name == "flat") return PretrainMode::flat;
  if (name == "baseline") return PretrainMode::baseline;
  if (name == "naive_augment") return PretrainMode::naive_augment;
  throw ConfigError("pretrain.mode must be flat, baseline or naive_augment, got '" + name + "'");
}

const char* to_string(Setting setting) {
  switch (setting) {
    case Setting::all_classes: return "all_classes";
    case Setting::novel_classes: return "novel_classes";
    case Setting::transfer: return "transfer";
  }
  return "unknown";
}

Setting parse_setting(const std::string& name) {
  if (name == "all_classes") return Setting::all_classes;
  if (name == "novel_classes") return Setting::novel_classes;
  if (name == "transfer") return Setting::transfer;
  throw ConfigError("setting must be all_classes, novel_classes or transfer, got '" + name + "'");
}

const char* to_string(HeadInit init) { return init == HeadInit::imprint ? "imprint" : "random"; }

HeadInit parse_head_init(const std::string& name) {
  if (name == "imprint") return HeadInit::imprint;
  if (name == "random") return HeadInit::random;
  throw ConfigError("finetune.init must be imprint or random, got '" + name + "'");
}

void PretrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("pretrain.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
  if (!(base_lr > 0.0)) throw ConfigError("pretrain.base_lr must be > 0");
  if (!(decay_rate > 0.0 && decay_rate <= 1.0)) throw ConfigError("pretrain.decay_rate must lie in (0, 1]");
  if (decay_every < 1) throw ConfigError("pretrain.decay_every must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("pretrain.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("pretrain.weight_decay must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("pretrain.lambda must be >= 0");
  if (!(transform_magnitude >= 0.0 && transform_magnitude < 0.5)) {
    throw ConfigError("pretrain.transform_magnitude must lie in [0, 0.5)");
  }
  if (crop_pad < 0) throw ConfigError("pretrain.crop_pad must be >= 0");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("pretrain.flip_prob must lie in [0, 1]");
}

void FinetuneConfig::validate() const {
  if (epochs < 0) throw ConfigError("finetune.epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("finetune.lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("finetune.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("finetune.weight_decay must be >= 0");
  if (k_shot < 1) throw ConfigError("finetune.k_shot must be >= 1");
  if (crop_pad < 0) throw ConfigError("finetune.crop_pad must be >= 0");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("finetune.flip_prob must lie in [0, 1]");
}

std::string EpochMetrics::to_json() const {
  json j{{"stage", stage},           {"epoch", epoch},           {"lr", lr},
         {"class_loss", class_loss}, {"decode_loss", decode_loss}, {"total_loss", total_loss}};
  if (eval_acc) j["eval_acc"] = *eval_acc;
  return j.dump();
}

TrainState initial_train_state(const PretrainConfig& config) {
  TrainState state;
  state.rng = stream_rng(config.seed, kPretrainStream);
  state.optimizer.learning_rate = config.base_lr;
  state.optimizer.momentum = config.momentum;
  state.optimizer.weight_decay = config.weight_decay;
  return state;
}

void store_train_state(const TrainState& state, const FlatModel& model, CheckpointMeta& meta) {
  std::ostringstream rng_text;
  rng_text << state.rng;
  json j{{"epoch", state.epoch},
         {"step", state.step},
         {"class_loss", state.class_loss},
         {"decode_loss", state.decode_loss},
         {"rng", rng_text.str()},
         {"learning_rate", state.optimizer.learning_rate},
         {"momentum", state.optimizer.momentum},
         {"weight_decay", state.optimizer.weight_decay},
         {"optimizer_epoch", state.optimizer.epoch},
         {"best_eval_acc", state.best_eval_acc},
         {"best_epoch", state.best_epoch},
         {"has_velocity", !state.optimizer.velocity.empty()}};
  meta.state_json = j.dump();
  meta.epoch = state.epoch;
  std::erase_if(meta.arrays, [](const NamedArray& a) { return a.name.starts_with(kVelocityPrefix); });
  if (state.optimizer.velocity.empty()) return;
  const auto params = model.parameters();
  if (params.size() != state.optimizer.velocity.size()) {
    throw StateError("optimizer state does not line up with the model parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = state.optimizer.velocity[i];
    meta.arrays.push_back({kVelocityPrefix + params[i].name, {v.size()}, v});
  }
}

TrainState restore_train_state(const CheckpointMeta& meta, const FlatModel& model) {
  TrainState state;
  try {
    const json j = json::parse(meta.state_json);
    if (!j.contains("rng")) throw LoadError("checkpoint has no training state to resume from");
    state.epoch = j.at("epoch").get<int>();
    state.step = j.at("step").get<std::uint64_t>();
    state.class_loss = j.at("class_loss").get<double>();
    state.decode_loss = j.at("decode_loss").get<double>();
    std::istringstream rng_text(j.at("rng").get<std::string>());
    rng_text >> state.rng;
    if (!rng_text) throw LoadError("checkpoint rng state is corrupt");
    state.optimizer.learning_rate = j.at("learning_rate").get<double>();
    state.optimizer.momentum = j.at("momentum").get<double>();
    state.optimizer.weight_decay = j.at("weight_decay").get<double>();
    state.optimizer.epoch = j.at("optimizer_epoch").get<int>();
    state.best_eval_acc = j.at("best_eval_acc").get<double>();
    state.best_epoch = j.at("best_epoch").get<int>();
    if (j.at("has_velocity").get<bool>()) {
      for (const Parameter& p : model.parameters()) {
        const auto it = std::find_if(meta.arrays.begin(), meta.arrays.end(),
                                     [&](const NamedArray& a) { return a.name == kVelocityPrefix + p.name; });
        if (it == meta.arrays.end()) throw LoadError("checkpoint lacks optimizer velocity for '" + p.name + "'");
        if (it->values.size() != p.tensor.numel()) throw LoadError("optimizer velocity for '" + p.name + "' has wrong size");
        state.optimizer.velocity.push_back(it->values);
      }
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed training state: ") + e.what());
  }
  return state;
}

PretrainLosses pretrain_losses(FlatModel& model, const std::vector<const Image*>& images,
                               std::span<const int> labels, const PretrainConfig& config, Rng& rng) {
  if (images.empty()) throw DataError("pretrain step on an empty batch");
  if (labels.size() != images.size()) {
    throw DimensionError("pretrain step: " + std::to_string(images.size()) + " images but " +
                         std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= model.n_base()) {
      throw IndexError("label " + std::to_string(y) + " outside the base classes [0, " + std::to_string(model.n_base()) + ")");
    }
  }
  std::vector<ProjectiveTransform> transforms;
  transforms.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) transforms.push_back(sample_transform(rng, config.transform_magnitude));

  if (config.mode == PretrainMode::naive_augment) {
    const Tensor warped = stack_images(warped_copies(images, transforms));
    const Tensor loss = ops::softmax_cross_entropy(model.classify(model.encode_train(warped), Head::base), labels);
    return {loss, loss, std::nullopt};
  }

  const Tensor x = stack_images(images);
  const Tensor f = model.encode_train(x);
  const Tensor class_loss = ops::softmax_cross_entropy(model.classify(f, Head::base), labels);
  const double lambda = config.effective_lambda();
  if (lambda == 0.0) return {class_loss, class_loss, std::nullopt};

  const Tensor f_trans = model.encode_train(stack_images(warped_copies(images, transforms)));
  const Tensor decode_loss = ops::mse(model.decode_transform(f, f_trans), stacked_targets(transforms));
  const Tensor total = ops::add(class_loss, ops::mul_scalar(decode_loss, static_cast<Scalar>(lambda)));
  return {total, class_loss, decode_loss};
}

StepLosses pretrain_step(FlatModel& model, const std::vector<const Image*>& images, std::span<const int> labels,
                         const PretrainConfig& config, Rng& rng, SgdState& optimizer) {
  const auto params = model.parameters();
  zero_grads(params);
  const PretrainLosses losses = pretrain_losses(model, images, labels, config, rng);
  StepLosses out;
  out.total = losses.total.item();
  out.class_loss = losses.class_loss.item();
  out.decode_loss = losses.decode_loss ? losses.decode_loss->item() : 0.0;
  require_finite(out.total, "pretraining loss");
  backward(losses.total);
  sgd_step(params, optimizer);
  model.renormalize_heads();
  return out;
}

PretrainResult pretrain(FlatModel& model, const ImageDataset& dataset, const PretrainConfig& config,
                        std::optional<TrainState> resume, const PretrainCallback& on_epoch) {
  config.validate();
  if (dataset.size() == 0) throw ConfigError("pretraining needs a non-empty dataset");
  if (dataset.n_base() < 2) throw ConfigError("pretraining needs at least 2 base classes");
  if (!model.has_base_head() || model.n_base() != dataset.n_base()) {
    throw ConfigError("model has " + std::to_string(model.n_base()) + " base classes, dataset has " +
                      std::to_string(dataset.n_base()));
  }
  const auto train = dataset.indices(Split::base_train);
  const auto test = dataset.indices(Split::base_test);
  if (train.empty()) throw ConfigError("dataset has no base_train examples");

  PretrainResult result;
  result.state = resume ? std::move(*resume) : initial_train_state(config);
  TrainState& state = result.state;
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = state.epoch; epoch < config.epochs; ++epoch) {
    state.optimizer.learning_rate = lr_at_epoch(config.base_lr, epoch, config.decay_rate, config.decay_every);
    state.optimizer.epoch = epoch;
    std::vector<std::size_t> order = train;
    std::shuffle(order.begin(), order.end(), state.rng);

    double class_sum = 0.0, decode_sum = 0.0, total_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<Image> augmented;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        const Example& ex = dataset[order[i]];
        augmented.push_back(augment(ex.image, state.rng, config.crop_pad, config.flip_prob));
        labels.push_back(ex.label);
      }
      std::vector<const Image*> ptrs;
      for (const Image& img : augmented) ptrs.push_back(&img);
      const StepLosses l = pretrain_step(model, ptrs, labels, config, state.rng, state.optimizer);
      const auto n = static_cast<double>(end - start);
      class_sum += l.class_loss * n;
      decode_sum += l.decode_loss * n;
      total_sum += l.total * n;
      ++state.step;
    }
    const auto n = static_cast<double>(order.size());
    EpochMetrics m;
    m.stage = "pretrain";
    m.epoch = epoch;
    m.lr = state.optimizer.learning_rate;
    m.class_loss = class_sum / n;
    m.decode_loss = decode_sum / n;
    m.total_loss = total_sum / n;
    if (!test.empty()) m.eval_acc = base_test_accuracy(model, dataset, test);

    state.epoch = epoch + 1;
    state.class_loss = m.class_loss;
    state.decode_loss = m.decode_loss;
    if (m.eval_acc && *m.eval_acc > state.best_eval_acc) {
      state.best_eval_acc = *m.eval_acc;
      state.best_epoch = epoch;
    }
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(model, state, m);
  }
  return result;
}

std::vector<EpochMetrics> finetune(FlatModel& model, const std::vector<const Image*>& support,
                                   std::span<const int> labels, int n_novel, const FinetuneConfig& config,
                                   const FinetuneCallback& on_epoch) {
  config.validate();
  if (n_novel < 1) throw DataError("fine-tuning needs at least one novel class");
  if (labels.size() != support.size()) throw DimensionError("fine-tuning: support images and labels differ in count");
  std::vector<std::vector<const Image*>> by_class(static_cast<std::size_t>(n_novel));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_novel) {
      throw IndexError("support label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(n_novel) + ")");
    }
    by_class[static_cast<std::size_t>(labels[i])].push_back(support[i]);
  }
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() != static_cast<std::size_t>(config.k_shot)) {
      throw DataError("novel class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                      " support examples, expected exactly " + std::to_string(config.k_shot));
    }
  }

  const bool transfer = config.setting == Setting::transfer;
  if (transfer) {
    model.drop_base_head();
  } else if (!model.has_base_head()) {
    throw StateError(std::string("setting ") + to_string(config.setting) + " needs the base head, which was dropped");
  }

  Rng rng = stream_rng(config.seed, kFinetuneStream);
  if (config.init == HeadInit::imprint) {
    std::vector<Tensor> features;
    for (const auto& images : by_class) features.push_back(encode_images(model, images));
    model.imprint(features);
  } else {
    model.init_random_novel_head(n_novel, rng);
  }

  std::vector<Parameter> params;
  if (!config.freeze_encoder) params = model.encoder_parameters();
  for (const Parameter& p : model.parameters()) {
    if (p.name == "classifier.novel.weight" || p.name == "classifier.scale") params.push_back(p);
  }
  FreezeGuard frozen;
  frozen.freeze(model.base_head());
  for (const Parameter& p : model.decoder_parameters()) frozen.freeze(p.tensor);
  if (config.freeze_encoder) {
    for (const Parameter& p : model.encoder_parameters()) frozen.freeze(p.tensor);
  }

  const Head head = transfer ? Head::novel : Head::joint;
  const int offset = transfer ? 0 : model.n_base();
  SgdState optimizer;
  optimizer.learning_rate = config.lr;
  optimizer.momentum = config.momentum;
  optimizer.weight_decay = config.weight_decay;
  const auto batch = static_cast<std::size_t>(config.batch_size);

  std::vector<EpochMetrics> metrics;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(support.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<Image> augmented;
      std::vector<int> targets;
      for (std::size_t i = start; i < end; ++i) {
        augmented.push_back(augment(*support[order[i]], rng, config.crop_pad, config.flip_prob));
        targets.push_back(labels[order[i]] + offset);
      }
      zero_grads(params);
      const Tensor loss = ops::softmax_cross_entropy(model.classify(model.encode(stack_images(augmented)), head), targets);
      require_finite(loss.item(), "fine-tuning loss");
      backward(loss);
      sgd_step(params, optimizer);
      model.renormalize_heads();
      loss_sum += loss.item() * static_cast<double>(end - start);
    }
    EpochMetrics m;
    m.stage = "finetune";
    m.epoch = epoch;
    m.lr = config.lr;
    m.class_loss = loss_sum / static_cast<double>(support.size());
    m.total_loss = m.class_loss;
    metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return metrics;
}

std::vector<EpochMetrics> finetune(FlatModel& model, const ImageDataset& dataset, std::span<const std::size_t> support,
                                   const FinetuneConfig& config, const FinetuneCallback& on_epoch) {
  std::vector<const Image*> images;
  std::vector<int> labels;
  for (std::size_t idx : support) {
    if (idx >= dataset.size()) throw IndexError("support index " + std::to_string(idx) + " outside the dataset");
    const Example& ex = dataset[idx];
    if (is_base(ex.split)) throw DataError("support example " + std::to_string(idx) + " belongs to a base class");
    images.push_back(&ex.image);
    labels.push_back(ex.label);
  }
  return finetune(model, images, labels, dataset.n_novel(), config, on_epoch);
}

Tensor encode_images(const FlatModel& model, const std::vector<const Image*>& images, std::size_t batch_size) {
  if (images.empty()) throw DataError("no images to encode");
  NoGradGuard no_grad;
  const auto d = static_cast<std::size_t>(model.feature_dim());
  std::vector<Scalar> values;
  values.reserve(images.size() * d);
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    const std::vector<const Image*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                          images.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor f = model.encode(stack_images(chunk));
    values.insert(values.end(), f.data().begin(), f.data().end());
  }
  return Tensor({images.size(), d}, std::move(values));
}

FLAT_ABI_END
}  // namespace flat
