#include "flat/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>

#include "flat/error.hpp"
#include "flat/ops.hpp"
#include "json.hpp"

namespace flat {
FLAT_ABI_BEGIN

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr double kMinScale = 1e-3;

const std::string kBaseHeadName = "classifier.base.weight";
const std::string kNovelHeadName = "classifier.novel.weight";
const std::string kScaleName = "classifier.scale";

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Scalar> values(shape_numel(shape));
  for (Scalar& v : values) v = static_cast<Scalar>(dist(rng));
  return Tensor(std::move(shape), std::move(values), true);
}

void normalize_rows_in_place(Tensor& t) {
  const std::size_t width = t.dim(1);
  auto data = t.data();
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    double sq = 0.0;
    for (std::size_t i = 0; i < width; ++i) sq += static_cast<double>(data[r * width + i]) * data[r * width + i];
    const double norm = std::sqrt(sq);
    if (norm <= ops::kNormEpsilon) throw DegenerateError("classifier row " + std::to_string(r) + " collapsed to zero");
    for (std::size_t i = 0; i < width; ++i) data[r * width + i] = static_cast<Scalar>(data[r * width + i] / norm);
  }
}

Tensor random_unit_rows(std::size_t rows, std::size_t width, Rng& rng) {
  Tensor t = kaiming_uniform({rows, width}, width, rng);
  normalize_rows_in_place(t);
  return t;
}

}  // namespace

const char* to_string(Head head) {
  switch (head) {
    case Head::base: return "base";
    case Head::novel: return "novel";
    case Head::joint: return "joint";
  }
  return "unknown";
}

void EncoderConfig::validate() const {
  if (input_channels < 1) throw ConfigError("encoder.input_channels must be >= 1");
  if (input_size < 1) throw ConfigError("encoder.input_size must be >= 1");
  if (stages.empty()) throw ConfigError("encoder.stages must not be empty");
  for (const auto& s : stages) {
    if (s.filters < 1 || s.kernel < 1 || s.stride < 1) {
      throw ConfigError("encoder stage needs positive filters, kernel and stride");
    }
  }
  if (feature_dim <= 0) throw ConfigError("encoder.feature_dim must be > 0");
  if (feature_dim != stages.back().filters) {
    throw ConfigError("encoder.feature_dim (" + std::to_string(feature_dim) +
                      ") must equal the last stage's filter count (" + std::to_string(stages.back().filters) + ")");
  }
  spatial_sizes();
}

std::vector<int> EncoderConfig::spatial_sizes() const {
  std::vector<int> sizes{input_size};
  int s = input_size;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    const int pad = st.kernel / 2;
    if (st.kernel > s + 2 * pad) throw ConfigError("encoder stage " + std::to_string(i) + " kernel exceeds input");
    s = (s + 2 * pad - st.kernel) / st.stride + 1;
    s /= 2;
    if (s < 1) {
      throw ConfigError("encoder stage " + std::to_string(i) + " shrinks the feature map below 1x1 for input size " +
                        std::to_string(input_size));
    }
    sizes.push_back(s);
  }
  return sizes;
}

void ModelConfig::validate() const {
  encoder.validate();
  if (n_base_classes < 2) throw ConfigError("model.n_base_classes must be >= 2");
  if (decoder_hidden < 0) throw ConfigError("model.decoder_hidden must be >= 0");
  if (!(scale_init > 0.0)) throw ConfigError("model.scale_init must be > 0");
}

FlatModel::FlatModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  std::size_t channels = static_cast<std::size_t>(config_.encoder.input_channels);
  for (const auto& st : config_.encoder.stages) {
    const auto f = static_cast<std::size_t>(st.filters);
    const auto k = static_cast<std::size_t>(st.kernel);
    stages_.push_back({kaiming_uniform({f, channels, k, k}, channels * k * k, rng), Tensor::full({f}, 1, true),
                       Tensor::zeros({f}, true), Tensor::zeros({f}), Tensor::full({f}, 1)});
    channels = f;
  }
  const auto d = static_cast<std::size_t>(feature_dim());
  const auto hidden = static_cast<std::size_t>(config_.hidden_width());
  decoder_hidden_weight_ = kaiming_uniform({hidden, 2 * d}, 2 * d, rng);
  decoder_hidden_bias_ = Tensor::zeros({hidden}, true);
  decoder_out_weight_ = Tensor::zeros({kTransformDim, hidden}, true);
  decoder_out_bias_ = Tensor::zeros({kTransformDim}, true);
  // Every class starts on one shared direction, so a fresh model has
  // uniform logits; the labels separate the rows from the first step.
  const Tensor direction = random_unit_rows(1, d, rng);
  std::vector<Scalar> rows;
  for (int c = 0; c < config_.n_base_classes; ++c) rows.insert(rows.end(), direction.data().begin(), direction.data().end());
  base_head_ = Tensor({static_cast<std::size_t>(config_.n_base_classes), d}, std::move(rows), true);
  scale_ = Tensor::scalar(static_cast<Scalar>(config_.scale_init), true);
}

FlatModel FlatModel::clone() const {
  FlatModel copy(config_, 0);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    copy.stages_[i] = {stages_[i].weight.clone(), stages_[i].bn_weight.clone(), stages_[i].bn_bias.clone(),
                       stages_[i].running_mean.clone(), stages_[i].running_var.clone()};
  }
  copy.decoder_hidden_weight_ = decoder_hidden_weight_.clone();
  copy.decoder_hidden_bias_ = decoder_hidden_bias_.clone();
  copy.decoder_out_weight_ = decoder_out_weight_.clone();
  copy.decoder_out_bias_ = decoder_out_bias_.clone();
  copy.base_head_ = base_head_.defined() ? base_head_.clone() : Tensor{};
  copy.novel_head_ = novel_head_.defined() ? novel_head_.clone() : Tensor{};
  copy.scale_ = scale_.clone();
  return copy;
}

Tensor FlatModel::encode(const Tensor& batch) const { return run_encoder(batch, false); }

Tensor FlatModel::encode_train(const Tensor& batch) { return run_encoder(batch, true); }

Tensor FlatModel::run_encoder(const Tensor& batch, bool training) const {
  const auto& enc = config_.encoder;
  const Shape expected_tail{static_cast<std::size_t>(enc.input_channels), static_cast<std::size_t>(enc.input_size),
                            static_cast<std::size_t>(enc.input_size)};
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != expected_tail) {
    throw DimensionError("encode: expected [B x " + std::to_string(enc.input_channels) + " x " +
                         std::to_string(enc.input_size) + " x " + std::to_string(enc.input_size) + "], got " +
                         shape_to_string(batch.shape()));
  }
  Tensor x = batch;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const auto& st = enc.stages[i];
    ConvStage stage = stages_[i];
    x = ops::conv2d(x, stage.weight, st.stride, st.kernel / 2);
    x = ops::batch_norm2d(x, stage.bn_weight, stage.bn_bias, stage.running_mean, stage.running_var, training);
    x = ops::relu(x);
    x = ops::max_pool2d(x, 2);
  }
  return ops::global_avg_pool(x);
}

Tensor FlatModel::decode_transform(const Tensor& f_orig, const Tensor& f_trans) const {
  if (f_orig.shape() != f_trans.shape()) {
    throw DimensionError("decode_transform: feature shapes differ, " + shape_to_string(f_orig.shape()) + " vs " +
                         shape_to_string(f_trans.shape()));
  }
  if (f_orig.rank() != 2 || f_orig.dim(1) != static_cast<std::size_t>(feature_dim())) {
    throw DimensionError("decode_transform: expected [B x " + std::to_string(feature_dim()) + "], got " +
                         shape_to_string(f_orig.shape()));
  }
  Tensor h = ops::concat_columns(f_orig, f_trans);
  h = ops::relu(ops::linear(h, decoder_hidden_weight_, decoder_hidden_bias_));
  return ops::linear(h, decoder_out_weight_, decoder_out_bias_);
}

Tensor FlatModel::classify(const Tensor& features, Head head) const {
  if (features.rank() != 2 || features.dim(1) != static_cast<std::size_t>(feature_dim())) {
    throw DimensionError("classify: expected [B x " + std::to_string(feature_dim()) + "], got " +
                         shape_to_string(features.shape()));
  }
  const bool need_base = head == Head::base || head == Head::joint;
  const bool need_novel = head == Head::novel || head == Head::joint;
  if (need_base && !has_base_head()) throw StateError(std::string("classify: ") + to_string(head) + " head needs the base head");
  if (need_novel && !has_novel_head()) {
    throw StateError(std::string("classify: ") + to_string(head) + " head needs a novel head (imprint first)");
  }
  const Tensor f = ops::l2_normalize_clamped(features);
  Tensor cosine;
  if (head == Head::base) {
    cosine = ops::linear(f, ops::l2_normalize(base_head_));
  } else if (head == Head::novel) {
    cosine = ops::linear(f, ops::l2_normalize(novel_head_));
  } else {
    cosine = ops::concat_columns(ops::linear(f, ops::l2_normalize(base_head_)),
                                 ops::linear(f, ops::l2_normalize(novel_head_)));
  }
  return ops::scale_by(cosine, scale_);
}

Tensor imprint_prototype(const Tensor& support_features) {
  if (support_features.rank() != 2 || support_features.dim(0) < 1) {
    throw DimensionError("imprint: support features must be [K x d] with K >= 1, got " +
                         shape_to_string(support_features.shape()));
  }
  NoGradGuard no_grad;
  const Tensor unit = ops::l2_normalize(support_features);
  const std::size_t k = unit.dim(0), d = unit.dim(1);
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t i = 0; i < d; ++i) mean[i] += unit.data()[r * d + i];
  std::vector<Scalar> row(d);
  for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<Scalar>(mean[i] / static_cast<double>(k));
  try {
    return ops::l2_normalize(Tensor({d}, std::move(row)));
  } catch (const DegenerateError&) {
    throw DegenerateError("imprint: mean support feature is degenerate (near-zero norm)");
  }
}

void FlatModel::imprint(const std::vector<Tensor>& support_features) {
  if (support_features.empty()) throw DataError("imprint: no novel classes given");
  const auto d = static_cast<std::size_t>(feature_dim());
  std::vector<Scalar> rows;
  rows.reserve(support_features.size() * d);
  for (const Tensor& f : support_features) {
    if (f.rank() != 2 || f.dim(1) != d) {
      throw DimensionError("imprint: expected [K x " + std::to_string(d) + "] features, got " +
                           shape_to_string(f.shape()));
    }
    const Tensor proto = imprint_prototype(f);
    rows.insert(rows.end(), proto.data().begin(), proto.data().end());
  }
  novel_head_ = Tensor({support_features.size(), d}, std::move(rows), true);
}

void FlatModel::init_random_novel_head(int n_novel, Rng& rng) {
  if (n_novel < 1) throw ConfigError("novel head needs at least one class");
  novel_head_ = random_unit_rows(static_cast<std::size_t>(n_novel), static_cast<std::size_t>(feature_dim()), rng);
}

void FlatModel::drop_base_head() { base_head_ = Tensor{}; }

std::vector<Parameter> FlatModel::encoder_parameters() const {
  std::vector<Parameter> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string prefix = "encoder.stage" + std::to_string(i);
    out.push_back({prefix + ".weight", stages_[i].weight, true});
    out.push_back({prefix + ".bn.weight", stages_[i].bn_weight, true});
    out.push_back({prefix + ".bn.bias", stages_[i].bn_bias, true});
  }
  return out;
}

std::vector<Parameter> FlatModel::buffers() const {
  std::vector<Parameter> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string prefix = "encoder.stage" + std::to_string(i) + ".bn";
    out.push_back({prefix + ".running_mean", stages_[i].running_mean, false});
    out.push_back({prefix + ".running_var", stages_[i].running_var, false});
  }
  return out;
}

std::vector<Parameter> FlatModel::decoder_parameters() const {
  return {{"decoder.hidden.weight", decoder_hidden_weight_, true},
          {"decoder.hidden.bias", decoder_hidden_bias_, true},
          {"decoder.out.weight", decoder_out_weight_, true},
          {"decoder.out.bias", decoder_out_bias_, true}};
}

std::vector<Parameter> FlatModel::parameters() const {
  std::vector<Parameter> out = encoder_parameters();
  for (auto& p : decoder_parameters()) out.push_back(std::move(p));
  // Head rows are renormalised after every step, so decay would be a no-op
  // on direction and only fights the scale.
  if (has_base_head()) out.push_back({kBaseHeadName, base_head_, false});
  if (has_novel_head()) out.push_back({kNovelHeadName, novel_head_, false});
  out.push_back({kScaleName, scale_, false});
  return out;
}

void FlatModel::renormalize_heads() {
  if (has_base_head()) normalize_rows_in_place(base_head_);
  if (has_novel_head()) normalize_rows_in_place(novel_head_);
  auto s = scale_.data();
  if (!(s[0] >= static_cast<Scalar>(kMinScale))) s[0] = static_cast<Scalar>(kMinScale);
}

void FlatModel::assign_parameter(const std::string& name, const Shape& shape, std::vector<Scalar> values) {
  auto replace = [&](Tensor& target) {
    if (target.defined() && target.shape() != shape) {
      throw LoadError("parameter '" + name + "' has shape " + shape_to_string(shape) + ", model expects " +
                      shape_to_string(target.shape()));
    }
    target = Tensor(shape, std::move(values), true);
  };
  if (name == kBaseHeadName) {
    if (shape.size() != 2 || shape[1] != static_cast<std::size_t>(feature_dim())) {
      throw LoadError("base head has shape " + shape_to_string(shape));
    }
    base_head_ = Tensor(shape, std::move(values), true);
    return;
  }
  if (name == kNovelHeadName) {
    if (shape.size() != 2 || shape[1] != static_cast<std::size_t>(feature_dim())) {
      throw LoadError("novel head has shape " + shape_to_string(shape));
    }
    novel_head_ = Tensor(shape, std::move(values), true);
    return;
  }
  if (name == kScaleName) return replace(scale_);
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const std::string prefix = "encoder.stage" + std::to_string(i);
    if (name == prefix + ".weight") return replace(stages_[i].weight);
    if (name == prefix + ".bn.weight") return replace(stages_[i].bn_weight);
    if (name == prefix + ".bn.bias") return replace(stages_[i].bn_bias);
    if (name == prefix + ".bn.running_mean") {
      replace(stages_[i].running_mean);
      stages_[i].running_mean.set_requires_grad(false);
      return;
    }
    if (name == prefix + ".bn.running_var") {
      replace(stages_[i].running_var);
      stages_[i].running_var.set_requires_grad(false);
      return;
    }
  }
  if (name == "decoder.hidden.weight") return replace(decoder_hidden_weight_);
  if (name == "decoder.hidden.bias") return replace(decoder_hidden_bias_);
  if (name == "decoder.out.weight") return replace(decoder_out_weight_);
  if (name == "decoder.out.bias") return replace(decoder_out_bias_);
  throw LoadError("unknown parameter '" + name + "'");
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json encoder_to_json(const EncoderConfig& e) {
  json stages = json::array();
  for (const auto& s : e.stages) stages.push_back({{"filters", s.filters}, {"kernel", s.kernel}, {"stride", s.stride}});
  return {{"input_channels", e.input_channels},
          {"input_size", e.input_size},
          {"stages", stages},
          {"feature_dim", e.feature_dim}};
}

json config_to_json(const ModelConfig& c) {
  return {{"encoder", encoder_to_json(c.encoder)},
          {"n_base_classes", c.n_base_classes},
          {"decoder_hidden", c.decoder_hidden},
          {"scale_init", c.scale_init}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    c.encoder.input_channels = e.value("input_channels", c.encoder.input_channels);
    c.encoder.input_size = e.value("input_size", c.encoder.input_size);
    c.encoder.feature_dim = e.value("feature_dim", c.encoder.feature_dim);
    if (e.contains("stages")) {
      c.encoder.stages.clear();
      for (const json& s : e.at("stages")) {
        EncoderStage st;
        if (s.is_array()) {
          st = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
        } else {
          st.filters = s.value("filters", st.filters);
          st.kernel = s.value("kernel", st.kernel);
          st.stride = s.value("stride", st.stride);
        }
        c.encoder.stages.push_back(st);
      }
    }
  }
  c.n_base_classes = j.value("n_base_classes", c.n_base_classes);
  c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
  c.scale_init = j.value("scale_init", c.scale_init);
  return c;
}

std::string file_name_for(const std::string& name) { return name + ".f32"; }

void write_array(const fs::path& path, std::span<const Scalar> values) {
  std::vector<float> buffer(values.begin(), values.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(buffer.size() * sizeof(float)));
  if (!out) throw LoadError("short write to " + path.string());
}

std::vector<Scalar> read_array(const fs::path& path, std::size_t count) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw LoadError("missing tensor file " + path.string());
  if (bytes != count * sizeof(float)) {
    throw LoadError("tensor file " + path.string() + " holds " + std::to_string(bytes) + " bytes, manifest expects " +
                    std::to_string(count * sizeof(float)));
  }
  std::vector<float> buffer(count);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw LoadError("cannot read " + path.string());
  return {buffer.begin(), buffer.end()};
}

json array_entry(const std::string& name, const Shape& shape) {
  return {{"name", name}, {"shape", shape}, {"file", file_name_for(name)}};
}

}  // namespace

std::string model_config_to_json(const ModelConfig& config) { return config_to_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

void save_checkpoint(const FlatModel& model, const fs::path& dir, const CheckpointMeta& meta) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw LoadError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  json params = json::array();
  for (const Parameter& p : model.parameters()) {
    write_array(dir / file_name_for(p.name), p.tensor.data());
    params.push_back(array_entry(p.name, p.tensor.shape()));
  }
  json buffers = json::array();
  for (const Parameter& p : model.buffers()) {
    write_array(dir / file_name_for(p.name), p.tensor.data());
    buffers.push_back(array_entry(p.name, p.tensor.shape()));
  }
  json arrays = json::array();
  for (const NamedArray& a : meta.arrays) {
    if (shape_numel(a.shape) != a.values.size()) throw LoadError("array '" + a.name + "' does not match its shape");
    write_array(dir / file_name_for(a.name), a.values);
    arrays.push_back(array_entry(a.name, a.shape));
  }
  json manifest{{"format", "flat-checkpoint"},
                {"format_version", kCheckpointFormatVersion},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"seed", meta.seed},
                {"epoch", meta.epoch},
                {"model_config", config_to_json(model.config())},
                {"parameters", params},
                {"buffers", buffers},
                {"arrays", arrays},
                {"run_config", json::parse(meta.run_config_json)},
                {"state", json::parse(meta.state_json)}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw LoadError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const fs::path& dir, const std::optional<ModelConfig>& expected) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw LoadError("no checkpoint at " + dir.string() + " (manifest.json missing)");
  json manifest;
  try {
    std::ifstream in(manifest_path);
    in >> manifest;
  } catch (const json::exception& e) {
    throw LoadError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "flat-checkpoint") throw LoadError("not a checkpoint manifest: " + manifest_path.string());
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw LoadError("unsupported checkpoint format version " + manifest.at("format_version").dump());
    }
    const ModelConfig stored = config_from_json(manifest.at("model_config"));
    if (expected && !(stored == *expected)) {
      throw LoadError("checkpoint shape mismatch: stored model config " + config_to_json(stored).dump() +
                      " differs from requested " + config_to_json(*expected).dump());
    }
    CheckpointMeta meta;
    meta.seed = manifest.at("seed").get<std::uint64_t>();
    meta.epoch = manifest.at("epoch").get<int>();
    meta.run_config_json = manifest.value("run_config", json::object()).dump();
    meta.state_json = manifest.value("state", json::object()).dump();

    FlatModel model(stored, meta.seed);
    bool saw_base = false;
    std::size_t encoder_decoder_seen = 0;
    for (const json& entry : manifest.at("parameters")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      auto values = read_array(dir / entry.at("file").get<std::string>(), shape_numel(shape));
      model.assign_parameter(name, shape, std::move(values));
      saw_base = saw_base || name == kBaseHeadName;
      if (name.rfind("encoder.", 0) == 0 || name.rfind("decoder.", 0) == 0) ++encoder_decoder_seen;
    }
    if (encoder_decoder_seen != model.encoder_parameters().size() + model.decoder_parameters().size()) {
      throw LoadError("checkpoint " + dir.string() + " is missing encoder or decoder parameters");
    }
    std::size_t buffers_seen = 0;
    for (const json& entry : manifest.at("buffers")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      model.assign_parameter(name, shape, read_array(dir / entry.at("file").get<std::string>(), shape_numel(shape)));
      ++buffers_seen;
    }
    if (buffers_seen != model.buffers().size()) {
      throw LoadError("checkpoint " + dir.string() + " is missing batch-norm statistics");
    }
    if (!saw_base) model.drop_base_head();
    for (const json& entry : manifest.value("arrays", json::array())) {
      NamedArray a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      a.values = read_array(dir / entry.at("file").get<std::string>(), shape_numel(a.shape));
      meta.arrays.push_back(std::move(a));
    }
    return {std::move(model), std::move(meta)};
  } catch (const json::exception& e) {
    throw LoadError("malformed manifest " + manifest_path.string() + ": " + e.what());
  } catch (const DimensionError& e) {
    throw LoadError(std::string("invalid tensor in checkpoint: ") + e.what());
  }
}

FLAT_ABI_END
}  // namespace flat
