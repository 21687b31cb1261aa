#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flat/optim.hpp"
#include "flat/tensor.hpp"
#include "flat/transforms.hpp"

namespace flat {
FLAT_ABI_BEGIN

struct EncoderStage {
  int filters = 64;
  int kernel = 3;
  int stride = 1;
  friend bool operator==(const EncoderStage&, const EncoderStage&) = default;
};

/// Convolutional encoder: each stage is conv (same padding, no bias) +
/// batch norm + ReLU + 2x2 max-pool, followed by global average pooling.
struct EncoderConfig {
  int input_channels = 3;
  int input_size = 32;
  std::vector<EncoderStage> stages{4, EncoderStage{}};
  /// Embedding width; equals the filter count of the last stage.
  int feature_dim = 64;

  /// Throws ConfigError when a stage would shrink the map below 1x1 or
  /// feature_dim disagrees with the last stage.
  void validate() const;
  /// Spatial size entering each stage, followed by the final size.
  std::vector<int> spatial_sizes() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  int n_base_classes = 7;
  /// Hidden width of the transform decoder; 0 means feature_dim.
  int decoder_hidden = 0;
  double scale_init = 10.0;

  void validate() const;
  int hidden_width() const { return decoder_hidden > 0 ? decoder_hidden : encoder.feature_dim; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Head { base, novel, joint };
const char* to_string(Head head);

/// Encoder, transform decoder and bias-free cosine classifier heads.
///
/// Tensors are handles, so the model is move-only; clone() makes an
/// independent deep copy.
class FlatModel {
 public:
  FlatModel(const ModelConfig& config, std::uint64_t seed);

  FlatModel(FlatModel&&) noexcept = default;
  FlatModel& operator=(FlatModel&&) noexcept = default;
  FlatModel(const FlatModel&) = delete;
  FlatModel& operator=(const FlatModel&) = delete;

  FlatModel clone() const;

  const ModelConfig& config() const { return config_; }
  int feature_dim() const { return config_.encoder.feature_dim; }

  /// [B x C x S x S] -> [B x feature_dim], batch norm on running
  /// statistics.
  Tensor encode(const Tensor& batch) const;
  /// Training-mode encoding: batch norm uses batch statistics and updates
  /// the running estimates.
  Tensor encode_train(const Tensor& batch);
  /// Concatenates (original, transformed) features and predicts the 8
  /// normalised corner offsets.
  Tensor decode_transform(const Tensor& f_orig, const Tensor& f_trans) const;
  /// scale * cos(feature, weight row). `joint` stacks base rows then novel
  /// rows. Throws StateError if the requested head is absent.
  Tensor classify(const Tensor& features, Head head) const;

  /// One prototype row per class from that class's [K x d] support
  /// features; replaces any existing novel head.
  void imprint(const std::vector<Tensor>& support_features);
  /// Random unit rows for `n_novel` classes (the Rand+FT initialisation).
  void init_random_novel_head(int n_novel, Rng& rng);
  /// Discards the base head (transfer setting).
  void drop_base_head();

  bool has_base_head() const { return base_head_.defined(); }
  bool has_novel_head() const { return novel_head_.defined(); }
  int n_base() const { return has_base_head() ? static_cast<int>(base_head_.dim(0)) : 0; }
  int n_novel() const { return has_novel_head() ? static_cast<int>(novel_head_.dim(0)) : 0; }

  const Tensor& base_head() const { return base_head_; }
  const Tensor& novel_head() const { return novel_head_; }
  const Tensor& scale() const { return scale_; }

  /// Every learnable tensor in a fixed order: encoder, decoder, base head,
  /// novel head, scale.
  std::vector<Parameter> parameters() const;
  std::vector<Parameter> encoder_parameters() const;
  std::vector<Parameter> decoder_parameters() const;
  /// Non-learnable state (batch-norm running statistics).
  std::vector<Parameter> buffers() const;

  /// Restores unit-norm head rows and a positive scale after an update.
  void renormalize_heads();

  /// Used by checkpoint loading: replaces the named parameter or buffer.
  /// Head parameters are created if absent.
  void assign_parameter(const std::string& name, const Shape& shape, std::vector<Scalar> values);

 private:
  struct ConvStage {
    Tensor weight;
    Tensor bn_weight;
    Tensor bn_bias;
    Tensor running_mean;
    Tensor running_var;
  };

  Tensor run_encoder(const Tensor& batch, bool training) const;

  ModelConfig config_;
  std::vector<ConvStage> stages_;
  Tensor decoder_hidden_weight_;
  Tensor decoder_hidden_bias_;
  Tensor decoder_out_weight_;
  Tensor decoder_out_bias_;
  Tensor base_head_;
  Tensor novel_head_;
  Tensor scale_;
};

/// l2_normalize(mean of l2-normalised rows). Throws DegenerateError when a
/// feature or the mean has near-zero norm.
Tensor imprint_prototype(const Tensor& support_features);

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding manifest.json plus one raw little-endian
// float32 file per tensor.

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<Scalar> values;
};

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  /// Opaque JSON objects stored verbatim in the manifest.
  std::string run_config_json = "{}";
  std::string state_json = "{}";
  /// Extra arrays such as optimizer velocity.
  std::vector<NamedArray> arrays;
};

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const FlatModel& model, const std::filesystem::path& dir, const CheckpointMeta& meta = {});

struct LoadedCheckpoint {
  FlatModel model;
  CheckpointMeta meta;
};

/// Throws LoadError when files are missing or corrupt, when a parameter's
/// size disagrees with the manifest, or when `expected` is given and its
/// shapes differ from the stored configuration.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                 const std::optional<ModelConfig>& expected = std::nullopt);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

FLAT_ABI_END
}  // namespace flat
