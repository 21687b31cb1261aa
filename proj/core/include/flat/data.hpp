#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flat/image.hpp"
#include "flat/transforms.hpp"

namespace flat {
FLAT_ABI_BEGIN

enum class Split { base_train, base_test, novel_train, novel_test };

const char* to_string(Split split);
inline bool is_base(Split s) { return s == Split::base_train || s == Split::base_test; }

struct Example {
  Image image;
  /// Dense within its group: 0..n_base-1 for base, 0..n_novel-1 for novel.
  int label = 0;
  Split split = Split::base_train;

  friend bool operator==(const Example&, const Example&) = default;
};

/// Images of one geometry, partitioned by class into base and novel groups
/// and per example into train/test. Immutable once built.
class ImageDataset {
 public:
  ImageDataset() = default;
  ImageDataset(int channels, int height, int width, std::vector<std::string> base_classes,
               std::vector<std::string> novel_classes, std::vector<Example> examples);

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int n_base() const { return static_cast<int>(base_classes_.size()); }
  int n_novel() const { return static_cast<int>(novel_classes_.size()); }
  const std::vector<std::string>& base_classes() const { return base_classes_; }
  const std::vector<std::string>& novel_classes() const { return novel_classes_; }

  std::size_t size() const { return examples_.size(); }
  const Example& operator[](std::size_t i) const { return examples_[i]; }
  const std::vector<Example>& examples() const { return examples_; }

  /// Indices of all examples in `split`, in storage order.
  std::vector<std::size_t> indices(Split split) const;
  /// Every novel example regardless of train/test tag (episodic pool).
  std::vector<std::size_t> novel_pool() const;

  friend bool operator==(const ImageDataset&, const ImageDataset&) = default;

 private:
  void validate() const;

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<std::string> base_classes_;
  std::vector<std::string> novel_classes_;
  std::vector<Example> examples_;
};

/// {"base": [...], "novel": [...], "test_fraction": f}
struct SplitSpec {
  std::vector<std::string> base;
  std::vector<std::string> novel;
  double test_fraction = 0.25;

  static SplitSpec read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
  /// Number of test examples for a class holding `n` images; at least one
  /// image always stays in train.
  std::size_t test_count(std::size_t n) const;
};

/// Reads root/<class>/*.png for every class in the split spec. Files are
/// taken in lexicographic order; the last test_count(n) become test
/// examples. Images are converted to 3 channels, resized bilinearly to
/// image_size x image_size and scaled to [0, 1].
ImageDataset load_image_folder(const std::filesystem::path& root, const SplitSpec& spec, int image_size);

/// Writes every image as root/<class>/img_NNN.png plus root/split_spec.json.
void write_image_folder(const ImageDataset& dataset, const std::filesystem::path& root, double test_fraction);

struct SyntheticShapesConfig {
  int n_base_classes = 7;
  int n_novel_classes = 5;
  int examples_per_class = 40;
  int image_size = 32;
  double test_fraction = 0.25;
  std::uint64_t seed = 0;

  /// Throws ConfigError on invalid counts or when more classes are
  /// requested than the pattern families can supply.
  void validate() const;
};

/// Number of pattern families and parameter partitions per family.
inline constexpr int kPatternFamilies = 3;
inline constexpr int kPartitionsPerFamily = 8;

/// Procedural dataset: each class is one pattern family restricted to one
/// partition of its shape parameter (grating orientation, ring frequency,
/// pinwheel arm count). Base classes use even partitions and novel classes
/// odd ones, so novel parameter ranges never occur during pretraining.
/// Pixel values are quantised to k/255 so a PNG round trip is lossless.
ImageDataset generate_synthetic(const SyntheticShapesConfig& config);

/// Mean accuracy of 1-nearest-neighbour (raw pixels, Euclidean) on random
/// n_way 1-shot episodes drawn from the novel pool.
double nearest_neighbor_one_shot_accuracy(const ImageDataset& dataset, int n_way, int n_query, int episodes,
                                          std::uint64_t seed);

struct KShotDraw {
  /// K indices per novel class, grouped by class in label order.
  std::vector<std::size_t> support;
  /// Novel-train indices not drawn.
  std::vector<std::size_t> remainder;
};

/// Draws exactly K novel_train examples per novel class without
/// replacement. Throws DataError naming any class with fewer than K.
KShotDraw sample_k_shot(const ImageDataset& dataset, int k_shot, Rng& rng);

struct CropFlip {
  int offset_x = 0;  // crop origin inside the padded image, in [0, 2*pad]
  int offset_y = 0;
  bool flip = false;
};

CropFlip draw_augmentation(Rng& rng, int crop_pad, double flip_prob);
Image apply_augmentation(const Image& img, const CropFlip& params, int crop_pad);
/// Zero-pad by crop_pad, crop back to the original size at a random
/// offset, then mirror horizontally with probability flip_prob.
Image augment(const Image& img, Rng& rng, int crop_pad, double flip_prob);
Image flip_horizontal(const Image& img);

Image resize_bilinear(const Image& img, int height, int width);

/// 8-bit PNG I/O. read_png always returns 3 channels scaled to [0, 1];
/// write_png accepts 1 or 3 channels and quantises to round(255 v).
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

FLAT_ABI_END
}  // namespace flat
