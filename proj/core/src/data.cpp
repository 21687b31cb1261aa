#include "flat/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>

#include "flat/error.hpp"
#include "json.hpp"

namespace flat {
FLAT_ABI_BEGIN

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* to_string(Split split) {
  switch (split) {
    case Split::base_train: return "base_train";
    case Split::base_test: return "base_test";
    case Split::novel_train: return "novel_train";
    case Split::novel_test: return "novel_test";
  }
  return "unknown";
}

ImageDataset::ImageDataset(int channels, int height, int width, std::vector<std::string> base_classes,
                           std::vector<std::string> novel_classes, std::vector<Example> examples)
    : channels_(channels),
      height_(height),
      width_(width),
      base_classes_(std::move(base_classes)),
      novel_classes_(std::move(novel_classes)),
      examples_(std::move(examples)) {
  validate();
}

void ImageDataset::validate() const {
  std::set<std::string> base(base_classes_.begin(), base_classes_.end());
  if (base.size() != base_classes_.size()) throw DataError("duplicate base class name");
  for (const auto& name : novel_classes_) {
    if (base.count(name)) throw DataError("class '" + name + "' is listed as both base and novel");
  }
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    const Example& ex = examples_[i];
    if (ex.image.channels != channels_ || ex.image.height != height_ || ex.image.width != width_) {
      throw DataError("example " + std::to_string(i) + " has geometry " + std::to_string(ex.image.channels) + "x" +
                      std::to_string(ex.image.height) + "x" + std::to_string(ex.image.width) +
                      ", dataset expects " + std::to_string(channels_) + "x" + std::to_string(height_) + "x" +
                      std::to_string(width_));
    }
    const int limit = is_base(ex.split) ? n_base() : n_novel();
    if (ex.label < 0 || ex.label >= limit) {
      throw DataError("example " + std::to_string(i) + " has label " + std::to_string(ex.label) + " outside its " +
                      (is_base(ex.split) ? "base" : "novel") + " range");
    }
  }
}

std::vector<std::size_t> ImageDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    if (examples_[i].split == split) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> ImageDataset::novel_pool() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    if (!is_base(examples_[i].split)) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Split spec and folder I/O

SplitSpec SplitSpec::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split spec " + path.string());
  json j;
  try {
    in >> j;
    SplitSpec spec;
    spec.base = j.at("base").get<std::vector<std::string>>();
    spec.novel = j.at("novel").get<std::vector<std::string>>();
    spec.test_fraction = j.value("test_fraction", 0.25);
    if (!(spec.test_fraction >= 0.0 && spec.test_fraction < 1.0)) {
      throw DataError("test_fraction must lie in [0, 1)");
    }
    return spec;
  } catch (const json::exception& e) {
    throw DataError("malformed split spec " + path.string() + ": " + e.what());
  }
}

void SplitSpec::write(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write split spec " + path.string());
  out << json{{"base", base}, {"novel", novel}, {"test_fraction", test_fraction}}.dump(2) << '\n';
}

std::size_t SplitSpec::test_count(std::size_t n) const {
  if (n < 2) return 0;
  const auto t = static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction + 0.5));
  return std::min(t, n - 1);
}

ImageDataset load_image_folder(const fs::path& root, const SplitSpec& spec, int image_size) {
  if (image_size < 2) throw ConfigError("image_size must be >= 2");
  std::set<std::string> base(spec.base.begin(), spec.base.end());
  for (const auto& name : spec.novel) {
    if (base.count(name)) throw DataError("class '" + name + "' is listed as both base and novel");
  }
  if (spec.base.empty() || spec.novel.empty()) throw DataError("split spec needs base and novel classes");

  std::vector<Example> examples;
  auto load_group = [&](const std::vector<std::string>& classes, bool base_group) {
    for (std::size_t label = 0; label < classes.size(); ++label) {
      const fs::path dir = root / classes[label];
      if (!fs::is_directory(dir)) throw DataError("class directory missing: " + dir.string());
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw DataError("class '" + classes[label] + "' has no PNG images");
      const std::size_t n_test = spec.test_count(files.size());
      for (std::size_t i = 0; i < files.size(); ++i) {
        Image img = read_png(files[i]);
        if (img.height != image_size || img.width != image_size) img = resize_bilinear(img, image_size, image_size);
        const bool test = i >= files.size() - n_test;
        Split split = base_group ? (test ? Split::base_test : Split::base_train)
                                 : (test ? Split::novel_test : Split::novel_train);
        examples.push_back({std::move(img), static_cast<int>(label), split});
      }
    }
  };
  load_group(spec.base, true);
  load_group(spec.novel, false);
  return ImageDataset(3, image_size, image_size, spec.base, spec.novel, std::move(examples));
}

void write_image_folder(const ImageDataset& dataset, const fs::path& root, double test_fraction) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw DataError("cannot create " + root.string() + ": " + ec.message());
  std::map<std::pair<bool, int>, int> counters;
  for (const Example& ex : dataset.examples()) {
    const bool base = is_base(ex.split);
    const std::string& name = base ? dataset.base_classes()[static_cast<std::size_t>(ex.label)]
                                   : dataset.novel_classes()[static_cast<std::size_t>(ex.label)];
    const fs::path dir = root / name;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    char file[32];
    std::snprintf(file, sizeof(file), "img_%03d.png", counters[{base, ex.label}]++);
    write_png(dir / file, ex.image);
  }
  SplitSpec spec{dataset.base_classes(), dataset.novel_classes(), test_fraction};
  spec.write(root / "split_spec.json");
}

// ---------------------------------------------------------------------------
// PNG

Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&png);
    throw DataError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  const int h = static_cast<int>(png.height), w = static_cast<int>(png.width);
  Image img(3, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<Scalar>(buffer[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / Scalar{255};
      }
    }
  }
  return img;
}

void write_png(const fs::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("write_png supports 1 or 3 channels");
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  bool gray = img.channels == 1;
  if (!gray) {
    gray = std::equal(img.pixels.begin(), img.pixels.begin() + plane, img.pixels.begin() + plane) &&
           std::equal(img.pixels.begin(), img.pixels.begin() + plane, img.pixels.begin() + 2 * plane);
  }
  const int out_channels = gray ? 1 : 3;
  std::vector<png_byte> buffer(plane * out_channels);
  auto quantize = [](Scalar v) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return static_cast<png_byte>(std::lround(clamped * 255.0));
  };
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < out_channels; ++c) buffer[i * out_channels + c] = quantize(img.pixels[c * plane + i]);
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height < 1 || width < 1) throw DimensionError("resize target must be positive");
  Image out(img.channels, height, width);
  const double sy = static_cast<double>(img.height) / height;
  const double sx = static_cast<double>(img.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double ax = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double v = (1 - ay) * ((1 - ax) * img.at(c, y0, x0) + ax * img.at(c, y0, x1)) +
                         ay * ((1 - ax) * img.at(c, y1, x0) + ax * img.at(c, y1, x1));
        out.at(c, y, x) = static_cast<Scalar>(v);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic patterns

void SyntheticShapesConfig::validate() const {
  if (n_base_classes < 2) throw ConfigError("data.n_base_classes must be >= 2");
  if (n_novel_classes < 2) throw ConfigError("data.n_novel_classes must be >= 2");
  if (examples_per_class < 2) throw ConfigError("data.examples_per_class must be >= 2");
  if (image_size < 8) throw ConfigError("data.image_size must be >= 8");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("data.test_fraction must lie in [0, 1)");
  constexpr int base_capacity = kPatternFamilies * ((kPartitionsPerFamily + 1) / 2);
  constexpr int novel_capacity = kPatternFamilies * (kPartitionsPerFamily / 2);
  if (n_base_classes > base_capacity) {
    throw ConfigError("data.n_base_classes " + std::to_string(n_base_classes) + " exceeds the " +
                      std::to_string(base_capacity) + " available pattern partitions");
  }
  if (n_novel_classes > novel_capacity) {
    throw ConfigError("data.n_novel_classes " + std::to_string(n_novel_classes) + " exceeds the " +
                      std::to_string(novel_capacity) + " available pattern partitions");
  }
}

namespace {

enum class Family { grating = 0, rings = 1, pinwheel = 2 };

const char* family_name(Family f) {
  switch (f) {
    case Family::grating: return "grating";
    case Family::rings: return "rings";
    case Family::pinwheel: return "pinwheel";
  }
  return "pattern";
}

struct ClassSlot {
  Family family;
  int partition;
};

// k-th class of a group: families round-robin, partitions of the group's
// parity in increasing order.
ClassSlot slot_for(int k, bool base) {
  const int family = k % kPatternFamilies;
  const int rank = k / kPatternFamilies;
  return {static_cast<Family>(family), 2 * rank + (base ? 0 : 1)};
}

Image render_pattern(const ClassSlot& slot, int size, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  constexpr double pi = std::numbers::pi;
  const double parts = kPartitionsPerFamily;
  // Per-example jitter shared by all families.
  const double cx = size / 2.0 + uniform(-3.0, 3.0);
  const double cy = size / 2.0 + uniform(-3.0, 3.0);
  const double scale = uniform(0.85, 1.15);
  const double contrast = uniform(0.55, 0.95);
  const double brightness = uniform(-0.12, 0.12);
  const double phase = uniform(0.0, 2.0 * pi);
  // Parameter drawn from the central 70% of the class's partition.
  const double within = uniform(0.15, 0.85);

  double orientation = 0.0, frequency = 0.0;
  int arms = 0;
  switch (slot.family) {
    case Family::grating:
      orientation = pi * (slot.partition + within) / parts;
      frequency = uniform(3.0, 4.5) / scale;  // cycles per image
      break;
    case Family::rings:
      frequency = (1.5 + 4.5 * (slot.partition + within) / parts) / scale;  // cycles per half-size
      break;
    case Family::pinwheel:
      arms = 2 + slot.partition;
      break;
  }

  std::normal_distribution<double> noise(0.0, 0.06);
  Image img(3, size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      double pattern = 0.0;
      switch (slot.family) {
        case Family::grating:
          pattern = std::sin(2.0 * pi * frequency * (dx * std::cos(orientation) + dy * std::sin(orientation)) / size +
                             phase);
          break;
        case Family::rings:
          pattern = std::sin(2.0 * pi * frequency * std::hypot(dx, dy) / (size / 2.0) + phase);
          break;
        case Family::pinwheel: {
          const double r = std::hypot(dx, dy);
          const double fade = std::min(1.0, r / (2.5 * scale));
          pattern = fade * std::sin(arms * std::atan2(dy, dx) + phase);
          break;
        }
      }
      const double v = std::clamp(0.5 + 0.5 * contrast * pattern + brightness + noise(rng), 0.0, 1.0);
      const auto level = static_cast<Scalar>(std::lround(v * 255.0)) / Scalar{255};
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = level;
    }
  }
  return img;
}

}  // namespace

ImageDataset generate_synthetic(const SyntheticShapesConfig& config) {
  config.validate();
  std::vector<std::string> base_names, novel_names;
  std::vector<Example> examples;
  const SplitSpec split{{}, {}, config.test_fraction};
  const auto per_class = static_cast<std::size_t>(config.examples_per_class);
  const std::size_t n_test = split.test_count(per_class);

  auto build_group = [&](int count, bool base) {
    for (int k = 0; k < count; ++k) {
      const ClassSlot slot = slot_for(k, base);
      char name[64];
      std::snprintf(name, sizeof(name), "%s%02d_%s_p%d", base ? "base" : "novel", k, family_name(slot.family),
                    slot.partition);
      (base ? base_names : novel_names).emplace_back(name);
      for (std::size_t i = 0; i < per_class; ++i) {
        // Independent stream per example keeps generation order-free.
        std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                          static_cast<std::uint32_t>(base ? 0 : 1), static_cast<std::uint32_t>(k),
                          static_cast<std::uint32_t>(i)};
        Rng rng(seq);
        const bool test = i >= per_class - n_test;
        const Split s = base ? (test ? Split::base_test : Split::base_train)
                             : (test ? Split::novel_test : Split::novel_train);
        examples.push_back({render_pattern(slot, config.image_size, rng), k, s});
      }
    }
  };
  build_group(config.n_base_classes, true);
  build_group(config.n_novel_classes, false);
  return ImageDataset(3, config.image_size, config.image_size, std::move(base_names), std::move(novel_names),
                      std::move(examples));
}

double nearest_neighbor_one_shot_accuracy(const ImageDataset& dataset, int n_way, int n_query, int episodes,
                                          std::uint64_t seed) {
  if (n_way < 2 || n_way > dataset.n_novel()) throw ConfigError("n_way must lie in [2, n_novel]");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.n_novel()));
  for (std::size_t idx : dataset.novel_pool()) by_class[static_cast<std::size_t>(dataset[idx].label)].push_back(idx);
  Rng rng(seed);
  long correct = 0, total = 0;
  for (int e = 0; e < episodes; ++e) {
    std::vector<int> classes(static_cast<std::size_t>(dataset.n_novel()));
    for (int c = 0; c < dataset.n_novel(); ++c) classes[static_cast<std::size_t>(c)] = c;
    std::shuffle(classes.begin(), classes.end(), rng);
    classes.resize(static_cast<std::size_t>(n_way));
    std::vector<std::size_t> support;
    std::vector<std::pair<std::size_t, int>> query;
    for (int w = 0; w < n_way; ++w) {
      auto pool = by_class[static_cast<std::size_t>(classes[static_cast<std::size_t>(w)])];
      if (pool.size() < static_cast<std::size_t>(n_query + 1)) throw DataError("novel class too small for 1-NN oracle");
      std::shuffle(pool.begin(), pool.end(), rng);
      support.push_back(pool[0]);
      for (int q = 0; q < n_query; ++q) query.emplace_back(pool[static_cast<std::size_t>(q + 1)], w);
    }
    for (const auto& [idx, truth] : query) {
      const auto& qp = dataset[idx].image.pixels;
      double best = std::numeric_limits<double>::infinity();
      int pick = -1;
      for (int w = 0; w < n_way; ++w) {
        const auto& sp = dataset[support[static_cast<std::size_t>(w)]].image.pixels;
        double d = 0.0;
        for (std::size_t i = 0; i < qp.size(); ++i) {
          const double diff = static_cast<double>(qp[i]) - sp[i];
          d += diff * diff;
        }
        if (d < best) {
          best = d;
          pick = w;
        }
      }
      correct += pick == truth;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Sampling and augmentation

KShotDraw sample_k_shot(const ImageDataset& dataset, int k_shot, Rng& rng) {
  if (k_shot < 1) throw ConfigError("k_shot must be >= 1");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.n_novel()));
  for (std::size_t idx : dataset.indices(Split::novel_train)) {
    by_class[static_cast<std::size_t>(dataset[idx].label)].push_back(idx);
  }
  KShotDraw draw;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pool = by_class[c];
    if (pool.size() < static_cast<std::size_t>(k_shot)) {
      throw DataError("novel class '" + dataset.novel_classes()[c] + "' has " + std::to_string(pool.size()) +
                      " training examples, need " + std::to_string(k_shot));
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    draw.support.insert(draw.support.end(), pool.begin(), pool.begin() + k_shot);
    draw.remainder.insert(draw.remainder.end(), pool.begin() + k_shot, pool.end());
  }
  std::sort(draw.remainder.begin(), draw.remainder.end());
  return draw;
}

CropFlip draw_augmentation(Rng& rng, int crop_pad, double flip_prob) {
  if (crop_pad < 0) throw ConfigError("crop_pad must be >= 0");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip_prob must lie in [0, 1]");
  std::uniform_int_distribution<int> offset(0, 2 * crop_pad);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  CropFlip p;
  p.offset_x = offset(rng);
  p.offset_y = offset(rng);
  p.flip = coin(rng) < flip_prob;
  return p;
}

Image apply_augmentation(const Image& img, const CropFlip& params, int crop_pad) {
  Image out(img.channels, img.height, img.width);
  // Output pixel (y, x) reads padded pixel (y + oy, x + ox), i.e. source
  // pixel (y + oy - pad, x + ox - pad).
  const int sy0 = params.offset_y - crop_pad;
  const int sx0 = params.offset_x - crop_pad;
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y) {
      const int sy = y + sy0;
      if (sy < 0 || sy >= img.height) continue;
      for (int x = 0; x < img.width; ++x) {
        const int sx = x + sx0;
        if (sx < 0 || sx >= img.width) continue;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return params.flip ? flip_horizontal(out) : out;
}

Image augment(const Image& img, Rng& rng, int crop_pad, double flip_prob) {
  return apply_augmentation(img, draw_augmentation(rng, crop_pad, flip_prob), crop_pad);
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

FLAT_ABI_END
}  // namespace flat
