#pragma once

#include <random>
#include <vector>

#include "flat/data.hpp"
#include "flat/image.hpp"
#include "flat/model.hpp"

// Inside the ABI namespace: these helpers are compiled against both the
// float and the double library.
namespace flat {
FLAT_ABI_BEGIN
namespace testing {

// Two conv stages on 8x8 inputs, 3 base classes.
inline ModelConfig mini_config(int n_base = 3) {
  ModelConfig c;
  c.encoder.input_channels = 3;
  c.encoder.input_size = 8;
  c.encoder.stages = {EncoderStage{4, 3, 1}, EncoderStage{5, 3, 1}};
  c.encoder.feature_dim = 5;
  c.n_base_classes = n_base;
  c.decoder_hidden = 6;
  return c;
}

inline std::vector<Image> random_images(int n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) {
    Image img(3, size, size);
    for (auto& p : img.pixels) p = static_cast<Scalar>(u(rng));
    out.push_back(std::move(img));
  }
  return out;
}

inline std::vector<const Image*> pointers(const std::vector<Image>& images) {
  std::vector<const Image*> out;
  for (const Image& img : images) out.push_back(&img);
  return out;
}

// The decoder's output layer starts at zero, which blocks every gradient
// below it; gradient checks randomise it first.
inline void randomize_decoder_output(FlatModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const Parameter& p : model.decoder_parameters()) {
    if (p.name != "decoder.out.weight" && p.name != "decoder.out.bias") continue;
    std::vector<Scalar> v(p.tensor.numel());
    for (auto& x : v) x = static_cast<Scalar>(u(rng));
    model.assign_parameter(p.name, p.tensor.shape(), std::move(v));
  }
}

// Small synthetic problem for training-loop tests: 3 base and 3 novel
// classes of 16x16 images.
inline SyntheticShapesConfig tiny_data_config(std::uint64_t seed = 0) {
  SyntheticShapesConfig c;
  c.n_base_classes = 3;
  c.n_novel_classes = 3;
  c.examples_per_class = 12;
  c.image_size = 16;
  c.seed = seed;
  return c;
}

inline ModelConfig tiny_model_config(int n_base = 3) {
  ModelConfig c;
  c.encoder.input_size = 16;
  c.encoder.stages = {EncoderStage{8, 3, 1}, EncoderStage{8, 3, 1}};
  c.encoder.feature_dim = 8;
  c.n_base_classes = n_base;
  return c;
}

}  // namespace testing
FLAT_ABI_END
}  // namespace flat
