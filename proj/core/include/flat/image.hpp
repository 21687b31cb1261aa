#pragma once

#include <cstddef>
#include <vector>

#include "flat/tensor.hpp"

namespace flat {
FLAT_ABI_BEGIN

/// One C x H x W image, row-major within each channel plane.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<Scalar> pixels;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c * h * w)) {}

  std::size_t size() const { return pixels.size(); }
  Scalar& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  Scalar at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  bool same_geometry(const Image& other) const {
    return channels == other.channels && height == other.height && width == other.width;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Stacks equally-sized images into a B x C x H x W tensor.
Tensor stack_images(const std::vector<const Image*>& images);
Tensor stack_images(const std::vector<Image>& images);

FLAT_ABI_END
}  // namespace flat
