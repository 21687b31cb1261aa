#include "flat/image.hpp"

#include <algorithm>

#include "flat/error.hpp"

namespace flat {
FLAT_ABI_BEGIN

Tensor stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw DimensionError("stack_images: empty batch");
  const Image& first = *images.front();
  std::vector<Scalar> values;
  values.reserve(images.size() * first.size());
  for (const Image* img : images) {
    if (!img->same_geometry(first)) throw DimensionError("stack_images: images differ in geometry");
    values.insert(values.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor({images.size(), static_cast<std::size_t>(first.channels), static_cast<std::size_t>(first.height),
                 static_cast<std::size_t>(first.width)},
                std::move(values));
}

Tensor stack_images(const std::vector<Image>& images) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(images.size());
  for (const Image& img : images) ptrs.push_back(&img);
  return stack_images(ptrs);
}

FLAT_ABI_END
}  // namespace flat
