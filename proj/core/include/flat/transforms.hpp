#pragma once

#include <array>
#include <random>
#include <span>

#include "flat/image.hpp"
#include "flat/tensor.hpp"

namespace flat {
FLAT_ABI_BEGIN

inline constexpr double kDefaultTransformMagnitude = 0.25;
inline constexpr std::size_t kTransformDim = 8;

/// Projective transform encoded as the displacement of the four image
/// corners (top-left, top-right, bottom-right, bottom-left), each as
/// (dx, dy) in units of image width and height.
struct ProjectiveTransform {
  std::array<Scalar, kTransformDim> corner_offsets{};
  /// Sampling magnitude rho; every |offset| <= rho.
  Scalar magnitude = static_cast<Scalar>(kDefaultTransformMagnitude);

  static ProjectiveTransform identity(Scalar magnitude = static_cast<Scalar>(kDefaultTransformMagnitude));
};

/// 3x3 row-major matrix with entry (2,2) fixed to 1, mapping source pixel
/// coordinates to destination pixel coordinates. Pixel (x, y) covers the
/// square [x, x+1) x [y, y+1); the image spans [0, W] x [0, H].
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty) { return {{1, 0, tx, 0, 1, ty, 0, 0, 1}}; }

  double determinant() const;
  /// Throws DegenerateError when |det| <= 1e-8.
  Homography inverse() const;
  std::array<double, 2> apply(double x, double y) const;
};

using Rng = std::mt19937_64;

/// Draws each offset uniformly from [-rho, rho]; retries up to 10 times if
/// the induced homography is singular. Throws ConfigError for rho outside
/// [0, 0.5) and DegenerateError when every retry fails.
ProjectiveTransform sample_transform(Rng& rng, double magnitude = kDefaultTransformMagnitude);

/// Solves the 4-point direct linear transform taking the image corners to
/// their displaced positions.
Homography corners_to_homography(const ProjectiveTransform& t, int width, int height);

/// Inverse warping with bilinear interpolation. Samples falling outside the
/// source image read as 0.
Image warp_image(const Image& img, const Homography& h);

/// Regression target for the transform decoder: offsets / rho, in [-1, 1].
Tensor transform_target(const ProjectiveTransform& t);
ProjectiveTransform transform_from_target(std::span<const Scalar> target, Scalar magnitude);

FLAT_ABI_END
}  // namespace flat
