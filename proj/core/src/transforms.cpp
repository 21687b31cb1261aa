#include "flat/transforms.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "flat/error.hpp"

namespace flat {
FLAT_ABI_BEGIN

namespace {

constexpr double kMinDeterminant = 1e-8;
constexpr int kMaxSampleAttempts = 10;

// Source corners in the order used by corner_offsets.
std::array<std::array<double, 2>, 4> corners(double width, double height) {
  return {{{0.0, 0.0}, {width, 0.0}, {width, height}, {0.0, height}}};
}

// Direct linear transform for four correspondences with h33 = 1.
Homography solve_dlt(const std::array<std::array<double, 2>, 4>& src,
                     const std::array<std::array<double, 2>, 4>& dst) {
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = src[i][0], y = src[i][1];
    const double u = dst[i][0], v = dst[i][1];
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  Eigen::FullPivLU<Eigen::Matrix<double, 8, 8>> lu(a);
  if (!lu.isInvertible()) throw DegenerateError("corner correspondences do not determine a homography");
  const Eigen::Matrix<double, 8, 1> h = lu.solve(b);
  Homography out;
  for (int i = 0; i < 8; ++i) out.m[static_cast<std::size_t>(i)] = h(i);
  out.m[8] = 1.0;
  if (std::abs(out.determinant()) <= kMinDeterminant) {
    throw DegenerateError("homography is singular (|det| = " + std::to_string(std::abs(out.determinant())) + ")");
  }
  return out;
}

Homography homography_for(const ProjectiveTransform& t, double width, double height) {
  const auto src = corners(width, height);
  auto dst = src;
  for (std::size_t i = 0; i < 4; ++i) {
    dst[i][0] += static_cast<double>(t.corner_offsets[2 * i]) * width;
    dst[i][1] += static_cast<double>(t.corner_offsets[2 * i + 1]) * height;
  }
  return solve_dlt(src, dst);
}

}  // namespace

ProjectiveTransform ProjectiveTransform::identity(Scalar magnitude) {
  ProjectiveTransform t;
  t.magnitude = magnitude;
  return t;
}

double Homography::determinant() const {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
  const double det = determinant();
  if (std::abs(det) <= kMinDeterminant) {
    throw DegenerateError("homography is not invertible (|det| = " + std::to_string(std::abs(det)) + ")");
  }
  Homography inv;
  inv.m = {m[4] * m[8] - m[5] * m[7], m[2] * m[7] - m[1] * m[8], m[1] * m[5] - m[2] * m[4],
           m[5] * m[6] - m[3] * m[8], m[0] * m[8] - m[2] * m[6], m[2] * m[3] - m[0] * m[5],
           m[3] * m[7] - m[4] * m[6], m[1] * m[6] - m[0] * m[7], m[0] * m[4] - m[1] * m[3]};
  const double scale = std::abs(inv.m[8]) > 1e-12 ? inv.m[8] : det;
  for (double& v : inv.m) v /= scale;
  return inv;
}

std::array<double, 2> Homography::apply(double x, double y) const {
  const double w = m[6] * x + m[7] * y + m[8];
  return {(m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w};
}

ProjectiveTransform sample_transform(Rng& rng, double magnitude) {
  if (!(magnitude >= 0.0 && magnitude < 0.5)) {
    throw ConfigError("transform magnitude must lie in [0, 0.5), got " + std::to_string(magnitude));
  }
  std::uniform_real_distribution<double> offset(-magnitude, magnitude);
  for (int attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    ProjectiveTransform t;
    t.magnitude = static_cast<Scalar>(magnitude);
    for (Scalar& v : t.corner_offsets) v = magnitude > 0.0 ? static_cast<Scalar>(offset(rng)) : Scalar{0};
    try {
      homography_for(t, 1.0, 1.0);
      return t;
    } catch (const DegenerateError&) {
    }
  }
  throw DegenerateError("no invertible transform after " + std::to_string(kMaxSampleAttempts) + " draws");
}

Homography corners_to_homography(const ProjectiveTransform& t, int width, int height) {
  if (width < 2 || height < 2) {
    throw DimensionError("corners_to_homography: image must be at least 2x2, got " + std::to_string(width) + "x" +
                         std::to_string(height));
  }
  return homography_for(t, width, height);
}

Image warp_image(const Image& img, const Homography& h) {
  const Homography inv = h.inverse();
  Image out(img.channels, img.height, img.width);
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const double w = inv.m[6] * cx + inv.m[7] * cy + inv.m[8];
      if (!(w > 1e-12)) continue;  // behind the projection plane: fill
      const double sx = (inv.m[0] * cx + inv.m[1] * cy + inv.m[2]) / w - 0.5;
      const double sy = (inv.m[3] * cx + inv.m[4] * cy + inv.m[5]) / w - 0.5;
      if (!(sx > -1.0 && sy > -1.0 && sx < img.width && sy < img.height)) continue;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      const double ax = sx - fx0, ay = sy - fy0;
      const std::array<double, 4> weights{(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      const std::array<int, 4> xs{x0, x0 + 1, x0, x0 + 1};
      const std::array<int, 4> ys{y0, y0, y0 + 1, y0 + 1};
      for (int c = 0; c < img.channels; ++c) {
        const Scalar* src = img.pixels.data() + static_cast<std::size_t>(c) * plane;
        double value = 0.0;
        bool first = true;
        for (std::size_t k = 0; k < 4; ++k) {
          if (weights[k] == 0.0) continue;
          const bool inside = xs[k] >= 0 && xs[k] < img.width && ys[k] >= 0 && ys[k] < img.height;
          const double p = inside ? static_cast<double>(src[static_cast<std::size_t>(ys[k]) * img.width + xs[k]]) : 0.0;
          value = first ? weights[k] * p : value + weights[k] * p;
          first = false;
        }
        out.at(c, y, x) = static_cast<Scalar>(value);
      }
    }
  }
  return out;
}

Tensor transform_target(const ProjectiveTransform& t) {
  std::vector<Scalar> values(kTransformDim, Scalar{0});
  if (t.magnitude > Scalar{0}) {
    for (std::size_t i = 0; i < kTransformDim; ++i) values[i] = t.corner_offsets[i] / t.magnitude;
  }
  return Tensor({kTransformDim}, std::move(values));
}

ProjectiveTransform transform_from_target(std::span<const Scalar> target, Scalar magnitude) {
  if (target.size() != kTransformDim) {
    throw DimensionError("transform target must have " + std::to_string(kTransformDim) + " entries, got " +
                         std::to_string(target.size()));
  }
  ProjectiveTransform t;
  t.magnitude = magnitude;
  for (std::size_t i = 0; i < kTransformDim; ++i) t.corner_offsets[i] = target[i] * magnitude;
  return t;
}

FLAT_ABI_END
}  // namespace flat
