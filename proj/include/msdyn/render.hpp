#pragma once

#include "msdyn/gaussians.hpp"
#include "msdyn/geom.hpp"
#include "msdyn/image.hpp"

#include <optional>
#include <vector>

namespace msdyn {

/// Pinhole camera. Pixel (x, y) is sampled at image coordinate (x, y), so a
/// centred principal point is ((width - 1) / 2, (height - 1) / 2).
struct Camera {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
  SE3 world_to_camera;

  /// Throws Validation unless fx, fy > 0 and width, height >= 1.
  void validate() const;
};

struct RenderOptions {
  double z_near = 0.01;
  double cov2d_floor = 0.05;  // px^2, eigenvalue floor of the screen covariance
  double sigma_cap = 0.999;
  double exponent_clamp = -12.0;
  double min_transmittance = 1e-4;
  double footprint_sigma = 3.0;
  double depth_eps = 1e-6;
};

struct Projection {
  Vec2 mean2d;
  Mat2 cov2d;
  double depth = 0.0;
};

/// First-order (EWA) projection. Returns nullopt when the centre is not in
/// front of the near plane.
std::optional<Projection> project_gaussian(const Vec3& mean, const Mat3& cov, const Camera& cam,
                                           const RenderOptions& opts = {});

struct RenderOutput {
  int width = 0;
  int height = 0;
  std::vector<double> color;  // 3 per pixel
  std::vector<double> depth;
  std::vector<double> alpha;
  std::vector<double> dynamic_alpha;

  RenderOutput() = default;
  RenderOutput(int w, int h);
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  ImageRGB color_image() const;
};

/// Upstream gradients, laid out like RenderOutput.
struct RenderGrad {
  int width = 0;
  int height = 0;
  std::vector<double> color;
  std::vector<double> depth;
  std::vector<double> alpha;
  std::vector<double> dynamic_alpha;

  RenderGrad() = default;
  RenderGrad(int w, int h);
};

/// Depth-sorted front-to-back splatting with per-pixel early termination.
/// Output is bit-identical for any OpenMP thread count.
RenderOutput rasterize(const PosedGaussianField& field, const Camera& cam,
                       const RenderOptions& opts = {});

/// Gradients of sum(upstream * output) with respect to the posed field.
/// `mean2d_grad_norm`, when given, receives |dL/d mean2d| per Gaussian.
PosedFieldGrad rasterize_backward(const PosedGaussianField& field, const Camera& cam,
                                  const RenderGrad& upstream, const RenderOptions& opts = {},
                                  std::vector<double>* mean2d_grad_norm = nullptr);

namespace reference {

// Straight serial loops over every pixel and every projected Gaussian. Kept
// as the baseline the tiled kernels are checked and benchmarked against.
RenderOutput rasterize(const PosedGaussianField& field, const Camera& cam,
                       const RenderOptions& opts = {});
PosedFieldGrad rasterize_backward(const PosedGaussianField& field, const Camera& cam,
                                  const RenderGrad& upstream, const RenderOptions& opts = {});

}  // namespace reference

}  // namespace msdyn
