#pragma once

#include "msdyn/render.hpp"

#include <array>
#include <vector>

namespace msdyn::detail {

// A projected Gaussian ready for compositing.
struct Splat {
  int index = 0;  // position in the posed field
  Vec2 mean;
  // Inverse screen covariance [[a, b], [b, c]].
  double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;
  double opacity = 0.0;
  Vec3 color;
  double depth = 0.0;
  double dynamic = 0.0;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds

  // Kept for the backward pass.
  Vec3 cam_mean;
  Mat2 cov2d_raw;
  Mat2 cov2d;
  bool floored = false;

  bool covers(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

// Per-splat accumulated screen-space gradient.
struct SplatGrad {
  double mean_x = 0.0, mean_y = 0.0;
  double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;
  double opacity = 0.0;
  double color_r = 0.0, color_g = 0.0, color_b = 0.0;
  double depth = 0.0;

  SplatGrad& operator+=(const SplatGrad& o) {
    mean_x += o.mean_x;
    mean_y += o.mean_y;
    conic_a += o.conic_a;
    conic_b += o.conic_b;
    conic_c += o.conic_c;
    opacity += o.opacity;
    color_r += o.color_r;
    color_g += o.color_g;
    color_b += o.color_b;
    depth += o.depth;
    return *this;
  }
};

struct ScreenCovariance {
  Mat2 raw;
  Mat2 floored;
  bool was_floored = false;
};

ScreenCovariance floor_covariance(const Mat2& raw, double floor);
// Daleckii-Krein adjoint of the eigenvalue floor.
Mat2 floor_covariance_backward(const Mat2& raw, double floor, const Mat2& grad_out);

// Projects, culls and sorts by (depth, index). Serial when `parallel` is false.
std::vector<Splat> prepare_splats(const PosedGaussianField& field, const Camera& cam,
                                  const RenderOptions& opts, bool parallel);

// Upstream per-pixel gradient, with the depth normalisation folded in.
struct PixelUpstream {
  double color[3];
  double alpha;
  double depth_num;
  double dynamic;
};

// `acc_alpha` and `acc_depth` are the pixel's accumulated alpha and
// un-normalised depth sum.
PixelUpstream pixel_upstream(double acc_alpha, double acc_depth, const RenderGrad& up,
                             std::size_t pixel, const RenderOptions& opts);

// Converts splat-space gradients into gradients on the posed field.
void splat_to_field_grad(const Splat& s, const SplatGrad& g, const PosedGaussianField& field,
                         const Camera& cam, const RenderOptions& opts, PosedFieldGrad& out);

}  // namespace msdyn::detail
