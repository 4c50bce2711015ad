#pragma once

#include "msdyn/dynamics.hpp"
#include "msdyn/gaussians.hpp"
#include "msdyn/image.hpp"
#include "msdyn/render.hpp"

#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace msdyn {

struct LossWeights {
  double rgb = 1.0;
  double mask = 0.5;
  double depth = 0.5;
  double track = 2.0;
  double local_rigid = 1.0;

  /// Throws Validation unless every weight is finite and >= 0.
  void validate() const;
};

struct LossReport {
  double rgb = 0.0;
  double mask = 0.0;
  double depth = 0.0;
  double track = 0.0;
  double local_rigid = 0.0;
  double total = 0.0;
};

// Each term returns its value and, when `grad` is non-null, adds
// `scale * d(term)` into it. Passing the loss weight as `scale` makes the
// accumulated gradient that of the weighted total.

/// (1 - ssim_weight) * L1 + ssim_weight * (1 - SSIM), averaged over masked
/// pixels. SSIM uses a 7x7 uniform window and is averaged over pixels whose
/// window is entirely inside the image and the mask.
double rgb_loss(const RenderOutput& render, const ImageRGB& gt, const Mask* mask,
                double ssim_weight = 0.2, RenderGrad* grad = nullptr, double scale = 1.0);

/// Binary cross-entropy between the clamped dynamic alpha and `gt_dynamic`
/// (nonzero = dynamic), averaged over all pixels.
double mask_loss(const RenderOutput& render, const Mask& gt_dynamic, RenderGrad* grad = nullptr,
                 double scale = 1.0);

struct DepthLossResult {
  double value = 0.0;
  double scale = 1.0;  // the alignment factor used
  std::size_t valid_pixels = 0;
};

/// Mean |s * rendered - gt| over pixels with gt depth > 0, render alpha > 0.5
/// and (if given) a nonzero `valid`. s is the median of gt / rendered unless
/// `fixed_scale` is set; it is a constant for the gradient.
DepthLossResult depth_loss(const RenderOutput& render, const DepthMap& gt, const Mask* valid,
                           std::optional<double> fixed_scale = std::nullopt,
                           RenderGrad* grad = nullptr, double scale = 1.0);

/// Huber with the 0.5 r^2 / delta convention below delta.
double huber(double r, double delta);

/// Confidence-weighted mean over tracks visible at t of
/// huber(|reprojection error|, 2 px) + 0.1 |depth error|. Gradients go to
/// `grad->patterns` only; the binding's weights are fixed.
double track_loss(const std::array<MotionLevel, kLevels>& levels, const TrackBinding& binding,
                  const TrackSet& tracks, const Camera& cam, int t, DynamicsGrad* grad = nullptr,
                  double scale = 1.0);

/// k-nearest-neighbour edges between dynamic Gaussians, each undirected
/// edge stored once with first < second.
struct RigidityGraph {
  std::vector<std::pair<int, int>> edges;
};

RigidityGraph build_rigidity_graph(const CanonicalGaussianField& field, int k = 8);

/// Mean over edges of (|mu_t^i - mu_t^j| - |mu_0^i - mu_0^j|)^2.
double local_rigidity_loss(const RigidityGraph& graph, std::span<const Vec3> canonical_means,
                           std::span<const Vec3> posed_means,
                           std::vector<Vec3>* grad_posed = nullptr,
                           std::vector<Vec3>* grad_canonical = nullptr, double scale = 1.0);

/// Fills `total` from the term values.
LossReport total_loss(const LossReport& terms, const LossWeights& weights);

}  // namespace msdyn
