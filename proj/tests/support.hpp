#pragma once

#include "msdyn/dynamics.hpp"
#include "msdyn/gaussians.hpp"
#include "msdyn/geom.hpp"
#include "msdyn/image.hpp"
#include "msdyn/losses.hpp"
#include "msdyn/render.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace msdyn::testing {

Vec3 random_unit(std::mt19937_64& rng);
UnitQuaternion random_rotation(std::mt19937_64& rng);
SE3 random_se3(std::mt19937_64& rng, double translation_range = 1.0);

Camera toy_camera(int width, int height, double focal);

// Gaussians in front of `toy_camera`; `px_sigma_min` bounds the projected
// footprint from below so that every 3-sigma box covers the whole image
// when the image is small.
struct ToyFieldOptions {
  int count = 5;
  double depth_min = 2.5, depth_max = 3.5;
  double lateral = 0.25;  // metres around the optical axis
  double scale_min = 0.9, scale_max = 1.3;
  double opacity_max = 0.8;
  double dynamic_fraction = 0.5;
};
CanonicalGaussianField toy_field(std::mt19937_64& rng, const ToyFieldOptions& opts);

// Posed Gaussians scattered in front of `toy_camera` with random
// anisotropic covariances, colours, opacities and dynamic flags.
PosedGaussianField random_posed_field(std::mt19937_64& rng, int count, double scale_lo = 0.05,
                                      double scale_hi = 0.4);

// A three-level hierarchy with hand-picked parents and random patterns at
// every frame except the canonical frame 0.
MSDynamics toy_dynamics(std::mt19937_64& rng, const CanonicalGaussianField& field, int frames,
                        double motion = 0.05);

// Brute-force compositor written independently of the tiled renderer, with
// the same culling and clamping rules.
RenderOutput brute_force_render(const PosedGaussianField& field, const Camera& cam,
                                const RenderOptions& opts = {});

double max_abs_diff(const RenderOutput& a, const RenderOutput& b);

// Central differences of `f` with respect to the scalar at `x`.
double central_difference(double& x, double h, const std::function<double()>& f);

// |a - b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Worst relative error of every analytic gradient of the toy pipeline
// against central differences, for one random scene.
struct GradientReport {
  double worst = 0.0;
  std::string worst_label;
  int checks = 0;
};
GradientReport check_scene_gradients(std::uint64_t seed, double h = 1e-5);

// Byte-wise comparison of every file under two directories.
bool directories_identical(const std::filesystem::path& a, const std::filesystem::path& b);

std::filesystem::path temp_dir(const std::string& name);

}  // namespace msdyn::testing
