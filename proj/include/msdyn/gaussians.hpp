#pragma once

#include "msdyn/geom.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace msdyn {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Gaussians at the canonical time. Colors and opacities are stored
/// pre-sigmoid; scales as logarithms.
struct CanonicalGaussianField {
  std::vector<Vec3> means;
  std::vector<Vec3> log_scales;
  std::vector<UnitQuaternion> rotations;
  std::vector<Vec3> colors;
  std::vector<double> opacity_logits;
  std::vector<std::uint8_t> is_dynamic;
  // Instance the Gaussian was seeded from; 0 for static background.
  std::vector<int> instance_id;

  std::size_t count() const { return means.size(); }
  /// Throws CountMismatch when the per-Gaussian arrays disagree in length.
  void check_consistent() const;
  void reserve(std::size_t n);
  /// Appends Gaussian `i` of `other`.
  void append_from(const CanonicalGaussianField& other, std::size_t i);
};

/// The field at some frame t: world-space means and covariances plus
/// activated colors and opacities.
struct PosedGaussianField {
  std::vector<Vec3> means;
  std::vector<Mat3> covariances;
  std::vector<Vec3> colors;
  std::vector<double> opacities;
  std::vector<std::uint8_t> is_dynamic;

  std::size_t count() const { return means.size(); }
};

struct PosedFieldGrad {
  std::vector<Vec3> means;
  std::vector<Mat3> covariances;
  std::vector<Vec3> colors;      // w.r.t. activated colors
  std::vector<double> opacities;  // w.r.t. activated opacities

  explicit PosedFieldGrad(std::size_t n = 0)
      : means(n, Vec3::Zero()), covariances(n, Mat3::Zero()), colors(n, Vec3::Zero()),
        opacities(n, 0.0) {}
};

struct FieldGrad {
  std::vector<Vec3> means;
  std::vector<Vec3> log_scales;
  std::vector<Vec4> rotations;  // (w, x, y, z), tangent to the unit sphere
  std::vector<Vec3> colors;
  std::vector<double> opacity_logits;

  explicit FieldGrad(std::size_t n = 0)
      : means(n, Vec3::Zero()), log_scales(n, Vec3::Zero()), rotations(n, Vec4::Zero()),
        colors(n, Vec3::Zero()), opacity_logits(n, 0.0) {}
};

/// R diag(exp(2 log_scale)) R^T.
Mat3 assemble_covariance(const Vec3& log_scale, const UnitQuaternion& rotation);

/// Applies mu_t = R mu_0 + t and Sigma_t = R Sigma_0 R^T per Gaussian. Callers
/// pass identity for static Gaussians. Throws CountMismatch.
PosedGaussianField pose_field(const CanonicalGaussianField& field, std::span<const SE3> transforms);
PosedGaussianField pose_field(const CanonicalGaussianField& field, std::span<const Rigid> transforms);

/// Chain rule through pose_field. When `transform_grads` is non-null it
/// receives dL/d(transform) per Gaussian.
FieldGrad pose_field_backward(const CanonicalGaussianField& field,
                              std::span<const Rigid> transforms, const PosedFieldGrad& grad,
                              std::vector<RigidGrad>* transform_grads = nullptr);

struct DensifyOptions {
  double grad_threshold = 2e-4;
  double prune_opacity = 0.005;
  // Gaussians whose largest scale exceeds this are split, smaller ones cloned.
  double split_scale_threshold = 0.01;
  double split_divisor = 1.6;
  // Growth stops once the field reaches this many Gaussians; 0 means no cap.
  std::size_t max_gaussians = 0;
};

struct DensifyResult {
  CanonicalGaussianField field;
  // For every output Gaussian, the index of the input Gaussian it came from.
  std::vector<int> source;
  // True for clones and split children (fresh optimizer state).
  std::vector<std::uint8_t> is_new;
};

/// Adaptive density control. Prunes low-opacity Gaussians, clones small and
/// splits large ones whose accumulated positional gradient exceeds the
/// threshold. Throws DegenerateField if nothing survives.
DensifyResult densify_and_prune(const CanonicalGaussianField& field,
                                std::span<const double> grad_accum, const DensifyOptions& opts,
                                std::mt19937_64& rng);

}  // namespace msdyn
