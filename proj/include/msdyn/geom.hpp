#pragma once

#include <Eigen/Dense>

#include <span>
#include <vector>

namespace msdyn {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

static_assert(sizeof(Vec3) == 3 * sizeof(double), "Vec3 must be tightly packed");

/// Rotation stored as a unit quaternion (w, x, y, z). Every constructor
/// normalizes, so the norm is 1 up to rounding.
class UnitQuaternion {
 public:
  UnitQuaternion() = default;

  /// Normalizes (w, x, y, z). Throws DegenerateGeometry for a zero or
  /// non-finite input.
  static UnitQuaternion from_raw(double w, double x, double y, double z);
  /// `m` must be a rotation matrix; use project_to_so3 for arbitrary input.
  static UnitQuaternion from_matrix(const Mat3& m);
  static UnitQuaternion from_axis_angle(const Vec3& axis_angle);
  /// Takes already-normalized components verbatim (deserialization).
  static UnitQuaternion from_stored(double w, double x, double y, double z) {
    return raw(w, x, y, z);
  }

  double w() const { return w_; }
  double x() const { return x_; }
  double y() const { return y_; }
  double z() const { return z_; }

  Mat3 to_matrix() const;
  Vec3 rotate(const Vec3& v) const { return to_matrix() * v; }
  UnitQuaternion conjugate() const { return raw(w_, -x_, -y_, -z_); }
  UnitQuaternion operator*(const UnitQuaternion& rhs) const;

  /// Rotation angle in [0, pi] of a^-1 b. Treats q and -q as equal.
  friend double angle_between(const UnitQuaternion& a, const UnitQuaternion& b);
  friend bool same_rotation(const UnitQuaternion& a, const UnitQuaternion& b, double tol);

 private:
  static UnitQuaternion raw(double w, double x, double y, double z) {
    UnitQuaternion q;
    q.w_ = w;
    q.x_ = x;
    q.y_ = y;
    q.z_ = z;
    return q;
  }

  double w_ = 1.0;
  double x_ = 0.0;
  double y_ = 0.0;
  double z_ = 0.0;
};

/// Rigid transform in matrix form. This is what the hot kernels use; the
/// rotation block is assumed orthonormal.
struct Rigid {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Rigid operator*(const Rigid& rhs) const {
    return {rotation * rhs.rotation, rotation * rhs.translation + translation};
  }
  Rigid inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }
};

/// Gradient of a scalar with respect to the entries of a Rigid, treating the
/// rotation block as an unconstrained 3x3 matrix.
struct RigidGrad {
  Mat3 rotation = Mat3::Zero();
  Vec3 translation = Vec3::Zero();

  RigidGrad& operator+=(const RigidGrad& o) {
    rotation += o.rotation;
    translation += o.translation;
    return *this;
  }
};

class SE3 {
 public:
  UnitQuaternion rotation;
  Vec3 translation = Vec3::Zero();

  SE3() = default;
  SE3(const UnitQuaternion& r, const Vec3& t) : rotation(r), translation(t) {}

  static SE3 identity() { return {}; }
  static SE3 from_rigid(const Rigid& r);
  /// Upper-left 3x3 is projected onto SO(3); the bottom row is ignored.
  static SE3 from_matrix(const Mat4& m);

  SE3 operator*(const SE3& rhs) const;
  SE3 inverse() const;
  Vec3 apply(const Vec3& p) const { return rotation.rotate(p) + translation; }
  Mat4 to_matrix() const;
  Rigid to_rigid() const { return {rotation.to_matrix(), translation}; }
};

struct WeightedPointSet {
  std::vector<Vec3> points;
  std::vector<double> weights;
};

/// argmin over SE(3) of sum_j w_j |R src_j + t - dst_j|^2 (Kabsch with
/// reflection fix). Throws CountMismatch or DegenerateGeometry.
SE3 weighted_procrustes(const WeightedPointSet& src, const WeightedPointSet& dst);
SE3 weighted_procrustes(std::span<const Vec3> src, std::span<const Vec3> dst,
                        std::span<const double> weights);

/// Closest rotation in Frobenius norm. Throws DegenerateGeometry when `m` is
/// singular to within 1e-12.
UnitQuaternion project_to_so3(const Mat3& m);
Mat3 polar_rotation(const Mat3& m);
/// Pulls a gradient on R = polar_rotation(m) back onto m.
Mat3 polar_rotation_backward(const Mat3& m, const Mat3& r, const Mat3& grad_r);

/// Translation is the weighted mean; rotation is the SO(3) projection of the
/// weighted mean rotation matrix. Throws WeightError on bad weights.
SE3 blend_se3(std::span<const SE3> patterns, std::span<const double> weights);

/// Kernel form of blend_se3 without validation. A weight of exactly one
/// returns the corresponding pattern untouched.
Rigid blend_rigid(std::span<const Rigid> patterns, std::span<const double> weights);
/// Accumulates into grad_patterns and writes grad_weights.
void blend_rigid_backward(std::span<const Rigid> patterns, std::span<const double> weights,
                          const RigidGrad& grad_out, std::span<RigidGrad> grad_patterns,
                          std::span<double> grad_weights);

Mat3 skew(const Vec3& v);
Mat3 so3_exp(const Vec3& axis_angle);
/// Axis-angle gradient for a left perturbation R <- exp(d) R, given dL/dR.
Vec3 rotation_tangent_grad(const Mat3& r, const Mat3& grad_r);

// Adjoints of the Rigid algebra. Each accumulates into the given gradients.
void compose_backward(const Rigid& a, const Rigid& b, const RigidGrad& grad_out, RigidGrad& grad_a,
                      RigidGrad& grad_b);
void inverse_backward(const Rigid& a, const RigidGrad& grad_out, RigidGrad& grad_a);

}  // namespace msdyn
