#include "msdyn/geom.hpp"
#include "msdyn/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace msdyn {

UnitQuaternion UnitQuaternion::from_raw(double w, double x, double y, double z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorKind::DegenerateGeometry, "quaternion has zero or non-finite norm");
  }
  return raw(w / n, x / n, y / n, z / n);
}

UnitQuaternion UnitQuaternion::from_matrix(const Mat3& m) {
  double w, x, y, z;
  const double tr = m.trace();
  if (tr > 0.0) {
    const double s = std::sqrt(tr + 1.0) * 2.0;
    w = 0.25 * s;
    x = (m(2, 1) - m(1, 2)) / s;
    y = (m(0, 2) - m(2, 0)) / s;
    z = (m(1, 0) - m(0, 1)) / s;
  } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
    const double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2.0;
    w = (m(2, 1) - m(1, 2)) / s;
    x = 0.25 * s;
    y = (m(0, 1) + m(1, 0)) / s;
    z = (m(0, 2) + m(2, 0)) / s;
  } else if (m(1, 1) > m(2, 2)) {
    const double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2.0;
    w = (m(0, 2) - m(2, 0)) / s;
    x = (m(0, 1) + m(1, 0)) / s;
    y = 0.25 * s;
    z = (m(1, 2) + m(2, 1)) / s;
  } else {
    const double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2.0;
    w = (m(1, 0) - m(0, 1)) / s;
    x = (m(0, 2) + m(2, 0)) / s;
    y = (m(1, 2) + m(2, 1)) / s;
    z = 0.25 * s;
  }
  if (w < 0.0) {
    w = -w;
    x = -x;
    y = -y;
    z = -z;
  }
  return from_raw(w, x, y, z);
}

UnitQuaternion UnitQuaternion::from_axis_angle(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle < 1e-12) {
    return from_raw(1.0, 0.5 * axis_angle.x(), 0.5 * axis_angle.y(), 0.5 * axis_angle.z());
  }
  const double s = std::sin(0.5 * angle) / angle;
  return from_raw(std::cos(0.5 * angle), s * axis_angle.x(), s * axis_angle.y(),
                  s * axis_angle.z());
}

Mat3 UnitQuaternion::to_matrix() const {
  const double w = w_, x = x_, y = y_, z = z_;
  Mat3 r;
  r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
      2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return r;
}

UnitQuaternion UnitQuaternion::operator*(const UnitQuaternion& b) const {
  const UnitQuaternion& a = *this;
  return from_raw(a.w_ * b.w_ - a.x_ * b.x_ - a.y_ * b.y_ - a.z_ * b.z_,
                  a.w_ * b.x_ + a.x_ * b.w_ + a.y_ * b.z_ - a.z_ * b.y_,
                  a.w_ * b.y_ - a.x_ * b.z_ + a.y_ * b.w_ + a.z_ * b.x_,
                  a.w_ * b.z_ + a.x_ * b.y_ - a.y_ * b.x_ + a.z_ * b.w_);
}

double angle_between(const UnitQuaternion& a, const UnitQuaternion& b) {
  // Relative rotation a^-1 b; atan2 keeps precision near zero angle.
  const double w = a.w_ * b.w_ + a.x_ * b.x_ + a.y_ * b.y_ + a.z_ * b.z_;
  const double x = a.w_ * b.x_ - a.x_ * b.w_ - a.y_ * b.z_ + a.z_ * b.y_;
  const double y = a.w_ * b.y_ + a.x_ * b.z_ - a.y_ * b.w_ - a.z_ * b.x_;
  const double z = a.w_ * b.z_ - a.x_ * b.y_ + a.y_ * b.x_ - a.z_ * b.w_;
  return 2.0 * std::atan2(std::sqrt(x * x + y * y + z * z), std::abs(w));
}

bool same_rotation(const UnitQuaternion& a, const UnitQuaternion& b, double tol) {
  return angle_between(a, b) <= tol;
}

SE3 SE3::from_rigid(const Rigid& r) {
  return {UnitQuaternion::from_matrix(r.rotation), r.translation};
}

SE3 SE3::from_matrix(const Mat4& m) {
  return {project_to_so3(m.topLeftCorner<3, 3>()), m.topRightCorner<3, 1>()};
}

SE3 SE3::operator*(const SE3& rhs) const {
  return {rotation * rhs.rotation, rotation.rotate(rhs.translation) + translation};
}

SE3 SE3::inverse() const {
  const UnitQuaternion inv = rotation.conjugate();
  return {inv, -inv.rotate(translation)};
}

Mat4 SE3::to_matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation.to_matrix();
  m.topRightCorner<3, 1>() = translation;
  return m;
}

SE3 weighted_procrustes(const WeightedPointSet& src, const WeightedPointSet& dst) {
  if (src.points.size() != src.weights.size() || dst.points.size() != dst.weights.size() ||
      src.points.size() != dst.points.size()) {
    throw Error(ErrorKind::CountMismatch,
                "procrustes: src has " + std::to_string(src.points.size()) + " points, dst has " +
                    std::to_string(dst.points.size()));
  }
  if (src.weights != dst.weights) {
    throw Error(ErrorKind::WeightError, "procrustes: src and dst weights differ");
  }
  return weighted_procrustes(src.points, dst.points, src.weights);
}

SE3 weighted_procrustes(std::span<const Vec3> src, std::span<const Vec3> dst,
                        std::span<const double> weights) {
  if (src.size() != dst.size() || src.size() != weights.size()) {
    throw Error(ErrorKind::CountMismatch, "procrustes: point and weight counts differ");
  }
  if (src.size() < 3) {
    throw Error(ErrorKind::DegenerateGeometry, "procrustes: fewer than 3 correspondences");
  }
  double total = 0.0;
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t j = 0; j < src.size(); ++j) {
    if (!(weights[j] >= 0.0)) {
      throw Error(ErrorKind::WeightError, "procrustes: negative weight");
    }
    total += weights[j];
    cs += weights[j] * src[j];
    cd += weights[j] * dst[j];
  }
  if (!(total > 0.0)) {
    throw Error(ErrorKind::WeightError, "procrustes: weights sum to zero");
  }
  cs /= total;
  cd /= total;

  Mat3 h = Mat3::Zero();
  for (std::size_t j = 0; j < src.size(); ++j) {
    if (weights[j] == 0.0) continue;
    h += weights[j] * (src[j] - cs) * (dst[j] - cd).transpose();
  }
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 1e-300) || sv(1) <= 1e-12 * sv(0)) {
    throw Error(ErrorKind::DegenerateGeometry,
                "procrustes: cross-covariance has rank below 2 (collinear or coincident points)");
  }
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3 r = v * d * u.transpose();
  return {UnitQuaternion::from_matrix(r), cd - r * cs};
}

namespace {

bool try_polar(const Mat3& m, Mat3& out) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 0.0) || !std::isfinite(sv(0)) || sv(2) <= 1e-12 * std::max(1.0, sv(0))) {
    return false;
  }
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  out = u * d * v.transpose();
  return true;
}

}  // namespace

Mat3 polar_rotation(const Mat3& m) {
  Mat3 r;
  if (!try_polar(m, r)) {
    throw Error(ErrorKind::DegenerateGeometry, "project_to_so3: matrix is singular");
  }
  return r;
}

UnitQuaternion project_to_so3(const Mat3& m) {
  return UnitQuaternion::from_matrix(polar_rotation(m));
}

namespace {

Mat3 polar_backward_from_svd(const Eigen::JacobiSVD<Mat3>& svd, const Mat3& r, const Mat3& grad_r) {
  // M = R S with S symmetric. For dR = R W (W skew): W S + S W = R^T dM - dM^T R.
  const Mat3& u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  Vec3 lambda = svd.singularValues();
  if ((u * v.transpose()).determinant() < 0.0) lambda(2) = -lambda(2);

  const Mat3 b = v.transpose() * r.transpose() * grad_r * v;
  Mat3 c;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double denom = lambda(i) + lambda(j);
      c(i, j) = std::abs(denom) > 1e-300 ? b(i, j) / denom : 0.0;
    }
  }
  c = v * c * v.transpose();
  return r * (c - c.transpose());
}

}  // namespace

Mat3 polar_rotation_backward(const Mat3& m, const Mat3& r, const Mat3& grad_r) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return polar_backward_from_svd(svd, r, grad_r);
}

SE3 blend_se3(std::span<const SE3> patterns, std::span<const double> weights) {
  if (patterns.size() != weights.size() || patterns.empty()) {
    throw Error(ErrorKind::CountMismatch, "blend_se3: need equally many (>=1) patterns and weights");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw Error(ErrorKind::WeightError, "blend_se3: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw Error(ErrorKind::WeightError, "blend_se3: weights sum to " + std::to_string(sum));
  }
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] == 1.0) return patterns[k];
  }
  Mat3 m = Mat3::Zero();
  Vec3 t = Vec3::Zero();
  for (std::size_t k = 0; k < patterns.size(); ++k) {
    m += weights[k] * patterns[k].rotation.to_matrix();
    t += weights[k] * patterns[k].translation;
  }
  return {project_to_so3(m), t};
}

Rigid blend_rigid(std::span<const Rigid> patterns, std::span<const double> weights) {
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] == 1.0) return patterns[k];
  }
  Mat3 m = Mat3::Zero();
  Vec3 t = Vec3::Zero();
  std::size_t best = 0;
  for (std::size_t k = 0; k < patterns.size(); ++k) {
    m += weights[k] * patterns[k].rotation;
    t += weights[k] * patterns[k].translation;
    if (weights[k] > weights[best]) best = k;
  }
  Rigid out;
  out.translation = t;
  if (!try_polar(m, out.rotation)) out.rotation = patterns[best].rotation;
  return out;
}

void blend_rigid_backward(std::span<const Rigid> patterns, std::span<const double> weights,
                          const RigidGrad& grad_out, std::span<RigidGrad> grad_patterns,
                          std::span<double> grad_weights) {
  Mat3 m = Mat3::Zero();
  for (std::size_t k = 0; k < patterns.size(); ++k) m += weights[k] * patterns[k].rotation;
  Mat3 grad_m = Mat3::Zero();
  std::size_t exact = patterns.size();
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] == 1.0) exact = k;
  }
  if (exact < patterns.size()) {
    // The forward pass returns this pattern verbatim.
    grad_m = grad_out.rotation;
  } else {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    if (sv(0) > 0.0 && std::isfinite(sv(0)) && sv(2) > 1e-12 * std::max(1.0, sv(0))) {
      Mat3 d = Mat3::Identity();
      d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
      const Mat3 r = svd.matrixU() * d * svd.matrixV().transpose();
      grad_m = polar_backward_from_svd(svd, r, grad_out.rotation);
    }
  }
  for (std::size_t k = 0; k < patterns.size(); ++k) {
    grad_patterns[k].rotation += weights[k] * grad_m;
    grad_patterns[k].translation += weights[k] * grad_out.translation;
    grad_weights[k] = (grad_m.array() * patterns[k].rotation.array()).sum() +
                      grad_out.translation.dot(patterns[k].translation);
  }
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return s;
}

Mat3 so3_exp(const Vec3& w) {
  const double theta = w.norm();
  const Mat3 k = skew(w);
  if (theta < 1e-8) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * k + b * k * k;
}

Vec3 rotation_tangent_grad(const Mat3& r, const Mat3& grad_r) {
  const Mat3 x = grad_r * r.transpose();
  return {x(2, 1) - x(1, 2), x(0, 2) - x(2, 0), x(1, 0) - x(0, 1)};
}

void compose_backward(const Rigid& a, const Rigid& b, const RigidGrad& g, RigidGrad& ga,
                      RigidGrad& gb) {
  ga.rotation += g.rotation * b.rotation.transpose() + g.translation * b.translation.transpose();
  ga.translation += g.translation;
  gb.rotation += a.rotation.transpose() * g.rotation;
  gb.translation += a.rotation.transpose() * g.translation;
}

void inverse_backward(const Rigid& a, const RigidGrad& g, RigidGrad& ga) {
  ga.rotation += g.rotation.transpose() - a.translation * g.translation.transpose();
  ga.translation -= a.rotation * g.translation;
}

}  // namespace msdyn
