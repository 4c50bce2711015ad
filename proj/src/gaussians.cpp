#include "msdyn/gaussians.hpp"
#include "msdyn/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace msdyn {

void CanonicalGaussianField::check_consistent() const {
  const std::size_t n = means.size();
  if (log_scales.size() != n || rotations.size() != n || colors.size() != n ||
      opacity_logits.size() != n || is_dynamic.size() != n || instance_id.size() != n) {
    throw Error(ErrorKind::CountMismatch, "gaussian field arrays have inconsistent lengths");
  }
}

void CanonicalGaussianField::reserve(std::size_t n) {
  means.reserve(n);
  log_scales.reserve(n);
  rotations.reserve(n);
  colors.reserve(n);
  opacity_logits.reserve(n);
  is_dynamic.reserve(n);
  instance_id.reserve(n);
}

void CanonicalGaussianField::append_from(const CanonicalGaussianField& o, std::size_t i) {
  means.push_back(o.means[i]);
  log_scales.push_back(o.log_scales[i]);
  rotations.push_back(o.rotations[i]);
  colors.push_back(o.colors[i]);
  opacity_logits.push_back(o.opacity_logits[i]);
  is_dynamic.push_back(o.is_dynamic[i]);
  instance_id.push_back(o.instance_id[i]);
}

Mat3 assemble_covariance(const Vec3& log_scale, const UnitQuaternion& rotation) {
  const Mat3 r = rotation.to_matrix();
  const Vec3 s2 = (2.0 * log_scale).array().exp();
  return r * s2.asDiagonal() * r.transpose();
}

PosedGaussianField pose_field(const CanonicalGaussianField& field, std::span<const SE3> transforms) {
  std::vector<Rigid> rigid(transforms.size());
  for (std::size_t i = 0; i < transforms.size(); ++i) rigid[i] = transforms[i].to_rigid();
  return pose_field(field, std::span<const Rigid>(rigid));
}

PosedGaussianField pose_field(const CanonicalGaussianField& field, std::span<const Rigid> transforms) {
  const std::size_t n = field.count();
  if (transforms.size() != n) {
    throw Error(ErrorKind::CountMismatch, "pose_field: " + std::to_string(transforms.size()) +
                                              " transforms for " + std::to_string(n) + " Gaussians");
  }
  PosedGaussianField out;
  out.means.resize(n);
  out.covariances.resize(n);
  out.colors.resize(n);
  out.opacities.resize(n);
  out.is_dynamic = field.is_dynamic;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const Rigid& tr = transforms[i];
    const Mat3 cov0 = assemble_covariance(field.log_scales[i], field.rotations[i]);
    out.means[i] = tr.rotation * field.means[i] + tr.translation;
    out.covariances[i] = tr.rotation * cov0 * tr.rotation.transpose();
    const Vec3& c = field.colors[i];
    out.colors[i] = Vec3(sigmoid(c.x()), sigmoid(c.y()), sigmoid(c.z()));
    out.opacities[i] = sigmoid(field.opacity_logits[i]);
  }
  return out;
}

namespace {

// dL/dq for R(q) with |q| = 1, projected onto the tangent of the unit sphere.
Vec4 quaternion_grad(const UnitQuaternion& q, const Mat3& g) {
  const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
  Mat3 dw, dx, dy, dz;
  dw << 0, -z, y, z, 0, -x, -y, x, 0;
  dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
  Vec4 grad(2.0 * (g.array() * dw.array()).sum(), 2.0 * (g.array() * dx.array()).sum(),
            2.0 * (g.array() * dy.array()).sum(), 2.0 * (g.array() * dz.array()).sum());
  const Vec4 qv(w, x, y, z);
  return grad - qv * qv.dot(grad);
}

}  // namespace

FieldGrad pose_field_backward(const CanonicalGaussianField& field, std::span<const Rigid> transforms,
                              const PosedFieldGrad& grad, std::vector<RigidGrad>* transform_grads) {
  const std::size_t n = field.count();
  FieldGrad out(n);
  if (transform_grads) transform_grads->assign(n, RigidGrad{});
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const Mat3& r = transforms[i].rotation;
    const Mat3 rq = field.rotations[i].to_matrix();
    const Vec3 s2 = (2.0 * field.log_scales[i]).array().exp();
    const Mat3 cov0 = rq * s2.asDiagonal() * rq.transpose();
    const Mat3& g_cov = grad.covariances[i];

    if (transform_grads) {
      RigidGrad& tg = (*transform_grads)[i];
      tg.rotation = grad.means[i] * field.means[i].transpose() +
                    (g_cov + g_cov.transpose()) * r * cov0;
      tg.translation = grad.means[i];
    }
    out.means[i] = r.transpose() * grad.means[i];

    const Mat3 g_cov0 = r.transpose() * g_cov * r;
    const Mat3 g_rq = (g_cov0 + g_cov0.transpose()) * rq * s2.asDiagonal();
    const Mat3 local = rq.transpose() * g_cov0 * rq;
    for (int k = 0; k < 3; ++k) out.log_scales[i](k) = local(k, k) * 2.0 * s2(k);
    out.rotations[i] = quaternion_grad(field.rotations[i], g_rq);

    for (int k = 0; k < 3; ++k) {
      const double s = sigmoid(field.colors[i](k));
      out.colors[i](k) = grad.colors[i](k) * s * (1.0 - s);
    }
    const double a = sigmoid(field.opacity_logits[i]);
    out.opacity_logits[i] = grad.opacities[i] * a * (1.0 - a);
  }
  return out;
}

DensifyResult densify_and_prune(const CanonicalGaussianField& field,
                                std::span<const double> grad_accum, const DensifyOptions& opts,
                                std::mt19937_64& rng) {
  field.check_consistent();
  if (grad_accum.size() != field.count()) {
    throw Error(ErrorKind::CountMismatch, "densify: gradient accumulator size differs from field");
  }
  DensifyResult out;
  out.field.reserve(field.count() + field.count() / 4);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double shrink = std::log(opts.split_divisor);

  // Survivors first, so the growth cap sees the post-prune count.
  std::size_t survivors = 0;
  for (std::size_t i = 0; i < field.count(); ++i) {
    if (sigmoid(field.opacity_logits[i]) >= opts.prune_opacity) ++survivors;
  }
  std::size_t budget = opts.max_gaussians == 0
                           ? field.count() * 2
                           : (opts.max_gaussians > survivors ? opts.max_gaussians - survivors : 0);

  auto push = [&](std::size_t src, bool fresh) {
    out.field.append_from(field, src);
    out.source.push_back(static_cast<int>(src));
    out.is_new.push_back(fresh ? 1 : 0);
  };

  for (std::size_t i = 0; i < field.count(); ++i) {
    if (sigmoid(field.opacity_logits[i]) < opts.prune_opacity) continue;
    if (!(grad_accum[i] > opts.grad_threshold) || budget == 0) {
      push(i, false);
      continue;
    }
    --budget;
    const double max_scale = std::exp(field.log_scales[i].maxCoeff());
    if (max_scale > opts.split_scale_threshold) {
      const Mat3 r = field.rotations[i].to_matrix();
      const Vec3 scale = field.log_scales[i].array().exp();
      for (int c = 0; c < 2; ++c) {
        const Vec3 z(normal(rng), normal(rng), normal(rng));
        push(i, true);
        out.field.means.back() = field.means[i] + r * scale.cwiseProduct(z);
        out.field.log_scales.back() = field.log_scales[i] - Vec3::Constant(shrink);
      }
    } else {
      push(i, false);
      push(i, true);
    }
  }
  if (out.field.count() == 0) {
    throw Error(ErrorKind::DegenerateField, "densify_and_prune removed every Gaussian");
  }
  return out;
}

}  // namespace msdyn
