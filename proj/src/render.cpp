#include "msdyn/render.hpp"
#include "msdyn/error.hpp"
#include "render_detail.hpp"

#include <algorithm>
#include <cmath>

namespace msdyn {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || width < 1 || height < 1) {
    throw Error(ErrorKind::Validation, "camera needs fx, fy > 0 and a non-empty image");
  }
}

RenderOutput::RenderOutput(int w, int h)
    : width(w), height(h), color(static_cast<std::size_t>(w) * h * 3, 0.0),
      depth(static_cast<std::size_t>(w) * h, 0.0), alpha(depth.size(), 0.0),
      dynamic_alpha(depth.size(), 0.0) {}

ImageRGB RenderOutput::color_image() const {
  ImageRGB img(width, height);
  img.data = color;
  return img;
}

RenderGrad::RenderGrad(int w, int h)
    : width(w), height(h), color(static_cast<std::size_t>(w) * h * 3, 0.0),
      depth(static_cast<std::size_t>(w) * h, 0.0), alpha(depth.size(), 0.0),
      dynamic_alpha(depth.size(), 0.0) {}

namespace {

using Mat23 = Eigen::Matrix<double, 2, 3>;

Mat23 projection_jacobian(const Vec3& m, const Camera& cam) {
  const double iz = 1.0 / m.z();
  Mat23 j;
  j << cam.fx * iz, 0.0, -cam.fx * m.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * m.y() * iz * iz;
  return j;
}

}  // namespace

std::optional<Projection> project_gaussian(const Vec3& mean, const Mat3& cov, const Camera& cam,
                                           const RenderOptions& opts) {
  const Mat3 w = cam.world_to_camera.rotation.to_matrix();
  const Vec3 m = w * mean + cam.world_to_camera.translation;
  if (!(m.z() > opts.z_near)) return std::nullopt;
  const Mat23 j = projection_jacobian(m, cam);
  const Mat2 raw = j * (w * cov * w.transpose()) * j.transpose();
  Projection p;
  p.mean2d = Vec2(cam.fx * m.x() / m.z() + cam.cx, cam.fy * m.y() / m.z() + cam.cy);
  p.cov2d = detail::floor_covariance(0.5 * (raw + raw.transpose()), opts.cov2d_floor).floored;
  p.depth = m.z();
  return p;
}

namespace detail {

ScreenCovariance floor_covariance(const Mat2& raw, double floor) {
  ScreenCovariance out;
  out.raw = raw;
  out.floored = raw;
  const double half_tr = 0.5 * (raw(0, 0) + raw(1, 1));
  const double half_diff = 0.5 * (raw(0, 0) - raw(1, 1));
  const double disc = std::sqrt(half_diff * half_diff + raw(0, 1) * raw(0, 1));
  const double lo = half_tr - disc;
  if (lo >= floor) return out;
  Eigen::SelfAdjointEigenSolver<Mat2> es;
  es.computeDirect(raw);
  Vec2 lam = es.eigenvalues();
  lam = lam.cwiseMax(floor);
  out.floored = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
  out.was_floored = true;
  return out;
}

Mat2 floor_covariance_backward(const Mat2& raw, double floor, const Mat2& grad_out) {
  Eigen::SelfAdjointEigenSolver<Mat2> es;
  es.computeDirect(raw);
  const Vec2 lam = es.eigenvalues();
  const Mat2& v = es.eigenvectors();
  auto f = [floor](double x) { return std::max(x, floor); };
  auto df = [floor](double x) { return x > floor ? 1.0 : 0.0; };
  Mat2 d;
  d(0, 0) = df(lam(0));
  d(1, 1) = df(lam(1));
  const double gap = lam(1) - lam(0);
  d(0, 1) = d(1, 0) = std::abs(gap) > 1e-14 * std::max(1.0, std::abs(lam(1)))
                          ? (f(lam(1)) - f(lam(0))) / gap
                          : df(lam(0));
  Mat2 g = v.transpose() * grad_out * v;
  g = g.cwiseProduct(d);
  return v * g * v.transpose();
}

std::vector<Splat> prepare_splats(const PosedGaussianField& field, const Camera& cam,
                                  const RenderOptions& opts, bool parallel) {
  cam.validate();
  const std::size_t n = field.count();
  const Mat3 w = cam.world_to_camera.rotation.to_matrix();
  const Vec3 t = cam.world_to_camera.translation;
  std::vector<Splat> all(n);
  std::vector<std::uint8_t> keep(n, 0);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    Splat& s = all[i];
    s.index = static_cast<int>(i);
    s.cam_mean = w * field.means[i] + t;
    if (!(s.cam_mean.z() > opts.z_near)) continue;
    const Mat23 j = projection_jacobian(s.cam_mean, cam);
    const Mat2 raw = j * (w * field.covariances[i] * w.transpose()) * j.transpose();
    const ScreenCovariance sc = floor_covariance(0.5 * (raw + raw.transpose()), opts.cov2d_floor);
    s.cov2d_raw = sc.raw;
    s.cov2d = sc.floored;
    s.floored = sc.was_floored;
    const double det = s.cov2d.determinant();
    if (!(det > 0.0) || !std::isfinite(det)) continue;
    s.conic_a = s.cov2d(1, 1) / det;
    s.conic_b = -s.cov2d(0, 1) / det;
    s.conic_c = s.cov2d(0, 0) / det;
    const double iz = 1.0 / s.cam_mean.z();
    s.mean = Vec2(cam.fx * s.cam_mean.x() * iz + cam.cx, cam.fy * s.cam_mean.y() * iz + cam.cy);
    s.depth = s.cam_mean.z();
    s.opacity = field.opacities[i];
    s.color = field.colors[i];
    s.dynamic = field.is_dynamic.empty() ? 0.0 : (field.is_dynamic[i] ? 1.0 : 0.0);
    const double rx = opts.footprint_sigma * std::sqrt(s.cov2d(0, 0));
    const double ry = opts.footprint_sigma * std::sqrt(s.cov2d(1, 1));
    const double fx0 = std::ceil(s.mean.x() - rx), fx1 = std::floor(s.mean.x() + rx);
    const double fy0 = std::ceil(s.mean.y() - ry), fy1 = std::floor(s.mean.y() + ry);
    if (!(fx1 >= 0.0 && fy1 >= 0.0 && fx0 <= cam.width - 1 && fy0 <= cam.height - 1)) continue;
    s.x0 = static_cast<int>(std::max(fx0, 0.0));
    s.x1 = static_cast<int>(std::min(fx1, static_cast<double>(cam.width - 1)));
    s.y0 = static_cast<int>(std::max(fy0, 0.0));
    s.y1 = static_cast<int>(std::min(fy1, static_cast<double>(cam.height - 1)));
    if (s.x0 > s.x1 || s.y0 > s.y1) continue;
    keep[i] = 1;
  }
  std::vector<std::pair<double, int>> order;
  order.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) order.emplace_back(all[i].depth, static_cast<int>(i));
  }
  std::sort(order.begin(), order.end());
  std::vector<Splat> out;
  out.reserve(order.size());
  for (const auto& [depth, i] : order) out.push_back(all[i]);
  return out;
}

PixelUpstream pixel_upstream(double acc_alpha, double acc_depth, const RenderGrad& up,
                             std::size_t pixel, const RenderOptions& opts) {
  PixelUpstream u;
  for (int c = 0; c < 3; ++c) u.color[c] = up.color[pixel * 3 + c];
  const double g_depth = up.depth[pixel];
  u.alpha = up.alpha[pixel];
  if (acc_alpha > opts.depth_eps) {
    u.depth_num = g_depth / acc_alpha;
    u.alpha -= g_depth * acc_depth / (acc_alpha * acc_alpha);
  } else {
    u.depth_num = g_depth / opts.depth_eps;
  }
  u.dynamic = up.dynamic_alpha[pixel];
  return u;
}

void splat_to_field_grad(const Splat& s, const SplatGrad& g, const PosedGaussianField& field,
                         const Camera& cam, const RenderOptions& opts, PosedFieldGrad& out) {
  (void)field;
  const int i = s.index;
  out.colors[i] += Vec3(g.color_r, g.color_g, g.color_b);
  out.opacities[i] += g.opacity;

  // Conic -> floored covariance: d(C^-1) = -C^-1 dC C^-1.
  Mat2 q;
  q << s.conic_a, s.conic_b, s.conic_b, s.conic_c;
  Mat2 gq;
  gq << g.conic_a, 0.5 * g.conic_b, 0.5 * g.conic_b, g.conic_c;
  Mat2 g_cov = -q * gq * q;
  if (s.floored) g_cov = floor_covariance_backward(s.cov2d_raw, opts.cov2d_floor, g_cov);
  const Mat2 g2 = 0.5 * (g_cov + g_cov.transpose());

  const Mat3 w = cam.world_to_camera.rotation.to_matrix();
  const Vec3& m = s.cam_mean;
  const Mat23 j = projection_jacobian(m, cam);
  const Mat3 cov_cam = w * field.covariances[i] * w.transpose();
  out.covariances[i] += w.transpose() * (j.transpose() * g2 * j) * w;
  const Mat23 gj = 2.0 * g2 * j * cov_cam;

  const double iz = 1.0 / m.z();
  const double iz2 = iz * iz;
  const double iz3 = iz2 * iz;
  Vec3 gm = Vec3::Zero();
  gm.x() += g.mean_x * cam.fx * iz;
  gm.y() += g.mean_y * cam.fy * iz;
  gm.z() += -g.mean_x * cam.fx * m.x() * iz2 - g.mean_y * cam.fy * m.y() * iz2;
  gm.z() += g.depth;
  gm.x() += gj(0, 2) * (-cam.fx * iz2);
  gm.y() += gj(1, 2) * (-cam.fy * iz2);
  gm.z() += gj(0, 0) * (-cam.fx * iz2) + gj(0, 2) * (2.0 * cam.fx * m.x() * iz3) +
            gj(1, 1) * (-cam.fy * iz2) + gj(1, 2) * (2.0 * cam.fy * m.y() * iz3);
  out.means[i] += w.transpose() * gm;
}

}  // namespace detail

namespace {

using detail::Splat;
using detail::SplatGrad;

constexpr int kTile = 4;
constexpr int kBands = 8;

struct TileBins {
  int tiles_x = 0;
  int tiles_y = 0;
  std::vector<std::vector<int>> lists;  // splat slots per tile, depth order
};

TileBins bin_splats(const std::vector<Splat>& splats, int width, int height) {
  TileBins bins;
  bins.tiles_x = (width + kTile - 1) / kTile;
  bins.tiles_y = (height + kTile - 1) / kTile;
  bins.lists.resize(static_cast<std::size_t>(bins.tiles_x) * bins.tiles_y);
  for (std::size_t k = 0; k < splats.size(); ++k) {
    const Splat& s = splats[k];
    for (int ty = s.y0 / kTile; ty <= s.y1 / kTile; ++ty) {
      for (int tx = s.x0 / kTile; tx <= s.x1 / kTile; ++tx) {
        bins.lists[static_cast<std::size_t>(ty) * bins.tiles_x + tx].push_back(static_cast<int>(k));
      }
    }
  }
  return bins;
}

struct Sample {
  int slot;
  double sigma;
  double transmittance;
  double gauss;
  double dx, dy;
  bool exponent_clamped;
  bool capped;
};

struct PixelAccum {
  double color[3] = {0.0, 0.0, 0.0};
  double alpha = 0.0;
  double depth = 0.0;
  double dynamic = 0.0;
};

// Composites one pixel; when `samples` is non-null, records every blended splat.
template <bool Record>
PixelAccum composite_pixel(const std::vector<Splat>& splats, const std::vector<int>& list, int x,
                           int y, const RenderOptions& opts, std::vector<Sample>* samples) {
  PixelAccum acc;
  double trans = 1.0;
  for (int slot : list) {
    const Splat& s = splats[slot];
    if (!s.covers(x, y)) continue;
    const double dx = x - s.mean.x();
    const double dy = y - s.mean.y();
    double power = -0.5 * (s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy);
    const bool clamped = power < opts.exponent_clamp;
    if (clamped) power = opts.exponent_clamp;
    const double gauss = std::exp(power);
    double sigma = s.opacity * gauss;
    const bool capped = sigma > opts.sigma_cap;
    if (capped) sigma = opts.sigma_cap;
    const double next = trans * (1.0 - sigma);
    if (next < opts.min_transmittance) break;
    const double wgt = sigma * trans;
    acc.color[0] += wgt * s.color.x();
    acc.color[1] += wgt * s.color.y();
    acc.color[2] += wgt * s.color.z();
    acc.alpha += wgt;
    acc.depth += wgt * s.depth;
    acc.dynamic += wgt * s.dynamic;
    if constexpr (Record) {
      samples->push_back({slot, sigma, trans, gauss, dx, dy, clamped, capped});
    }
    trans = next;
  }
  return acc;
}

void store_pixel(RenderOutput& out, std::size_t p, const PixelAccum& acc, const RenderOptions& opts) {
  out.color[p * 3 + 0] = acc.color[0];
  out.color[p * 3 + 1] = acc.color[1];
  out.color[p * 3 + 2] = acc.color[2];
  out.alpha[p] = acc.alpha;
  out.depth[p] = acc.depth / std::max(acc.alpha, opts.depth_eps);
  out.dynamic_alpha[p] = acc.dynamic;
}

// Back-to-front sweep over one pixel's samples.
void backward_pixel(const std::vector<Splat>& splats, const std::vector<Sample>& samples,
                    const detail::PixelUpstream& up, std::vector<SplatGrad>& grads) {
  double acc = 0.0;
  for (std::size_t k = samples.size(); k-- > 0;) {
    const Sample& smp = samples[k];
    const Splat& s = splats[smp.slot];
    SplatGrad& g = grads[smp.slot];
    const double wgt = smp.sigma * smp.transmittance;
    const double dot = up.color[0] * s.color.x() + up.color[1] * s.color.y() +
                       up.color[2] * s.color.z() + up.alpha + up.depth_num * s.depth +
                       up.dynamic * s.dynamic;
    g.color_r += up.color[0] * wgt;
    g.color_g += up.color[1] * wgt;
    g.color_b += up.color[2] * wgt;
    g.depth += up.depth_num * wgt;
    const double d_sigma = smp.transmittance * (dot - acc);
    acc = dot * smp.sigma + (1.0 - smp.sigma) * acc;
    if (smp.capped) continue;
    g.opacity += d_sigma * smp.gauss;
    if (smp.exponent_clamped) continue;
    const double g_power = d_sigma * smp.sigma;
    // d power / d mean = conic * (p - mean)
    g.mean_x += g_power * (s.conic_a * smp.dx + s.conic_b * smp.dy);
    g.mean_y += g_power * (s.conic_b * smp.dx + s.conic_c * smp.dy);
    g.conic_a += g_power * (-0.5 * smp.dx * smp.dx);
    g.conic_b += g_power * (-smp.dx * smp.dy);
    g.conic_c += g_power * (-0.5 * smp.dy * smp.dy);
  }
}

}  // namespace

RenderOutput rasterize(const PosedGaussianField& field, const Camera& cam, const RenderOptions& opts) {
  const std::vector<Splat> splats = detail::prepare_splats(field, cam, opts, true);
  RenderOutput out(cam.width, cam.height);
  if (splats.empty()) return out;
  const TileBins bins = bin_splats(splats, cam.width, cam.height);
  const int n_tiles = bins.tiles_x * bins.tiles_y;
#pragma omp parallel for schedule(dynamic, 1)
  for (int tile = 0; tile < n_tiles; ++tile) {
    const auto& list = bins.lists[tile];
    const int tx = tile % bins.tiles_x, ty = tile / bins.tiles_x;
    const int x_end = std::min(cam.width, (tx + 1) * kTile);
    const int y_end = std::min(cam.height, (ty + 1) * kTile);
    for (int y = ty * kTile; y < y_end; ++y) {
      for (int x = tx * kTile; x < x_end; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
        store_pixel(out, p, composite_pixel<false>(splats, list, x, y, opts, nullptr), opts);
      }
    }
  }
  return out;
}

PosedFieldGrad rasterize_backward(const PosedGaussianField& field, const Camera& cam,
                                  const RenderGrad& upstream, const RenderOptions& opts,
                                  std::vector<double>* mean2d_grad_norm) {
  if (upstream.width != cam.width || upstream.height != cam.height) {
    throw Error(ErrorKind::ShapeMismatch, "rasterize_backward: upstream gradient shape differs");
  }
  const std::vector<Splat> splats = detail::prepare_splats(field, cam, opts, true);
  PosedFieldGrad out(field.count());
  if (mean2d_grad_norm) mean2d_grad_norm->assign(field.count(), 0.0);
  if (splats.empty()) return out;
  const TileBins bins = bin_splats(splats, cam.width, cam.height);

  // Fixed band partition over tile rows; bands are reduced in order, so the
  // result does not depend on the thread count.
  const int bands = std::min(kBands, bins.tiles_y);
  std::vector<std::vector<SplatGrad>> band_grads(bands);
#pragma omp parallel for schedule(dynamic, 1)
  for (int b = 0; b < bands; ++b) {
    auto& grads = band_grads[b];
    grads.assign(splats.size(), SplatGrad{});
    std::vector<Sample> samples;
    const int ty0 = b * bins.tiles_y / bands, ty1 = (b + 1) * bins.tiles_y / bands;
    for (int ty = ty0; ty < ty1; ++ty) {
      for (int tx = 0; tx < bins.tiles_x; ++tx) {
        const auto& list = bins.lists[static_cast<std::size_t>(ty) * bins.tiles_x + tx];
        if (list.empty()) continue;
        const int x_end = std::min(cam.width, (tx + 1) * kTile);
        const int y_end = std::min(cam.height, (ty + 1) * kTile);
        for (int y = ty * kTile; y < y_end; ++y) {
          for (int x = tx * kTile; x < x_end; ++x) {
            samples.clear();
            const PixelAccum acc = composite_pixel<true>(splats, list, x, y, opts, &samples);
            if (samples.empty()) continue;
            const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
            backward_pixel(splats, samples, detail::pixel_upstream(acc.alpha, acc.depth, upstream, p, opts),
                           grads);
          }
        }
      }
    }
  }

  const auto n_splats = static_cast<std::ptrdiff_t>(splats.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < n_splats; ++k) {
    SplatGrad total = band_grads[0][k];
    for (int b = 1; b < bands; ++b) total += band_grads[b][k];
    detail::splat_to_field_grad(splats[k], total, field, cam, opts, out);
    if (mean2d_grad_norm) {
      (*mean2d_grad_norm)[splats[k].index] = std::hypot(total.mean_x, total.mean_y);
    }
  }
  return out;
}

}  // namespace msdyn
