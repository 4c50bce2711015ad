#include "msdyn/losses.hpp"
#include "msdyn/error.hpp"
#include "msdyn/log.hpp"

#include "ssim_detail.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace msdyn {

void LossWeights::validate() const {
  for (double w : {rgb, mask, depth, track, local_rigid}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw Error(ErrorKind::Validation, "loss weights must be finite and non-negative");
    }
  }
}

namespace {

void check_shape(const RenderOutput& render, int w, int h, const char* what) {
  if (render.width != w || render.height != h) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": render is " +
                                              std::to_string(render.width) + "x" +
                                              std::to_string(render.height) + ", target is " +
                                              std::to_string(w) + "x" + std::to_string(h));
  }
}

void check_grad(const RenderOutput& render, const RenderGrad* grad) {
  if (grad != nullptr && (grad->width != render.width || grad->height != render.height)) {
    throw Error(ErrorKind::ShapeMismatch, "gradient buffer does not match the render");
  }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

double rgb_loss(const RenderOutput& render, const ImageRGB& gt, const Mask* mask,
                double ssim_weight, RenderGrad* grad, double scale) {
  check_shape(render, gt.width, gt.height, "rgb_loss");
  if (mask != nullptr && !mask->same_shape(gt.width, gt.height)) {
    throw Error(ErrorKind::ShapeMismatch, "rgb_loss: mask does not match the image");
  }
  check_grad(render, grad);
  const int w = gt.width;
  const int h = gt.height;
  const std::size_t n = render.pixel_count();

  std::size_t masked = 0;
  for (std::size_t p = 0; p < n; ++p) masked += (mask == nullptr || mask->data[p] != 0) ? 1 : 0;
  if (masked == 0) return 0.0;

  double l1 = 0.0;
  const double l1_scale = (1.0 - ssim_weight) * scale / (3.0 * static_cast<double>(masked));
  for (std::size_t p = 0; p < n; ++p) {
    if (mask != nullptr && mask->data[p] == 0) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = render.color[p * 3 + c] - gt.data[p * 3 + c];
      l1 += std::abs(d);
      if (grad != nullptr) grad->color[p * 3 + c] += l1_scale * sign(d);
    }
  }
  l1 /= 3.0 * static_cast<double>(masked);
  if (ssim_weight == 0.0) return l1;

  const std::vector<std::uint8_t> valid = detail::ssim_window_valid(w, h, mask);
  std::size_t n_valid = 0;
  for (auto v : valid) n_valid += v;
  if (n_valid == 0) return (1.0 - ssim_weight) * l1;

  const double* x = render.color.data();
  const double* y = gt.data.data();
  double ssim_sum = 0.0;
  // d(loss)/d(SSIM at one pixel and channel).
  const double up = -ssim_weight * scale / (3.0 * static_cast<double>(n_valid));
  constexpr double inv = 1.0 / ((2 * detail::kSsimRadius + 1) * (2 * detail::kSsimRadius + 1));
  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      if (!valid[static_cast<std::size_t>(py) * w + px]) continue;
      for (int c = 0; c < 3; ++c) {
        const detail::SsimMoments m = detail::ssim_moments(x, y, w, 3, c, px, py);
        const detail::SsimValue s = detail::ssim_value(m);
        ssim_sum += s.value;
        if (grad == nullptr) continue;
        const double g_mx = up * s.d_mx * inv;
        const double g_exx = up * s.d_exx * inv;
        const double g_exy = up * s.d_exy * inv;
        for (int dy = -detail::kSsimRadius; dy <= detail::kSsimRadius; ++dy) {
          for (int dx = -detail::kSsimRadius; dx <= detail::kSsimRadius; ++dx) {
            const std::size_t q = (static_cast<std::size_t>(py + dy) * w + (px + dx)) * 3 + c;
            grad->color[q] += g_mx + 2.0 * x[q] * g_exx + y[q] * g_exy;
          }
        }
      }
    }
  }
  const double ssim = ssim_sum / (3.0 * static_cast<double>(n_valid));
  return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim);
}

double mask_loss(const RenderOutput& render, const Mask& gt_dynamic, RenderGrad* grad,
                 double scale) {
  check_shape(render, gt_dynamic.width, gt_dynamic.height, "mask_loss");
  check_grad(render, grad);
  constexpr double lo = 1e-6;
  constexpr double hi = 1.0 - 1e-6;
  const std::size_t n = render.pixel_count();
  if (n == 0) return 0.0;
  double sum = 0.0;
  const double g_scale = scale / static_cast<double>(n);
  for (std::size_t p = 0; p < n; ++p) {
    const double raw = render.dynamic_alpha[p];
    const double a = std::clamp(raw, lo, hi);
    const bool target = gt_dynamic.data[p] != 0;
    sum += target ? -std::log(a) : -std::log(1.0 - a);
    if (grad != nullptr && raw > lo && raw < hi) {
      grad->dynamic_alpha[p] += g_scale * (target ? -1.0 / a : 1.0 / (1.0 - a));
    }
  }
  return sum / static_cast<double>(n);
}

DepthLossResult depth_loss(const RenderOutput& render, const DepthMap& gt, const Mask* valid,
                           std::optional<double> fixed_scale, RenderGrad* grad, double scale) {
  check_shape(render, gt.width, gt.height, "depth_loss");
  if (valid != nullptr && !valid->same_shape(gt.width, gt.height)) {
    throw Error(ErrorKind::ShapeMismatch, "depth_loss: valid mask does not match the image");
  }
  check_grad(render, grad);
  DepthLossResult out;
  std::vector<std::size_t> pixels;
  const std::size_t n = render.pixel_count();
  for (std::size_t p = 0; p < n; ++p) {
    const double g = gt.data[p];
    if (!(g > 0.0) || !std::isfinite(g)) continue;
    if (!(render.alpha[p] > 0.5) || !(render.depth[p] > 0.0)) continue;
    if (valid != nullptr && valid->data[p] == 0) continue;
    pixels.push_back(p);
  }
  out.valid_pixels = pixels.size();
  if (pixels.empty()) {
    warn("depth_loss: no valid pixels; term contributes 0");
    return out;
  }
  if (fixed_scale) {
    out.scale = *fixed_scale;
  } else {
    std::vector<double> ratio;
    ratio.reserve(pixels.size());
    for (std::size_t p : pixels) ratio.push_back(gt.data[p] / render.depth[p]);
    const std::size_t mid = ratio.size() / 2;
    std::nth_element(ratio.begin(), ratio.begin() + mid, ratio.end());
    double median = ratio[mid];
    if (ratio.size() % 2 == 0) {
      median = 0.5 * (median + *std::max_element(ratio.begin(), ratio.begin() + mid));
    }
    out.scale = median;
  }
  const double g_scale = scale * out.scale / static_cast<double>(pixels.size());
  double sum = 0.0;
  for (std::size_t p : pixels) {
    const double d = out.scale * render.depth[p] - gt.data[p];
    sum += std::abs(d);
    if (grad != nullptr) grad->depth[p] += g_scale * sign(d);
  }
  out.value = sum / static_cast<double>(pixels.size());
  return out;
}

double huber(double r, double delta) {
  r = std::abs(r);
  return r <= delta ? 0.5 * r * r / delta : r - 0.5 * delta;
}

double track_loss(const std::array<MotionLevel, kLevels>& levels, const TrackBinding& binding,
                  const TrackSet& tracks, const Camera& cam, int t, DynamicsGrad* grad,
                  double scale) {
  constexpr double delta = 2.0;
  constexpr double depth_weight = 0.1;
  if (binding.track.empty()) return 0.0;
  double weight_sum = 0.0;
  for (int j : binding.track) {
    if (tracks.is_visible(j, t)) weight_sum += tracks.weight(j, t);
  }
  if (!(weight_sum > 0.0)) return 0.0;

  const std::vector<Rigid> transforms = evaluate_rigid(levels, binding.weights, t);
  const Rigid w2c = cam.world_to_camera.to_rigid();
  std::vector<RigidGrad> tgrads(grad != nullptr ? binding.track.size() : 0);
  double sum = 0.0;
  for (std::size_t b = 0; b < binding.track.size(); ++b) {
    const int j = binding.track[b];
    if (!tracks.is_visible(j, t)) continue;
    const double c = tracks.weight(j, t);
    if (!(c > 0.0)) continue;
    const Vec3 world = transforms[b].apply(binding.canonical[b]);
    const Vec3 pc = w2c.apply(world);
    const Vec3 oc = w2c.apply(tracks.position(j, t));
    if (pc.z() <= 1e-6 || oc.z() <= 1e-6) continue;
    const Vec2 proj(cam.fx * pc.x() / pc.z() + cam.cx, cam.fy * pc.y() / pc.z() + cam.cy);
    const Vec2 obs(cam.fx * oc.x() / oc.z() + cam.cx, cam.fy * oc.y() / oc.z() + cam.cy);
    const Vec2 e = proj - obs;
    const double r = e.norm();
    const double dz = pc.z() - oc.z();
    sum += c * (huber(r, delta) + depth_weight * std::abs(dz));
    if (grad == nullptr) continue;
    Vec2 g_e = Vec2::Zero();
    if (r > 0.0) g_e = r <= delta ? Vec2(e / delta) : Vec2(e / r);
    const double iz = 1.0 / pc.z();
    Vec3 g_pc(g_e.x() * cam.fx * iz, g_e.y() * cam.fy * iz,
              -(g_e.x() * cam.fx * pc.x() + g_e.y() * cam.fy * pc.y()) * iz * iz);
    g_pc.z() += depth_weight * sign(dz);
    const Vec3 g_world = (c * scale / weight_sum) * (w2c.rotation.transpose() * g_pc);
    tgrads[b].rotation = g_world * binding.canonical[b].transpose();
    tgrads[b].translation = g_world;
  }
  if (grad != nullptr) {
    DynamicsGrad local;
    local.resize(levels, binding.track.size());
    evaluate_backward(levels, binding.weights, t, tgrads, local);
    for (int l = 0; l < kLevels; ++l) {
      for (std::size_t k = 0; k < local.patterns[l].size(); ++k) {
        grad->patterns[l][k] += local.patterns[l][k];
      }
    }
  }
  return sum / weight_sum;
}

RigidityGraph build_rigidity_graph(const CanonicalGaussianField& field, int k) {
  RigidityGraph graph;
  std::vector<int> dyn;
  for (std::size_t i = 0; i < field.count(); ++i) {
    if (field.is_dynamic[i]) dyn.push_back(static_cast<int>(i));
  }
  if (dyn.size() < 2 || k < 1) return graph;
  const int kk = std::min<int>(k, static_cast<int>(dyn.size()) - 1);
  std::vector<std::vector<int>> neighbours(dyn.size());
  const auto count = static_cast<std::ptrdiff_t>(dyn.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t a = 0; a < count; ++a) {
    std::vector<std::pair<double, int>> best;
    best.reserve(kk + 1);
    const Vec3& pa = field.means[dyn[a]];
    for (std::ptrdiff_t b = 0; b < count; ++b) {
      if (b == a) continue;
      const double d = (field.means[dyn[b]] - pa).squaredNorm();
      if (static_cast<int>(best.size()) == kk && !(std::make_pair(d, static_cast<int>(b)) < best.back())) {
        continue;
      }
      best.emplace_back(d, static_cast<int>(b));
      std::sort(best.begin(), best.end());
      if (static_cast<int>(best.size()) > kk) best.pop_back();
    }
    for (const auto& [d, b] : best) neighbours[a].push_back(b);
  }
  std::set<std::pair<int, int>> edges;
  for (std::size_t a = 0; a < dyn.size(); ++a) {
    for (int b : neighbours[a]) {
      const int i = dyn[a];
      const int j = dyn[b];
      edges.emplace(std::min(i, j), std::max(i, j));
    }
  }
  graph.edges.assign(edges.begin(), edges.end());
  return graph;
}

double local_rigidity_loss(const RigidityGraph& graph, std::span<const Vec3> canonical_means,
                           std::span<const Vec3> posed_means, std::vector<Vec3>* grad_posed,
                           std::vector<Vec3>* grad_canonical, double scale) {
  if (canonical_means.size() != posed_means.size()) {
    throw Error(ErrorKind::CountMismatch, "local_rigidity_loss: mean arrays differ in length");
  }
  if (graph.edges.empty()) return 0.0;
  const double inv_e = 1.0 / static_cast<double>(graph.edges.size());
  double sum = 0.0;
  for (const auto& [i, j] : graph.edges) {
    const Vec3 dt = posed_means[i] - posed_means[j];
    const Vec3 d0 = canonical_means[i] - canonical_means[j];
    const double lt = dt.norm();
    const double l0 = d0.norm();
    const double r = lt - l0;
    sum += r * r;
    const double g = 2.0 * r * inv_e * scale;
    if (grad_posed != nullptr && lt > 0.0) {
      const Vec3 u = dt / lt;
      (*grad_posed)[i] += g * u;
      (*grad_posed)[j] -= g * u;
    }
    if (grad_canonical != nullptr && l0 > 0.0) {
      const Vec3 u = d0 / l0;
      (*grad_canonical)[i] -= g * u;
      (*grad_canonical)[j] += g * u;
    }
  }
  return sum * inv_e;
}

LossReport total_loss(const LossReport& terms, const LossWeights& weights) {
  LossReport out = terms;
  out.total = weights.rgb * terms.rgb + weights.mask * terms.mask + weights.depth * terms.depth +
              weights.track * terms.track + weights.local_rigid * terms.local_rigid;
  return out;
}

}  // namespace msdyn
