#include "msdyn/error.hpp"
#include "msdyn/render.hpp"
#include "render_detail.hpp"

#include <algorithm>
#include <cmath>

namespace msdyn::reference {

using detail::Splat;
using detail::SplatGrad;

RenderOutput rasterize(const PosedGaussianField& field, const Camera& cam, const RenderOptions& opts) {
  const std::vector<Splat> splats = detail::prepare_splats(field, cam, opts, false);
  RenderOutput out(cam.width, cam.height);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      double trans = 1.0;
      double c0 = 0.0, c1 = 0.0, c2 = 0.0, a = 0.0, d = 0.0, dyn = 0.0;
      for (const Splat& s : splats) {
        if (!s.covers(x, y)) continue;
        const double dx = x - s.mean.x();
        const double dy = y - s.mean.y();
        double power = -0.5 * (s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy);
        if (power < opts.exponent_clamp) power = opts.exponent_clamp;
        const double sigma = std::min(s.opacity * std::exp(power), opts.sigma_cap);
        const double next = trans * (1.0 - sigma);
        if (next < opts.min_transmittance) break;
        const double w = sigma * trans;
        c0 += w * s.color.x();
        c1 += w * s.color.y();
        c2 += w * s.color.z();
        a += w;
        d += w * s.depth;
        dyn += w * s.dynamic;
        trans = next;
      }
      const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
      out.color[p * 3 + 0] = c0;
      out.color[p * 3 + 1] = c1;
      out.color[p * 3 + 2] = c2;
      out.alpha[p] = a;
      out.depth[p] = d / std::max(a, opts.depth_eps);
      out.dynamic_alpha[p] = dyn;
    }
  }
  return out;
}

PosedFieldGrad rasterize_backward(const PosedGaussianField& field, const Camera& cam,
                                  const RenderGrad& upstream, const RenderOptions& opts) {
  if (upstream.width != cam.width || upstream.height != cam.height) {
    throw Error(ErrorKind::ShapeMismatch, "rasterize_backward: upstream gradient shape differs");
  }
  const std::vector<Splat> splats = detail::prepare_splats(field, cam, opts, false);
  std::vector<SplatGrad> grads(splats.size());

  struct Hit {
    std::size_t slot;
    double sigma, trans, gauss, dx, dy;
    bool clamped, capped;
  };
  std::vector<Hit> hits;
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      hits.clear();
      double trans = 1.0, a = 0.0, d = 0.0;
      for (std::size_t k = 0; k < splats.size(); ++k) {
        const Splat& s = splats[k];
        if (!s.covers(x, y)) continue;
        const double dx = x - s.mean.x();
        const double dy = y - s.mean.y();
        double power = -0.5 * (s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy);
        const bool clamped = power < opts.exponent_clamp;
        if (clamped) power = opts.exponent_clamp;
        const double gauss = std::exp(power);
        const bool capped = s.opacity * gauss > opts.sigma_cap;
        const double sigma = capped ? opts.sigma_cap : s.opacity * gauss;
        const double next = trans * (1.0 - sigma);
        if (next < opts.min_transmittance) break;
        a += sigma * trans;
        d += sigma * trans * s.depth;
        hits.push_back({k, sigma, trans, gauss, dx, dy, clamped, capped});
        trans = next;
      }
      const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
      const detail::PixelUpstream up = detail::pixel_upstream(a, d, upstream, p, opts);
      double acc = 0.0;
      for (std::size_t h = hits.size(); h-- > 0;) {
        const Hit& hit = hits[h];
        const Splat& s = splats[hit.slot];
        SplatGrad& g = grads[hit.slot];
        const double w = hit.sigma * hit.trans;
        const double dot = up.color[0] * s.color.x() + up.color[1] * s.color.y() +
                           up.color[2] * s.color.z() + up.alpha + up.depth_num * s.depth +
                           up.dynamic * s.dynamic;
        g.color_r += up.color[0] * w;
        g.color_g += up.color[1] * w;
        g.color_b += up.color[2] * w;
        g.depth += up.depth_num * w;
        const double d_sigma = hit.trans * (dot - acc);
        acc = dot * hit.sigma + (1.0 - hit.sigma) * acc;
        if (hit.capped) continue;
        g.opacity += d_sigma * hit.gauss;
        if (hit.clamped) continue;
        const double g_power = d_sigma * hit.sigma;
        g.mean_x += g_power * (s.conic_a * hit.dx + s.conic_b * hit.dy);
        g.mean_y += g_power * (s.conic_b * hit.dx + s.conic_c * hit.dy);
        g.conic_a -= g_power * 0.5 * hit.dx * hit.dx;
        g.conic_b -= g_power * hit.dx * hit.dy;
        g.conic_c -= g_power * 0.5 * hit.dy * hit.dy;
      }
    }
  }
  PosedFieldGrad out(field.count());
  for (std::size_t k = 0; k < splats.size(); ++k) {
    detail::splat_to_field_grad(splats[k], grads[k], field, cam, opts, out);
  }
  return out;
}

}  // namespace msdyn::reference
