#include "support.hpp"

#include "msdyn/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <unistd.h>

namespace msdyn::testing {

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(n(rng), n(rng), n(rng));
  } while (v.norm() < 1e-6);
  return v.normalized();
}

UnitQuaternion random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return UnitQuaternion::from_raw(n(rng), n(rng), n(rng), n(rng));
}

SE3 random_se3(std::mt19937_64& rng, double translation_range) {
  std::uniform_real_distribution<double> u(-translation_range, translation_range);
  return SE3(random_rotation(rng), Vec3(u(rng), u(rng), u(rng)));
}

Camera toy_camera(int width, int height, double focal) {
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = focal;
  cam.cx = 0.5 * (width - 1);
  cam.cy = 0.5 * (height - 1);
  return cam;
}

CanonicalGaussianField toy_field(std::mt19937_64& rng, const ToyFieldOptions& o) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  CanonicalGaussianField f;
  for (int i = 0; i < o.count; ++i) {
    f.means.push_back(Vec3(range(-o.lateral, o.lateral), range(-o.lateral, o.lateral),
                           range(o.depth_min, o.depth_max)));
    f.log_scales.push_back(Vec3(std::log(range(o.scale_min, o.scale_max)),
                                std::log(range(o.scale_min, o.scale_max)),
                                std::log(range(o.scale_min, o.scale_max))));
    f.rotations.push_back(random_rotation(rng));
    f.colors.push_back(Vec3(range(-2.0, 2.0), range(-2.0, 2.0), range(-2.0, 2.0)));
    f.opacity_logits.push_back(logit(range(0.2, o.opacity_max)));
    const bool dynamic = u(rng) < o.dynamic_fraction || i == 0;
    f.is_dynamic.push_back(dynamic ? 1 : 0);
    f.instance_id.push_back(dynamic ? 1 : 0);
  }
  return f;
}

MSDynamics toy_dynamics(std::mt19937_64& rng, const CanonicalGaussianField& field, int frames,
                        double motion) {
  std::normal_distribution<double> n(0.0, motion);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  MSDynamics dyn;
  dyn.frames = frames;
  dyn.canonical_frame = 0;
  const std::array<std::vector<int>, kLevels> parents{std::vector<int>{-1, -1},
                                                      std::vector<int>{0, 0, 1},
                                                      std::vector<int>{0, 1, 2, 2}};
  for (int l = 0; l < kLevels; ++l) {
    MotionLevel& level = dyn.levels[l];
    level.level_index = l + 1;
    level.frames = frames;
    level.pattern_count = static_cast<int>(parents[l].size());
    level.parent_of = parents[l];
    level.patterns.assign(static_cast<std::size_t>(frames) * level.pattern_count, SE3());
    level.member_tracks.assign(level.pattern_count, {});
    level.anchors.assign(level.pattern_count, Vec3::Zero());
    level.instance_of.assign(level.pattern_count, 1);
    for (int t = 1; t < frames; ++t) {
      for (int k = 0; k < level.pattern_count; ++k) {
        level.pattern(t, k) = SE3(UnitQuaternion::from_axis_angle(Vec3(n(rng), n(rng), n(rng))),
                                  Vec3(n(rng), n(rng), n(rng)));
      }
    }
  }
  dyn.weights.slots.resize(field.count());
  for (std::size_t i = 0; i < field.count(); ++i) {
    if (!field.is_dynamic[i]) continue;
    auto& slots = dyn.weights.slots[i];
    for (int l = 0; l < kLevels; ++l) {
      const int k = dyn.levels[l].pattern_count;
      slots[l].count = std::min(k, l + 2);
      const int first = static_cast<int>(i) % k;
      for (int c = 0; c < slots[l].count; ++c) {
        slots[l].index[c] = (first + c) % k;
        slots[l].logits[c] = u(rng);
      }
    }
  }
  return dyn;
}

namespace {

struct OracleSplat {
  int index;
  double depth;
  Vec2 mean;
  double a, b, c;  // conic
  double opacity;
  Vec3 color;
  double dynamic;
  int x0, x1, y0, y1;
};

Mat2 floor_eigenvalues(const Mat2& m, double floor) {
  const double a = m(0, 0), b = m(0, 1), c = m(1, 1);
  const double mid = 0.5 * (a + c);
  const double rad = std::sqrt(0.25 * (a - c) * (a - c) + b * b);
  const double lo = mid - rad, hi = mid + rad;
  if (lo >= floor) return m;
  Vec2 v_lo;
  if (std::abs(b) > 1e-300) {
    v_lo = Vec2(b, lo - a).normalized();
  } else {
    v_lo = a <= c ? Vec2(1.0, 0.0) : Vec2(0.0, 1.0);
  }
  const Vec2 v_hi(-v_lo.y(), v_lo.x());
  return std::max(lo, floor) * v_lo * v_lo.transpose() + std::max(hi, floor) * v_hi * v_hi.transpose();
}

}  // namespace

PosedGaussianField random_posed_field(std::mt19937_64& rng, int count, double scale_lo,
                                      double scale_hi) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto scale = [&] { return std::log(scale_lo + (scale_hi - scale_lo) * u(rng)); };
  PosedGaussianField f;
  for (int i = 0; i < count; ++i) {
    f.means.emplace_back(u(rng) * 1.6 - 0.8, u(rng) * 1.6 - 0.8, 2.0 + 2.0 * u(rng));
    const Vec3 ls(scale(), scale(), scale());
    f.covariances.push_back(assemble_covariance(ls, random_rotation(rng)));
    f.colors.emplace_back(u(rng), u(rng), u(rng));
    f.opacities.push_back(0.05 + 0.9 * u(rng));
    f.is_dynamic.push_back(u(rng) < 0.5 ? 1 : 0);
  }
  return f;
}

RenderOutput brute_force_render(const PosedGaussianField& field, const Camera& cam,
                                const RenderOptions& opts) {
  const Mat3 w = cam.world_to_camera.rotation.to_matrix();
  std::vector<OracleSplat> splats;
  for (std::size_t i = 0; i < field.count(); ++i) {
    const Vec3 m = w * field.means[i] + cam.world_to_camera.translation;
    if (!(m.z() > opts.z_near)) continue;
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / m.z(), 0.0, -cam.fx * m.x() / (m.z() * m.z()), 0.0, cam.fy / m.z(),
        -cam.fy * m.y() / (m.z() * m.z());
    Mat2 cov = j * w * field.covariances[i] * w.transpose() * j.transpose();
    cov = 0.5 * (cov + cov.transpose());
    cov = floor_eigenvalues(cov, opts.cov2d_floor);
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
    if (!(det > 0.0) || !std::isfinite(det)) continue;
    OracleSplat s;
    s.index = static_cast<int>(i);
    s.depth = m.z();
    s.mean = Vec2(cam.fx * m.x() / m.z() + cam.cx, cam.fy * m.y() / m.z() + cam.cy);
    s.a = cov(1, 1) / det;
    s.b = -cov(0, 1) / det;
    s.c = cov(0, 0) / det;
    s.opacity = field.opacities[i];
    s.color = field.colors[i];
    s.dynamic = field.is_dynamic.empty() ? 0.0 : field.is_dynamic[i] ? 1.0 : 0.0;
    const double rx = opts.footprint_sigma * std::sqrt(cov(0, 0));
    const double ry = opts.footprint_sigma * std::sqrt(cov(1, 1));
    s.x0 = static_cast<int>(std::max(std::ceil(s.mean.x() - rx), 0.0));
    s.x1 = static_cast<int>(std::min(std::floor(s.mean.x() + rx), cam.width - 1.0));
    s.y0 = static_cast<int>(std::max(std::ceil(s.mean.y() - ry), 0.0));
    s.y1 = static_cast<int>(std::min(std::floor(s.mean.y() + ry), cam.height - 1.0));
    if (std::floor(s.mean.x() + rx) < 0.0 || std::floor(s.mean.y() + ry) < 0.0 ||
        std::ceil(s.mean.x() - rx) > cam.width - 1.0 || std::ceil(s.mean.y() - ry) > cam.height - 1.0) {
      continue;
    }
    if (s.x0 > s.x1 || s.y0 > s.y1) continue;
    splats.push_back(s);
  }
  std::sort(splats.begin(), splats.end(), [](const OracleSplat& p, const OracleSplat& q) {
    return p.depth < q.depth || (p.depth == q.depth && p.index < q.index);
  });

  RenderOutput out(cam.width, cam.height);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      double trans = 1.0, alpha = 0.0, depth = 0.0, dyn = 0.0;
      Vec3 color = Vec3::Zero();
      for (const OracleSplat& s : splats) {
        if (x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1) continue;
        const double dx = x - s.mean.x(), dy = y - s.mean.y();
        const double power = std::max(-0.5 * (s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy),
                                      opts.exponent_clamp);
        const double sigma = std::min(s.opacity * std::exp(power), opts.sigma_cap);
        if (trans * (1.0 - sigma) < opts.min_transmittance) break;
        color += sigma * trans * s.color;
        alpha += sigma * trans;
        depth += sigma * trans * s.depth;
        dyn += sigma * trans * s.dynamic;
        trans *= 1.0 - sigma;
      }
      const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
      for (int c = 0; c < 3; ++c) out.color[3 * p + c] = color[c];
      out.alpha[p] = alpha;
      out.depth[p] = depth / std::max(alpha, opts.depth_eps);
      out.dynamic_alpha[p] = dyn;
    }
  }
  return out;
}

double max_abs_diff(const RenderOutput& a, const RenderOutput& b) {
  double worst = 0.0;
  auto cmp = [&](const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) {
      worst = INFINITY;
      return;
    }
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
  };
  cmp(a.color, b.color);
  cmp(a.alpha, b.alpha);
  cmp(a.depth, b.depth);
  cmp(a.dynamic_alpha, b.dynamic_alpha);
  return worst;
}

double central_difference(double& x, double h, const std::function<double()>& f) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2.0 * h);
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

// Smooth stand-in for the training step: all loss terms on a toy scene,
// with the depth alignment fixed and pixels near the alpha threshold
// excluded so the objective is differentiable at the evaluation point.
struct ToyProblem {
  Camera cam;
  CanonicalGaussianField field;
  MSDynamics dyn;
  int t = 1;
  ImageRGB gt_rgb;
  Mask gt_dynamic;
  DepthMap gt_depth;
  Mask depth_valid;
  TrackSet tracks;
  TrackBinding binding;
  RigidityGraph graph;
  LossWeights weights;

  double loss(FieldGrad* fgrad = nullptr, DynamicsGrad* dgrad = nullptr) const {
    const std::vector<Rigid> tr = evaluate_rigid(dyn.levels, dyn.weights, t);
    const PosedGaussianField posed = pose_field(field, tr);
    const RenderOutput r = rasterize(posed, cam);
    const bool want = fgrad != nullptr;
    RenderGrad rg(cam.width, cam.height);
    if (want) dgrad->resize(dyn.levels, field.count());
    double total = weights.rgb * rgb_loss(r, gt_rgb, nullptr, 0.2, want ? &rg : nullptr, weights.rgb);
    total += weights.mask * mask_loss(r, gt_dynamic, want ? &rg : nullptr, weights.mask);
    total += weights.depth *
             depth_loss(r, gt_depth, &depth_valid, 1.0, want ? &rg : nullptr, weights.depth).value;
    total += weights.track *
             track_loss(dyn.levels, binding, tracks, cam, t, want ? dgrad : nullptr, weights.track);
    std::vector<Vec3> gp(field.count(), Vec3::Zero()), gc(field.count(), Vec3::Zero());
    total += weights.local_rigid * local_rigidity_loss(graph, field.means, posed.means,
                                                       want ? &gp : nullptr, want ? &gc : nullptr,
                                                       weights.local_rigid);
    if (!want) return total;
    PosedFieldGrad pg = rasterize_backward(posed, cam, rg);
    for (std::size_t i = 0; i < field.count(); ++i) pg.means[i] += gp[i];
    std::vector<RigidGrad> tg;
    *fgrad = pose_field_backward(field, tr, pg, &tg);
    for (std::size_t i = 0; i < field.count(); ++i) fgrad->means[i] += gc[i];
    evaluate_backward(dyn.levels, dyn.weights, t, tg, *dgrad);
    return total;
  }
};

ToyProblem make_problem(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto offset = [&](double lo, double hi) { return (u(rng) < 0.5 ? -1.0 : 1.0) * (lo + (hi - lo) * u(rng)); };
  ToyProblem p;
  p.cam = toy_camera(8, 8, 10.0);
  p.field = toy_field(rng, {});
  p.dyn = toy_dynamics(rng, p.field, 2);
  const RenderOutput base =
      rasterize(pose_field(p.field, evaluate_rigid(p.dyn.levels, p.dyn.weights, p.t)), p.cam);
  const int w = p.cam.width, h = p.cam.height;
  p.gt_rgb = ImageRGB(w, h);
  p.gt_dynamic = Mask(w, h);
  p.gt_depth = DepthMap(w, h);
  p.depth_valid = Mask(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t q = static_cast<std::size_t>(y) * w + x;
      for (int c = 0; c < 3; ++c) p.gt_rgb.at(x, y, c) = base.color[3 * q + c] + offset(0.05, 0.2);
      p.gt_dynamic.at(x, y) = u(rng) < 0.5 ? 1 : 0;
      p.gt_depth.at(x, y) = static_cast<float>(base.depth[q] * (1.0 + offset(0.05, 0.2)));
      p.depth_valid.at(x, y) = std::abs(base.alpha[q] - 0.5) > 0.02 ? 1 : 0;
    }
  }

  const int n = 6;
  p.tracks = TrackSet(n, 2);
  std::uniform_real_distribution<double> lateral(-0.2, 0.2), depth(2.6, 3.4);
  const auto& proto = p.dyn.weights.slots[0];
  p.binding.weights.slots.resize(n);
  for (int j = 0; j < n; ++j) {
    const Vec3 x0(lateral(rng), lateral(rng), depth(rng));
    p.binding.track.push_back(j);
    p.binding.canonical.push_back(x0);
    auto slots = proto;
    for (auto& slot : slots) {
      for (int c = 0; c < slot.count; ++c) slot.logits[c] = 2.0 * u(rng) - 1.0;
    }
    p.binding.weights.slots[j] = slots;
    p.tracks.instance_id[j] = 1;
    for (int t = 0; t < 2; ++t) {
      p.tracks.visible[p.tracks.at(j, t)] = 1;
      p.tracks.confidence[p.tracks.at(j, t)] = 0.5 + 0.5 * u(rng);
    }
    p.tracks.positions[p.tracks.at(j, 0)] = x0;
  }
  const std::vector<Rigid> tt = evaluate_rigid(p.dyn.levels, p.binding.weights, p.t);
  for (int j = 0; j < n; ++j) {
    p.tracks.positions[p.tracks.at(j, p.t)] =
        tt[j].apply(p.binding.canonical[j]) +
        Vec3(offset(0.02, 0.05), offset(0.02, 0.05), offset(0.05, 0.1));
  }
  p.graph = build_rigidity_graph(p.field, 3);
  return p;
}

}  // namespace

GradientReport check_scene_gradients(std::uint64_t seed, double h) {
  std::mt19937_64 rng(seed);
  ToyProblem p = make_problem(rng);
  GradientReport report;
  auto record = [&](double analytic, double numeric, const std::string& label) {
    const double e = relative_error(analytic, numeric);
    ++report.checks;
    if (e > report.worst || report.worst_label.empty()) {
      report.worst = std::max(report.worst, e);
      if (e >= report.worst) report.worst_label = label;
    }
  };

  // Loss terms against their render inputs.
  const std::vector<Rigid> tr = evaluate_rigid(p.dyn.levels, p.dyn.weights, p.t);
  const PosedGaussianField posed = pose_field(p.field, tr);
  RenderOutput r = rasterize(posed, p.cam);
  {
    RenderGrad g(p.cam.width, p.cam.height);
    rgb_loss(r, p.gt_rgb, nullptr, 0.2, &g);
    for (std::size_t i = 0; i < r.color.size(); i += 7) {
      record(g.color[i],
             central_difference(r.color[i], h, [&] { return rgb_loss(r, p.gt_rgb, nullptr, 0.2); }),
             "rgb_loss color");
    }
  }
  {
    RenderGrad g(p.cam.width, p.cam.height);
    mask_loss(r, p.gt_dynamic, &g);
    for (std::size_t i = 0; i < r.dynamic_alpha.size(); i += 3) {
      record(g.dynamic_alpha[i],
             central_difference(r.dynamic_alpha[i], h, [&] { return mask_loss(r, p.gt_dynamic); }),
             "mask_loss dynamic_alpha");
    }
  }
  {
    RenderGrad g(p.cam.width, p.cam.height);
    depth_loss(r, p.gt_depth, &p.depth_valid, 1.0, &g);
    for (std::size_t i = 0; i < r.depth.size(); i += 3) {
      record(g.depth[i], central_difference(r.depth[i], h, [&] {
               return depth_loss(r, p.gt_depth, &p.depth_valid, 1.0).value;
             }),
             "depth_loss depth");
    }
  }
  {
    DynamicsGrad g;
    g.resize(p.dyn.levels, p.field.count());
    track_loss(p.dyn.levels, p.binding, p.tracks, p.cam, p.t, &g);
    auto f = [&] { return track_loss(p.dyn.levels, p.binding, p.tracks, p.cam, p.t); };
    for (int l = 0; l < kLevels; ++l) {
      for (int k = 0; k < p.dyn.levels[l].pattern_count; ++k) {
        SE3& pat = p.dyn.levels[l].pattern(p.t, k);
        for (int a = 0; a < 3; ++a) {
          record(g.patterns[l][k].translation[a], central_difference(pat.translation[a], h, f),
                 "track_loss pattern translation");
        }
      }
    }
  }
  {
    std::vector<Vec3> canon = p.field.means;
    std::vector<Vec3> moved = posed.means;
    std::vector<Vec3> gp(canon.size(), Vec3::Zero()), gc(canon.size(), Vec3::Zero());
    local_rigidity_loss(p.graph, canon, moved, &gp, &gc);
    auto f = [&] { return local_rigidity_loss(p.graph, canon, moved); };
    for (std::size_t i = 0; i < canon.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        record(gp[i][a], central_difference(moved[i][a], h, f), "local_rigidity posed");
        record(gc[i][a], central_difference(canon[i][a], h, f), "local_rigidity canonical");
      }
    }
  }

  // Whole chain: parameters -> evaluate -> pose -> rasterize -> losses.
  FieldGrad fg;
  DynamicsGrad dg;
  p.loss(&fg, &dg);
  auto f = [&] { return p.loss(); };
  CanonicalGaussianField& field = p.field;
  for (std::size_t i = 0; i < field.count(); ++i) {
    for (int a = 0; a < 3; ++a) {
      record(fg.means[i][a], central_difference(field.means[i][a], h, f), "chain means");
      record(fg.log_scales[i][a], central_difference(field.log_scales[i][a], h, f), "chain log_scales");
      record(fg.colors[i][a], central_difference(field.colors[i][a], h, f), "chain colors");
    }
    record(fg.opacity_logits[i], central_difference(field.opacity_logits[i], h, f), "chain opacity");
    for (int a = 0; a < 4; ++a) {
      const UnitQuaternion q0 = field.rotations[i];
      double c[4] = {q0.w(), q0.x(), q0.y(), q0.z()};
      c[a] += h;
      field.rotations[i] = UnitQuaternion::from_raw(c[0], c[1], c[2], c[3]);
      const double fp = f();
      c[a] -= 2.0 * h;
      field.rotations[i] = UnitQuaternion::from_raw(c[0], c[1], c[2], c[3]);
      const double fm = f();
      field.rotations[i] = q0;
      record(fg.rotations[i][a], (fp - fm) / (2.0 * h), "chain rotations");
    }
    for (int l = 0; l < kLevels; ++l) {
      BlendSlot& slot = p.dyn.weights.slots[i][l];
      for (int c = 0; c < slot.count; ++c) {
        record(dg.logits[i][l][c], central_difference(slot.logits[c], h, f), "chain blend logits");
      }
    }
  }
  for (int l = 0; l < kLevels; ++l) {
    for (int k = 0; k < p.dyn.levels[l].pattern_count; ++k) {
      SE3& pat = p.dyn.levels[l].pattern(p.t, k);
      for (int a = 0; a < 3; ++a) {
        record(dg.patterns[l][k].translation[a], central_difference(pat.translation[a], h, f),
               "chain pattern translation");
      }
      const Vec3 tangent = rotation_tangent_grad(pat.rotation.to_matrix(), dg.patterns[l][k].rotation);
      for (int a = 0; a < 3; ++a) {
        const UnitQuaternion q0 = pat.rotation;
        Vec3 d = Vec3::Zero();
        d[a] = h;
        pat.rotation = UnitQuaternion::from_axis_angle(d) * q0;
        const double fp = f();
        pat.rotation = UnitQuaternion::from_axis_angle(-d) * q0;
        const double fm = f();
        pat.rotation = q0;
        record(tangent[a], (fp - fm) / (2.0 * h), "chain pattern rotation");
      }
    }
  }
  return report;
}

bool directories_identical(const std::filesystem::path& a, const std::filesystem::path& b) {
  namespace fs = std::filesystem;
  auto listing = [](const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
    }
    std::sort(files.begin(), files.end());
    return files;
  };
  const auto fa = listing(a), fb = listing(b);
  if (fa != fb) return false;
  for (const auto& rel : fa) {
    if (read_file(a / rel) != read_file(b / rel)) return false;
  }
  return true;
}

std::filesystem::path temp_dir(const std::string& name) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("msdyn_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace msdyn::testing
