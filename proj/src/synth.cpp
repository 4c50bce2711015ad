#include "msdyn/synth.hpp"
#include "msdyn/error.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace msdyn {

SceneKind parse_scene_kind(const std::string& name) {
  if (name == "rigid") return SceneKind::Rigid;
  if (name == "articulated") return SceneKind::Articulated;
  if (name == "deformable") return SceneKind::Deformable;
  throw Error(ErrorKind::Validation, "unknown scene kind '" + name + "'");
}

const char* to_string(SceneKind kind) {
  switch (kind) {
    case SceneKind::Rigid: return "rigid";
    case SceneKind::Articulated: return "articulated";
    case SceneKind::Deformable: return "deformable";
  }
  return "?";
}

void SceneSpec::validate() const {
  if (frames < 2) throw Error(ErrorKind::Validation, "scene needs at least 2 frames");
  if (width < 32 || height < 32) throw Error(ErrorKind::Validation, "resolution must be >= 32x32");
  if (!(fov_deg > 1.0 && fov_deg < 170.0)) throw Error(ErrorKind::Validation, "bad field of view");
  if (!(camera_distance > 0.5)) throw Error(ErrorKind::Validation, "camera too close");
  if (track_count < 0) throw Error(ErrorKind::Validation, "negative track count");
  if (!(noise_depth >= 0.0) || !(noise_track >= 0.0)) {
    throw Error(ErrorKind::Validation, "noise levels must be non-negative");
  }
}

namespace {

// Rounds to the nearest 32-bit float. The volatile store keeps g++ 11 at -O3
// from vectorizing the double->float->double round trip away.
double to_f32(double v) {
  volatile float f = static_cast<float>(v);
  return f;
}

constexpr double kBackdropZ = 1.5;

struct Body {
  Vec3 center;
  Vec3 radii;
  int part = 1;
  int instance = 1;
  Vec3 base_color;
  Vec3 phase;
};

double ellipsoid_area(const Vec3& r) {
  constexpr double p = 1.6075;
  const double a = std::pow(r.x() * r.y(), p) + std::pow(r.x() * r.z(), p) +
                   std::pow(r.y() * r.z(), p);
  return 4.0 * std::numbers::pi * std::pow(a / 3.0, 1.0 / p);
}

UnitQuaternion align_z_to(const Vec3& n) {
  const Eigen::Quaterniond q = Eigen::Quaterniond::FromTwoVectors(Vec3::UnitZ(), n);
  return UnitQuaternion::from_raw(q.w(), q.x(), q.y(), q.z());
}

Vec3 to_logit(const Vec3& c) {
  return {logit(std::clamp(c.x(), 0.02, 0.98)), logit(std::clamp(c.y(), 0.02, 0.98)),
          logit(std::clamp(c.z(), 0.02, 0.98))};
}

// Flattened Gaussians covering an ellipsoid surface.
void add_ellipsoid(CanonicalGaussianField& f, std::vector<int>& part, const Body& b,
                   double spacing) {
  const int n = std::max(16, static_cast<int>(std::lround(ellipsoid_area(b.radii) / (spacing * spacing))));
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<Vec3> pts(n), normals(n);
  for (int i = 0; i < n; ++i) {
    const double y = 1.0 - 2.0 * (i + 0.5) / n;
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = golden * i;
    const Vec3 dir(std::cos(phi) * r, y, std::sin(phi) * r);
    pts[i] = b.center + b.radii.cwiseProduct(dir);
    normals[i] = dir.cwiseQuotient(b.radii).normalized();
  }
  for (int i = 0; i < n; ++i) {
    // Tangential size from the local spacing (third-nearest neighbour).
    std::array<double, 3> best{1e30, 1e30, 1e30};
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (pts[j] - pts[i]).squaredNorm();
      if (d < best[2]) {
        best[2] = d;
        std::sort(best.begin(), best.end());
      }
    }
    const double s = 0.75 * std::sqrt(best[2]);
    const Vec3 rel = pts[i] - b.center;
    const Vec3 color(b.base_color.x() + 0.22 * std::sin(5.0 * rel.x() + b.phase.x()),
                     b.base_color.y() + 0.22 * std::sin(5.0 * rel.y() + b.phase.y()),
                     b.base_color.z() + 0.22 * std::sin(5.0 * rel.z() + b.phase.z()));
    f.means.push_back(pts[i]);
    f.log_scales.push_back(Vec3(std::log(s), std::log(s), std::log(0.006)));
    f.rotations.push_back(align_z_to(normals[i]));
    f.colors.push_back(to_logit(color));
    f.opacity_logits.push_back(logit(0.95));
    f.is_dynamic.push_back(1);
    f.instance_id.push_back(b.instance);
    part.push_back(b.part);
  }
}

void add_backdrop(CanonicalGaussianField& f, std::vector<int>& part) {
  constexpr double half = 3.0;
  constexpr double spacing = 0.08;
  const int n = static_cast<int>(std::lround(2.0 * half / spacing)) + 1;
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const double x = -half + ix * spacing;
      const double y = -half + iy * spacing;
      const Vec3 color(0.55 + 0.25 * std::sin(0.9 * x + 0.3 * y),
                       0.50 + 0.20 * std::cos(0.7 * y - 0.2 * x),
                       0.45 + 0.20 * std::sin(0.5 * x - 0.8 * y + 1.0));
      f.means.push_back(Vec3(x, y, kBackdropZ));
      f.log_scales.push_back(Vec3(std::log(0.75 * spacing), std::log(0.75 * spacing), std::log(0.006)));
      f.rotations.push_back(UnitQuaternion());
      f.colors.push_back(to_logit(color));
      f.opacity_logits.push_back(logit(0.98));
      f.is_dynamic.push_back(0);
      f.instance_id.push_back(0);
      part.push_back(0);
    }
  }
}

Rigid body_motion(const ObjectMotion& m, const Vec3& center, double t) {
  Rigid r;
  r.rotation = so3_exp(m.angular_velocity * t);
  r.translation = center + m.velocity * t - r.rotation * center;
  return r;
}

Mat4 look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  const Vec3 x = Vec3::UnitY().cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat4 m = Mat4::Identity();
  m.block<1, 3>(0, 0) = x.transpose();
  m.block<1, 3>(1, 0) = y.transpose();
  m.block<1, 3>(2, 0) = z.transpose();
  const Vec3 t = -(m.block<3, 3>(0, 0) * eye);
  m.block<3, 1>(0, 3) = t;
  // Stored cameras must be exact in 32-bit floats.
  for (int i = 0; i < 16; ++i) m(i / 4, i % 4) = to_f32(m(i / 4, i % 4));
  return m;
}

// Analytic motion of the scene.
class SceneMotion {
 public:
  SceneMotion(const SceneSpec& spec, std::vector<Body> bodies, std::vector<ObjectMotion> motions)
      : spec_(spec), bodies_(std::move(bodies)), motions_(std::move(motions)) {}

  double tau(int t) const { return static_cast<double>(t) / (spec_.frames - 1); }

  double hinge_angle(int t) const {
    return spec_.amplitude * spec_.hinge_max_angle * (0.5 - 0.5 * std::cos(std::numbers::pi * tau(t)));
  }
  static Vec3 hinge_point() { return {-0.42, -0.12, 0.0}; }
  static Vec3 hinge_axis() { return {0.0, 0.0, -1.0}; }

  // Rigid motion of a part (the deformable body's rigid component).
  Rigid part_rigid(int part, int t) const {
    if (part == 0) return Rigid{};
    if (spec_.kind == SceneKind::Rigid) {
      const Body& b = bodies_[part - 1];
      return body_motion(motions_[part - 1], b.center, t);
    }
    const Rigid base = body_motion(motions_[0], bodies_[0].center, t);
    if (spec_.kind == SceneKind::Articulated && part == 2) {
      Rigid h;
      h.rotation = so3_exp(hinge_axis() * hinge_angle(t));
      h.translation = hinge_point() - h.rotation * hinge_point();
      return base * h;
    }
    return base;
  }

  Vec3 displacement(const Vec3& x0, int t) const {
    if (spec_.kind != SceneKind::Deformable || t == 0) return Vec3::Zero();
    auto field = [&](double tt) {
      const Body& b = bodies_[0];
      const double u = (x0.x() - b.center.x()) / b.radii.x();
      const double bend = spec_.amplitude * spec_.bend * std::sin(2.0 * std::numbers::pi * tt) * u * u;
      const double ripple =
          spec_.amplitude * spec_.ripple * std::sin(3.0 * std::numbers::pi * tt + 5.0 * u);
      return Vec3(0.0, bend + ripple, 0.5 * bend);
    };
    return field(tau(t)) - field(0.0);
  }

  Vec3 advect(int part, const Vec3& x0, int t) const {
    if (part == 0) return x0;
    return part_rigid(part, t).apply(x0 + displacement(x0, t));
  }

  // Part of an object point given its canonical position and instance.
  int part_of(int instance, const Vec3& x0) const {
    if (instance == 0) return 0;
    if (spec_.kind == SceneKind::Rigid) return instance;
    if (spec_.kind == SceneKind::Articulated) return x0.y() < -0.1 ? 2 : 1;
    return 1;
  }

 private:
  const SceneSpec& spec_;
  std::vector<Body> bodies_;
  std::vector<ObjectMotion> motions_;
};

std::vector<Body> make_bodies(SceneKind kind) {
  std::vector<Body> b;
  switch (kind) {
    case SceneKind::Rigid:
      b.push_back({Vec3(-0.55, 0.05, 0.0), Vec3(0.35, 0.28, 0.3), 1, 1, Vec3(0.75, 0.35, 0.3),
                   Vec3(0.0, 1.0, 2.0)});
      b.push_back({Vec3(0.55, -0.1, 0.3), Vec3(0.3, 0.3, 0.25), 2, 2, Vec3(0.3, 0.45, 0.75),
                   Vec3(2.0, 0.5, 1.0)});
      break;
    case SceneKind::Articulated:
      b.push_back({Vec3(0.0, 0.1, 0.0), Vec3(0.45, 0.2, 0.35), 1, 1, Vec3(0.7, 0.55, 0.3),
                   Vec3(0.0, 1.0, 2.0)});
      b.push_back({Vec3(0.0, -0.17, 0.0), Vec3(0.42, 0.07, 0.33), 2, 1, Vec3(0.35, 0.6, 0.45),
                   Vec3(1.5, 0.3, 2.5)});
      break;
    case SceneKind::Deformable:
      b.push_back({Vec3(0.0, 0.0, 0.0), Vec3(0.7, 0.22, 0.25), 1, 1, Vec3(0.65, 0.4, 0.55),
                   Vec3(0.5, 2.0, 1.0)});
      break;
  }
  return b;
}

std::vector<ObjectMotion> default_motions(const SceneSpec& spec, std::size_t count,
                                          std::mt19937_64& rng) {
  std::vector<ObjectMotion> out;
  std::normal_distribution<double> normal(0.0, 1.0);
  const double frames = spec.frames - 1;
  const bool rigid = spec.kind == SceneKind::Rigid;
  const double travel = rigid ? 0.3 : 0.12;
  const double turn = rigid ? 0.6 : 0.25;
  for (std::size_t i = 0; i < count; ++i) {
    Vec3 v(normal(rng), normal(rng), 0.3 * normal(rng));
    Vec3 w(0.4 * normal(rng), normal(rng), 0.5 * normal(rng));
    ObjectMotion m;
    m.velocity = v.normalized() * travel / frames;
    m.angular_velocity = w.normalized() * turn / frames;
    out.push_back(m);
  }
  return out;
}

struct FrameRender {
  RenderOutput out;
  Mask instances;
};

PosedGaussianField pose_truth(const CanonicalGaussianField& f, const std::vector<int>& part,
                              const SceneMotion& motion, int t) {
  PosedGaussianField p;
  const std::size_t n = f.count();
  p.means.resize(n);
  p.covariances.resize(n);
  p.colors.resize(n);
  p.opacities.resize(n);
  p.is_dynamic = f.is_dynamic;
  for (std::size_t i = 0; i < n; ++i) {
    const Rigid r = motion.part_rigid(part[i], t);
    p.means[i] = motion.advect(part[i], f.means[i], t);
    const Mat3 cov = assemble_covariance(f.log_scales[i], f.rotations[i]);
    p.covariances[i] = r.rotation * cov * r.rotation.transpose();
    p.colors[i] = Vec3(sigmoid(f.colors[i].x()), sigmoid(f.colors[i].y()), sigmoid(f.colors[i].z()));
    p.opacities[i] = sigmoid(f.opacity_logits[i]);
  }
  return p;
}

FrameRender render_truth(const PosedGaussianField& posed, const CanonicalGaussianField& f,
                         int instances, const Camera& cam) {
  FrameRender fr;
  fr.out = rasterize(posed, cam);
  fr.instances = Mask(cam.width, cam.height, 0);
  for (int k = 1; k <= instances; ++k) {
    const RenderOutput* src = &fr.out;
    RenderOutput single;
    if (instances > 1) {
      PosedGaussianField only = posed;
      for (std::size_t i = 0; i < only.count(); ++i) only.is_dynamic[i] = f.instance_id[i] == k;
      single = rasterize(only, cam);
      src = &single;
    }
    for (std::size_t p = 0; p < fr.instances.data.size(); ++p) {
      if (src->dynamic_alpha[p] > 0.5) fr.instances.data[p] = static_cast<std::uint8_t>(k);
    }
  }
  return fr;
}

DepthMap to_depth(const RenderOutput& r) {
  DepthMap d(r.width, r.height);
  for (std::size_t p = 0; p < d.data.size(); ++p) d.data[p] = static_cast<float>(r.depth[p]);
  return d;
}

struct PixelHit {
  bool inside = false;
  int x = 0, y = 0;
  double z = 0.0;
};

PixelHit project_pixel(const Camera& cam, const Rigid& w2c, const Vec3& world) {
  PixelHit h;
  const Vec3 pc = w2c.apply(world);
  if (pc.z() <= 1e-6) return h;
  const long x = std::lround(cam.fx * pc.x() / pc.z() + cam.cx);
  const long y = std::lround(cam.fy * pc.y() / pc.z() + cam.cy);
  if (x < 0 || y < 0 || x >= cam.width || y >= cam.height) return h;
  h.inside = true;
  h.x = static_cast<int>(x);
  h.y = static_cast<int>(y);
  h.z = pc.z();
  return h;
}

bool depth_agrees(const PixelHit& h, const DepthMap& depth, const RenderOutput& r, double tol) {
  if (!h.inside) return false;
  const std::size_t p = static_cast<std::size_t>(h.y) * depth.width + h.x;
  const double d = depth.data[p];
  return r.alpha[p] > 0.5 && d > 0.0 && std::abs(h.z - d) <= tol * d;
}

}  // namespace

GeneratedScene generate(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  GeneratedScene out;
  GroundTruth& truth = out.truth;
  SceneDataset& ds = out.dataset;

  const std::vector<Body> bodies = make_bodies(spec.kind);
  const std::size_t moving = spec.kind == SceneKind::Rigid ? bodies.size() : 1;
  std::vector<ObjectMotion> motions = spec.motions;
  if (motions.empty()) motions = default_motions(spec, moving, rng);
  if (motions.size() != moving) {
    throw Error(ErrorKind::Validation, "scene needs " + std::to_string(moving) + " body motions");
  }
  for (ObjectMotion& m : motions) {
    m.velocity *= spec.amplitude;
    m.angular_velocity *= spec.amplitude;
  }
  const SceneMotion motion(spec, bodies, motions);
  const int instances = spec.kind == SceneKind::Rigid ? static_cast<int>(bodies.size()) : 1;

  add_backdrop(truth.field, truth.part);
  for (const Body& b : bodies) add_ellipsoid(truth.field, truth.part, b, 0.04);
  const int parts = static_cast<int>(bodies.size());
  for (int p = 1; p <= parts; ++p) truth.part_instance.push_back(bodies[p - 1].instance);
  truth.hinge_point = SceneMotion::hinge_point();
  truth.hinge_axis = SceneMotion::hinge_axis();

  const int frames = spec.frames;
  for (int t = 0; t < frames; ++t) {
    std::vector<Rigid> per_part;
    for (int p = 1; p <= parts; ++p) per_part.push_back(motion.part_rigid(p, t));
    truth.part_motion.push_back(per_part);
    truth.hinge_angle.push_back(spec.kind == SceneKind::Articulated ? motion.hinge_angle(t) : 0.0);
  }

  // Cameras.
  Intrinsics& k = ds.intrinsics;
  k.width = spec.width;
  k.height = spec.height;
  const double f = 0.5 * spec.width / std::tan(0.5 * spec.fov_deg * std::numbers::pi / 180.0);
  k.fx = static_cast<float>(f);
  k.fy = static_cast<float>(f);
  k.cx = 0.5 * (spec.width - 1);
  k.cy = 0.5 * (spec.height - 1);
  const Vec3 target(0.0, 0.0, 0.3);
  ds.frames = frames;
  for (int t = 0; t < frames; ++t) {
    const double tau = motion.tau(t);
    const double sweep = spec.amplitude * spec.sweep;
    const Vec3 eye(sweep * (2.0 * tau - 1.0), 0.2 * sweep * std::sin(2.0 * std::numbers::pi * tau),
                   -spec.camera_distance);
    ds.train.cameras.push_back(look_at(eye, target));
    const Vec3 eval_eye = Vec3(0.0, 0.0, -spec.camera_distance) + spec.eval_offset;
    ds.eval.cameras.push_back(look_at(eval_eye, target));
  }

  // Render every frame from both cameras.
  std::vector<RenderOutput> train_out(frames), eval_out(frames);
  for (int t = 0; t < frames; ++t) {
    const PosedGaussianField posed = pose_truth(truth.field, truth.part, motion, t);
    FrameRender tr = render_truth(posed, truth.field, instances, ds.camera(t));
    ds.train.rgb.push_back(to_rgb8(tr.out.color_image()));
    ds.train.depth.push_back(to_depth(tr.out));
    ds.train.masks.push_back(std::move(tr.instances));
    train_out[t] = std::move(tr.out);

    FrameRender ev = render_truth(posed, truth.field, instances, ds.eval_camera(t));
    ds.eval.rgb.push_back(to_rgb8(ev.out.color_image()));
    ds.eval.depth.push_back(to_depth(ev.out));
    ds.eval.masks.push_back(std::move(ev.instances));
    eval_out[t] = std::move(ev.out);
  }
  std::vector<Rigid> train_w2c;
  for (int t = 0; t < frames; ++t) train_w2c.push_back(ds.camera(t).world_to_camera.to_rigid());

  // Covisibility: carry each held-out pixel's canonical point to every
  // training frame and depth-test it there.
  for (int t = 0; t < frames; ++t) {
    const PosedGaussianField posed = pose_truth(truth.field, truth.part, motion, t);
    PosedGaussianField canon = posed;
    canon.colors = truth.field.means;
    const Camera cam = ds.eval_camera(t);
    const RenderOutput cr = rasterize(canon, cam);
    Mask covis(spec.width, spec.height, 0);
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * spec.width + x;
        if (!(cr.alpha[p] > 0.5)) continue;
        const Vec3 x0 = Vec3(cr.color[p * 3], cr.color[p * 3 + 1], cr.color[p * 3 + 2]) / cr.alpha[p];
        const int part = motion.part_of(ds.eval.masks[t].data[p], x0);
        for (int s = 0; s < frames; ++s) {
          const PixelHit h = project_pixel(ds.camera(s), train_w2c[s], motion.advect(part, x0, s));
          if (depth_agrees(h, ds.train.depth[s], train_out[s], 0.01)) {
            covis.data[p] = 255;
            break;
          }
        }
      }
    }
    ds.eval.covisibility.push_back(std::move(covis));
  }

  // Tracks: surface points of the moving parts advected by the true motion.
  std::vector<int> object_ids;
  for (std::size_t i = 0; i < truth.field.count(); ++i) {
    if (truth.part[i] > 0) object_ids.push_back(static_cast<int>(i));
  }
  std::shuffle(object_ids.begin(), object_ids.end(), rng);
  const int m = std::min<int>(spec.track_count, static_cast<int>(object_ids.size()));
  object_ids.resize(m);
  std::sort(object_ids.begin(), object_ids.end());
  ds.tracks = TrackSet(m, frames);
  truth.track_positions.resize(static_cast<std::size_t>(m) * frames);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int j = 0; j < m; ++j) {
    const int g = object_ids[j];
    truth.track_canonical.push_back(truth.field.means[g]);
    truth.track_part.push_back(truth.part[g]);
    for (int t = 0; t < frames; ++t) {
      const Vec3 x = motion.advect(truth.part[g], truth.field.means[g], t);
      const std::size_t i = ds.tracks.at(j, t);
      truth.track_positions[i] = x;
      const PixelHit h = project_pixel(ds.camera(t), train_w2c[t], x);
      const bool vis = depth_agrees(h, ds.train.depth[t], train_out[t], 0.01);
      Vec3 observed = x;
      double conf = vis ? 1.0 : 0.0;
      if (vis && spec.noise_track > 0.0) {
        const Camera cam = ds.camera(t);
        const Vec2 e(spec.noise_track * normal(rng), spec.noise_track * normal(rng));
        Vec3 pc = train_w2c[t].apply(x);
        pc.x() += e.x() * pc.z() / cam.fx;
        pc.y() += e.y() * pc.z() / cam.fy;
        observed = train_w2c[t].inverse().apply(pc);
        conf = std::exp(-0.5 * e.squaredNorm() / (spec.noise_track * spec.noise_track));
      }
      ds.tracks.positions[i] = Vec3(to_f32(observed.x()), to_f32(observed.y()), to_f32(observed.z()));
      ds.tracks.visible[i] = vis ? 1 : 0;
      ds.tracks.confidence[i] = to_f32(conf);
    }
  }

  if (spec.noise_depth > 0.0) {
    for (DepthMap& d : ds.train.depth) {
      for (float& v : d.data) v = static_cast<float>(v * (1.0 + spec.noise_depth * normal(rng)));
    }
  }

  bool any_visible = false;
  for (auto v : ds.tracks.visible) any_visible = any_visible || v != 0;
  ds.canonical_frame = any_visible ? select_canonical_frame(ds.tracks) : 0;
  derive_track_instances(ds);
  ds.validate();
  return out;
}

VerifyReport verify_dataset(const SceneDataset& ds) {
  VerifyReport rep;
  const TrackSet& tr = ds.tracks;
  std::size_t mask_hits = 0;
  std::size_t mask_samples = 0;
  for (int t = 0; t < ds.frames; ++t) {
    const Camera cam = ds.camera(t);
    const Rigid w2c = cam.world_to_camera.to_rigid();
    const DepthMap& depth = ds.train.depth[t];
    std::size_t outside = 0, depth_bad = 0, visible = 0, nonfinite = 0;
    for (float v : depth.data) nonfinite += std::isfinite(v) ? 0 : 1;
    for (int j = 0; j < tr.count; ++j) {
      if (!tr.is_visible(j, t)) continue;
      ++visible;
      const PixelHit h = project_pixel(cam, w2c, tr.position(j, t));
      if (!h.inside) {
        ++outside;
        continue;
      }
      const double d = depth.at(h.x, h.y);
      if (!(d > 0.0) || std::abs(h.z - d) > 0.02 * d) ++depth_bad;
      if (tr.instance_id[j] > 0) {
        ++mask_samples;
        mask_hits += ds.train.masks[t].at(h.x, h.y) == tr.instance_id[j] ? 1 : 0;
      }
    }
    rep.visible_samples += visible;
    std::ostringstream msg;
    if (nonfinite > 0) {
      msg << "frame " << t << ": " << nonfinite << " non-finite depth values";
      rep.violations.push_back(msg.str());
      msg.str("");
    }
    if (outside > 0) {
      msg << "frame " << t << ": " << outside << " of " << visible
          << " visible tracks project outside the image";
      rep.violations.push_back(msg.str());
      msg.str("");
    }
    if (depth_bad > 0) {
      char file[32];
      std::snprintf(file, sizeof(file), "depth/%05d.f32", t);
      msg << "frame " << t << ": " << depth_bad << " of " << visible << " visible tracks disagree with "
          << file << " by more than 2%";
      rep.violations.push_back(msg.str());
    }
  }
  if (mask_samples > 0 && static_cast<double>(mask_hits) < 0.95 * static_cast<double>(mask_samples)) {
    std::ostringstream msg;
    msg << "masks cover only " << mask_hits << " of " << mask_samples
        << " visible track samples of their instance (< 95%)";
    rep.violations.push_back(msg.str());
  }
  return rep;
}

}  // namespace msdyn
