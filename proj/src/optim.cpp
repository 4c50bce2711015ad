#include "msdyn/optim.hpp"
#include "msdyn/error.hpp"
#include "msdyn/log.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace msdyn {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Adam

void AdamMoments::update(std::size_t offset, std::span<const double> grads, double lr, long step,
                         const AdamConfig& cfg, std::span<double> delta) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    double& m = m_[offset + i];
    double& v = v_[offset + i];
    const double g = grads[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    delta[i] = -lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
  }
}

void AdamMoments::step(std::size_t offset, std::span<double> params, std::span<const double> grads,
                       double lr, long step, const AdamConfig& cfg) {
  std::vector<double> delta(grads.size());
  update(offset, grads, lr, step, cfg, delta);
  for (std::size_t i = 0; i < grads.size(); ++i) params[i] += delta[i];
}

void AdamMoments::remap(std::span<const int> source, std::span<const std::uint8_t> is_new,
                        int stride) {
  std::vector<double> m(source.size() * stride, 0.0);
  std::vector<double> v(source.size() * stride, 0.0);
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (is_new[i]) continue;
    const std::size_t s = static_cast<std::size_t>(source[i]) * stride;
    for (int c = 0; c < stride; ++c) {
      m[i * stride + c] = m_[s + c];
      v[i * stride + c] = v_[s + c];
    }
  }
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---------------------------------------------------------------------------
// Config

void OptimConfig::validate() const {
  if (epochs < 0) throw Error(ErrorKind::Validation, "epochs must be >= 0");
  for (double r : {lr.means, lr.means_final, lr.log_scales, lr.rotations, lr.colors, lr.opacity,
                   lr.pattern_translation, lr.pattern_rotation, lr.blend_logits}) {
    if (!std::isfinite(r) || r < 0.0) {
      throw Error(ErrorKind::Validation, "learning rates must be finite and non-negative");
    }
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
      !(adam.eps > 0.0)) {
    throw Error(ErrorKind::Validation, "invalid Adam constants");
  }
  weights.validate();
  if (!(ssim_weight >= 0.0 && ssim_weight <= 1.0)) {
    throw Error(ErrorKind::Validation, "ssim weight must lie in [0, 1]");
  }
  if (hierarchy.active_levels < 1 || hierarchy.active_levels > kLevels) {
    throw Error(ErrorKind::Validation, "levels must be 1, 2 or 3");
  }
  if (hierarchy.k_primitive < 1 || hierarchy.k_grain < 1) {
    throw Error(ErrorKind::Validation, "cluster counts must be >= 1");
  }
  if (target_dynamic < 1 || target_static < 0) {
    throw Error(ErrorKind::Validation, "invalid Gaussian count targets");
  }
  if (densify_every < 0) throw Error(ErrorKind::Validation, "densify_every must be >= 0");
}

std::string OptimConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["seed"] = seed;
  j["lr"] = {{"means", lr.means},
             {"means_final", lr.means_final},
             {"log_scales", lr.log_scales},
             {"rotations", lr.rotations},
             {"colors", lr.colors},
             {"opacity", lr.opacity},
             {"pattern_translation", lr.pattern_translation},
             {"pattern_rotation", lr.pattern_rotation},
             {"blend_logits", lr.blend_logits}};
  j["adam"] = {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
  j["loss_weights"] = {weights.rgb, weights.mask, weights.depth, weights.track,
                       weights.local_rigid};
  j["ssim_weight"] = ssim_weight;
  j["hierarchy"] = {{"k_primitive", hierarchy.k_primitive},
                    {"k_grain", hierarchy.k_grain},
                    {"levels", hierarchy.active_levels},
                    {"kmeans_iterations", hierarchy.kmeans_iterations},
                    {"temperature_scale", hierarchy.temperature_scale}};
  j["densify"] = {{"every", densify_every},
                  {"until", densify_until},
                  {"grad_threshold", densify.grad_threshold},
                  {"prune_opacity", densify.prune_opacity},
                  {"split_scale_threshold", densify.split_scale_threshold},
                  {"split_divisor", densify.split_divisor},
                  {"max_gaussians", densify.max_gaussians}};
  j["target_dynamic"] = target_dynamic;
  j["target_static"] = target_static;
  j["seed_static_all_frames"] = seed_static_all_frames;
  j["rigidity_neighbours"] = rigidity_neighbours;
  return j.dump();
}

OptimConfig OptimConfig::from_json(const std::string& text) {
  OptimConfig c;
  try {
    const json j = json::parse(text);
    auto get = [&](const json& obj, const char* key, auto& dst) {
      if (obj.contains(key)) dst = obj.at(key).get<std::decay_t<decltype(dst)>>();
    };
    get(j, "epochs", c.epochs);
    get(j, "seed", c.seed);
    if (j.contains("lr")) {
      const json& l = j.at("lr");
      get(l, "means", c.lr.means);
      get(l, "means_final", c.lr.means_final);
      get(l, "log_scales", c.lr.log_scales);
      get(l, "rotations", c.lr.rotations);
      get(l, "colors", c.lr.colors);
      get(l, "opacity", c.lr.opacity);
      get(l, "pattern_translation", c.lr.pattern_translation);
      get(l, "pattern_rotation", c.lr.pattern_rotation);
      get(l, "blend_logits", c.lr.blend_logits);
    }
    if (j.contains("adam")) {
      get(j.at("adam"), "beta1", c.adam.beta1);
      get(j.at("adam"), "beta2", c.adam.beta2);
      get(j.at("adam"), "eps", c.adam.eps);
    }
    if (j.contains("loss_weights")) {
      const auto w = j.at("loss_weights").get<std::vector<double>>();
      if (w.size() != 5) throw Error(ErrorKind::Validation, "loss_weights needs 5 values");
      c.weights = {w[0], w[1], w[2], w[3], w[4]};
    }
    get(j, "ssim_weight", c.ssim_weight);
    if (j.contains("hierarchy")) {
      const json& h = j.at("hierarchy");
      get(h, "k_primitive", c.hierarchy.k_primitive);
      get(h, "k_grain", c.hierarchy.k_grain);
      get(h, "levels", c.hierarchy.active_levels);
      get(h, "kmeans_iterations", c.hierarchy.kmeans_iterations);
      get(h, "temperature_scale", c.hierarchy.temperature_scale);
    }
    if (j.contains("densify")) {
      const json& d = j.at("densify");
      get(d, "every", c.densify_every);
      get(d, "until", c.densify_until);
      get(d, "grad_threshold", c.densify.grad_threshold);
      get(d, "prune_opacity", c.densify.prune_opacity);
      get(d, "split_scale_threshold", c.densify.split_scale_threshold);
      get(d, "split_divisor", c.densify.split_divisor);
      get(d, "max_gaussians", c.densify.max_gaussians);
    }
    get(j, "target_dynamic", c.target_dynamic);
    get(j, "target_static", c.target_static);
    get(j, "seed_static_all_frames", c.seed_static_all_frames);
    get(j, "rigidity_neighbours", c.rigidity_neighbours);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Validation, std::string("config: ") + e.what());
  }
  c.hierarchy.seed = c.seed;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Initialisation

TrainingData prepare_training_data(const SceneDataset& ds) {
  TrainingData d;
  d.dataset = &ds;
  for (int t = 0; t < ds.frames; ++t) {
    d.cameras.push_back(ds.camera(t));
    d.rgb.push_back(to_double(ds.train.rgb[t]));
    Mask dyn(ds.intrinsics.width, ds.intrinsics.height, 0);
    for (std::size_t p = 0; p < dyn.data.size(); ++p) dyn.data[p] = ds.train.masks[t].data[p] != 0;
    d.dynamic.push_back(std::move(dyn));
  }
  return d;
}

std::vector<Vec2> stride_samples(const Mask& selected, double stride) {
  std::vector<Vec2> out;
  if (!(stride > 0.0)) return out;
  for (int iy = 0;; ++iy) {
    const double y = stride * (iy + 0.5) - 0.5;
    if (y > selected.height - 0.5) break;
    const int py = std::clamp(static_cast<int>(std::lround(y)), 0, selected.height - 1);
    for (int ix = 0;; ++ix) {
      const double x = stride * (ix + 0.5) - 0.5;
      if (x > selected.width - 0.5) break;
      const int px = std::clamp(static_cast<int>(std::lround(x)), 0, selected.width - 1);
      if (selected.at(px, py) != 0) out.emplace_back(x, y);
    }
  }
  return out;
}

StrideChoice choose_stride(const Mask& selected, std::size_t target) {
  std::size_t pixels = 0;
  for (auto v : selected.data) pixels += v != 0 ? 1 : 0;
  StrideChoice best;
  if (pixels == 0 || target == 0) return best;
  double stride = std::sqrt(static_cast<double>(pixels) / static_cast<double>(target));
  best.stride = stride;
  best.count = stride_samples(selected, stride).size();
  for (int it = 0; it < 12; ++it) {
    const std::size_t n = stride_samples(selected, stride).size();
    const auto err = [&](std::size_t c) {
      return std::abs(static_cast<double>(c) - static_cast<double>(target));
    };
    if (err(n) < err(best.count)) {
      best.stride = stride;
      best.count = n;
    }
    if (n == 0) {
      stride *= 0.5;
      continue;
    }
    stride *= std::sqrt(static_cast<double>(n) / static_cast<double>(target));
  }
  return best;
}

namespace {

struct Seed {
  Vec3 position;
  Vec3 color;
  int instance = 0;
};

Vec3 unproject(const Camera& cam, const Rigid& c2w, const Vec2& pix, double depth) {
  const Vec3 pc((pix.x() - cam.cx) / cam.fx * depth, (pix.y() - cam.cy) / cam.fy * depth, depth);
  return c2w.apply(pc);
}

std::vector<Seed> seeds_from_frame(const SceneDataset& ds, int t, const Mask& selected,
                                   double stride) {
  const Camera cam = ds.camera(t);
  const Rigid c2w = cam.world_to_camera.to_rigid().inverse();
  std::vector<Seed> out;
  for (const Vec2& s : stride_samples(selected, stride)) {
    const int px = std::clamp(static_cast<int>(std::lround(s.x())), 0, cam.width - 1);
    const int py = std::clamp(static_cast<int>(std::lround(s.y())), 0, cam.height - 1);
    const double d = ds.train.depth[t].at(px, py);
    if (!(d > 0.0) || !std::isfinite(d)) continue;
    Seed seed;
    seed.position = unproject(cam, c2w, s, d);
    const auto& rgb = ds.train.rgb[t];
    seed.color = Vec3(rgb.at(px, py, 0), rgb.at(px, py, 1), rgb.at(px, py, 2)) / 255.0;
    seed.instance = ds.train.masks[t].at(px, py);
    out.push_back(seed);
  }
  return out;
}

// Uniform hash grid for radius queries.
class PointGrid {
 public:
  explicit PointGrid(double cell) : cell_(cell) {}
  void insert(const Vec3& p) {
    cells_[key(cell_of(p))].push_back(p);
  }
  bool any_within(const Vec3& p, double r) const {
    const Eigen::Vector3i c = cell_of(p);
    const int reach = static_cast<int>(std::ceil(r / cell_));
    for (int dz = -reach; dz <= reach; ++dz) {
      for (int dy = -reach; dy <= reach; ++dy) {
        for (int dx = -reach; dx <= reach; ++dx) {
          const auto it = cells_.find(key(c + Eigen::Vector3i(dx, dy, dz)));
          if (it == cells_.end()) continue;
          for (const Vec3& q : it->second) {
            if ((q - p).squaredNorm() < r * r) return true;
          }
        }
      }
    }
    return false;
  }

 private:
  Eigen::Vector3i cell_of(const Vec3& p) const {
    return {static_cast<int>(std::floor(p.x() / cell_)), static_cast<int>(std::floor(p.y() / cell_)),
            static_cast<int>(std::floor(p.z() / cell_))};
  }
  static std::int64_t key(const Eigen::Vector3i& c) {
    return (static_cast<std::int64_t>(c.x() & 0x1FFFFF) << 42) |
           (static_cast<std::int64_t>(c.y() & 0x1FFFFF) << 21) |
           static_cast<std::int64_t>(c.z() & 0x1FFFFF);
  }
  double cell_;
  std::unordered_map<std::int64_t, std::vector<Vec3>> cells_;
};

std::vector<double> mean_three_nn(const std::vector<Vec3>& pts) {
  const auto n = static_cast<std::ptrdiff_t>(pts.size());
  std::vector<double> out(pts.size(), 0.0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    std::array<double, 3> best{1e300, 1e300, 1e300};
    for (std::ptrdiff_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (pts[j] - pts[i]).squaredNorm();
      if (d < best[2]) {
        best[2] = d;
        std::sort(best.begin(), best.end());
      }
    }
    double sum = 0.0;
    int k = 0;
    for (double b : best) {
      if (b < 1e300) {
        sum += std::sqrt(b);
        ++k;
      }
    }
    out[i] = k > 0 ? sum / k : 0.01;
  }
  return out;
}

void reset_optimizer(TrainState& s) {
  const std::size_t n = s.field.count();
  s.opt.means.resize(3 * n);
  s.opt.log_scales.resize(3 * n);
  s.opt.rotations.resize(4 * n);
  s.opt.colors.resize(3 * n);
  s.opt.opacity.resize(n);
  s.opt.logits.resize(kLevels * kMaxCandidates * n);
  for (int l = 0; l < kLevels; ++l) {
    const std::size_t cells = static_cast<std::size_t>(s.dyn.frames) * s.dyn.levels[l].pattern_count;
    s.opt.pattern_translation[l].resize(3 * cells);
    s.opt.pattern_rotation[l].resize(3 * cells);
  }
  s.opt.step = 0;
  s.opt.frame_steps.assign(s.dyn.frames, 0);
  s.grad_accum.assign(n, 0.0);
  s.grad_count.assign(n, 0);
}

}  // namespace

TrainState initialize(const SceneDataset& ds, const OptimConfig& config) {
  config.validate();
  if (ds.frames < 1 || ds.train.size() == 0) {
    throw Error(ErrorKind::EmptyDataset, "dataset has no training frames");
  }
  ds.validate();
  if (ds.tracks.count == 0) throw Error(ErrorKind::EmptyTracks, "dataset has no tracks");
  const int t0 = select_canonical_frame(ds.tracks);

  Mask dynamic_sel(ds.intrinsics.width, ds.intrinsics.height, 0);
  Mask static_sel(ds.intrinsics.width, ds.intrinsics.height, 0);
  for (std::size_t p = 0; p < dynamic_sel.data.size(); ++p) {
    const bool dyn = ds.train.masks[t0].data[p] != 0;
    dynamic_sel.data[p] = dyn;
    static_sel.data[p] = !dyn;
  }
  if (std::none_of(dynamic_sel.data.begin(), dynamic_sel.data.end(), [](auto v) { return v; })) {
    throw Error(ErrorKind::NoDynamicPixels,
                "canonical frame " + std::to_string(t0) + " has no dynamic mask pixels");
  }

  const StrideChoice dyn_stride = choose_stride(dynamic_sel, config.target_dynamic);
  std::vector<Seed> dyn_seeds = seeds_from_frame(ds, t0, dynamic_sel, dyn_stride.stride);
  std::vector<Seed> static_seeds;
  if (config.target_static > 0) {
    const StrideChoice st = choose_stride(static_sel, config.target_static);
    static_seeds = seeds_from_frame(ds, t0, static_sel, st.stride);
    if (config.seed_static_all_frames && !static_seeds.empty()) {
      // World spacing of the sample grid, from the canonical view.
      const double fx = ds.intrinsics.fx;
      double mean_depth = 0.0;
      for (const Seed& s : static_seeds) {
        mean_depth += ds.camera(t0).world_to_camera.to_rigid().apply(s.position).z();
      }
      mean_depth /= static_cast<double>(static_seeds.size());
      const double radius = 0.9 * st.stride * mean_depth / fx;
      PointGrid grid(radius);
      for (const Seed& s : static_seeds) grid.insert(s.position);
      for (int t = 0; t < ds.frames; ++t) {
        if (t == t0) continue;
        Mask sel(ds.intrinsics.width, ds.intrinsics.height, 0);
        for (std::size_t p = 0; p < sel.data.size(); ++p) sel.data[p] = ds.train.masks[t].data[p] == 0;
        for (const Seed& s : seeds_from_frame(ds, t, sel, st.stride)) {
          if (grid.any_within(s.position, radius)) continue;
          grid.insert(s.position);
          static_seeds.push_back(s);
        }
      }
    }
  }

  TrainState state;
  state.rng.seed(config.seed ^ 0xA24BAED4963EE407ULL);
  CanonicalGaussianField& f = state.field;
  std::vector<Vec3> positions;
  for (const Seed& s : dyn_seeds) positions.push_back(s.position);
  for (const Seed& s : static_seeds) positions.push_back(s.position);
  const std::vector<double> nn = mean_three_nn(positions);
  f.reserve(positions.size());
  auto add = [&](const Seed& s, std::size_t i, bool dynamic) {
    f.means.push_back(s.position);
    f.log_scales.push_back(Vec3::Constant(std::log(std::max(nn[i], 1e-4))));
    f.rotations.push_back(UnitQuaternion());
    f.colors.push_back(Vec3(logit(std::clamp(s.color.x(), 0.02, 0.98)),
                            logit(std::clamp(s.color.y(), 0.02, 0.98)),
                            logit(std::clamp(s.color.z(), 0.02, 0.98))));
    f.opacity_logits.push_back(logit(0.1));
    f.is_dynamic.push_back(dynamic ? 1 : 0);
    f.instance_id.push_back(dynamic ? s.instance : 0);
  };
  for (std::size_t i = 0; i < dyn_seeds.size(); ++i) add(dyn_seeds[i], i, true);
  for (std::size_t i = 0; i < static_seeds.size(); ++i) {
    add(static_seeds[i], dyn_seeds.size() + i, false);
  }

  HierarchyOptions h = config.hierarchy;
  h.seed = config.seed;
  state.dyn.levels = build_levels(ds.tracks, t0, h);
  state.dyn.canonical_frame = t0;
  state.dyn.frames = ds.frames;
  state.dyn.weights = init_blend_weights(f, state.dyn.levels, h);
  state.binding = bind_tracks(ds.tracks, t0, state.dyn.levels, h);
  state.graph = build_rigidity_graph(f, config.rigidity_neighbours);
  reset_optimizer(state);
  return state;
}

// ---------------------------------------------------------------------------
// Training

RenderOutput render_frame(const CanonicalGaussianField& field, const MSDynamics& dyn,
                          const Camera& cam, int t, const RenderOptions& opts) {
  const std::vector<Rigid> transforms = evaluate_rigid(dyn.levels, dyn.weights, t);
  return rasterize(pose_field(field, transforms), cam, opts);
}

namespace {

const char* term_name(int i) {
  static const char* names[] = {"rgb", "mask", "depth", "track", "local_rigid", "total"};
  return names[i];
}

void check_finite(const LossReport& r, int epoch, int t, std::size_t gaussians) {
  const double v[] = {r.rgb, r.mask, r.depth, r.track, r.local_rigid, r.total};
  for (int i = 0; i < 6; ++i) {
    if (std::isfinite(v[i])) continue;
    std::ostringstream msg;
    msg << "epoch " << epoch << " frame " << t << ": term " << term_name(i)
        << " is not finite (rgb=" << r.rgb << " mask=" << r.mask << " depth=" << r.depth
        << " track=" << r.track << " local_rigid=" << r.local_rigid << ", " << gaussians
        << " Gaussians)";
    throw Error(ErrorKind::NonFiniteLoss, msg.str());
  }
}

LossReport forward_backward(const TrainState& state, const TrainingData& data,
                            const OptimConfig& config, int t, ParameterGrads* grads,
                            std::vector<double>* screen_grad) {
  const SceneDataset& ds = *data.dataset;
  const Camera& cam = data.cameras[t];
  const LossWeights& w = config.weights;
  const CanonicalGaussianField& field = state.field;
  const std::vector<Rigid> transforms = evaluate_rigid(state.dyn.levels, state.dyn.weights, t);
  const PosedGaussianField posed = pose_field(field, transforms);
  const RenderOutput render = rasterize(posed, cam, config.render);

  const bool want = grads != nullptr;
  if (want) grads->dyn.resize(state.dyn.levels, field.count());
  RenderGrad rg(cam.width, cam.height);
  auto sink = [&](double weight) { return want && weight > 0.0 ? &rg : nullptr; };
  LossReport r;
  r.rgb = rgb_loss(render, data.rgb[t], nullptr, config.ssim_weight, sink(w.rgb), w.rgb);
  r.mask = mask_loss(render, data.dynamic[t], sink(w.mask), w.mask);
  r.depth = depth_loss(render, ds.train.depth[t], nullptr, std::nullopt, sink(w.depth), w.depth).value;
  r.track = track_loss(state.dyn.levels, state.binding, ds.tracks, cam, t,
                       want && w.track > 0.0 ? &grads->dyn : nullptr, w.track);
  std::vector<Vec3> g_posed, g_canon;
  const bool rigid_grad = want && w.local_rigid > 0.0;
  if (rigid_grad) {
    g_posed.assign(field.count(), Vec3::Zero());
    g_canon.assign(field.count(), Vec3::Zero());
  }
  r.local_rigid = local_rigidity_loss(state.graph, field.means, posed.means,
                                      rigid_grad ? &g_posed : nullptr,
                                      rigid_grad ? &g_canon : nullptr, w.local_rigid);
  r = total_loss(r, w);
  if (!want) return r;

  PosedFieldGrad pg = rasterize_backward(posed, cam, rg, config.render, screen_grad);
  if (rigid_grad) {
    for (std::size_t i = 0; i < field.count(); ++i) pg.means[i] += g_posed[i];
  }
  std::vector<RigidGrad> tg;
  grads->field = pose_field_backward(field, transforms, pg, &tg);
  if (rigid_grad) {
    for (std::size_t i = 0; i < field.count(); ++i) grads->field.means[i] += g_canon[i];
  }
  evaluate_backward(state.dyn.levels, state.dyn.weights, t, tg, grads->dyn);
  return r;
}

template <typename V>
std::span<double> flat(std::vector<V>& v) {
  return {v.empty() ? nullptr : v.data()->data(), v.size() * V::RowsAtCompileTime};
}

template <typename V>
std::span<const double> flat(const std::vector<V>& v) {
  return {v.empty() ? nullptr : v.data()->data(), v.size() * V::RowsAtCompileTime};
}

void apply_updates(TrainState& s, const ParameterGrads& g, const OptimConfig& config, int t,
                   long total_steps) {
  OptimizerState& o = s.opt;
  const AdamConfig& adam = config.adam;
  const long step = ++o.step;
  const long fstep = ++o.frame_steps[t];
  CanonicalGaussianField& f = s.field;
  const std::size_t n = f.count();

  const double progress =
      total_steps > 1 ? std::clamp(static_cast<double>(step - 1) / (total_steps - 1), 0.0, 1.0) : 0.0;
  double lr_means = config.lr.means;
  if (config.lr.means > 0.0 && config.lr.means_final > 0.0) {
    lr_means = std::exp((1.0 - progress) * std::log(config.lr.means) +
                        progress * std::log(config.lr.means_final));
  }
  if (lr_means > 0.0) o.means.step(0, flat(f.means), flat(g.field.means), lr_means, step, adam);
  if (config.lr.log_scales > 0.0) {
    o.log_scales.step(0, flat(f.log_scales), flat(g.field.log_scales), config.lr.log_scales, step,
                      adam);
  }
  if (config.lr.colors > 0.0) {
    o.colors.step(0, flat(f.colors), flat(g.field.colors), config.lr.colors, step, adam);
  }
  if (config.lr.opacity > 0.0) {
    o.opacity.step(0, f.opacity_logits, g.field.opacity_logits, config.lr.opacity, step, adam);
  }
  if (config.lr.rotations > 0.0) {
    std::vector<double> delta(4 * n);
    o.rotations.update(0, flat(g.field.rotations), config.lr.rotations, step, adam, delta);
    for (std::size_t i = 0; i < n; ++i) {
      const UnitQuaternion& q = f.rotations[i];
      f.rotations[i] = UnitQuaternion::from_raw(q.w() + delta[4 * i], q.x() + delta[4 * i + 1],
                                                q.y() + delta[4 * i + 2], q.z() + delta[4 * i + 3]);
    }
  }
  if (config.lr.blend_logits > 0.0) {
    constexpr int stride = kLevels * kMaxCandidates;
    std::vector<double> params(stride * n), grads(stride * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int l = 0; l < kLevels; ++l) {
        for (int c = 0; c < kMaxCandidates; ++c) {
          params[i * stride + l * kMaxCandidates + c] = s.dyn.weights.slots[i][l].logits[c];
          grads[i * stride + l * kMaxCandidates + c] = g.dyn.logits[i][l][c];
        }
      }
    }
    o.logits.step(0, params, grads, config.lr.blend_logits, step, adam);
    for (std::size_t i = 0; i < n; ++i) {
      for (int l = 0; l < kLevels; ++l) {
        BlendSlot& slot = s.dyn.weights.slots[i][l];
        for (int c = 0; c < slot.count; ++c) slot.logits[c] = params[i * stride + l * kMaxCandidates + c];
      }
    }
  }
  // Patterns of this frame only; the canonical frame stays the identity.
  if (t != s.dyn.canonical_frame) {
    for (int l = 0; l < kLevels; ++l) {
      MotionLevel& level = s.dyn.levels[l];
      for (int k = 0; k < level.pattern_count; ++k) {
        const RigidGrad& pg = g.dyn.patterns[l][k];
        SE3& p = level.pattern(t, k);
        const std::size_t off = (static_cast<std::size_t>(t) * level.pattern_count + k) * 3;
        if (config.lr.pattern_translation > 0.0) {
          std::array<double, 3> gt{pg.translation.x(), pg.translation.y(), pg.translation.z()};
          std::array<double, 3> d{};
          o.pattern_translation[l].update(off, gt, config.lr.pattern_translation, fstep, adam, d);
          p.translation += Vec3(d[0], d[1], d[2]);
        }
        if (config.lr.pattern_rotation > 0.0) {
          const Vec3 gr = rotation_tangent_grad(p.rotation.to_matrix(), pg.rotation);
          std::array<double, 3> ga{gr.x(), gr.y(), gr.z()};
          std::array<double, 3> d{};
          o.pattern_rotation[l].update(off, ga, config.lr.pattern_rotation, fstep, adam, d);
          p.rotation = UnitQuaternion::from_axis_angle(Vec3(d[0], d[1], d[2])) * p.rotation;
        }
      }
    }
  }
}

void densify(TrainState& s, const OptimConfig& config) {
  const std::size_t n = s.field.count();
  std::vector<double> avg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (s.grad_count[i] > 0) avg[i] = s.grad_accum[i] / s.grad_count[i];
  }
  DensifyResult r = densify_and_prune(s.field, avg, config.densify, s.rng);
  const std::size_t m = r.field.count();
  s.opt.means.remap(r.source, r.is_new, 3);
  s.opt.log_scales.remap(r.source, r.is_new, 3);
  s.opt.rotations.remap(r.source, r.is_new, 4);
  s.opt.colors.remap(r.source, r.is_new, 3);
  s.opt.opacity.remap(r.source, r.is_new, 1);
  s.opt.logits.remap(r.source, r.is_new, kLevels * kMaxCandidates);
  BlendWeights w;
  w.slots.resize(m);
  for (std::size_t i = 0; i < m; ++i) w.slots[i] = s.dyn.weights.slots[r.source[i]];
  s.dyn.weights = std::move(w);
  s.field = std::move(r.field);
  s.graph = build_rigidity_graph(s.field, config.rigidity_neighbours);
  s.grad_accum.assign(m, 0.0);
  s.grad_count.assign(m, 0);
}

}  // namespace

LossReport frame_loss(const TrainState& state, const TrainingData& data, const OptimConfig& config,
                      int t, ParameterGrads* grads) {
  return forward_backward(state, data, config, t, grads, nullptr);
}

LossReport train_epoch(TrainState& state, const TrainingData& data, const OptimConfig& config,
                       const std::function<void(const StepRecord&)>& on_step) {
  const int frames = static_cast<int>(data.steps_per_epoch());
  std::vector<int> order(frames);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), state.rng);
  const long total_steps = static_cast<long>(config.epochs) * frames;
  const int w = data.cameras.empty() ? 1 : data.cameras[0].width;
  const int h = data.cameras.empty() ? 1 : data.cameras[0].height;
  const double to_ndc = 0.5 * std::sqrt(static_cast<double>(w) * h);

  LossReport mean;
  for (int t : order) {
    ParameterGrads grads;
    std::vector<double> screen;
    const LossReport r = forward_backward(state, data, config, t, &grads, &screen);
    check_finite(r, state.epoch, t, state.field.count());
    for (std::size_t i = 0; i < screen.size(); ++i) {
      if (screen[i] > 0.0) {
        state.grad_accum[i] += screen[i] * to_ndc;
        ++state.grad_count[i];
      }
    }
    apply_updates(state, grads, config, t, total_steps);
    if (on_step) on_step({state.epoch, t, r});
    mean.rgb += r.rgb;
    mean.mask += r.mask;
    mean.depth += r.depth;
    mean.track += r.track;
    mean.local_rigid += r.local_rigid;
    mean.total += r.total;
  }
  const double inv = frames > 0 ? 1.0 / frames : 0.0;
  mean.rgb *= inv;
  mean.mask *= inv;
  mean.depth *= inv;
  mean.track *= inv;
  mean.local_rigid *= inv;
  mean.total *= inv;

  ++state.epoch;
  if (config.densify_every > 0 && state.epoch % config.densify_every == 0 &&
      state.epoch <= config.densify_until) {
    densify(state, config);
  }
  return mean;
}

bool parameters_finite(const TrainState& s) {
  const CanonicalGaussianField& f = s.field;
  for (std::size_t i = 0; i < f.count(); ++i) {
    const UnitQuaternion& q = f.rotations[i];
    if (!f.means[i].allFinite() || !f.log_scales[i].allFinite() || !f.colors[i].allFinite() ||
        !std::isfinite(f.opacity_logits[i]) ||
        !std::isfinite(q.w() + q.x() + q.y() + q.z())) {
      return false;
    }
  }
  for (const auto& item : s.dyn.weights.slots) {
    for (const BlendSlot& slot : item) {
      for (int c = 0; c < slot.count; ++c) {
        if (!std::isfinite(slot.logits[c])) return false;
      }
    }
  }
  for (const MotionLevel& l : s.dyn.levels) {
    for (const SE3& p : l.patterns) {
      const UnitQuaternion& q = p.rotation;
      if (!p.translation.allFinite() || !std::isfinite(q.w() + q.x() + q.y() + q.z())) return false;
    }
  }
  return true;
}

Checkpoint make_checkpoint(const TrainState& state, const SceneDataset& ds,
                           const OptimConfig& config) {
  Checkpoint c;
  c.field = state.field;
  c.dyn = state.dyn;
  c.binding = state.binding;
  c.intrinsics = ds.intrinsics;
  c.train_cameras = ds.train.cameras;
  c.eval_cameras = ds.eval.cameras;
  c.config_json = config.to_json();
  return c;
}

FitResult fit(const SceneDataset& ds, const OptimConfig& config, const FitOutputs& outputs) {
  const auto start = std::chrono::steady_clock::now();
  TrainState state = initialize(ds, config);
  const TrainingData data = prepare_training_data(ds);

  std::ofstream csv;
  if (!outputs.loss_csv.empty()) {
    csv.open(outputs.loss_csv, std::ios::trunc);
    if (!csv) throw Error(ErrorKind::Io, "cannot open " + outputs.loss_csv.string());
    csv << "epoch,frame,rgb,mask,depth,track,local_rigid,total\n";
    csv << std::setprecision(9);
  }
  auto on_step = [&](const StepRecord& s) {
    if (!csv.is_open()) return;
    csv << s.epoch << ',' << s.frame << ',' << s.loss.rgb << ',' << s.loss.mask << ','
        << s.loss.depth << ',' << s.loss.track << ',' << s.loss.local_rigid << ',' << s.loss.total
        << '\n';
  };

  FitResult result;
  for (int e = 0; e < config.epochs; ++e) {
    result.final_loss = train_epoch(state, data, config, on_step);
    if (!parameters_finite(state)) {
      throw Error(ErrorKind::NonFiniteLoss,
                  "a parameter became non-finite during epoch " + std::to_string(e));
    }
    if (outputs.progress) {
      std::ostringstream line;
      line << "epoch " << (e + 1) << "/" << config.epochs << " loss " << std::setprecision(6)
           << result.final_loss.total << " gaussians " << state.field.count();
      outputs.progress(line.str());
    }
  }
  result.checkpoint = make_checkpoint(state, ds, config);
  result.track_rms = track_fit_rms(state.dyn.levels, state.binding, ds.tracks);
  if (!outputs.checkpoint.empty()) save_checkpoint(result.checkpoint, outputs.checkpoint);
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const SceneDataset& ds) {
  if (ds.eval.size() == 0) throw Error(ErrorKind::EmptyDataset, "dataset has no held-out views");
  const std::size_t frames = std::min<std::size_t>(ds.eval.size(), ckpt.dyn.frames);
  std::vector<ImageRGB> preds, gts;
  std::vector<Mask> masks;
  for (std::size_t t = 0; t < frames; ++t) {
    const Camera cam = make_camera(ds.intrinsics, ds.eval.cameras[t]);
    preds.push_back(render_frame(ckpt.field, ckpt.dyn, cam, static_cast<int>(t)).color_image());
    gts.push_back(to_double(ds.eval.rgb[t]));
    masks.push_back(ds.eval.covisibility[t]);
  }
  return evaluate_frames(preds, gts, masks);
}

}  // namespace msdyn
