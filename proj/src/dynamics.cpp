#include "msdyn/dynamics.hpp"
#include "msdyn/error.hpp"
#include "msdyn/log.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

namespace msdyn {

TrackSet::TrackSet(int n, int t)
    : count(n), frames(t), positions(static_cast<std::size_t>(n) * t, Vec3::Zero()),
      visible(positions.size(), 0), confidence(positions.size(), 0.0), instance_id(n, 0) {}

void TrackSet::check_consistent() const {
  const std::size_t cells = static_cast<std::size_t>(count) * frames;
  if (positions.size() != cells || visible.size() != cells || confidence.size() != cells ||
      instance_id.size() != static_cast<std::size_t>(count)) {
    throw Error(ErrorKind::CountMismatch, "track set arrays do not match N x T");
  }
  for (std::size_t i = 0; i < cells; ++i) {
    if (!visible[i] && confidence[i] != 0.0) {
      throw Error(ErrorKind::Validation, "track confidence must be 0 where not visible");
    }
    if (visible[i] && !positions[i].allFinite()) {
      throw Error(ErrorKind::Validation, "visible track position is not finite");
    }
  }
}

std::array<double, kMaxCandidates> BlendSlot::weights() const {
  std::array<double, kMaxCandidates> w{};
  if (count == 0) return w;
  double mx = logits[0];
  for (int c = 1; c < count; ++c) mx = std::max(mx, logits[c]);
  double sum = 0.0;
  for (int c = 0; c < count; ++c) {
    w[c] = std::exp(logits[c] - mx);
    sum += w[c];
  }
  for (int c = 0; c < count; ++c) w[c] /= sum;
  return w;
}

int select_canonical_frame(const TrackSet& tracks) {
  if (tracks.count == 0) throw Error(ErrorKind::EmptyTracks, "no tracks to select a canonical frame");
  if (tracks.frames < 1) throw Error(ErrorKind::Validation, "track set has no frames");
  int best = 0;
  long best_count = -1;
  for (int t = 0; t < tracks.frames; ++t) {
    long n = 0;
    for (int j = 0; j < tracks.count; ++j) n += tracks.is_visible(j, t) ? 1 : 0;
    if (n > best_count) {
      best_count = n;
      best = t;
    }
  }
  return best;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Tracks expressed in some per-frame reference: local[j * T + t].
using Trajectories = std::vector<Vec3>;

// Fits every cluster's per-frame pattern by weighted Procrustes between the
// canonical frame and frame t, reusing the nearest valid frame where fewer
// than three covisible tracks exist.
void fit_patterns(MotionLevel& level, const TrackSet& tracks, const Trajectories& local, int t0) {
  const int frames = tracks.frames;
  const int k_count = level.pattern_count;
  level.frames = frames;
  level.patterns.assign(static_cast<std::size_t>(frames) * k_count, SE3::identity());
  level.anchors.assign(k_count, Vec3::Constant(std::numeric_limits<double>::quiet_NaN()));

  std::vector<Vec3> src, dst;
  std::vector<double> w;
  for (int k = 0; k < k_count; ++k) {
    const auto& members = level.member_tracks[k];
    Vec3 sum = Vec3::Zero();
    int seen = 0;
    for (int j : members) {
      if (tracks.is_visible(j, t0)) {
        sum += tracks.position(j, t0);
        ++seen;
      }
    }
    if (seen > 0) level.anchors[k] = sum / seen;

    std::vector<std::uint8_t> valid(frames, 0);
    for (int t = 0; t < frames; ++t) {
      if (t == t0) {
        valid[t] = 1;
        continue;
      }
      src.clear();
      dst.clear();
      w.clear();
      for (int j : members) {
        if (!tracks.is_visible(j, t0) || !tracks.is_visible(j, t)) continue;
        const double wj = tracks.weight(j, t0) * tracks.weight(j, t);
        if (!(wj > 0.0)) continue;
        src.push_back(local[tracks.at(j, t0)]);
        dst.push_back(local[tracks.at(j, t)]);
        w.push_back(wj);
      }
      if (src.size() < 3) continue;
      try {
        level.pattern(t, k) = weighted_procrustes(src, dst, w);
        valid[t] = 1;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::DegenerateGeometry && e.kind() != ErrorKind::WeightError) throw;
      }
    }
    int missing = 0;
    for (int t = 0; t < frames; ++t) {
      if (valid[t]) continue;
      ++missing;
      for (int d = 1; d < frames; ++d) {
        if (t - d >= 0 && valid[t - d]) {
          level.pattern(t, k) = level.pattern(t - d, k);
          break;
        }
        if (t + d < frames && valid[t + d]) {
          level.pattern(t, k) = level.pattern(t + d, k);
          break;
        }
      }
    }
    if (missing > 0) {
      warn("level " + std::to_string(level.level_index) + " pattern " + std::to_string(k) + ": " +
           std::to_string(missing) +
           " frame(s) lacked 3 covisible tracks; reused the nearest valid frame");
    }
  }
}

std::vector<int> feature_frames(int frames, int count) {
  std::vector<int> out(count);
  for (int i = 0; i < count; ++i) {
    out[i] = count == 1 ? 0
                        : static_cast<int>(std::lround(static_cast<double>(i) * (frames - 1) /
                                                       (count - 1)));
  }
  return out;
}

enum class FeatureKind { UnitDirection, Displacement };

std::vector<double> trajectory_features(const TrackSet& tracks, const Trajectories& local,
                                        const std::vector<int>& members, int t0, int n_frames,
                                        FeatureKind kind) {
  const std::vector<int> sample = feature_frames(tracks.frames, n_frames);
  const int dim = 3 * n_frames;
  std::vector<double> feats(members.size() * dim, 0.0);
  for (std::size_t m = 0; m < members.size(); ++m) {
    const int j = members[m];
    if (!tracks.is_visible(j, t0)) continue;
    const Vec3& base = local[tracks.at(j, t0)];
    for (int s = 0; s < n_frames; ++s) {
      const int t = sample[s];
      if (!tracks.is_visible(j, t)) continue;
      Vec3 d = local[tracks.at(j, t)] - base;
      if (kind == FeatureKind::UnitDirection) {
        const double n = d.norm();
        d = n > 1e-6 ? Vec3(d / n) : Vec3::Zero();
      }
      for (int c = 0; c < 3; ++c) feats[m * dim + 3 * s + c] = d(c);
    }
  }
  return feats;
}

// Groups each parent's members by k-means and appends one child cluster per
// non-empty group.
void split_children(MotionLevel& child, const MotionLevel& parent, const TrackSet& tracks,
                    const Trajectories& local, int t0, int k_max, int feature_count,
                    FeatureKind kind, std::uint64_t seed) {
  for (int p = 0; p < parent.pattern_count; ++p) {
    const auto& members = parent.member_tracks[p];
    if (members.empty()) continue;
    const std::vector<double> feats =
        trajectory_features(tracks, local, members, t0, feature_count, kind);
    const int k = std::min<int>(k_max, static_cast<int>(members.size()));
    const std::vector<int> labels =
        kmeans(feats, 3 * feature_count, k, 50, mix_seed(seed, child.level_index * 100003ULL + p));
    const int groups = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    const int first = child.pattern_count;
    for (int g = 0; g < groups; ++g) {
      child.parent_of.push_back(p);
      child.instance_of.push_back(parent.instance_of[p]);
      child.member_tracks.emplace_back();
    }
    for (std::size_t m = 0; m < members.size(); ++m) {
      child.member_tracks[first + labels[m]].push_back(members[m]);
    }
    child.pattern_count += groups;
  }
}

}  // namespace

MotionLevel empty_level(int level_index, int frames) {
  MotionLevel level;
  level.level_index = level_index;
  level.frames = frames;
  return level;
}

MotionLevel build_object_level(const TrackSet& tracks, int t0) {
  tracks.check_consistent();
  if (tracks.count == 0) throw Error(ErrorKind::EmptyTracks, "no tracks for the object level");
  if (t0 < 0 || t0 >= tracks.frames) throw Error(ErrorKind::Validation, "canonical frame out of range");
  MotionLevel level;
  level.level_index = 1;
  std::vector<int> ids;
  for (int j = 0; j < tracks.count; ++j) {
    if (tracks.instance_id[j] > 0) ids.push_back(tracks.instance_id[j]);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  level.pattern_count = static_cast<int>(ids.size());
  level.member_tracks.resize(ids.size());
  level.parent_of.assign(ids.size(), -1);
  level.instance_of = ids;
  for (int j = 0; j < tracks.count; ++j) {
    const auto it = std::lower_bound(ids.begin(), ids.end(), tracks.instance_id[j]);
    if (it != ids.end() && *it == tracks.instance_id[j]) {
      level.member_tracks[it - ids.begin()].push_back(j);
    }
  }
  fit_patterns(level, tracks, tracks.positions, t0);
  return level;
}

namespace {

// Track positions mapped through the inverse of a per-track, per-frame frame.
template <typename FrameOf>
Trajectories to_local(const TrackSet& tracks, const MotionLevel& owner, FrameOf frame_of) {
  Trajectories local = tracks.positions;
  for (int k = 0; k < owner.pattern_count; ++k) {
    for (int t = 0; t < tracks.frames; ++t) {
      const Rigid inv = frame_of(t, k).inverse();
      for (int j : owner.member_tracks[k]) {
        local[tracks.at(j, t)] = inv.apply(tracks.position(j, t));
      }
    }
  }
  return local;
}

}  // namespace

MotionLevel build_primitive_level(const TrackSet& tracks, const MotionLevel& object_level, int t0,
                                  int k_primitive, std::uint64_t seed) {
  if (k_primitive < 1) throw Error(ErrorKind::Validation, "k_primitive must be >= 1");
  MotionLevel level;
  level.level_index = 2;
  const Trajectories local = to_local(tracks, object_level, [&](int t, int k) {
    return object_level.pattern(t, k).to_rigid();
  });
  split_children(level, object_level, tracks, local, t0, k_primitive, 8,
                 FeatureKind::UnitDirection, seed);
  fit_patterns(level, tracks, local, t0);
  return level;
}

MotionLevel build_grain_level(const TrackSet& tracks, const MotionLevel& object_level,
                              const MotionLevel& primitive_level, int t0, int k_grain,
                              std::uint64_t seed) {
  if (k_grain < 1) throw Error(ErrorKind::Validation, "k_grain must be >= 1");
  MotionLevel level;
  level.level_index = 3;
  const Trajectories local = to_local(tracks, primitive_level, [&](int t, int k) {
    const int parent = primitive_level.parent_of[k];
    return object_level.pattern(t, parent).to_rigid() * primitive_level.pattern(t, k).to_rigid();
  });
  split_children(level, primitive_level, tracks, local, t0, k_grain, 8,
                 FeatureKind::Displacement, seed);
  fit_patterns(level, tracks, local, t0);
  return level;
}

std::array<MotionLevel, kLevels> build_levels(const TrackSet& tracks, int t0,
                                              const HierarchyOptions& opts) {
  std::array<MotionLevel, kLevels> levels;
  levels[0] = build_object_level(tracks, t0);
  levels[1] = opts.active_levels >= 2
                  ? build_primitive_level(tracks, levels[0], t0, opts.k_primitive, opts.seed)
                  : empty_level(2, tracks.frames);
  levels[2] = opts.active_levels >= 3
                  ? build_grain_level(tracks, levels[0], levels[1], t0, opts.k_grain, opts.seed)
                  : empty_level(3, tracks.frames);
  return levels;
}

namespace {

BlendSlot nearest_candidates(const Vec3& p, const MotionLevel& level,
                             const std::vector<int>& eligible, double temperature_scale) {
  BlendSlot slot;
  std::vector<std::pair<double, int>> dist;
  dist.reserve(eligible.size());
  for (int k : eligible) dist.emplace_back((p - level.anchors[k]).norm(), k);
  std::sort(dist.begin(), dist.end());
  slot.count = std::min<int>(kMaxCandidates, static_cast<int>(dist.size()));
  if (slot.count == 0) return slot;
  std::array<double, kMaxCandidates> d{};
  for (int c = 0; c < slot.count; ++c) d[c] = dist[c].first;
  const int mid = slot.count / 2;
  const double median = slot.count % 2 == 1 ? d[mid] : 0.5 * (d[mid - 1] + d[mid]);
  const double tau = std::max(temperature_scale * median, 1e-12);
  for (int c = 0; c < slot.count; ++c) {
    slot.index[c] = dist[c].second;
    slot.logits[c] = -d[c] / tau;
  }
  return slot;
}

}  // namespace

BlendWeights init_blend_weights(std::span<const Vec3> positions, std::span<const int> instance_ids,
                                std::span<const std::uint8_t> is_dynamic,
                                const std::array<MotionLevel, kLevels>& levels,
                                const HierarchyOptions& opts) {
  if (positions.size() != instance_ids.size() || positions.size() != is_dynamic.size()) {
    throw Error(ErrorKind::CountMismatch, "init_blend_weights: per-item arrays differ in length");
  }
  BlendWeights out;
  out.slots.resize(positions.size());
  const MotionLevel& l1 = levels[0];
  std::vector<int> with_anchor;
  for (int k = 0; k < l1.pattern_count; ++k) {
    if (l1.anchors[k].allFinite()) with_anchor.push_back(k);
  }
  std::size_t fallbacks = 0;
  std::vector<int> eligible;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (!is_dynamic[i]) continue;
    auto& slots = out.slots[i];
    eligible.clear();
    for (int k : with_anchor) {
      if (l1.instance_of[k] == instance_ids[i]) eligible.push_back(k);
    }
    if (eligible.empty()) {
      if (with_anchor.empty()) continue;
      ++fallbacks;
      // No cluster for this instance: use the nearest one of any instance.
      BlendSlot any = nearest_candidates(positions[i], l1, with_anchor, opts.temperature_scale);
      eligible.push_back(any.index[0]);
    }
    slots[0] = nearest_candidates(positions[i], l1, eligible, opts.temperature_scale);
    int parent = slots[0].index[0];
    for (int l = 1; l < kLevels; ++l) {
      const MotionLevel& level = levels[l];
      eligible.clear();
      for (int k = 0; k < level.pattern_count; ++k) {
        if (level.parent_of[k] == parent && level.anchors[k].allFinite()) eligible.push_back(k);
      }
      slots[l] = nearest_candidates(positions[i], level, eligible, opts.temperature_scale);
      if (slots[l].count == 0) break;
      parent = slots[l].index[0];
    }
  }
  if (fallbacks > 0) {
    warn("NoCandidates: " + std::to_string(fallbacks) +
         " dynamic item(s) had no object cluster of their instance; assigned the nearest instance");
  }
  return out;
}

BlendWeights init_blend_weights(const CanonicalGaussianField& field,
                                const std::array<MotionLevel, kLevels>& levels,
                                const HierarchyOptions& opts) {
  return init_blend_weights(field.means, field.instance_id, field.is_dynamic, levels, opts);
}

namespace {

// World-frame patterns of every level at one frame.
struct FramePatterns {
  std::array<std::vector<Rigid>, kLevels> local;  // as stored
  std::array<std::vector<Rigid>, kLevels> world;  // conjugated through the parent chain
  std::array<std::vector<Rigid>, kLevels> parent_frame;
};

FramePatterns frame_patterns(const std::array<MotionLevel, kLevels>& levels, int t) {
  FramePatterns fp;
  for (int l = 0; l < kLevels; ++l) {
    const MotionLevel& level = levels[l];
    fp.local[l].resize(level.pattern_count);
    fp.world[l].resize(level.pattern_count);
    fp.parent_frame[l].resize(level.pattern_count);
    for (int k = 0; k < level.pattern_count; ++k) {
      fp.local[l][k] = level.pattern(t, k).to_rigid();
      if (l == 0) {
        fp.world[l][k] = fp.local[l][k];
        continue;
      }
      const int p = level.parent_of[k];
      // Frame of the parent pattern in world coordinates.
      const Rigid frame = l == 1 ? fp.local[0][p] : fp.parent_frame[1][p] * fp.local[1][p];
      fp.parent_frame[l][k] = frame;
      fp.world[l][k] = frame * fp.local[l][k] * frame.inverse();
    }
  }
  return fp;
}

Rigid blend_slot(const BlendSlot& slot, const std::vector<Rigid>& world) {
  if (slot.count == 0) return Rigid{};
  std::array<Rigid, kMaxCandidates> pats;
  for (int c = 0; c < slot.count; ++c) pats[c] = world[slot.index[c]];
  const auto w = slot.weights();
  return blend_rigid(std::span<const Rigid>(pats.data(), slot.count),
                     std::span<const double>(w.data(), slot.count));
}

}  // namespace

std::vector<Rigid> evaluate_rigid(const std::array<MotionLevel, kLevels>& levels,
                                  const BlendWeights& weights, int t) {
  const FramePatterns fp = frame_patterns(levels, t);
  std::vector<Rigid> out(weights.size());
  const auto n = static_cast<std::ptrdiff_t>(weights.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto& slots = weights.slots[i];
    if (slots[0].count == 0) continue;
    const Rigid t1 = blend_slot(slots[0], fp.world[0]);
    const Rigid t2 = blend_slot(slots[1], fp.world[1]);
    const Rigid t3 = blend_slot(slots[2], fp.world[2]);
    out[i] = t3 * (t2 * t1);
  }
  return out;
}

std::vector<SE3> evaluate(const MSDynamics& dyn, int t) {
  if (t < 0 || t >= dyn.frames) throw Error(ErrorKind::Validation, "evaluate: frame out of range");
  const std::vector<Rigid> rigid = evaluate_rigid(dyn.levels, dyn.weights, t);
  std::vector<SE3> out(rigid.size());
  for (std::size_t i = 0; i < rigid.size(); ++i) {
    if (dyn.weights.slots[i][0].count == 0) continue;
    out[i] = SE3::from_rigid(rigid[i]);
  }
  return out;
}

void DynamicsGrad::resize(const std::array<MotionLevel, kLevels>& levels, std::size_t items) {
  for (int l = 0; l < kLevels; ++l) patterns[l].assign(levels[l].pattern_count, RigidGrad{});
  logits.assign(items, {});
}

void evaluate_backward(const std::array<MotionLevel, kLevels>& levels, const BlendWeights& weights,
                       int t, std::span<const RigidGrad> transform_grads, DynamicsGrad& grad) {
  const FramePatterns fp = frame_patterns(levels, t);
  const std::size_t n = weights.size();
  // Per-item gradients on the world patterns of each slot, reduced serially
  // below so the sum order is fixed.
  std::vector<std::array<std::array<RigidGrad, kMaxCandidates>, kLevels>> slot_grads(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    const auto& slots = weights.slots[i];
    if (slots[0].count == 0) continue;
    std::array<Rigid, kLevels> blended;
    for (int l = 0; l < kLevels; ++l) blended[l] = blend_slot(slots[l], fp.world[l]);
    const Rigid inner = blended[1] * blended[0];
    std::array<RigidGrad, kLevels> g_level;
    RigidGrad g_inner;
    compose_backward(blended[2], inner, transform_grads[i], g_level[2], g_inner);
    compose_backward(blended[1], blended[0], g_inner, g_level[1], g_level[0]);
    for (int l = 0; l < kLevels; ++l) {
      const BlendSlot& slot = slots[l];
      if (slot.count == 0) continue;
      std::array<Rigid, kMaxCandidates> pats;
      for (int c = 0; c < slot.count; ++c) pats[c] = fp.world[l][slot.index[c]];
      const auto w = slot.weights();
      std::array<double, kMaxCandidates> gw{};
      blend_rigid_backward(std::span<const Rigid>(pats.data(), slot.count),
                           std::span<const double>(w.data(), slot.count), g_level[l],
                           std::span<RigidGrad>(slot_grads[i][l].data(), slot.count),
                           std::span<double>(gw.data(), slot.count));
      double mean = 0.0;
      for (int c = 0; c < slot.count; ++c) mean += w[c] * gw[c];
      for (int c = 0; c < slot.count; ++c) grad.logits[i][l][c] += w[c] * (gw[c] - mean);
    }
  }

  std::array<std::vector<RigidGrad>, kLevels> g_world;
  for (int l = 0; l < kLevels; ++l) g_world[l].assign(levels[l].pattern_count, RigidGrad{});
  for (std::size_t i = 0; i < n; ++i) {
    for (int l = 0; l < kLevels; ++l) {
      const BlendSlot& slot = weights.slots[i][l];
      for (int c = 0; c < slot.count; ++c) g_world[l][slot.index[c]] += slot_grads[i][l][c];
    }
  }

  // world = F * local * F^-1; F = P1 for level 2 and P1 * P2 for level 3.
  std::array<std::vector<RigidGrad>, kLevels> g_local;
  for (int l = 0; l < kLevels; ++l) g_local[l].assign(levels[l].pattern_count, RigidGrad{});
  for (int l = kLevels - 1; l >= 1; --l) {
    for (int k = 0; k < levels[l].pattern_count; ++k) {
      const Rigid& frame = fp.parent_frame[l][k];
      const Rigid& local = fp.local[l][k];
      const Rigid fx = frame * local;
      const Rigid finv = frame.inverse();
      RigidGrad g_fx, g_finv, g_frame;
      compose_backward(fx, finv, g_world[l][k], g_fx, g_finv);
      inverse_backward(frame, g_finv, g_frame);
      compose_backward(frame, local, g_fx, g_frame, g_local[l][k]);
      const int p = levels[l].parent_of[k];
      if (l == 1) {
        g_local[0][p] += g_frame;
      } else {
        const int pp = levels[1].parent_of[p];
        compose_backward(fp.local[0][pp], fp.local[1][p], g_frame, g_local[0][pp], g_local[1][p]);
      }
    }
  }
  for (int k = 0; k < levels[0].pattern_count; ++k) g_local[0][k] += g_world[0][k];
  for (int l = 0; l < kLevels; ++l) {
    for (int k = 0; k < levels[l].pattern_count; ++k) grad.patterns[l][k] += g_local[l][k];
  }
}

TrackBinding bind_tracks(const TrackSet& tracks, int t0,
                         const std::array<MotionLevel, kLevels>& levels,
                         const HierarchyOptions& opts) {
  TrackBinding b;
  std::vector<int> ids;
  for (int j = 0; j < tracks.count; ++j) {
    if (tracks.instance_id[j] <= 0 || !tracks.is_visible(j, t0)) continue;
    b.track.push_back(j);
    b.canonical.push_back(tracks.position(j, t0));
    ids.push_back(tracks.instance_id[j]);
  }
  const std::vector<std::uint8_t> dynamic(b.track.size(), 1);
  b.weights = init_blend_weights(b.canonical, ids, dynamic, levels, opts);
  return b;
}

double track_fit_rms(const std::array<MotionLevel, kLevels>& levels, const TrackBinding& binding,
                     const TrackSet& tracks) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int t = 0; t < tracks.frames; ++t) {
    const std::vector<Rigid> tr = evaluate_rigid(levels, binding.weights, t);
    for (std::size_t b = 0; b < binding.track.size(); ++b) {
      const int j = binding.track[b];
      if (!tracks.is_visible(j, t)) continue;
      sum += (tr[b].apply(binding.canonical[b]) - tracks.position(j, t)).squaredNorm();
      ++n;
    }
  }
  return n == 0 ? 0.0 : std::sqrt(sum / static_cast<double>(n));
}

std::vector<int> kmeans(std::span<const double> features, int dim, int k, int iterations,
                        std::uint64_t seed) {
  const std::size_t n = dim > 0 ? features.size() / dim : 0;
  if (n == 0 || k < 1) return {};
  k = std::min<int>(k, static_cast<int>(n));
  auto point = [&](std::size_t i) { return features.subspan(i * dim, dim); };
  auto dist2 = [&](std::span<const double> a, const std::vector<double>& b) {
    double s = 0.0;
    for (int d = 0; d < dim; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
    return s;
  };

  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> centers;
  {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    const auto first = point(pick(rng));
    centers.emplace_back(first.begin(), first.end());
  }
  std::vector<double> d2(n);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& c : centers) best = std::min(best, dist2(point(i), c));
      d2[i] = best;
      total += best;
    }
    // Every point already coincides with a centre.
    if (!(total > 0.0)) break;
    std::uniform_real_distribution<double> u(0.0, total);
    const double r = u(rng);
    double cum = 0.0;
    std::size_t chosen = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      cum += d2[i];
      if (cum > r && d2[i] > 0.0) {
        chosen = i;
        break;
      }
    }
    const auto c = point(chosen);
    centers.emplace_back(c.begin(), c.end());
  }

  const int kc = static_cast<int>(centers.size());
  std::vector<int> labels(n, -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = dist2(point(i), centers[0]);
      for (int c = 1; c < kc; ++c) {
        const double d = dist2(point(i), centers[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (labels[i] != best) {
        labels[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<double>> sums(kc, std::vector<double>(dim, 0.0));
    std::vector<int> counts(kc, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = point(i);
      for (int d = 0; d < dim; ++d) sums[labels[i]][d] += p[d];
      ++counts[labels[i]];
    }
    for (int c = 0; c < kc; ++c) {
      if (counts[c] == 0) continue;
      for (int d = 0; d < dim; ++d) centers[c][d] = sums[c][d] / counts[c];
    }
  }

  std::vector<int> remap(kc, -1);
  int next = 0;
  for (int c = 0; c < kc; ++c) {
    if (std::find(labels.begin(), labels.end(), c) != labels.end()) remap[c] = next++;
  }
  for (int& l : labels) l = remap[l];
  return labels;
}

}  // namespace msdyn
