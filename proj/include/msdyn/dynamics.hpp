#pragma once

#include "msdyn/gaussians.hpp"
#include "msdyn/geom.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace msdyn {

/// Long-term 3D point tracks. Row-major N x T storage (track-major).
struct TrackSet {
  int count = 0;
  int frames = 0;
  std::vector<Vec3> positions;
  std::vector<std::uint8_t> visible;
  std::vector<double> confidence;
  std::vector<int> instance_id;

  TrackSet() = default;
  TrackSet(int n, int t);

  std::size_t at(int track, int frame) const {
    return static_cast<std::size_t>(track) * frames + frame;
  }
  const Vec3& position(int track, int frame) const { return positions[at(track, frame)]; }
  bool is_visible(int track, int frame) const { return visible[at(track, frame)] != 0; }
  double weight(int track, int frame) const { return confidence[at(track, frame)]; }

  /// Throws CountMismatch / Validation when arrays or invariants are violated.
  void check_consistent() const;
};

/// One level of the hierarchy: K motion patterns per frame, each relative to
/// its parent pattern's frame (level 1 is relative to the world).
struct MotionLevel {
  int level_index = 1;
  int frames = 0;
  int pattern_count = 0;
  std::vector<SE3> patterns;  // frames x pattern_count, frame-major
  std::vector<int> parent_of;
  std::vector<std::vector<int>> member_tracks;
  // Centroid of the member tracks at the canonical frame; drives blend-weight
  // initialisation.
  std::vector<Vec3> anchors;
  std::vector<int> instance_of;

  SE3& pattern(int t, int k) { return patterns[static_cast<std::size_t>(t) * pattern_count + k]; }
  const SE3& pattern(int t, int k) const {
    return patterns[static_cast<std::size_t>(t) * pattern_count + k];
  }
};

inline constexpr int kMaxCandidates = 4;
inline constexpr int kLevels = 3;

/// Candidate patterns and logits for one item at one level. Realised weights
/// are softmax(logits[0..count)).
struct BlendSlot {
  int count = 0;
  std::array<int, kMaxCandidates> index{};
  std::array<double, kMaxCandidates> logits{};

  std::array<double, kMaxCandidates> weights() const;
};

struct BlendWeights {
  std::vector<std::array<BlendSlot, kLevels>> slots;

  std::size_t size() const { return slots.size(); }
};

struct MSDynamics {
  std::array<MotionLevel, kLevels> levels;
  BlendWeights weights;  // one entry per Gaussian
  int canonical_frame = 0;
  int frames = 0;
};

struct HierarchyOptions {
  int k_primitive = 5;
  int k_grain = 10;
  int active_levels = 3;
  int kmeans_iterations = 50;
  int feature_frames = 8;
  std::uint64_t seed = 0;
  // Blend temperature is this factor times the median candidate distance.
  double temperature_scale = 0.2;
};

/// Frame with the most visible tracks, ties to the earliest. Throws EmptyTracks.
int select_canonical_frame(const TrackSet& tracks);

MotionLevel build_object_level(const TrackSet& tracks, int canonical_frame);
MotionLevel build_primitive_level(const TrackSet& tracks, const MotionLevel& object_level,
                                  int canonical_frame, int k_primitive, std::uint64_t seed);
MotionLevel build_grain_level(const TrackSet& tracks, const MotionLevel& object_level,
                              const MotionLevel& primitive_level, int canonical_frame, int k_grain,
                              std::uint64_t seed);
/// A level with no patterns; it contributes the identity.
MotionLevel empty_level(int level_index, int frames);

/// Builds all levels (empty beyond `opts.active_levels`).
std::array<MotionLevel, kLevels> build_levels(const TrackSet& tracks, int canonical_frame,
                                              const HierarchyOptions& opts);

/// Proximity-initialised candidates and logits for items at canonical
/// positions. Static items (is_dynamic == 0) get no candidates.
BlendWeights init_blend_weights(std::span<const Vec3> positions, std::span<const int> instance_ids,
                                std::span<const std::uint8_t> is_dynamic,
                                const std::array<MotionLevel, kLevels>& levels,
                                const HierarchyOptions& opts);
BlendWeights init_blend_weights(const CanonicalGaussianField& field,
                                const std::array<MotionLevel, kLevels>& levels,
                                const HierarchyOptions& opts);

/// Per-item transforms at frame t. Level-l patterns are conjugated into the
/// world through their parent chain; the composite applies level 1 first.
std::vector<Rigid> evaluate_rigid(const std::array<MotionLevel, kLevels>& levels,
                                  const BlendWeights& weights, int t);
std::vector<SE3> evaluate(const MSDynamics& dyn, int t);

struct DynamicsGrad {
  // Per level, gradient on each pattern at the evaluated frame.
  std::array<std::vector<RigidGrad>, kLevels> patterns;
  // Per item, per level, per candidate slot.
  std::vector<std::array<std::array<double, kMaxCandidates>, kLevels>> logits;

  void resize(const std::array<MotionLevel, kLevels>& levels, std::size_t items);
};

/// Accumulates into `grad` (which must be sized with resize()).
void evaluate_backward(const std::array<MotionLevel, kLevels>& levels, const BlendWeights& weights,
                       int t, std::span<const RigidGrad> transform_grads, DynamicsGrad& grad);

/// Tracks bound to the motion field at their canonical positions.
struct TrackBinding {
  std::vector<int> track;
  std::vector<Vec3> canonical;
  BlendWeights weights;
};

/// Binds every track visible at the canonical frame.
TrackBinding bind_tracks(const TrackSet& tracks, int canonical_frame,
                         const std::array<MotionLevel, kLevels>& levels,
                         const HierarchyOptions& opts);

/// RMS of |T_t(x_canonical) - x_t| over visible (track, frame) samples.
double track_fit_rms(const std::array<MotionLevel, kLevels>& levels, const TrackBinding& binding,
                     const TrackSet& tracks);

/// Deterministic k-means with k-means++ seeding. Features are row-major
/// (count x dim). Empty clusters are dropped and labels compacted.
std::vector<int> kmeans(std::span<const double> features, int dim, int k, int iterations,
                        std::uint64_t seed);

}  // namespace msdyn
