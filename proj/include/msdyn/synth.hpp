#pragma once

#include "msdyn/gaussians.hpp"
#include "msdyn/io.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace msdyn {

enum class SceneKind { Rigid, Articulated, Deformable };

SceneKind parse_scene_kind(const std::string& name);
const char* to_string(SceneKind kind);

/// Per-frame rates of a rigid body motion about the body's centre.
struct ObjectMotion {
  Vec3 velocity = Vec3::Zero();          // metres per frame
  Vec3 angular_velocity = Vec3::Zero();  // radians per frame, axis-angle
};

struct SceneSpec {
  SceneKind kind = SceneKind::Rigid;
  int frames = 24;
  int width = 64;
  int height = 64;
  std::uint64_t seed = 0;
  // Scales every motion, the camera's included (0 gives identical frames).
  double amplitude = 1.0;
  // Overrides the seeded body motions when non-empty (one per moving body).
  std::vector<ObjectMotion> motions;
  double hinge_max_angle = 0.9;  // radians
  double bend = 0.15;            // metres at the ends of the deformable body
  double ripple = 0.04;          // metres
  double fov_deg = 50.0;
  double camera_distance = 3.0;
  double sweep = 0.5;  // half range of the training camera's sideways sweep, metres
  Vec3 eval_offset = Vec3(0.1, -0.25, 0.0);
  double noise_depth = 0.0;  // relative std-dev of multiplicative depth noise
  double noise_track = 0.0;  // track jitter std-dev in pixels
  int track_count = 256;

  /// Throws Validation unless frames >= 2 and the resolution is >= 32x32.
  void validate() const;
};

/// Exact quantities the dataset was generated from.
struct GroundTruth {
  CanonicalGaussianField field;  // at frame 0
  std::vector<int> part;         // per Gaussian; 0 = backdrop
  std::vector<int> part_instance;
  // Track points at frame 0 and their exact positions (N x T, track-major).
  std::vector<Vec3> track_canonical;
  std::vector<int> track_part;
  std::vector<Vec3> track_positions;
  // Rigid motion of every part at every frame ([t][part - 1]); for the
  // deformable body this is the rigid component only.
  std::vector<std::vector<Rigid>> part_motion;
  // Articulated scenes: hinge point and axis at frame 0 and the angle per frame.
  Vec3 hinge_point = Vec3::Zero();
  Vec3 hinge_axis = Vec3::UnitZ();
  std::vector<double> hinge_angle;
};

struct GeneratedScene {
  SceneDataset dataset;
  GroundTruth truth;
};

GeneratedScene generate(const SceneSpec& spec);

struct VerifyReport {
  std::vector<std::string> violations;
  std::size_t visible_samples = 0;
  bool ok() const { return violations.empty(); }
};

/// Consistency checks between tracks, depth and masks.
VerifyReport verify_dataset(const SceneDataset& ds);

}  // namespace msdyn
