#pragma once

#include "msdyn/dynamics.hpp"
#include "msdyn/gaussians.hpp"
#include "msdyn/image.hpp"
#include "msdyn/render.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace msdyn {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kTracksVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Intrinsics {
  int width = 0;
  int height = 0;
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
};

/// Camera from intrinsics and a row-major world-to-camera matrix. The
/// rotation block is projected onto SO(3).
Camera make_camera(const Intrinsics& k, const Mat4& world_to_camera);

/// Images of one camera stream. Masks hold instance ids (0 = static); the
/// covisibility masks exist for held-out views only.
struct ViewSet {
  std::vector<Mat4> cameras;  // world-to-camera, values representable as f32
  std::vector<ImageRGB8> rgb;
  std::vector<DepthMap> depth;
  std::vector<Mask> masks;
  std::vector<Mask> covisibility;

  std::size_t size() const { return rgb.size(); }
};

/// In-memory form of the dataset directory. Every stored value is
/// representable in the on-disk precision, so save/load is lossless.
struct SceneDataset {
  Intrinsics intrinsics;
  int frames = 0;
  int canonical_frame = 0;
  ViewSet train;
  ViewSet eval;  // empty when there are no held-out views
  TrackSet tracks;

  Camera camera(int t) const { return make_camera(intrinsics, train.cameras.at(t)); }
  Camera eval_camera(int t) const { return make_camera(intrinsics, eval.cameras.at(t)); }
  /// Throws EmptyDataset / CountMismatch / ShapeMismatch on inconsistency.
  void validate() const;
};

/// Majority vote of each track's mask label over the frames where it is
/// visible and projects inside the image. Ties go to the smaller id.
void derive_track_instances(SceneDataset& ds);

void save_dataset(const SceneDataset& ds, const std::filesystem::path& dir);
/// Validates magics, versions and sizes; errors name the file involved.
SceneDataset load_dataset(const std::filesystem::path& dir);

/// Everything `fit` produces: the canonical field, the hierarchy with its
/// per-Gaussian weights, the bound tracks, cameras for rendering without the
/// dataset, and the config that produced it.
struct Checkpoint {
  CanonicalGaussianField field;
  MSDynamics dyn;
  TrackBinding binding;
  Intrinsics intrinsics;
  std::vector<Mat4> train_cameras;
  std::vector<Mat4> eval_cameras;
  std::string config_json = "{}";
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace msdyn
