#pragma once

#include "msdyn/dynamics.hpp"
#include "msdyn/gaussians.hpp"
#include "msdyn/io.hpp"
#include "msdyn/losses.hpp"
#include "msdyn/metrics.hpp"
#include "msdyn/render.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace msdyn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moments for a flat parameter array.
class AdamMoments {
 public:
  AdamMoments() = default;
  explicit AdamMoments(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  std::size_t size() const { return m_.size(); }
  void resize(std::size_t n) {
    m_.assign(n, 0.0);
    v_.assign(n, 0.0);
  }
  /// Updates moments for [offset, offset + grads.size()) and writes the step
  /// (to be added to the parameters) into `delta`. `step` counts from 1.
  void update(std::size_t offset, std::span<const double> grads, double lr, long step,
              const AdamConfig& cfg, std::span<double> delta);
  /// Applies the update to `params` in place.
  void step(std::size_t offset, std::span<double> params, std::span<const double> grads, double lr,
            long step, const AdamConfig& cfg);
  /// Rebuilds the moments after a field change: entry i takes the moments of
  /// `source[i]` (blocks of `stride`), or zeros when `is_new[i]`.
  void remap(std::span<const int> source, std::span<const std::uint8_t> is_new, int stride);

  const std::vector<double>& first() const { return m_; }
  const std::vector<double>& second() const { return v_; }

 private:
  std::vector<double> m_;
  std::vector<double> v_;
};

struct LearningRates {
  double means = 1.6e-4;
  double means_final = 1.6e-6;
  double log_scales = 5e-3;
  double rotations = 1e-3;
  double colors = 2.5e-3;
  double opacity = 5e-2;
  double pattern_translation = 1e-4;
  double pattern_rotation = 1e-4;
  double blend_logits = 1e-2;
};

struct OptimConfig {
  int epochs = 500;
  LearningRates lr;
  AdamConfig adam;
  std::uint64_t seed = 0;
  LossWeights weights;
  double ssim_weight = 0.2;
  HierarchyOptions hierarchy;
  // Densification runs after every `densify_every` epochs up to
  // `densify_until`; 0 disables it.
  int densify_every = 10;
  int densify_until = 250;
  DensifyOptions densify{2e-4, 0.005, 0.03, 1.6, 30000};
  int target_dynamic = 5000;
  int target_static = 10000;
  // Also seed static Gaussians from background that is hidden at the
  // canonical frame but visible in other frames.
  bool seed_static_all_frames = true;
  int rigidity_neighbours = 8;
  RenderOptions render;

  /// Throws Validation on negative rates, epochs < 0 or bad weights.
  void validate() const;
  std::string to_json() const;
  static OptimConfig from_json(const std::string& text);
};

/// Per-Gaussian and per-pattern Adam state.
struct OptimizerState {
  AdamMoments means, log_scales, rotations, colors, opacity, logits;
  // Per level: frames x patterns x 3.
  std::array<AdamMoments, kLevels> pattern_translation, pattern_rotation;
  long step = 0;
  std::vector<long> frame_steps;  // per-frame counters for the pattern groups
};

struct TrainState {
  CanonicalGaussianField field;
  MSDynamics dyn;
  TrackBinding binding;
  RigidityGraph graph;
  OptimizerState opt;
  int epoch = 0;
  std::mt19937_64 rng;
  // Screen-space gradient statistics for densification.
  std::vector<double> grad_accum;
  std::vector<int> grad_count;
};

/// Training targets derived from a dataset, in compute precision.
struct TrainingData {
  const SceneDataset* dataset = nullptr;
  std::vector<Camera> cameras;
  std::vector<ImageRGB> rgb;
  std::vector<Mask> dynamic;  // nonzero where any instance is
  std::size_t steps_per_epoch() const { return cameras.size(); }
};

TrainingData prepare_training_data(const SceneDataset& ds);

/// Sub-pixel grid spacing for which unprojecting the selected pixels yields
/// about `target` samples, and the sample count it gives.
struct StrideChoice {
  double stride = 1.0;
  std::size_t count = 0;
};
StrideChoice choose_stride(const Mask& selected, std::size_t target);

/// Sample positions (pixel coordinates) of a stride grid that fall on
/// selected pixels.
std::vector<Vec2> stride_samples(const Mask& selected, double stride);

/// Seeds the canonical field and builds the hierarchy. Throws EmptyDataset
/// or NoDynamicPixels.
TrainState initialize(const SceneDataset& ds, const OptimConfig& config);

struct StepRecord {
  int epoch = 0;
  int frame = 0;
  LossReport loss;
};

/// Runs one epoch over a seeded permutation of frames. `on_step` receives
/// every per-frame loss. Throws NonFiniteLoss.
LossReport train_epoch(TrainState& state, const TrainingData& data, const OptimConfig& config,
                       const std::function<void(const StepRecord&)>& on_step = {});

/// One forward/backward pass on a frame without updating anything. When
/// `grads` is non-null it receives the parameter gradients.
struct ParameterGrads {
  FieldGrad field;
  DynamicsGrad dyn;
};
LossReport frame_loss(const TrainState& state, const TrainingData& data, const OptimConfig& config,
                      int t, ParameterGrads* grads = nullptr);

/// Every canonical and motion parameter is finite.
bool parameters_finite(const TrainState& state);

/// Posed field and render at frame t through camera `cam`.
RenderOutput render_frame(const CanonicalGaussianField& field, const MSDynamics& dyn,
                          const Camera& cam, int t, const RenderOptions& opts = {});

struct FitOutputs {
  std::filesystem::path checkpoint;  // empty: not written
  std::filesystem::path loss_csv;    // empty: not written
  std::function<void(const std::string&)> progress;  // progress lines
};

struct FitResult {
  Checkpoint checkpoint;
  LossReport final_loss;
  double wall_clock_seconds = 0.0;
  double track_rms = 0.0;
};

FitResult fit(const SceneDataset& ds, const OptimConfig& config, const FitOutputs& outputs = {});

Checkpoint make_checkpoint(const TrainState& state, const SceneDataset& ds,
                           const OptimConfig& config);

/// Held-out metrics of a checkpoint against the dataset's evaluation views.
EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const SceneDataset& ds);

}  // namespace msdyn
