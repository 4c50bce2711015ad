#pragma once

#include "msdyn/image.hpp"

#include <span>
#include <vector>

namespace msdyn {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over masked pixels (all channels), capped at 99 dB.
/// Throws ShapeMismatch or EmptyMask.
double masked_psnr(const ImageRGB& pred, const ImageRGB& gt, const Mask& mask);

/// Mean SSIM (7x7 uniform window, channels averaged) over pixels whose
/// window lies entirely inside the image and the mask. Returns NaN when no
/// pixel qualifies. Throws ShapeMismatch or EmptyMask.
double masked_ssim(const ImageRGB& pred, const ImageRGB& gt, const Mask& mask);

struct FrameMetrics {
  int frame = 0;
  double psnr = 0.0;
  double ssim = 0.0;  // NaN when skipped
  double covisible_fraction = 0.0;
};

struct EvalResult {
  std::vector<FrameMetrics> frames;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  int scored_frames = 0;
};

/// Scores each frame; frames without covisible pixels are recorded but left
/// out of the means, as are frames whose SSIM is undefined (for the SSIM mean).
EvalResult evaluate_frames(std::span<const ImageRGB> preds, std::span<const ImageRGB> gts,
                           std::span<const Mask> masks);

}  // namespace msdyn
