#include "msdyn/metrics.hpp"
#include "msdyn/error.hpp"
#include "msdyn/log.hpp"

#include "ssim_detail.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace msdyn {

namespace {

std::size_t check_inputs(const ImageRGB& pred, const ImageRGB& gt, const Mask& mask,
                         const char* what) {
  if (!pred.same_shape(gt.width, gt.height) || !mask.same_shape(gt.width, gt.height)) {
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": image and mask shapes differ");
  }
  std::size_t n = 0;
  for (auto m : mask.data) n += m != 0 ? 1 : 0;
  if (n == 0) throw Error(ErrorKind::EmptyMask, std::string(what) + ": mask has no pixels");
  return n;
}

}  // namespace

double masked_psnr(const ImageRGB& pred, const ImageRGB& gt, const Mask& mask) {
  const std::size_t n = check_inputs(pred, gt, mask, "masked_psnr");
  double sse = 0.0;
  for (std::size_t p = 0; p < mask.data.size(); ++p) {
    if (mask.data[p] == 0) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = pred.data[p * 3 + c] - gt.data[p * 3 + c];
      sse += d * d;
    }
  }
  const double mse = sse / (3.0 * static_cast<double>(n));
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double masked_ssim(const ImageRGB& pred, const ImageRGB& gt, const Mask& mask) {
  check_inputs(pred, gt, mask, "masked_ssim");
  const std::vector<std::uint8_t> valid = detail::ssim_window_valid(gt.width, gt.height, &mask);
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < gt.height; ++y) {
    for (int x = 0; x < gt.width; ++x) {
      if (!valid[static_cast<std::size_t>(y) * gt.width + x]) continue;
      for (int c = 0; c < 3; ++c) {
        sum += detail::ssim_value(
                   detail::ssim_moments(pred.data.data(), gt.data.data(), gt.width, 3, c, x, y))
                   .value;
      }
      ++n;
    }
  }
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return sum / (3.0 * static_cast<double>(n));
}

EvalResult evaluate_frames(std::span<const ImageRGB> preds, std::span<const ImageRGB> gts,
                           std::span<const Mask> masks) {
  if (preds.size() != gts.size() || preds.size() != masks.size()) {
    throw Error(ErrorKind::CountMismatch, "evaluate_frames: frame counts differ");
  }
  EvalResult r;
  double psnr_sum = 0.0;
  double ssim_sum = 0.0;
  int ssim_count = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    FrameMetrics f;
    f.frame = static_cast<int>(i);
    std::size_t covis = 0;
    for (auto m : masks[i].data) covis += m != 0 ? 1 : 0;
    f.covisible_fraction =
        masks[i].data.empty() ? 0.0 : static_cast<double>(covis) / masks[i].data.size();
    if (covis == 0) {
      warn("frame " + std::to_string(i) + ": no covisible pixels; skipped");
      f.psnr = std::numeric_limits<double>::quiet_NaN();
      f.ssim = std::numeric_limits<double>::quiet_NaN();
      r.frames.push_back(f);
      continue;
    }
    f.psnr = masked_psnr(preds[i], gts[i], masks[i]);
    f.ssim = masked_ssim(preds[i], gts[i], masks[i]);
    psnr_sum += f.psnr;
    ++r.scored_frames;
    if (std::isnan(f.ssim)) {
      warn("frame " + std::to_string(i) + ": no full SSIM window inside the covisibility mask");
    } else {
      ssim_sum += f.ssim;
      ++ssim_count;
    }
    r.frames.push_back(f);
  }
  r.mean_psnr = r.scored_frames > 0 ? psnr_sum / r.scored_frames
                                    : std::numeric_limits<double>::quiet_NaN();
  r.mean_ssim = ssim_count > 0 ? ssim_sum / ssim_count : std::numeric_limits<double>::quiet_NaN();
  return r;
}

}  // namespace msdyn
