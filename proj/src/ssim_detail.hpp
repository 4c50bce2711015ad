#pragma once

#include "msdyn/image.hpp"

#include <cstdint>
#include <vector>

namespace msdyn::detail {

inline constexpr int kSsimRadius = 3;  // 7x7 window
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Uniform-window moments of one channel of two interleaved images.
struct SsimMoments {
  double mx = 0.0, my = 0.0, exx = 0.0, eyy = 0.0, exy = 0.0;
};

inline SsimMoments ssim_moments(const double* x, const double* y, int width, int channels, int c,
                                int px, int py) {
  SsimMoments m;
  for (int dy = -kSsimRadius; dy <= kSsimRadius; ++dy) {
    for (int dx = -kSsimRadius; dx <= kSsimRadius; ++dx) {
      const std::size_t q = (static_cast<std::size_t>(py + dy) * width + (px + dx)) * channels + c;
      m.mx += x[q];
      m.my += y[q];
      m.exx += x[q] * x[q];
      m.eyy += y[q] * y[q];
      m.exy += x[q] * y[q];
    }
  }
  constexpr double inv = 1.0 / ((2 * kSsimRadius + 1) * (2 * kSsimRadius + 1));
  m.mx *= inv;
  m.my *= inv;
  m.exx *= inv;
  m.eyy *= inv;
  m.exy *= inv;
  return m;
}

struct SsimValue {
  double value = 0.0;
  // Partials of the value with respect to mx, exx and exy.
  double d_mx = 0.0, d_exx = 0.0, d_exy = 0.0;
};

inline SsimValue ssim_value(const SsimMoments& m) {
  const double vx = m.exx - m.mx * m.mx;
  const double vy = m.eyy - m.my * m.my;
  const double cxy = m.exy - m.mx * m.my;
  const double a = 2.0 * m.mx * m.my + kSsimC1;
  const double b = 2.0 * cxy + kSsimC2;
  const double c = m.mx * m.mx + m.my * m.my + kSsimC1;
  const double d = vx + vy + kSsimC2;
  SsimValue out;
  out.value = (a * b) / (c * d);
  const double s = out.value;
  out.d_mx = s * (2.0 * m.my / a - 2.0 * m.my / b - 2.0 * m.mx / c + 2.0 * m.mx / d);
  out.d_exx = -s / d;
  out.d_exy = s * 2.0 / b;
  return out;
}

// Pixels whose whole window lies inside the image and, when a mask is given,
// inside the mask.
inline std::vector<std::uint8_t> ssim_window_valid(int width, int height, const Mask* mask) {
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(width) * height, 0);
  for (int y = kSsimRadius; y < height - kSsimRadius; ++y) {
    for (int x = kSsimRadius; x < width - kSsimRadius; ++x) {
      bool ok = true;
      if (mask != nullptr) {
        for (int dy = -kSsimRadius; dy <= kSsimRadius && ok; ++dy) {
          for (int dx = -kSsimRadius; dx <= kSsimRadius && ok; ++dx) {
            ok = mask->at(x + dx, y + dy) != 0;
          }
        }
      }
      valid[static_cast<std::size_t>(y) * width + x] = ok ? 1 : 0;
    }
  }
  return valid;
}

}  // namespace msdyn::detail
