#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace msdyn {

/// Row-major image with `Channels` interleaved values per pixel.
template <typename T, int Channels>
struct Image {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, T fill = T{})
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * Channels, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool same_shape(int w, int h) const { return width == w && height == h; }

  T& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * Channels + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * Channels + c];
  }
};

using ImageRGB = Image<double, 3>;
using ImageF = Image<double, 1>;
using Mask = Image<std::uint8_t, 1>;
using ImageRGB8 = Image<std::uint8_t, 3>;
using DepthMap = Image<float, 1>;

ImageRGB to_double(const ImageRGB8& img);
/// Clamps to [0,1] and rounds to the nearest 8-bit level.
ImageRGB8 to_rgb8(const ImageRGB& img);

void write_png(const std::filesystem::path& path, const ImageRGB8& img);
ImageRGB8 read_png(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Mask& img);
Mask read_pgm(const std::filesystem::path& path);

}  // namespace msdyn
