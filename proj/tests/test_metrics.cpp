#include "msdyn/error.hpp"
#include "msdyn/metrics.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace msdyn;
using namespace msdyn::testing;

namespace {

ImageRGB random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageRGB img(w, h);
  for (double& v : img.data) v = u(rng);
  return img;
}

ImageRGB crop(const ImageRGB& img, int x0, int y0, int w, int h) {
  ImageRGB out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
    }
  }
  return out;
}

Mask left_half(int w, int h) {
  Mask m(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w / 2; ++x) m.at(x, y) = 1;
  }
  return m;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("psnr closed forms") {
    ImageRGB gt(10, 8, 0.3);
    const Mask all(10, 8, 1);
    CHECK(masked_psnr(gt, gt, all) == kPsnrCap);
    ImageRGB pred(10, 8, 0.4);
    CHECK(masked_psnr(pred, gt, all) == doctest::Approx(20.0).epsilon(1e-12));
  }

  TEST_CASE("psnr errors") {
    const ImageRGB a(4, 4, 0.0);
    CHECK_THROWS_AS(masked_psnr(a, ImageRGB(5, 4, 0.0), Mask(4, 4, 1)), Error);
    try {
      masked_psnr(a, a, Mask(4, 4, 0));
      FAIL("expected EmptyMask");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::EmptyMask);
    }
  }

  TEST_CASE("masked metrics equal metrics of the cropped half") {
    std::mt19937_64 rng(41);
    const ImageRGB a = random_image(rng, 24, 16), b = random_image(rng, 24, 16);
    const Mask half = left_half(24, 16);
    const ImageRGB ca = crop(a, 0, 0, 12, 16), cb = crop(b, 0, 0, 12, 16);
    const Mask full(12, 16, 1);
    CHECK(masked_psnr(a, b, half) == doctest::Approx(masked_psnr(ca, cb, full)).epsilon(1e-12));
    CHECK(masked_ssim(a, b, half) == doctest::Approx(masked_ssim(ca, cb, full)).epsilon(1e-12));
  }

  TEST_CASE("ssim identity and constant shift") {
    std::mt19937_64 rng(42);
    const ImageRGB a = random_image(rng, 16, 16);
    const Mask all(16, 16, 1);
    CHECK(masked_ssim(a, a, all) == doctest::Approx(1.0).epsilon(1e-12));
    const ImageRGB gt(16, 16, 0.5), pred(16, 16, 0.6);
    const double c1 = 0.01 * 0.01;
    const double want = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
    CHECK(masked_ssim(pred, gt, all) == doctest::Approx(want).epsilon(1e-12));
    // No 7x7 window fits inside a 5x5 image.
    CHECK(std::isnan(masked_ssim(ImageRGB(5, 5, 0.1), ImageRGB(5, 5, 0.1), Mask(5, 5, 1))));
  }

  TEST_CASE("metrics are symmetric") {
    std::mt19937_64 rng(43);
    for (int i = 0; i < 10; ++i) {
      const ImageRGB a = random_image(rng, 20, 14), b = random_image(rng, 20, 14);
      const Mask m = left_half(20, 14);
      CHECK(masked_psnr(a, b, m) == masked_psnr(b, a, m));
      CHECK(masked_ssim(a, b, m) == doctest::Approx(masked_ssim(b, a, m)).epsilon(1e-14));
    }
  }

  TEST_CASE("dropping zero-error pixels never raises the error") {
    std::mt19937_64 rng(44);
    const ImageRGB gt = random_image(rng, 16, 16);
    ImageRGB pred = gt;
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 8; ++x) pred.at(x, y, 1) += 0.05;
    }
    const Mask all(16, 16, 1), half = left_half(16, 16);
    CHECK(masked_psnr(pred, gt, all) >= masked_psnr(pred, gt, half));
  }

  TEST_CASE("frame aggregation skips frames without covisible pixels") {
    std::mt19937_64 rng(45);
    std::vector<ImageRGB> preds, gts;
    std::vector<Mask> masks;
    for (int t = 0; t < 4; ++t) {
      gts.push_back(random_image(rng, 12, 12));
      preds.push_back(gts.back());
      for (double& v : preds.back().data) v = std::min(1.0, v + 0.01 * (t + 1));
      masks.push_back(Mask(12, 12, t == 2 ? 0 : 1));
    }
    const EvalResult r = evaluate_frames(preds, gts, masks);
    REQUIRE(r.frames.size() == 4);
    CHECK(r.scored_frames == 3);
    CHECK(r.frames[2].covisible_fraction == 0.0);
    double sum = 0.0;
    for (int t : {0, 1, 3}) sum += masked_psnr(preds[t], gts[t], masks[t]);
    CHECK(r.mean_psnr == doctest::Approx(sum / 3.0).epsilon(1e-14));
    CHECK_THROWS_AS(evaluate_frames(std::span<const ImageRGB>(preds.data(), 3), gts, masks), Error);
  }
}
