#include "msdyn/error.hpp"
#include "msdyn/losses.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace msdyn;
using namespace msdyn::testing;

namespace {

RenderOutput flat_render(int w, int h, double value) {
  RenderOutput r(w, h);
  std::fill(r.color.begin(), r.color.end(), value);
  std::fill(r.alpha.begin(), r.alpha.end(), 1.0);
  std::fill(r.depth.begin(), r.depth.end(), 2.0);
  return r;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("huber values and continuity") {
    CHECK(huber(0.0, 2.0) == 0.0);
    CHECK(huber(1.0, 2.0) == doctest::Approx(0.25));
    CHECK(huber(3.0, 2.0) == doctest::Approx(2.0));
    CHECK(huber(-3.0, 2.0) == doctest::Approx(2.0));
    const double below = huber(2.0 - 1e-9, 2.0), above = huber(2.0 + 1e-9, 2.0);
    CHECK(std::abs(below - above) < 1e-8);
  }

  TEST_CASE("loss weights validate") {
    LossWeights w;
    CHECK_NOTHROW(w.validate());
    w.depth = -0.1;
    CHECK_THROWS_AS(w.validate(), Error);
    w.depth = NAN;
    CHECK_THROWS_AS(w.validate(), Error);
  }

  TEST_CASE("total is the weighted sum") {
    LossReport t;
    t.rgb = 1.0;
    t.mask = 2.0;
    t.depth = 3.0;
    t.track = 4.0;
    t.local_rigid = 5.0;
    const LossReport r = total_loss(t, LossWeights{});
    CHECK(r.total == doctest::Approx(1.0 + 0.5 * 2.0 + 0.5 * 3.0 + 2.0 * 4.0 + 5.0));
  }

  TEST_CASE("rgb loss vanishes on a perfect render and respects the mask") {
    const RenderOutput r = flat_render(16, 16, 0.4);
    ImageRGB gt(16, 16, 0.4);
    CHECK(rgb_loss(r, gt, nullptr) == doctest::Approx(0.0).epsilon(1e-12));
    // Constant offset: SSIM of flat images reduces to the luminance term.
    ImageRGB off(16, 16, 0.5);
    const double c1 = 0.01 * 0.01;
    const double l = (2 * 0.4 * 0.5 + c1) / (0.16 + 0.25 + c1);
    CHECK(rgb_loss(r, off, nullptr) == doctest::Approx(0.8 * 0.1 + 0.2 * (1.0 - l)).epsilon(1e-9));
    Mask m(16, 16, 0);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 8; ++x) m.at(x, y) = 1;
    }
    ImageRGB half = gt;
    for (int y = 0; y < 16; ++y) {
      for (int x = 8; x < 16; ++x) {
        for (int c = 0; c < 3; ++c) half.at(x, y, c) = 0.9;
      }
    }
    CHECK(rgb_loss(r, half, &m) == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("mask loss is binary cross-entropy") {
    RenderOutput r(4, 4);
    std::fill(r.dynamic_alpha.begin(), r.dynamic_alpha.end(), 0.25);
    Mask gt(4, 4, 0);
    for (int x = 0; x < 4; ++x) gt.at(x, 0) = 3;
    const double want = (4 * -std::log(0.25) + 12 * -std::log(0.75)) / 16.0;
    CHECK(mask_loss(r, gt) == doctest::Approx(want).epsilon(1e-12));
    Mask wrong(5, 4, 0);
    CHECK_THROWS_AS(mask_loss(r, wrong), Error);
  }

  TEST_CASE("depth loss is scale invariant") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(1.0, 4.0);
    RenderOutput r(12, 10);
    DepthMap gt(12, 10);
    for (std::size_t p = 0; p < r.pixel_count(); ++p) {
      r.alpha[p] = 0.9;
      r.depth[p] = u(rng);
      gt.data[p] = static_cast<float>(2.5 * r.depth[p]);
    }
    // Float rounding of the ground truth leaves a tiny residual.
    const DepthLossResult d = depth_loss(r, gt, nullptr);
    CHECK(d.value < 1e-5);
    CHECK(d.scale == doctest::Approx(2.5).epsilon(1e-6));
    CHECK(d.valid_pixels == r.pixel_count());
    // Low alpha and empty ground truth are excluded.
    r.alpha[0] = 0.2;
    gt.data[1] = 0.0f;
    CHECK(depth_loss(r, gt, nullptr).valid_pixels == r.pixel_count() - 2);
    const DepthLossResult fixed = depth_loss(r, gt, nullptr, 1.0);
    CHECK(fixed.scale == 1.0);
    CHECK(fixed.value > 1.0);
  }

  TEST_CASE("local rigidity is zero under rigid motion") {
    std::mt19937_64 rng(32);
    ToyFieldOptions o;
    o.count = 60;
    o.dynamic_fraction = 1.0;
    const CanonicalGaussianField f = toy_field(rng, o);
    const RigidityGraph g = build_rigidity_graph(f, 8);
    CHECK_FALSE(g.edges.empty());
    for (const auto& [a, b] : g.edges) CHECK(a < b);
    const SE3 x = random_se3(rng);
    std::vector<Vec3> posed;
    for (const Vec3& m : f.means) posed.push_back(x.apply(m));
    CHECK(local_rigidity_loss(g, f.means, posed) < 1e-20);
    posed[0] += Vec3(0.1, 0.0, 0.0);
    CHECK(local_rigidity_loss(g, f.means, posed) > 0.0);
  }

  TEST_CASE("rigidity graph skips static Gaussians and duplicates") {
    std::mt19937_64 rng(33);
    ToyFieldOptions o;
    o.count = 40;
    o.dynamic_fraction = 0.5;
    const CanonicalGaussianField f = toy_field(rng, o);
    const RigidityGraph g = build_rigidity_graph(f, 4);
    std::set<std::pair<int, int>> seen;
    for (const auto& e : g.edges) {
      CHECK(f.is_dynamic[e.first] == 1);
      CHECK(f.is_dynamic[e.second] == 1);
      CHECK(seen.insert(e).second);
    }
  }

  TEST_CASE("local rigidity gradients match finite differences") {
    std::mt19937_64 rng(34);
    ToyFieldOptions o;
    o.count = 20;
    o.dynamic_fraction = 1.0;
    CanonicalGaussianField f = toy_field(rng, o);
    const RigidityGraph g = build_rigidity_graph(f, 4);
    std::vector<Vec3> posed;
    std::normal_distribution<double> n(0.0, 0.05);
    for (const Vec3& m : f.means) posed.push_back(m + Vec3(n(rng), n(rng), n(rng)));
    std::vector<Vec3> gp(posed.size(), Vec3::Zero()), gc(posed.size(), Vec3::Zero());
    local_rigidity_loss(g, f.means, posed, &gp, &gc, 1.0);
    auto obj = [&] { return local_rigidity_loss(g, f.means, posed); };
    for (std::size_t i = 0; i < posed.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        CHECK(relative_error(gp[i][a], central_difference(posed[i][a], 1e-6, obj), 1e-8) < 1e-5);
        CHECK(relative_error(gc[i][a], central_difference(f.means[i][a], 1e-6, obj), 1e-8) < 1e-5);
      }
    }
  }

  TEST_CASE("track loss vanishes when the hierarchy reproduces the tracks") {
    const int frames = 3;
    TrackSet tracks(6, frames);
    std::array<MotionLevel, kLevels> levels{empty_level(1, frames), empty_level(2, frames), empty_level(3, frames)};
    TrackBinding b;
    b.weights.slots.resize(6);
    for (int j = 0; j < 6; ++j) {
      const Vec3 p(0.1 * j - 0.3, 0.05 * j, 3.0);
      for (int t = 0; t < frames; ++t) {
        tracks.positions[tracks.at(j, t)] = p;
        tracks.visible[tracks.at(j, t)] = 1;
        tracks.confidence[tracks.at(j, t)] = 1.0;
      }
      b.track.push_back(j);
      b.canonical.push_back(p);
    }
    const Camera cam = toy_camera(32, 32, 30.0);
    CHECK(track_loss(levels, b, tracks, cam, 1) == 0.0);
    // A 1 px shift in x at depth 3 is 0.1 m / 30 px.
    for (int j = 0; j < 6; ++j) tracks.positions[tracks.at(j, 2)] += Vec3(0.1, 0.0, 0.0);
    CHECK(track_loss(levels, b, tracks, cam, 2) == doctest::Approx(huber(1.0, 2.0)).epsilon(1e-9));
  }

  TEST_CASE("term gradients on toy scenes") {
    for (std::uint64_t seed = 101; seed <= 105; ++seed) {
      const GradientReport r = check_scene_gradients(seed);
      INFO("worst " << r.worst_label);
      CHECK(r.worst < 1e-3);
    }
  }
}
