#include "msdyn/error.hpp"
#include "msdyn/optim.hpp"
#include "msdyn/synth.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace msdyn;
using namespace msdyn::testing;

namespace {

SceneDataset small_scene(SceneKind kind, std::uint64_t seed = 3, int tracks = 64) {
  SceneSpec spec;
  spec.kind = kind;
  spec.frames = 6;
  spec.width = 32;
  spec.height = 32;
  spec.seed = seed;
  spec.track_count = tracks;
  return generate(spec).dataset;
}

OptimConfig small_config() {
  OptimConfig c;
  c.epochs = 3;
  c.target_dynamic = 300;
  c.target_static = 500;
  c.densify_every = 2;
  c.hierarchy.k_primitive = 2;
  c.hierarchy.k_grain = 4;
  return c;
}

}  // namespace

TEST_SUITE("optim") {
  TEST_CASE("adam matches a hand-written reference on x^2") {
    AdamConfig cfg;
    AdamMoments moments(1);
    std::vector<double> x{3.0};
    double rx = 3.0, m = 0.0, v = 0.0;
    const double lr = 0.1;
    for (long t = 1; t <= 200; ++t) {
      const std::vector<double> g{2.0 * x[0]};
      moments.step(0, x, g, lr, t, cfg);
      const double rg = 2.0 * rx;
      m = 0.9 * m + 0.1 * rg;
      v = 0.999 * v + 0.001 * rg * rg;
      const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
      rx -= lr * mh / (std::sqrt(vh) + 1e-8);
      CHECK(std::abs(x[0] - rx) < 1e-12);
    }
    CHECK(std::abs(x[0]) < 0.5);
  }

  TEST_CASE("first adam step has magnitude lr") {
    AdamMoments moments(3);
    std::vector<double> x{1.0, 1.0, 1.0};
    const std::vector<double> g{5.0, -0.01, 300.0};
    moments.step(0, x, g, 0.01, 1, AdamConfig{});
    CHECK(x[0] == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(x[1] == doctest::Approx(1.01).epsilon(1e-6));
    CHECK(x[2] == doctest::Approx(0.99).epsilon(1e-6));
  }

  TEST_CASE("moments remap copies sources and zeros new entries") {
    AdamMoments moments(4);
    std::vector<double> x(4, 0.0);
    moments.step(0, x, std::vector<double>{1, 2, 3, 4}, 0.1, 1, AdamConfig{});
    const std::vector<int> src{1, 1, 0};
    const std::vector<std::uint8_t> fresh{0, 1, 0};
    const auto before = moments.first();
    moments.remap(src, fresh, 2);
    CHECK(moments.size() == 6);
    CHECK(moments.first()[0] == before[2]);
    CHECK(moments.first()[1] == before[3]);
    CHECK(moments.first()[2] == 0.0);
    CHECK(moments.first()[4] == before[0]);
  }

  TEST_CASE("config validation and json round trip") {
    OptimConfig c;
    c.epochs = 7;
    c.lr.colors = 0.0;
    c.weights.track = 0.25;
    c.hierarchy.active_levels = 2;
    const OptimConfig back = OptimConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.epochs == 7);
    CHECK(back.hierarchy.active_levels == 2);
    OptimConfig bad;
    bad.lr.means = -1.0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = OptimConfig{};
    bad.epochs = -1;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK_THROWS_AS(OptimConfig::from_json("{not json"), Error);
  }

  TEST_CASE("stride hits the sample target") {
    Mask m(64, 64, 0);
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) m.at(x + 16, y + 8) = 1;
    }
    const StrideChoice s = choose_stride(m, 5000);
    CHECK(std::abs(static_cast<double>(s.count) - 5000.0) <= 500.0);
    CHECK(s.count == stride_samples(m, s.stride).size());
    for (const Vec2& p : stride_samples(m, s.stride)) {
      CHECK(m.at(static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y()))) != 0);
    }
    CHECK(choose_stride(Mask(8, 8, 0), 100).count == 0);
  }

  TEST_CASE("initialization needs dynamic pixels") {
    SceneDataset ds = small_scene(SceneKind::Rigid);
    for (Mask& m : ds.train.masks) std::fill(m.data.begin(), m.data.end(), 0);
    try {
      initialize(ds, small_config());
      FAIL("expected NoDynamicPixels");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::NoDynamicPixels);
    }
  }

  TEST_CASE("object level alone fits noiseless rigid tracks") {
    // Enough tracks that every frame has three covisible ones per body.
    const SceneDataset ds = small_scene(SceneKind::Rigid, 3, 256);
    OptimConfig c = small_config();
    c.hierarchy.active_levels = 1;
    const TrainState s = initialize(ds, c);
    CHECK(track_fit_rms(s.dyn.levels, s.binding, ds.tracks) < 1e-6);
    CHECK(s.field.count() > 0);
    CHECK(s.dyn.weights.size() == s.field.count());
  }

  TEST_CASE("zero learning rates leave parameters unchanged") {
    const SceneDataset ds = small_scene(SceneKind::Articulated);
    OptimConfig c = small_config();
    c.lr = LearningRates{0, 0, 0, 0, 0, 0, 0, 0, 0};
    c.densify_every = 0;
    TrainState s = initialize(ds, c);
    const TrainingData data = prepare_training_data(ds);
    const TrainState before = s;
    std::vector<StepRecord> steps;
    train_epoch(s, data, c, [&](const StepRecord& r) { steps.push_back(r); });
    CHECK(steps.size() == data.steps_per_epoch());
    CHECK(s.field.means == before.field.means);
    CHECK(s.field.colors == before.field.colors);
    CHECK(s.field.opacity_logits == before.field.opacity_logits);
    for (int l = 0; l < kLevels; ++l) {
      for (std::size_t k = 0; k < s.dyn.levels[l].patterns.size(); ++k) {
        CHECK(s.dyn.levels[l].patterns[k].translation == before.dyn.levels[l].patterns[k].translation);
      }
    }
    for (const StepRecord& r : steps) {
      CHECK(frame_loss(before, data, c, r.frame).total == r.loss.total);
    }
  }

  TEST_CASE("zero epochs returns the initialization") {
    const SceneDataset ds = small_scene(SceneKind::Rigid);
    OptimConfig c = small_config();
    c.epochs = 0;
    const FitResult r = fit(ds, c);
    const TrainState s = initialize(ds, c);
    CHECK(r.checkpoint.field.means == s.field.means);
    CHECK(r.checkpoint.field.log_scales == s.field.log_scales);
    CHECK(r.checkpoint.dyn.levels[0].patterns.size() == s.dyn.levels[0].patterns.size());
  }

  TEST_CASE("training reduces the loss and stays finite") {
    const SceneDataset ds = small_scene(SceneKind::Articulated, 5);
    OptimConfig c = small_config();
    c.epochs = 12;
    TrainState s = initialize(ds, c);
    const TrainingData data = prepare_training_data(ds);
    std::vector<double> totals;
    for (int e = 0; e < c.epochs; ++e) totals.push_back(train_epoch(s, data, c).total);
    CHECK(parameters_finite(s));
    CHECK(totals.back() < 0.7 * totals.front());
    int decreases = 0;
    for (std::size_t e = 1; e < totals.size(); ++e) decreases += totals[e] < totals[e - 1] ? 1 : 0;
    CHECK(decreases >= static_cast<int>(totals.size()) / 2);
  }

  TEST_CASE("fits are deterministic") {
    const SceneDataset ds = small_scene(SceneKind::Deformable, 7);
    OptimConfig c = small_config();
    const auto dir = temp_dir("optim_det");
    fit(ds, c, FitOutputs{dir / "a.ckpt", dir / "a.csv", {}});
    fit(ds, c, FitOutputs{dir / "b.ckpt", dir / "b.csv", {}});
    CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
    CHECK(read_file(dir / "a.csv") == read_file(dir / "b.csv"));
  }
}
