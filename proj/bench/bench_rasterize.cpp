#include "msdyn/render.hpp"

#include <benchmark/benchmark.h>

#include <random>

namespace {

using namespace msdyn;

struct Scene {
  PosedGaussianField field;
  Camera cam;
};

Scene make_scene(int n, int res) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Scene s;
  s.cam.width = res;
  s.cam.height = res;
  s.cam.fx = s.cam.fy = 0.8 * res;
  s.cam.cx = s.cam.cy = 0.5 * (res - 1);
  CanonicalGaussianField f;
  for (int i = 0; i < n; ++i) {
    f.means.push_back(Vec3(u(rng), u(rng), 3.0 + 0.5 * u(rng)));
    f.log_scales.push_back(Vec3::Constant(std::log(0.03 + 0.02 * (u(rng) + 1.0))));
    f.rotations.push_back(UnitQuaternion::from_raw(1.0, 0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)));
    f.colors.push_back(Vec3(u(rng), u(rng), u(rng)));
    f.opacity_logits.push_back(u(rng));
    f.is_dynamic.push_back(i % 2);
    f.instance_id.push_back(i % 2);
  }
  std::vector<Rigid> identity(n);
  s.field = pose_field(f, identity);
  return s;
}

RenderGrad ones(int res) {
  RenderGrad g(res, res);
  std::fill(g.color.begin(), g.color.end(), 1.0);
  std::fill(g.depth.begin(), g.depth.end(), 0.1);
  std::fill(g.alpha.begin(), g.alpha.end(), 0.1);
  return g;
}

void BM_Rasterize(benchmark::State& state) {
  const Scene s = make_scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(rasterize(s.field, s.cam));
}

void BM_RasterizeReference(benchmark::State& state) {
  const Scene s = make_scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(reference::rasterize(s.field, s.cam));
}

void BM_Backward(benchmark::State& state) {
  const Scene s = make_scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const RenderGrad g = ones(s.cam.width);
  for (auto _ : state) benchmark::DoNotOptimize(rasterize_backward(s.field, s.cam, g));
}

void BM_BackwardReference(benchmark::State& state) {
  const Scene s = make_scene(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const RenderGrad g = ones(s.cam.width);
  for (auto _ : state) benchmark::DoNotOptimize(reference::rasterize_backward(s.field, s.cam, g));
}

}  // namespace

BENCHMARK(BM_Rasterize)->Args({1000, 64})->Args({10000, 64})->Args({10000, 128});
BENCHMARK(BM_RasterizeReference)->Args({1000, 64})->Args({10000, 64});
BENCHMARK(BM_Backward)->Args({1000, 64})->Args({10000, 64});
BENCHMARK(BM_BackwardReference)->Args({1000, 64})->Args({10000, 64});

BENCHMARK_MAIN();
