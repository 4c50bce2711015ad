#include "msdyn/error.hpp"
#include "msdyn/io.hpp"
#include "msdyn/optim.hpp"
#include "msdyn/synth.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>

using namespace msdyn;
using namespace msdyn::testing;
namespace fs = std::filesystem;

namespace {

SceneDataset small_dataset(std::uint64_t seed = 1) {
  SceneSpec s;
  s.kind = SceneKind::Articulated;
  s.frames = 4;
  s.width = 32;
  s.height = 32;
  s.seed = seed;
  s.track_count = 40;
  return generate(s).dataset;
}

Checkpoint toy_checkpoint() {
  std::mt19937_64 rng(51);
  Checkpoint c;
  ToyFieldOptions o;
  o.count = 12;
  c.field = toy_field(rng, o);
  c.dyn = toy_dynamics(rng, c.field, 3);
  c.binding.track = {0, 2};
  c.binding.canonical = {Vec3(0.1, 0.2, 3.0), Vec3(-0.1, 0.0, 2.9)};
  c.binding.weights.slots = {c.dyn.weights.slots[0], c.dyn.weights.slots[1]};
  c.intrinsics = Intrinsics{16, 16, 14.0, 14.0, 7.5, 7.5};
  c.train_cameras.assign(3, Mat4::Identity());
  c.config_json = R"({"epochs": 0})";
  return c;
}

void overwrite(const fs::path& path, std::size_t offset, const std::string& bytes) {
  std::string data = read_file(path);
  data.replace(offset, bytes.size(), bytes);
  std::ofstream(path, std::ios::binary | std::ios::trunc) << data;
}

ErrorKind load_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Io;
}

// Offset of a checkpoint section's payload.
std::size_t section_offset(const std::string& bytes, std::uint32_t wanted) {
  std::size_t off = 8;
  while (off + 12 <= bytes.size()) {
    std::uint32_t tag;
    std::uint64_t len;
    std::memcpy(&tag, bytes.data() + off, 4);
    std::memcpy(&len, bytes.data() + off + 4, 8);
    if (tag == wanted) return off + 12;
    off += 12 + len;
  }
  return std::string::npos;
}

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("png and pgm round trips") {
    const auto dir = temp_dir("io_png");
    ImageRGB8 img(5, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint8_t>(i * 17);
    write_png(dir / "a.png", img);
    CHECK(read_png(dir / "a.png").data == img.data);
    Mask m(4, 6, 0);
    m.at(1, 2) = 3;
    write_pgm(dir / "m.pgm", m);
    const Mask back = read_pgm(dir / "m.pgm");
    CHECK(back.width == 4);
    CHECK(back.data == m.data);
    CHECK_THROWS_AS(read_png(dir / "missing.png"), Error);
  }

  TEST_CASE("dataset round trip is lossless") {
    const SceneDataset ds = small_dataset();
    const auto dir = temp_dir("io_ds");
    save_dataset(ds, dir / "a");
    const SceneDataset back = load_dataset(dir / "a");
    CHECK(back.frames == ds.frames);
    CHECK(back.canonical_frame == ds.canonical_frame);
    CHECK(back.intrinsics.fx == ds.intrinsics.fx);
    for (int t = 0; t < ds.frames; ++t) {
      CHECK(back.train.cameras[t] == ds.train.cameras[t]);
      CHECK(back.train.rgb[t].data == ds.train.rgb[t].data);
      CHECK(back.train.depth[t].data == ds.train.depth[t].data);
      CHECK(back.train.masks[t].data == ds.train.masks[t].data);
      CHECK(back.eval.covisibility[t].data == ds.eval.covisibility[t].data);
    }
    CHECK(back.tracks.positions == ds.tracks.positions);
    CHECK(back.tracks.confidence == ds.tracks.confidence);
    CHECK(back.tracks.visible == ds.tracks.visible);
    CHECK(back.tracks.instance_id == ds.tracks.instance_id);
    save_dataset(back, dir / "b");
    CHECK(directories_identical(dir / "a", dir / "b"));
  }

  TEST_CASE("dataset loading errors") {
    const SceneDataset ds = small_dataset(2);
    const auto dir = temp_dir("io_ds_err");
    CHECK(load_error([&] { load_dataset(dir / "nothing"); }) == ErrorKind::MissingManifest);

    save_dataset(ds, dir / "trunc");
    const std::string tracks = read_file(dir / "trunc" / "tracks.bin");
    std::ofstream(dir / "trunc" / "tracks.bin", std::ios::binary | std::ios::trunc)
        << tracks.substr(0, tracks.size() - 7);
    try {
      load_dataset(dir / "trunc");
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Format);
      CHECK(std::string(e.what()).find("tracks.bin") != std::string::npos);
    }

    save_dataset(ds, dir / "count");
    fs::remove(dir / "count" / "rgb" / "00002.png");
    CHECK(load_error([&] { load_dataset(dir / "count"); }) == ErrorKind::CountMismatch);

    save_dataset(ds, dir / "swapped");
    overwrite(dir / "swapped" / "tracks.bin", 0, "TDSM");
    try {
      load_dataset(dir / "swapped");
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("byte-swapped") != std::string::npos);
    }
  }

  TEST_CASE("track instances follow the mask majority") {
    SceneDataset ds = small_dataset(3);
    const std::vector<int> before = ds.tracks.instance_id;
    for (int& id : ds.tracks.instance_id) id = 0;
    derive_track_instances(ds);
    CHECK(ds.tracks.instance_id == before);
  }

  TEST_CASE("checkpoint round trip preserves renders exactly") {
    const Checkpoint c = toy_checkpoint();
    const auto dir = temp_dir("io_ckpt");
    save_checkpoint(c, dir / "a.ckpt");
    const Checkpoint back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.field.means == c.field.means);
    CHECK(back.field.instance_id == c.field.instance_id);
    CHECK(back.binding.track == c.binding.track);
    CHECK(back.config_json == c.config_json);
    CHECK(back.dyn.canonical_frame == c.dyn.canonical_frame);
    const Camera cam = make_camera(c.intrinsics, Mat4::Identity());
    for (int t = 0; t < c.dyn.frames; ++t) {
      const RenderOutput a = render_frame(c.field, c.dyn, cam, t);
      const RenderOutput b = render_frame(back.field, back.dyn, cam, t);
      CHECK(a.color == b.color);
      CHECK(a.depth == b.depth);
    }
    save_checkpoint(back, dir / "b.ckpt");
    CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
  }

  TEST_CASE("checkpoint loading errors") {
    const Checkpoint c = toy_checkpoint();
    const auto dir = temp_dir("io_ckpt_err");
    save_checkpoint(c, dir / "c.ckpt");
    const std::string good = read_file(dir / "c.ckpt");

    fs::copy_file(dir / "c.ckpt", dir / "magic.ckpt");
    overwrite(dir / "magic.ckpt", 0, "XXXX");
    CHECK(load_error([&] { load_checkpoint(dir / "magic.ckpt"); }) == ErrorKind::Version);

    fs::copy_file(dir / "c.ckpt", dir / "version.ckpt");
    overwrite(dir / "version.ckpt", 4, std::string("\x09\x00\x00\x00", 4));
    CHECK(load_error([&] { load_checkpoint(dir / "version.ckpt"); }) == ErrorKind::Version);

    fs::copy_file(dir / "c.ckpt", dir / "levels.ckpt");
    const std::size_t off = section_offset(good, 3);
    REQUIRE(off != std::string::npos);
    overwrite(dir / "levels.ckpt", off, std::string("\x02\x00\x00\x00", 4));
    CHECK(load_error([&] { load_checkpoint(dir / "levels.ckpt"); }) == ErrorKind::Format);

    std::ofstream(dir / "short.ckpt", std::ios::binary) << good.substr(0, good.size() / 2);
    CHECK(load_error([&] { load_checkpoint(dir / "short.ckpt"); }) == ErrorKind::Format);
    CHECK(load_error([&] { load_checkpoint(dir / "absent.ckpt"); }) == ErrorKind::Io);
  }

  TEST_CASE("atomic writes replace the target") {
    const auto dir = temp_dir("io_atomic");
    write_file_atomic(dir / "f.txt", "one");
    write_file_atomic(dir / "f.txt", "two");
    CHECK(read_file(dir / "f.txt") == "two");
    int files = 0;
    for (const auto& e : fs::directory_iterator(dir)) files += e.is_regular_file() ? 1 : 0;
    CHECK(files == 1);
  }
}
