#include "msdyn/io.hpp"
#include "msdyn/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

namespace msdyn {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

Camera make_camera(const Intrinsics& k, const Mat4& world_to_camera) {
  Camera cam;
  cam.fx = k.fx;
  cam.fy = k.fy;
  cam.cx = k.cx;
  cam.cy = k.cy;
  cam.width = k.width;
  cam.height = k.height;
  cam.world_to_camera = SE3::from_matrix(world_to_camera);
  return cam;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error(ErrorKind::Io, "cannot rename onto " + path.string());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

class ByteWriter {
 public:
  template <typename T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_bytes(const std::string& s) { buf_ += s; }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string name, std::size_t base = 0)
      : data_(data), name_(std::move(name)), base_(base) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + off_, sizeof(T));
    off_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    std::string_view s = data_.substr(off_, n);
    off_ += n;
    return s;
  }
  std::size_t offset() const { return base_ + off_; }
  std::size_t remaining() const { return data_.size() - off_; }
  const std::string& name() const { return name_; }
  [[noreturn]] void fail(ErrorKind kind, const std::string& what) const {
    throw Error(kind, name_ + " at offset " + std::to_string(offset()) + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - off_ < n) {
      fail(ErrorKind::Format, "truncated; need " + std::to_string(n) + " more bytes, " +
                                  std::to_string(data_.size() - off_) + " remain");
    }
  }
  std::string_view data_;
  std::string name_;
  std::size_t base_;
  std::size_t off_ = 0;
};

std::string frame_name(int t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.%s", t, ext);
  return buf;
}

json matrices_to_json(const std::vector<Mat4>& mats) {
  json arr = json::array();
  for (const Mat4& m : mats) {
    json row = json::array();
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) row.push_back(m(r, c));
    }
    arr.push_back(row);
  }
  return arr;
}

std::vector<Mat4> matrices_from_json(const json& arr, const std::string& file) {
  std::vector<Mat4> out;
  if (!arr.is_array()) throw Error(ErrorKind::Format, file + ": camera list is not an array");
  for (const auto& row : arr) {
    if (!row.is_array() || row.size() != 16) {
      throw Error(ErrorKind::Format, file + ": each camera must have 16 values");
    }
    Mat4 m;
    for (int i = 0; i < 16; ++i) m(i / 4, i % 4) = row[i].get<double>();
    out.push_back(m);
  }
  return out;
}

std::string depth_bytes(const DepthMap& d) {
  return std::string(reinterpret_cast<const char*>(d.data.data()), d.data.size() * sizeof(float));
}

void write_png_atomic(const fs::path& path, const ImageRGB8& img) {
  fs::path tmp = path;
  tmp += ".tmp.png";
  write_png(tmp, img);
  fs::rename(tmp, path);
}

void write_pgm_atomic(const fs::path& path, const Mask& img) {
  fs::path tmp = path;
  tmp += ".tmp.pgm";
  write_pgm(tmp, img);
  fs::rename(tmp, path);
}

void save_views(const ViewSet& views, const fs::path& dir, bool with_covis) {
  fs::create_directories(dir / "rgb");
  fs::create_directories(dir / "depth");
  fs::create_directories(dir / "mask");
  if (with_covis) fs::create_directories(dir / "covis");
  for (std::size_t t = 0; t < views.size(); ++t) {
    const int ti = static_cast<int>(t);
    write_png_atomic(dir / "rgb" / frame_name(ti, "png"), views.rgb[t]);
    write_file_atomic(dir / "depth" / frame_name(ti, "f32"), depth_bytes(views.depth[t]));
    write_pgm_atomic(dir / "mask" / frame_name(ti, "pgm"), views.masks[t]);
    if (with_covis) write_pgm_atomic(dir / "covis" / frame_name(ti, "pgm"), views.covisibility[t]);
  }
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) return 0;
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) ++n;
  }
  return n;
}

void check_count(const fs::path& dir, const std::string& ext, std::size_t expected) {
  const std::size_t found = count_files(dir, ext);
  if (found != expected) {
    throw Error(ErrorKind::CountMismatch, dir.string() + ": manifest declares " +
                                              std::to_string(expected) + " frames but found " +
                                              std::to_string(found) + " " + ext + " files");
  }
}

ViewSet load_views(const fs::path& dir, const Intrinsics& k, std::size_t frames, bool with_covis) {
  check_count(dir / "rgb", ".png", frames);
  check_count(dir / "depth", ".f32", frames);
  check_count(dir / "mask", ".pgm", frames);
  if (with_covis) check_count(dir / "covis", ".pgm", frames);
  ViewSet v;
  const std::size_t depth_len = static_cast<std::size_t>(k.width) * k.height * sizeof(float);
  auto shape_error = [&](const fs::path& p, int w, int h) {
    return Error(ErrorKind::ShapeMismatch, p.string() + ": expected " + std::to_string(k.width) +
                                               "x" + std::to_string(k.height) + ", found " +
                                               std::to_string(w) + "x" + std::to_string(h));
  };
  for (std::size_t t = 0; t < frames; ++t) {
    const int ti = static_cast<int>(t);
    const fs::path rgb_path = dir / "rgb" / frame_name(ti, "png");
    ImageRGB8 rgb = read_png(rgb_path);
    if (!rgb.same_shape(k.width, k.height)) throw shape_error(rgb_path, rgb.width, rgb.height);
    v.rgb.push_back(std::move(rgb));

    const fs::path depth_path = dir / "depth" / frame_name(ti, "f32");
    const std::string bytes = read_file(depth_path);
    if (bytes.size() != depth_len) {
      throw Error(ErrorKind::Format, depth_path.string() + ": expected " +
                                         std::to_string(depth_len) + " bytes, found " +
                                         std::to_string(bytes.size()));
    }
    DepthMap d(k.width, k.height);
    std::memcpy(d.data.data(), bytes.data(), depth_len);
    v.depth.push_back(std::move(d));

    const fs::path mask_path = dir / "mask" / frame_name(ti, "pgm");
    Mask m = read_pgm(mask_path);
    if (!m.same_shape(k.width, k.height)) throw shape_error(mask_path, m.width, m.height);
    v.masks.push_back(std::move(m));

    if (with_covis) {
      const fs::path covis_path = dir / "covis" / frame_name(ti, "pgm");
      Mask c = read_pgm(covis_path);
      if (!c.same_shape(k.width, k.height)) throw shape_error(covis_path, c.width, c.height);
      v.covisibility.push_back(std::move(c));
    }
  }
  return v;
}

constexpr char kTracksMagic[4] = {'M', 'S', 'D', 'T'};
constexpr char kCheckpointMagic[4] = {'M', 'S', 'G', 'C'};
constexpr std::size_t kTrackRecord = 20;

std::string encode_tracks(const TrackSet& tracks) {
  ByteWriter w;
  w.put_bytes(std::string(kTracksMagic, 4));
  w.put<std::uint32_t>(kTracksVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tracks.count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tracks.frames));
  for (int j = 0; j < tracks.count; ++j) {
    for (int t = 0; t < tracks.frames; ++t) {
      const Vec3& p = tracks.position(j, t);
      w.put<float>(static_cast<float>(p.x()));
      w.put<float>(static_cast<float>(p.y()));
      w.put<float>(static_cast<float>(p.z()));
      w.put<float>(static_cast<float>(tracks.weight(j, t)));
      w.put<std::uint8_t>(tracks.is_visible(j, t) ? 1 : 0);
      w.put<std::uint8_t>(0);
      w.put<std::uint8_t>(0);
      w.put<std::uint8_t>(0);
    }
  }
  return std::move(w.str());
}

// Checks a 4-byte magic, distinguishing a byte-swapped one.
void expect_magic(ByteReader& r, const char (&magic)[4], ErrorKind kind) {
  const std::string_view found = r.take(4);
  if (found == std::string_view(magic, 4)) return;
  const std::string swapped{magic[3], magic[2], magic[1], magic[0]};
  if (found == swapped) {
    r.fail(kind, "byte-swapped magic '" + std::string(found) +
                     "'; file was written with the wrong endianness");
  }
  r.fail(kind, "expected magic '" + std::string(magic, 4) + "', found '" + std::string(found) + "'");
}

TrackSet decode_tracks(const std::string& bytes, const std::string& name) {
  ByteReader r(bytes, name);
  expect_magic(r, kTracksMagic, ErrorKind::Format);
  const auto version = r.get<std::uint32_t>();
  if (version != kTracksVersion) {
    r.fail(ErrorKind::Version, "unsupported version " + std::to_string(version) + ", expected " +
                                   std::to_string(kTracksVersion));
  }
  const auto n = r.get<std::uint32_t>();
  const auto frames = r.get<std::uint32_t>();
  const std::size_t expected = 16 + static_cast<std::size_t>(n) * frames * kTrackRecord;
  if (bytes.size() != expected) {
    throw Error(ErrorKind::Format, name + ": expected " + std::to_string(expected) +
                                       " bytes for " + std::to_string(n) + " tracks x " +
                                       std::to_string(frames) + " frames, found " +
                                       std::to_string(bytes.size()));
  }
  TrackSet tracks(static_cast<int>(n), static_cast<int>(frames));
  for (std::uint32_t j = 0; j < n; ++j) {
    for (std::uint32_t t = 0; t < frames; ++t) {
      const std::size_t i = tracks.at(static_cast<int>(j), static_cast<int>(t));
      const float x = r.get<float>();
      const float y = r.get<float>();
      const float z = r.get<float>();
      tracks.positions[i] = Vec3(x, y, z);
      tracks.confidence[i] = r.get<float>();
      tracks.visible[i] = r.get<std::uint8_t>();
      r.take(3);
    }
  }
  return tracks;
}

}  // namespace

void SceneDataset::validate() const {
  if (frames < 1 || train.size() == 0) throw Error(ErrorKind::EmptyDataset, "dataset has no frames");
  if (train.size() != static_cast<std::size_t>(frames) || train.cameras.size() != train.size() ||
      train.depth.size() != train.size() || train.masks.size() != train.size()) {
    throw Error(ErrorKind::CountMismatch, "training streams disagree with the frame count");
  }
  if (eval.cameras.size() != eval.size() || eval.depth.size() != eval.size() ||
      eval.masks.size() != eval.size() || eval.covisibility.size() != eval.size()) {
    throw Error(ErrorKind::CountMismatch, "held-out streams disagree in length");
  }
  if (canonical_frame < 0 || canonical_frame >= frames) {
    throw Error(ErrorKind::Validation, "canonical frame out of range");
  }
  if (intrinsics.width < 1 || intrinsics.height < 1 || !(intrinsics.fx > 0) ||
      !(intrinsics.fy > 0)) {
    throw Error(ErrorKind::Validation, "invalid intrinsics");
  }
  if (tracks.count > 0 && tracks.frames != frames) {
    throw Error(ErrorKind::CountMismatch, "tracks cover " + std::to_string(tracks.frames) +
                                              " frames, dataset has " + std::to_string(frames));
  }
  tracks.check_consistent();
}

void derive_track_instances(SceneDataset& ds) {
  const Intrinsics& k = ds.intrinsics;
  std::vector<Rigid> w2c;
  for (int t = 0; t < ds.frames; ++t) w2c.push_back(ds.camera(t).world_to_camera.to_rigid());
  for (int j = 0; j < ds.tracks.count; ++j) {
    std::map<int, int> votes;
    for (int t = 0; t < ds.frames; ++t) {
      if (!ds.tracks.is_visible(j, t)) continue;
      const Vec3 pc = w2c[t].apply(ds.tracks.position(j, t));
      if (pc.z() <= 0.0) continue;
      const long x = std::lround(k.fx * pc.x() / pc.z() + k.cx);
      const long y = std::lround(k.fy * pc.y() / pc.z() + k.cy);
      if (x < 0 || y < 0 || x >= k.width || y >= k.height) continue;
      ++votes[ds.train.masks[t].at(static_cast<int>(x), static_cast<int>(y))];
    }
    int best = 0;
    int best_votes = 0;
    for (const auto& [id, n] : votes) {
      if (n > best_votes) {
        best = id;
        best_votes = n;
      }
    }
    ds.tracks.instance_id[j] = best;
  }
}

void save_dataset(const SceneDataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);
  json m;
  m["format_version"] = kDatasetVersion;
  m["frames"] = ds.frames;
  m["width"] = ds.intrinsics.width;
  m["height"] = ds.intrinsics.height;
  m["fx"] = ds.intrinsics.fx;
  m["fy"] = ds.intrinsics.fy;
  m["cx"] = ds.intrinsics.cx;
  m["cy"] = ds.intrinsics.cy;
  m["canonical_frame"] = ds.canonical_frame;
  m["cameras"] = matrices_to_json(ds.train.cameras);
  if (ds.eval.size() > 0) m["eval_cameras"] = matrices_to_json(ds.eval.cameras);
  save_views(ds.train, dir, false);
  if (ds.eval.size() > 0) save_views(ds.eval, dir / "eval", true);
  write_file_atomic(dir / "tracks.bin", encode_tracks(ds.tracks));
  write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

SceneDataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw Error(ErrorKind::MissingManifest, "no manifest.json in " + dir.string());
  }
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, manifest_path.string() + ": " + e.what());
  }
  SceneDataset ds;
  try {
    const auto version = m.at("format_version").get<std::uint32_t>();
    if (version != kDatasetVersion) {
      throw Error(ErrorKind::Version, manifest_path.string() + ": unsupported format_version " +
                                          std::to_string(version) + ", expected " +
                                          std::to_string(kDatasetVersion));
    }
    ds.frames = m.at("frames").get<int>();
    ds.intrinsics.width = m.at("width").get<int>();
    ds.intrinsics.height = m.at("height").get<int>();
    ds.intrinsics.fx = m.at("fx").get<double>();
    ds.intrinsics.fy = m.at("fy").get<double>();
    ds.intrinsics.cx = m.at("cx").get<double>();
    ds.intrinsics.cy = m.at("cy").get<double>();
    ds.canonical_frame = m.at("canonical_frame").get<int>();
    ds.train.cameras = matrices_from_json(m.at("cameras"), manifest_path.string());
    if (m.contains("eval_cameras")) {
      ds.eval.cameras = matrices_from_json(m.at("eval_cameras"), manifest_path.string());
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, manifest_path.string() + ": " + e.what());
  }
  if (ds.frames < 1) throw Error(ErrorKind::EmptyDataset, manifest_path.string() + ": no frames");
  if (ds.intrinsics.width < 1 || ds.intrinsics.height < 1) {
    throw Error(ErrorKind::Format, manifest_path.string() + ": invalid resolution");
  }
  if (ds.train.cameras.size() != static_cast<std::size_t>(ds.frames)) {
    throw Error(ErrorKind::CountMismatch, manifest_path.string() + ": " +
                                              std::to_string(ds.train.cameras.size()) +
                                              " cameras for " + std::to_string(ds.frames) +
                                              " frames");
  }
  const std::vector<Mat4> train_cams = ds.train.cameras;
  ds.train = load_views(dir, ds.intrinsics, ds.frames, false);
  ds.train.cameras = train_cams;
  if (!ds.eval.cameras.empty()) {
    const std::vector<Mat4> eval_cams = ds.eval.cameras;
    ds.eval = load_views(dir / "eval", ds.intrinsics, eval_cams.size(), true);
    ds.eval.cameras = eval_cams;
  }
  const fs::path tracks_path = dir / "tracks.bin";
  if (!fs::exists(tracks_path)) throw Error(ErrorKind::Io, "missing " + tracks_path.string());
  ds.tracks = decode_tracks(read_file(tracks_path), tracks_path.string());
  if (ds.tracks.frames != ds.frames) {
    throw Error(ErrorKind::CountMismatch, tracks_path.string() + ": tracks cover " +
                                              std::to_string(ds.tracks.frames) +
                                              " frames, manifest declares " +
                                              std::to_string(ds.frames));
  }
  ds.validate();
  derive_track_instances(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

enum SectionTag : std::uint32_t {
  kSecMeta = 1,
  kSecField = 2,
  kSecLevels = 3,
  kSecPatterns32 = 4,
  kSecWeights = 5,
  kSecBinding = 6,
  kSecCameras = 7,
  kSecConfig = 8,
};

void put_vec3(ByteWriter& w, const Vec3& v) {
  w.put(v.x());
  w.put(v.y());
  w.put(v.z());
}

Vec3 get_vec3(ByteReader& r) {
  const double x = r.get<double>();
  const double y = r.get<double>();
  const double z = r.get<double>();
  return {x, y, z};
}

void put_mat4(ByteWriter& w, const Mat4& m) {
  for (int i = 0; i < 16; ++i) w.put<double>(m(i / 4, i % 4));
}

Mat4 get_mat4(ByteReader& r) {
  Mat4 m;
  for (int i = 0; i < 16; ++i) m(i / 4, i % 4) = r.get<double>();
  return m;
}

void put_weights(ByteWriter& w, const BlendWeights& bw) {
  w.put<std::uint64_t>(bw.size());
  for (const auto& item : bw.slots) {
    for (const BlendSlot& s : item) {
      w.put<std::uint8_t>(static_cast<std::uint8_t>(s.count));
      for (int c = 0; c < kMaxCandidates; ++c) w.put<std::int32_t>(s.index[c]);
      for (int c = 0; c < kMaxCandidates; ++c) w.put<double>(s.logits[c]);
    }
  }
}

BlendWeights get_weights(ByteReader& r, const std::array<MotionLevel, kLevels>& levels) {
  BlendWeights bw;
  const auto n = r.get<std::uint64_t>();
  constexpr std::size_t per_item = kLevels * (1 + kMaxCandidates * 12);
  if (n > r.remaining() / per_item) r.fail(ErrorKind::Format, "weight count exceeds section");
  bw.slots.resize(n);
  for (auto& item : bw.slots) {
    for (int l = 0; l < kLevels; ++l) {
      BlendSlot& s = item[l];
      s.count = r.get<std::uint8_t>();
      if (s.count > kMaxCandidates) r.fail(ErrorKind::Format, "candidate count above 4");
      for (int c = 0; c < kMaxCandidates; ++c) s.index[c] = r.get<std::int32_t>();
      for (int c = 0; c < kMaxCandidates; ++c) s.logits[c] = r.get<double>();
      for (int c = 0; c < s.count; ++c) {
        if (s.index[c] < 0 || s.index[c] >= levels[l].pattern_count) {
          r.fail(ErrorKind::Format, "candidate index out of range");
        }
      }
    }
  }
  return bw;
}

std::string encode_field(const CanonicalGaussianField& f) {
  ByteWriter w;
  const std::size_t n = f.count();
  w.put<std::uint64_t>(n);
  for (const Vec3& v : f.means) put_vec3(w, v);
  for (const Vec3& v : f.log_scales) put_vec3(w, v);
  for (const UnitQuaternion& q : f.rotations) {
    w.put(q.w());
    w.put(q.x());
    w.put(q.y());
    w.put(q.z());
  }
  for (const Vec3& v : f.colors) put_vec3(w, v);
  for (double o : f.opacity_logits) w.put(o);
  for (auto d : f.is_dynamic) w.put<std::uint8_t>(d);
  for (int id : f.instance_id) w.put<std::int32_t>(id);
  return std::move(w.str());
}

CanonicalGaussianField decode_field(ByteReader& r) {
  CanonicalGaussianField f;
  const auto n = r.get<std::uint64_t>();
  constexpr std::size_t per = 8 * (3 + 3 + 4 + 3 + 1) + 1 + 4;
  if (n > r.remaining() / per) r.fail(ErrorKind::Format, "Gaussian count exceeds section");
  f.means.resize(n);
  f.log_scales.resize(n);
  f.rotations.resize(n);
  f.colors.resize(n);
  f.opacity_logits.resize(n);
  f.is_dynamic.resize(n);
  f.instance_id.resize(n);
  for (auto& v : f.means) v = get_vec3(r);
  for (auto& v : f.log_scales) v = get_vec3(r);
  for (auto& q : f.rotations) {
    const double w = r.get<double>();
    const double x = r.get<double>();
    const double y = r.get<double>();
    const double z = r.get<double>();
    q = UnitQuaternion::from_stored(w, x, y, z);
  }
  for (auto& v : f.colors) v = get_vec3(r);
  for (auto& o : f.opacity_logits) o = r.get<double>();
  for (auto& d : f.is_dynamic) d = r.get<std::uint8_t>();
  for (auto& id : f.instance_id) id = r.get<std::int32_t>();
  return f;
}

void put_se3(ByteWriter& w, const SE3& p) {
  w.put(p.rotation.w());
  w.put(p.rotation.x());
  w.put(p.rotation.y());
  w.put(p.rotation.z());
  put_vec3(w, p.translation);
}

SE3 get_se3(ByteReader& r) {
  const double qw = r.get<double>();
  const double qx = r.get<double>();
  const double qy = r.get<double>();
  const double qz = r.get<double>();
  const Vec3 t = get_vec3(r);
  return {UnitQuaternion::from_stored(qw, qx, qy, qz), t};
}

std::string encode_levels(const MSDynamics& dyn) {
  ByteWriter w;
  w.put<std::uint32_t>(kLevels);
  for (const MotionLevel& l : dyn.levels) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.level_index));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.frames));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.pattern_count));
    for (int k = 0; k < l.pattern_count; ++k) {
      w.put<std::int32_t>(l.parent_of[k]);
      w.put<std::int32_t>(l.instance_of[k]);
      put_vec3(w, l.anchors[k]);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(l.member_tracks[k].size()));
      for (int j : l.member_tracks[k]) w.put<std::int32_t>(j);
    }
    for (const SE3& p : l.patterns) put_se3(w, p);
  }
  return std::move(w.str());
}

std::string encode_patterns32(const MSDynamics& dyn) {
  ByteWriter w;
  w.put<std::uint32_t>(kLevels);
  for (const MotionLevel& l : dyn.levels) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.frames));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(l.pattern_count));
    for (const SE3& p : l.patterns) {
      const Mat4 m = p.to_matrix();
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) w.put<float>(static_cast<float>(m(r, c)));
      }
    }
  }
  return std::move(w.str());
}

std::array<MotionLevel, kLevels> decode_levels(ByteReader& r) {
  const auto count = r.get<std::uint32_t>();
  if (count != kLevels) {
    r.fail(ErrorKind::Format, "checkpoint has " + std::to_string(count) +
                                  " levels; this format fixes 3");
  }
  std::array<MotionLevel, kLevels> levels;
  for (int li = 0; li < kLevels; ++li) {
    MotionLevel& l = levels[li];
    l.level_index = static_cast<int>(r.get<std::uint32_t>());
    l.frames = static_cast<int>(r.get<std::uint32_t>());
    l.pattern_count = static_cast<int>(r.get<std::uint32_t>());
    if (l.level_index != li + 1) r.fail(ErrorKind::Format, "levels out of order");
    if (static_cast<std::size_t>(l.pattern_count) > r.remaining() / 32) {
      r.fail(ErrorKind::Format, "pattern count exceeds section");
    }
    l.parent_of.resize(l.pattern_count);
    l.instance_of.resize(l.pattern_count);
    l.anchors.resize(l.pattern_count);
    l.member_tracks.resize(l.pattern_count);
    for (int k = 0; k < l.pattern_count; ++k) {
      l.parent_of[k] = r.get<std::int32_t>();
      l.instance_of[k] = r.get<std::int32_t>();
      l.anchors[k] = get_vec3(r);
      const auto members = r.get<std::uint32_t>();
      if (members > r.remaining() / 4) r.fail(ErrorKind::Format, "member list exceeds section");
      l.member_tracks[k].resize(members);
      for (auto& j : l.member_tracks[k]) j = r.get<std::int32_t>();
      const int parent_count = li == 0 ? 0 : levels[li - 1].pattern_count;
      if (li == 0 ? l.parent_of[k] != -1 : (l.parent_of[k] < 0 || l.parent_of[k] >= parent_count)) {
        r.fail(ErrorKind::Format, "invalid parent index at level " + std::to_string(li + 1));
      }
    }
    const std::size_t cells = static_cast<std::size_t>(l.frames) * l.pattern_count;
    if (cells > r.remaining() / 56) r.fail(ErrorKind::Format, "pattern array exceeds section");
    l.patterns.resize(cells);
    for (auto& p : l.patterns) p = get_se3(r);
  }
  return levels;
}

std::string encode_cameras(const Checkpoint& c) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.intrinsics.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.intrinsics.height));
  w.put(c.intrinsics.fx);
  w.put(c.intrinsics.fy);
  w.put(c.intrinsics.cx);
  w.put(c.intrinsics.cy);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.train_cameras.size()));
  for (const Mat4& m : c.train_cameras) put_mat4(w, m);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.eval_cameras.size()));
  for (const Mat4& m : c.eval_cameras) put_mat4(w, m);
  return std::move(w.str());
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  ckpt.field.check_consistent();
  if (ckpt.dyn.weights.size() != ckpt.field.count()) {
    throw Error(ErrorKind::CountMismatch, "checkpoint weights do not match the field");
  }
  ByteWriter w;
  w.put_bytes(std::string(kCheckpointMagic, 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  auto section = [&](std::uint32_t tag, const std::string& body) {
    w.put<std::uint32_t>(tag);
    w.put<std::uint64_t>(body.size());
    w.put_bytes(body);
  };
  {
    ByteWriter m;
    m.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.dyn.canonical_frame));
    m.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.dyn.frames));
    section(kSecMeta, m.str());
  }
  section(kSecField, encode_field(ckpt.field));
  section(kSecLevels, encode_levels(ckpt.dyn));
  section(kSecPatterns32, encode_patterns32(ckpt.dyn));
  {
    ByteWriter b;
    put_weights(b, ckpt.dyn.weights);
    section(kSecWeights, b.str());
  }
  {
    ByteWriter b;
    b.put<std::uint64_t>(ckpt.binding.track.size());
    for (std::size_t i = 0; i < ckpt.binding.track.size(); ++i) {
      b.put<std::int32_t>(ckpt.binding.track[i]);
      put_vec3(b, ckpt.binding.canonical[i]);
    }
    put_weights(b, ckpt.binding.weights);
    section(kSecBinding, b.str());
  }
  section(kSecCameras, encode_cameras(ckpt));
  section(kSecConfig, ckpt.config_json);
  write_file_atomic(path, w.str());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  const std::string name = path.string();
  ByteReader r(bytes, name);
  expect_magic(r, kCheckpointMagic, ErrorKind::Version);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    r.fail(ErrorKind::Version, "unsupported checkpoint version " + std::to_string(version) +
                                   ", expected " + std::to_string(kCheckpointVersion));
  }
  std::map<std::uint32_t, std::pair<std::string_view, std::size_t>> sections;
  while (r.remaining() > 0) {
    const auto tag = r.get<std::uint32_t>();
    const auto len = r.get<std::uint64_t>();
    if (len > r.remaining()) {
      r.fail(ErrorKind::Format, "section " + std::to_string(tag) + " declares " +
                                    std::to_string(len) + " bytes, only " +
                                    std::to_string(r.remaining()) + " remain");
    }
    const std::size_t off = r.offset();
    sections[tag] = {r.take(len), off};
  }
  auto open = [&](std::uint32_t tag) {
    const auto it = sections.find(tag);
    if (it == sections.end()) {
      throw Error(ErrorKind::Format, name + ": missing section " + std::to_string(tag));
    }
    return ByteReader(it->second.first, name, it->second.second);
  };
  auto finish = [](ByteReader& s) {
    if (s.remaining() != 0) s.fail(ErrorKind::Format, "trailing bytes in section");
  };

  Checkpoint c;
  {
    ByteReader s = open(kSecMeta);
    c.dyn.canonical_frame = static_cast<int>(s.get<std::uint32_t>());
    c.dyn.frames = static_cast<int>(s.get<std::uint32_t>());
    finish(s);
  }
  {
    ByteReader s = open(kSecField);
    c.field = decode_field(s);
    finish(s);
  }
  {
    ByteReader s = open(kSecLevels);
    c.dyn.levels = decode_levels(s);
    finish(s);
    for (const MotionLevel& l : c.dyn.levels) {
      if (l.frames != c.dyn.frames) s.fail(ErrorKind::Format, "level frame count mismatch");
    }
  }
  {
    ByteReader s = open(kSecPatterns32);
    const auto count = s.get<std::uint32_t>();
    if (count != kLevels) s.fail(ErrorKind::Format, "32-bit pattern section must hold 3 levels");
    for (const MotionLevel& l : c.dyn.levels) {
      const auto frames = s.get<std::uint32_t>();
      const auto k = s.get<std::uint32_t>();
      if (static_cast<int>(frames) != l.frames || static_cast<int>(k) != l.pattern_count) {
        s.fail(ErrorKind::Format, "32-bit pattern section disagrees with the level layout");
      }
      s.take(static_cast<std::size_t>(frames) * k * 12 * sizeof(float));
    }
    finish(s);
  }
  {
    ByteReader s = open(kSecWeights);
    c.dyn.weights = get_weights(s, c.dyn.levels);
    finish(s);
    if (c.dyn.weights.size() != c.field.count()) {
      s.fail(ErrorKind::Format, "weights cover " + std::to_string(c.dyn.weights.size()) +
                                    " items, field has " + std::to_string(c.field.count()));
    }
  }
  {
    ByteReader s = open(kSecBinding);
    const auto m = s.get<std::uint64_t>();
    if (m > s.remaining() / 28) s.fail(ErrorKind::Format, "binding count exceeds section");
    c.binding.track.resize(m);
    c.binding.canonical.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      c.binding.track[i] = s.get<std::int32_t>();
      c.binding.canonical[i] = get_vec3(s);
    }
    c.binding.weights = get_weights(s, c.dyn.levels);
    if (c.binding.weights.size() != m) s.fail(ErrorKind::Format, "binding weight count mismatch");
    finish(s);
  }
  {
    ByteReader s = open(kSecCameras);
    c.intrinsics.width = static_cast<int>(s.get<std::uint32_t>());
    c.intrinsics.height = static_cast<int>(s.get<std::uint32_t>());
    c.intrinsics.fx = s.get<double>();
    c.intrinsics.fy = s.get<double>();
    c.intrinsics.cx = s.get<double>();
    c.intrinsics.cy = s.get<double>();
    const auto nt = s.get<std::uint32_t>();
    if (nt > s.remaining() / 128) s.fail(ErrorKind::Format, "camera count exceeds section");
    for (std::uint32_t i = 0; i < nt; ++i) c.train_cameras.push_back(get_mat4(s));
    const auto ne = s.get<std::uint32_t>();
    if (ne > s.remaining() / 128) s.fail(ErrorKind::Format, "camera count exceeds section");
    for (std::uint32_t i = 0; i < ne; ++i) c.eval_cameras.push_back(get_mat4(s));
    finish(s);
  }
  {
    const auto it = sections.find(kSecConfig);
    if (it != sections.end()) c.config_json = std::string(it->second.first);
  }
  c.field.check_consistent();
  return c;
}

}  // namespace msdyn
