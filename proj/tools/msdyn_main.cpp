#include "msdyn/error.hpp"
#include "msdyn/io.hpp"
#include "msdyn/log.hpp"
#include "msdyn/metrics.hpp"
#include "msdyn/optim.hpp"
#include "msdyn/synth.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace msdyn;
using nlohmann::json;

std::pair<int, int> parse_resolution(const std::string& text) {
  int w = 0, h = 0;
  char x = 0;
  std::istringstream in(text);
  if (!(in >> w >> x >> h) || (x != 'x' && x != 'X')) {
    throw Error(ErrorKind::Validation, "resolution must look like 64x64, got '" + text + "'");
  }
  return {w, h};
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(ErrorKind::Validation, "not a number: '" + item + "'");
    }
  }
  return out;
}

json loss_json(const LossReport& r) {
  return {{"rgb", r.rgb},
          {"mask", r.mask},
          {"depth", r.depth},
          {"track", r.track},
          {"local_rigid", r.local_rigid},
          {"total", r.total}};
}


json metric(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text);
}

Camera checkpoint_camera(const Checkpoint& ckpt, int t, const std::string& which) {
  if (which == "train" || which.empty()) {
    if (t >= static_cast<int>(ckpt.train_cameras.size())) {
      throw Error(ErrorKind::Validation, "frame " + std::to_string(t) + " has no training camera");
    }
    return make_camera(ckpt.intrinsics, ckpt.train_cameras[t]);
  }
  if (which == "eval") {
    if (t >= static_cast<int>(ckpt.eval_cameras.size())) {
      throw Error(ErrorKind::Validation, "frame " + std::to_string(t) + " has no evaluation camera");
    }
    return make_camera(ckpt.intrinsics, ckpt.eval_cameras[t]);
  }
  std::vector<double> v;
  std::istringstream in(which);
  double x = 0.0;
  while (in >> x) v.push_back(x);
  if (v.size() != 16 || !in.eof()) {
    throw Error(ErrorKind::Validation, "--camera takes train, eval or 16 numbers");
  }
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = v[r * 4 + c];
  }
  return make_camera(ckpt.intrinsics, m);
}

ImageRGB8 side_by_side(const ImageRGB& pred, const ImageRGB& gt, const Mask& covis) {
  ImageRGB8 out(pred.width * 3, pred.height, 0);
  const ImageRGB8 p = to_rgb8(pred);
  const ImageRGB8 g = to_rgb8(gt);
  for (int y = 0; y < pred.height; ++y) {
    for (int x = 0; x < pred.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(x, y, c) = p.at(x, y, c);
        out.at(x + pred.width, y, c) = g.at(x, y, c);
        out.at(x + 2 * pred.width, y, c) = covis.at(x, y) ? 255 : 0;
      }
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale dynamic Gaussian splatting on synthetic monocular scenes"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string kind = "rigid", res = "64x64", synth_out;
  SceneSpec spec;
  synth->add_option("--kind", kind, "rigid, articulated or deformable");
  synth->add_option("--frames", spec.frames, "Number of frames");
  synth->add_option("--res", res, "Resolution WxH");
  synth->add_option("--seed", spec.seed, "Random seed");
  synth->add_option("--amplitude", spec.amplitude, "Motion amplitude scale");
  synth->add_option("--noise-depth", spec.noise_depth, "Relative depth noise std-dev");
  synth->add_option("--noise-track", spec.noise_track, "Track jitter std-dev in pixels");
  synth->add_option("--tracks", spec.track_count, "Number of tracks");
  synth->add_option("--out", synth_out, "Output directory")->required();

  // fit
  auto* fitc = app.add_subcommand("fit", "Optimise a checkpoint on a dataset");
  std::string fit_data, fit_out, loss_weights, fit_csv, fit_summary;
  OptimConfig config;
  bool rgb_only = false, quiet = false;
  fitc->add_option("--data", fit_data, "Dataset directory")->required();
  fitc->add_option("--out", fit_out, "Checkpoint path")->required();
  fitc->add_option("--epochs", config.epochs, "Training epochs");
  fitc->add_option("--k-primitive", config.hierarchy.k_primitive, "Primitive patterns per object");
  fitc->add_option("--k-grain", config.hierarchy.k_grain, "Grain patterns per primitive");
  fitc->add_option("--levels", config.hierarchy.active_levels, "Active hierarchy levels (1-3)");
  fitc->add_option("--loss-weights", loss_weights, "rgb,mask,depth,track,rigidity weights");
  fitc->add_flag("--rgb-only", rgb_only, "Train with the photometric loss only");
  fitc->add_option("--seed", config.seed, "Random seed");
  fitc->add_option("--target-dynamic", config.target_dynamic, "Initial dynamic Gaussians");
  fitc->add_option("--target-static", config.target_static, "Initial static Gaussians");
  fitc->add_option("--log", fit_csv, "Loss CSV (default: <out>.loss.csv)");
  fitc->add_option("--summary", fit_summary, "Summary JSON (default: <out>.summary.json)");
  fitc->add_flag("--quiet", quiet, "No progress lines");

  // render
  auto* render = app.add_subcommand("render", "Render a checkpoint at one frame");
  std::string render_ckpt, render_out, render_camera = "train";
  int render_frame_index = 0;
  render->add_option("--ckpt", render_ckpt, "Checkpoint path")->required();
  render->add_option("--frame", render_frame_index, "Frame index")->required();
  render->add_option("--camera", render_camera, "train, eval or 16 row-major numbers");
  render->add_option("--out", render_out, "Output PNG")->required();

  // eval
  auto* evalc = app.add_subcommand("eval", "Score a checkpoint on the held-out views");
  std::string eval_ckpt, eval_data, eval_out, eval_strips;
  evalc->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  evalc->add_option("--data", eval_data, "Dataset directory")->required();
  evalc->add_option("--out", eval_out, "Report JSON")->required();
  evalc->add_option("--strips", eval_strips, "Directory for prediction|truth|covisibility strips");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Summarise a checkpoint");
  std::string inspect_ckpt;
  inspect->add_option("--ckpt", inspect_ckpt, "Checkpoint path")->required();

  // verify
  auto* verify = app.add_subcommand("verify", "Check a dataset for internal consistency");
  std::string verify_data;
  verify->add_option("--data", verify_data, "Dataset directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      spec.kind = parse_scene_kind(kind);
      std::tie(spec.width, spec.height) = parse_resolution(res);
      spec.validate();
      const GeneratedScene scene = generate(spec);
      save_dataset(scene.dataset, synth_out);
      std::cout << "wrote " << scene.dataset.frames << " frames to " << synth_out << "\n";
    } else if (*fitc) {
      if (!loss_weights.empty()) {
        const auto w = parse_list(loss_weights);
        if (w.size() != 5) throw Error(ErrorKind::Validation, "--loss-weights needs 5 values");
        config.weights = {w[0], w[1], w[2], w[3], w[4]};
      }
      if (rgb_only) config.weights = {config.weights.rgb, 0.0, 0.0, 0.0, 0.0};
      config.hierarchy.seed = config.seed;
      config.validate();
      const SceneDataset ds = load_dataset(fit_data);
      FitOutputs outputs;
      outputs.checkpoint = fit_out;
      outputs.loss_csv = fit_csv.empty() ? fit_out + ".loss.csv" : fit_csv;
      if (!quiet) outputs.progress = [](const std::string& line) { std::cout << line << std::endl; };
      const FitResult r = fit(ds, config, outputs);
      json summary;
      summary["checkpoint"] = fit_out;
      summary["epochs"] = config.epochs;
      summary["gaussians"] = r.checkpoint.field.count();
      summary["final_loss"] = loss_json(r.final_loss);
      summary["track_rms"] = r.track_rms;
      summary["wall_clock_seconds"] = r.wall_clock_seconds;
      if (ds.eval.size() > 0) {
        const EvalResult e = evaluate_checkpoint(r.checkpoint, ds);
        summary["eval"] = {{"mpsnr", metric(e.mean_psnr)}, {"mssim", metric(e.mean_ssim)}};
      }
      write_text(fit_summary.empty() ? fit_out + ".summary.json" : fit_summary,
                 summary.dump(2) + "\n");
      std::cout << summary.dump(2) << "\n";
    } else if (*render) {
      const Checkpoint ckpt = load_checkpoint(render_ckpt);
      if (render_frame_index < 0 || render_frame_index >= ckpt.dyn.frames) {
        throw Error(ErrorKind::Validation, "frame out of range");
      }
      const Camera cam = checkpoint_camera(ckpt, render_frame_index, render_camera);
      const RenderOutput out = render_frame(ckpt.field, ckpt.dyn, cam, render_frame_index);
      write_png(render_out, to_rgb8(out.color_image()));
    } else if (*evalc) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const SceneDataset ds = load_dataset(eval_data);
      const EvalResult e = evaluate_checkpoint(ckpt, ds);
      json report;
      report["mpsnr"] = metric(e.mean_psnr);
      report["mssim"] = metric(e.mean_ssim);
      report["scored_frames"] = e.scored_frames;
      report["frames"] = json::array();
      for (const FrameMetrics& f : e.frames) {
        report["frames"].push_back({{"frame", f.frame},
                                    {"psnr", metric(f.psnr)},
                                    {"ssim", metric(f.ssim)},
                                    {"covisible_fraction", f.covisible_fraction}});
      }
      write_text(eval_out, report.dump(2) + "\n");
      if (!eval_strips.empty()) {
        std::filesystem::create_directories(eval_strips);
        for (const FrameMetrics& f : e.frames) {
          const Camera cam = ds.eval_camera(f.frame);
          const ImageRGB pred = render_frame(ckpt.field, ckpt.dyn, cam, f.frame).color_image();
          char name[32];
          std::snprintf(name, sizeof(name), "%05d.png", f.frame);
          write_png(std::filesystem::path(eval_strips) / name,
                    side_by_side(pred, to_double(ds.eval.rgb[f.frame]), ds.eval.covisibility[f.frame]));
        }
      }
      std::cout << "mPSNR " << e.mean_psnr << " dB, mSSIM " << e.mean_ssim << " over "
                << e.scored_frames << " frames\n";
    } else if (*inspect) {
      const Checkpoint ckpt = load_checkpoint(inspect_ckpt);
      std::size_t dynamic = 0;
      for (auto d : ckpt.field.is_dynamic) dynamic += d ? 1 : 0;
      std::cout << "gaussians " << ckpt.field.count() << " (dynamic " << dynamic << ", static "
                << ckpt.field.count() - dynamic << ")\n";
      std::cout << "frames " << ckpt.dyn.frames << ", canonical frame " << ckpt.dyn.canonical_frame
                << "\n";
      for (const MotionLevel& l : ckpt.dyn.levels) {
        double trans = 0.0, angle = 0.0;
        for (const SE3& p : l.patterns) {
          trans += p.translation.norm();
          angle += Eigen::AngleAxisd(p.rotation.to_matrix()).angle();
        }
        const double n = l.patterns.empty() ? 1.0 : static_cast<double>(l.patterns.size());
        std::cout << "level " << l.level_index << ": " << l.pattern_count
                  << " patterns, mean |t| " << trans / n << " m, mean angle " << angle / n
                  << " rad\n";
      }
      std::cout << "tracks bound " << ckpt.binding.track.size() << "\n";
    } else if (*verify) {
      const SceneDataset ds = load_dataset(verify_data);
      const VerifyReport r = verify_dataset(ds);
      for (const std::string& v : r.violations) std::cout << v << "\n";
      std::cout << r.violations.size() << " violations over " << r.visible_samples
                << " visible samples\n";
      if (!r.ok()) return 1;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
