#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <thread>

#include "control4d/config.hpp"
#include "control4d/data.hpp"
#include "control4d/errors.hpp"
#include "control4d/image_io.hpp"
#include "control4d/training.hpp"

using namespace c4d;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
};

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json metrics_json(const VideoMetrics& m) {
  return {{"psnr", m.psnr},
          {"flicker", m.flicker},
          {"sharpness", m.sharpness},
          {"num_frames", m.num_frames},
          {"num_cameras", m.num_cameras}};
}

fs::path heldout_root(const fs::path& data) { return data / "heldout"; }

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c) {
  if (c.out.empty()) throw UsageError("synth: --out is required");
  SyntheticSceneSpec spec = SyntheticSceneSpec::default_spec();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigError("cannot open scene spec " + c.config);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("scene spec is not valid JSON: " + std::string(e.what()));
    }
    spec = SyntheticSceneSpec::from_json(j);
  }
  if (c.seed) spec.seed = *c.seed;
  spec.validate();
  SyntheticScene scene(spec);
  const fs::path out(c.out);
  auto ds = scene.write(out);
  // A novel view between the first two ring cameras, for held-out evaluation.
  const double az = spec.ring.azimuth_offset_deg + 180.0 / spec.ring.count;
  const auto cam = scene.ring_camera(az, spec.ring.width, spec.ring.height);
  write_cameras(heldout_root(out) / "cams.json", {cam});
  for (int f = 0; f < spec.num_frames; ++f) {
    const auto view = scene.render(cam, ds.time_of(f));
    write_png(heldout_root(out) / "frames" / "0" / frame_filename(f), view.rgb);
    write_gray_png(heldout_root(out) / "masks" / "0" / frame_filename(f), (view.alpha > 0.05f).to(torch::kFloat));
  }
  std::cout << "wrote " << ds.records.size() << " frames (" << ds.num_cameras << " cameras x " << ds.num_frames
            << " frames) to " << out << "\n";
  return 0;
}

RunConfig resolve_config(const Common& c, const RunConfig& base) {
  RunConfig cfg = c.config.empty() ? base : RunConfig::load(c.config, base);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

int cmd_reconstruct(const Common& c, const std::string& data) {
  if (c.out.empty() || data.empty()) throw UsageError("reconstruct: --data and --out are required");
  auto cfg = resolve_config(c, RunConfig{});
  auto ds = load_dataset(data);
  std::optional<Dataset> heldout;
  if (fs::exists(heldout_root(data) / "cams.json")) heldout = load_dataset(heldout_root(data));
  const fs::path out(c.out);
  cfg.save(out / "config.json");

  Trainer trainer(cfg, ds);
  trainer.pretrain_reconstruction(cfg.reconstruct.iterations);
  const auto& gt = heldout ? *heldout : ds;
  const auto metrics = evaluate_videos(trainer.render_dataset(gt), load_images(gt), load_masks(gt));
  auto m = metrics_json(metrics);
  m["split"] = heldout ? "heldout" : "train";
  trainer.report().add({{"phase", "reconstruct"},
                        {"iteration", trainer.reconstruction_iteration()},
                        {"editor_calls", 0},
                        {"metrics", m}});
  trainer.save(out / "checkpoint.c4d");
  trainer.report().write_jsonl(out / "report.jsonl");
  write_json(out / "metrics.json", m);
  std::cout << "reconstruction: " << cfg.reconstruct.iterations << " iterations, " << m["split"].get<std::string>()
            << " PSNR " << metrics.psnr << " dB\n";
  return 0;
}

int cmd_edit(const Common& c, const std::string& checkpoint, const std::string& data, const std::string& mode,
             const std::string& editor, const std::optional<std::string>& prompt, const std::string& endpoint) {
  if (c.out.empty() || checkpoint.empty()) throw UsageError("edit: --checkpoint and --out are required");
  const auto manifest = read_checkpoint_manifest(checkpoint);
  auto cfg = resolve_config(c, RunConfig::from_json(manifest.at("config")));
  if (!mode.empty()) cfg.edit.mode = train_mode_from_string(mode);
  if (!editor.empty()) cfg.editor.kind = editor;
  if (prompt) cfg.editor.prompt = *prompt;
  if (!endpoint.empty()) cfg.editor.remote.endpoint = endpoint;
  cfg.validate();
  if (cfg.editor.kind == "remote" && cfg.editor.remote.endpoint.empty()) {
    throw UsageError("edit: the remote editor needs --endpoint");
  }
  const fs::path root = data.empty() ? fs::path(manifest.at("dataset_root").get<std::string>()) : fs::path(data);
  auto ds = load_dataset(root);
  const fs::path out(c.out);
  cfg.save(out / "config.json");

  Trainer trainer(cfg, ds);
  trainer.load(checkpoint);
  if (!trainer.editing()) trainer.reseed(cfg.seed);
  if (cfg.editor.kind == "remote") {
    // Fail before any training when the service is unreachable.
    EditRequest probe;
    probe.original = trainer.original(0, 0);
    probe.render = probe.original;
    probe.prompt = cfg.editor.prompt;
    remote_edit(probe, cfg.editor.remote);
  }
  trainer.run_stages(trainer.default_plan());
  trainer.save(out / "checkpoint.c4d");
  trainer.report().write_jsonl(out / "report.jsonl");
  {
    std::ofstream calls(out / "editor_calls.jsonl");
    for (const auto& call : trainer.state().calls) {
      calls << json{{"iteration", call.iteration}, {"frame", call.frame}, {"camera", call.camera}, {"ok", call.ok}}.dump()
            << "\n";
    }
  }
  const auto m = trainer.report().last_metrics();
  write_json(out / "metrics.json", m);
  std::cout << "edit (" << to_string(cfg.edit.mode) << "): " << trainer.edit_iteration() << " steps, "
            << trainer.state().calls.size() << " editor calls, flicker " << m["flicker"].get<double>()
            << ", sharpness " << m["sharpness"].get<double>() << "\n";
  return 0;
}

std::vector<double> parse_times(const std::string& spec) {
  // "t0:t1:n" or a single time.
  std::vector<double> times;
  const auto a = spec.find(':');
  try {
    if (a == std::string::npos) {
      times.push_back(std::stod(spec));
    } else {
      const auto b = spec.find(':', a + 1);
      if (b == std::string::npos) throw UsageError("render: --times expects t0:t1:n");
      const double t0 = std::stod(spec.substr(0, a)), t1 = std::stod(spec.substr(a + 1, b - a - 1));
      const int n = std::stoi(spec.substr(b + 1));
      if (n < 1) throw UsageError("render: --times needs n >= 1");
      for (int i = 0; i < n; ++i) times.push_back(n == 1 ? t0 : t0 + (t1 - t0) * i / (n - 1));
    }
  } catch (const std::invalid_argument&) {
    throw UsageError("render: cannot parse --times '" + spec + "'");
  }
  for (double t : times) {
    if (!(t >= 0.0 && t <= 1.0)) throw UsageError("render: time " + std::to_string(t) + " is outside [0, 1]");
  }
  return times;
}

int cmd_render(const Common& c, const std::string& checkpoint, const std::string& cameras_path, int orbit,
               const std::string& times_spec, bool latents) {
  if (c.out.empty() || checkpoint.empty()) throw UsageError("render: --checkpoint and --out are required");
  const auto times = parse_times(times_spec);
  const auto manifest = read_checkpoint_manifest(checkpoint);
  auto cfg = RunConfig::from_json(manifest.at("config"));
  auto ds = load_dataset(manifest.at("dataset_root").get<std::string>());

  std::vector<CameraModel> cams;
  if (!cameras_path.empty()) {
    cams = read_cameras(cameras_path);
  } else {
    if (orbit < 1) throw UsageError("render: --orbit must be >= 1");
    const auto& ref = ds.cameras.at(0);
    const auto eye = ref.center();
    const double radius = std::sqrt(eye[0] * eye[0] + eye[1] * eye[1] + eye[2] * eye[2]);
    const double elevation = std::asin(eye[2] / radius);
    const double az0 = std::atan2(eye[1], eye[0]);
    for (int i = 0; i < orbit; ++i) {
      const double az = az0 + 2.0 * std::numbers::pi * i / orbit;
      const std::array<double, 3> e{radius * std::cos(elevation) * std::cos(az),
                                    radius * std::cos(elevation) * std::sin(az), radius * std::sin(elevation)};
      cams.push_back(CameraModel::look_at(e, {0, 0, 0}, {0, 0, 1}, ref.fx, ref.width, ref.height));
    }
  }

  Trainer trainer(cfg, ds);
  trainer.load(checkpoint);
  const bool final_output = trainer.editing();
  const fs::path out(c.out);
  int written = 0;
  for (size_t v = 0; v < cams.size(); ++v) {
    for (size_t k = 0; k < times.size(); ++k) {
      char name[64];
      std::snprintf(name, sizeof(name), "view%02zu_t%03zu", v, k);
      torch::Tensor img;
      if (final_output) {
        img = trainer.render_output_at(times[k], cams[v].resized(cfg.render.width, cfg.render.height));
      } else {
        img = trainer.render_field(cams[v], times[k]).rgb;
      }
      write_png(out / (std::string(name) + ".png"), img);
      if (latents) {
        const auto pkt = trainer.render_field(cams[v].resized(cfg.render.width, cfg.render.height), times[k]);
        write_npy(out / (std::string(name) + "_latent_mean.npy"), pkt.latent_mean);
        write_npy(out / (std::string(name) + "_latent_std.npy"), pkt.latent_std);
        write_npy(out / (std::string(name) + "_latent.npy"),
                  sample_latent_map(pkt, cfg.render.eval_latent_seed, cfg.render.latent_draw));
      }
      ++written;
    }
  }
  cfg.save(out / "config.json");
  std::cout << "rendered " << written << " images to " << out << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& frames, const std::string& gt_dir) {
  if (gt_dir.empty()) throw UsageError("eval: --gt is required");
  if (checkpoint.empty() == frames.empty()) throw UsageError("eval: pass exactly one of --checkpoint or --frames");
  torch::Tensor gt, mask, pred;
  json extra = json::object();
  if (!checkpoint.empty()) {
    auto gt_ds = load_dataset(gt_dir);
    gt = load_images(gt_ds);
    mask = load_masks(gt_ds);
    const auto manifest = read_checkpoint_manifest(checkpoint);
    auto cfg = RunConfig::from_json(manifest.at("config"));
    auto ds = load_dataset(manifest.at("dataset_root").get<std::string>());
    Trainer trainer(cfg, ds);
    trainer.load(checkpoint);
    pred = trainer.render_dataset(gt_ds);
    extra["source"] = "checkpoint";
  } else {
    gt = load_frame_tree(gt_dir);
    pred = load_frame_tree(frames);
    if (fs::exists(fs::path(gt_dir) / "cams.json")) mask = load_masks(load_dataset(gt_dir));
    extra["source"] = "frames";
  }
  if (pred.sizes() != gt.sizes()) {
    throw UsageError("eval: prediction has " + std::to_string(pred.size(0)) + " frames x " +
                     std::to_string(pred.size(1)) + " cameras, ground truth has " + std::to_string(gt.size(0)) +
                     " x " + std::to_string(gt.size(1)) + " (or resolutions differ)");
  }
  auto m = metrics_json(evaluate_videos(pred, gt, mask));
  m.update(extra);
  if (!c.out.empty()) write_json(fs::path(c.out) / "metrics.json", m);
  std::cout << m.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Control4D: editable 4D scenes from 2D edits"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Configuration file (JSON)");
    sub->add_option("--seed", common.seed, "Override the configured seed");
    sub->add_option("--out", common.out, "Output directory");
  };

  auto* synth = app.add_subcommand("synth", "Write the analytic blob scene as a dataset");
  add_common(synth);

  std::string data;
  auto* recon = app.add_subcommand("reconstruct", "Fit the dynamic scene to a dataset");
  add_common(recon);
  recon->add_option("--data", data, "Dataset root")->required();

  std::string checkpoint, mode, editor, endpoint;
  std::optional<std::string> prompt;
  auto* edit = app.add_subcommand("edit", "Edit a reconstructed scene");
  add_common(edit);
  edit->add_option("--checkpoint", checkpoint, "Reconstruction checkpoint")->required();
  edit->add_option("--data", data, "Dataset root (defaults to the one in the checkpoint)");
  edit->add_option("--mode", mode, "baseline_du or control4d")->check(CLI::IsMember({"baseline_du", "control4d"}));
  edit->add_option("--editor", editor, "synthetic or remote")->check(CLI::IsMember({"synthetic", "remote"}));
  edit->add_option("--prompt", prompt, "Editing prompt");
  edit->add_option("--endpoint", endpoint, "Remote editor base URL");

  std::string cameras, times = "0:1:10";
  int orbit = 8;
  bool latents = false;
  auto* render = app.add_subcommand("render", "Render views of a checkpoint");
  add_common(render);
  render->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  render->add_option("--cameras", cameras, "Camera file (cams.json layout)");
  render->add_option("--orbit", orbit, "Number of orbit views when no camera file is given");
  render->add_option("--times", times, "t0:t1:n or a single time in [0, 1]");
  render->add_flag("--latents", latents, "Also write latent maps as .npy");

  std::string frames, gt;
  auto* eval = app.add_subcommand("eval", "Compute PSNR, flicker and sharpness");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint to render");
  eval->add_option("--frames", frames, "Directory of rendered frames (<camera>/<frame>.png)");
  eval->add_option("--gt", gt, "Ground-truth dataset or frame directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kValidation);
  }

  try {
    torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));
    if (*synth) return cmd_synth(common);
    if (*recon) return cmd_reconstruct(common, data);
    if (*edit) return cmd_edit(common, checkpoint, data, mode, editor, prompt, endpoint);
    if (*render) return cmd_render(common, checkpoint, cameras, orbit, times, latents);
    if (*eval) return cmd_eval(common, checkpoint, frames, gt);
  } catch (const c4d::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kValidation);
  } catch (const c10::Error& e) {
    std::cerr << "error: " << e.what_without_backtrace() << "\n";
    return 1;
  }
  return 0;
}
