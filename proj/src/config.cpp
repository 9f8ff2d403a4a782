#include "control4d/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "control4d/errors.hpp"
#include "control4d/json_util.hpp"

namespace c4d {

using nlohmann::json;
using namespace jsonu;

const char* to_string(TrainMode m) { return m == TrainMode::kBaselineDU ? "baseline_du" : "control4d"; }

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "baseline_du") return TrainMode::kBaselineDU;
  if (s == "control4d") return TrainMode::kControl4D;
  throw ConfigError("unknown mode '" + s + "' (expected baseline_du or control4d)");
}

namespace {

const char* to_string(DuSource s) {
  switch (s) {
    case DuSource::kRender:
      return "render";
    case DuSource::kGenerator:
      return "generator";
    default:
      return "auto";
  }
}

DuSource du_source_from_string(const std::string& s) {
  if (s == "auto") return DuSource::kAuto;
  if (s == "render") return DuSource::kRender;
  if (s == "generator") return DuSource::kGenerator;
  throw ConfigError("edit.du_source: unknown value '" + s + "'");
}

const std::set<std::string>& field_groups() {
  static const std::set<std::string> g{"flow", "canonical_planes", "canonical_nets"};
  return g;
}

const std::set<std::string>& all_groups() {
  static const std::set<std::string> g{"flow",          "canonical_planes", "canonical_nets", "generator",
                                       "discriminator", "global_encoder",   "local_encoder"};
  return g;
}

void check_lr(const std::map<std::string, double>& lr, const std::set<std::string>& required, const char* where) {
  for (const auto& [k, v] : lr) {
    if (!all_groups().count(k)) throw ConfigError(std::string(where) + ": unknown parameter group '" + k + "'");
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(where) + "." + k + ": must be positive");
  }
  for (const auto& k : required) {
    if (!lr.count(k)) throw ConfigError(std::string(where) + ": missing rate for '" + k + "'");
  }
}

template <class T>
void positive(T v, const char* name) {
  if (!(v > 0)) throw ConfigError(std::string(name) + " must be positive");
}

json bounds_json(const std::array<AxisBounds, 3>& b) {
  json out = json::array();
  for (const auto& a : b) out.push_back({a.lo, a.hi});
  return out;
}

}  // namespace

void RunConfig::validate() const {
  for (const auto& b : scene_bounds) {
    if (!(b.hi > b.lo)) throw ConfigError("scene_bounds: empty axis");
  }
  const auto& fl = field.flow;
  const auto& cn = field.canonical;
  positive(fl.spatial_res, "field.flow.spatial_res");
  positive(fl.time_res, "field.flow.time_res");
  positive(fl.channels, "field.flow.channels");
  positive(fl.hidden, "field.flow.hidden");
  if (fl.pe_frequencies < 0) throw ConfigError("field.flow.pe_frequencies must be >= 0");
  if (fl.hidden_layers < 0) throw ConfigError("field.flow.hidden_layers must be >= 0");
  if (!(fl.clip_scale >= 1.0)) throw ConfigError("field.flow.clip_scale must be >= 1");
  positive(cn.hr_res, "field.canonical.hr_res");
  positive(cn.lr_res, "field.canonical.lr_res");
  positive(cn.channels, "field.canonical.channels");
  positive(cn.appearance_dim, "field.canonical.appearance_dim");
  positive(cn.latent_dim, "field.canonical.latent_dim");
  positive(cn.hidden, "field.canonical.hidden");

  positive(render.samples_per_ray, "render.samples_per_ray");
  positive(render.width, "render.width");
  positive(render.height, "render.height");
  positive(render.chunk, "render.chunk");
  for (double c : render.background) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("render.background outside [0,1]");
  }

  const auto& go = gan.options;
  if (go.upsample < 1 || (go.upsample & (go.upsample - 1)) != 0) throw ConfigError("gan.upsample must be a power of two");
  // The critic halves the image four times and needs at least one pixel left.
  if (std::min(render.width, render.height) * go.upsample < 16) {
    throw ConfigError("render size times gan.upsample must be at least 16 pixels on each side");
  }
  positive(go.base_channels, "gan.base_channels");
  positive(go.global_dim, "gan.global_dim");
  positive(go.local_channels, "gan.local_channels");
  positive(go.disc_channels, "gan.disc_channels");
  if (!(gan.gp_lambda >= 0.0)) throw ConfigError("gan.gp_lambda must be >= 0");
  if (!(gan.weights.perceptual >= 0.0) || !(gan.weights.l1 >= 0.0)) throw ConfigError("gan loss weights must be >= 0");
  gan.levels.validate();
  positive(gan.d_steps, "gan.d_steps");

  if (editor.kind != "synthetic" && editor.kind != "remote") {
    throw ConfigError("editor.kind must be 'synthetic' or 'remote'");
  }
  if (!(editor.noise_min >= 0.0 && editor.noise_max <= 1.0 && editor.noise_min <= editor.noise_max)) {
    throw ConfigError("editor noise bounds must satisfy 0 <= noise_min <= noise_max <= 1");
  }
  if (!(editor.synthetic.jitter_std >= 0.0) || !(editor.synthetic.detail_jitter_std >= 0.0)) {
    throw ConfigError("editor jitter must be >= 0");
  }
  if (editor.remote.attempts < 1) throw ConfigError("editor.remote.attempts must be >= 1");
  if (!(editor.remote.timeout_s > 0.0)) throw ConfigError("editor.remote.timeout_s must be positive");

  if (reconstruct.iterations < 0) throw ConfigError("reconstruct.iterations must be >= 0");
  positive(reconstruct.rays_per_batch, "reconstruct.rays_per_batch");
  positive(reconstruct.samples_per_ray, "reconstruct.samples_per_ray");
  positive(reconstruct.log_every, "reconstruct.log_every");
  check_lr(reconstruct.lr, field_groups(), "reconstruct.lr");

  if (edit.iterations < 0) throw ConfigError("edit.iterations must be >= 0");
  positive(edit.du_period, "edit.du_period");
  positive(edit.log_every, "edit.log_every");
  if (edit.eval_every < 0) throw ConfigError("edit.eval_every must be >= 0");
  if (edit.canonical_frame < 0) throw ConfigError("edit.canonical_frame must be >= 0");
  if (edit.eval_camera < 0) throw ConfigError("edit.eval_camera must be >= 0");
  check_lr(edit.lr, all_groups(), "edit.lr");
  if (!(edit.baseline_l1_weight >= 0.0) || !(edit.baseline_perceptual_weight >= 0.0)) {
    throw ConfigError("edit baseline weights must be >= 0");
  }
  double sum = 0.0;
  for (double f : edit.stage_fractions) {
    if (!(f >= 0.0)) throw ConfigError("edit.stage_fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("edit.stage_fractions must sum to 1");
}

SceneFieldOptions RunConfig::field_options() const {
  auto o = field;
  o.flow.scene = scene_bounds;
  o.canonical.scene = scene_bounds;
  return o;
}

GanOptions RunConfig::gan_options() const {
  auto o = gan.options;
  o.latent_dim = field.canonical.latent_dim;
  return o;
}

json RunConfig::to_json() const {
  const auto& fl = field.flow;
  const auto& cn = field.canonical;
  const auto& go = gan.options;
  const auto& sy = editor.synthetic;
  return {
      {"seed", seed},
      {"scene_bounds", bounds_json(scene_bounds)},
      {"field",
       {{"flow",
         {{"spatial_res", fl.spatial_res},
          {"time_res", fl.time_res},
          {"channels", fl.channels},
          {"pe_frequencies", fl.pe_frequencies},
          {"hidden", fl.hidden},
          {"hidden_layers", fl.hidden_layers},
          {"clip_scale", fl.clip_scale}}},
        {"canonical",
         {{"hr_res", cn.hr_res},
          {"lr_res", cn.lr_res},
          {"channels", cn.channels},
          {"appearance_dim", cn.appearance_dim},
          {"latent_dim", cn.latent_dim},
          {"hidden", cn.hidden}}}}},
      {"render",
       {{"samples_per_ray", render.samples_per_ray},
        {"width", render.width},
        {"height", render.height},
        {"latent_draw", render.latent_draw == LatentDraw::kPerPixel ? "per_pixel" : "per_image"},
        {"background", render.background},
        {"chunk", render.chunk},
        {"eval_latent_seed", render.eval_latent_seed}}},
      {"gan",
       {{"upsample", go.upsample},
        {"base_channels", go.base_channels},
        {"global_dim", go.global_dim},
        {"local_channels", go.local_channels},
        {"disc_channels", go.disc_channels},
        {"gp_lambda", gan.gp_lambda},
        {"perceptual_weight", gan.weights.perceptual},
        {"l1_weight", gan.weights.l1},
        {"level_probs", gan.levels.probs},
        {"d_steps", gan.d_steps}}},
      {"editor",
       {{"kind", editor.kind},
        {"synthetic",
         {{"style", sy.style},
          {"jitter_std", sy.jitter_std},
          {"detail_jitter_std", sy.detail_jitter_std},
          {"seed_base", sy.seed_base}}},
        {"remote",
         {{"endpoint", editor.remote.endpoint},
          {"timeout_s", editor.remote.timeout_s},
          {"attempts", editor.remote.attempts},
          {"backoff_s", editor.remote.backoff_s}}},
        {"prompt", editor.prompt},
        {"noise_max", editor.noise_max},
        {"noise_min", editor.noise_min},
        {"noise_shape", editor.noise_shape == NoiseShape::kCosine ? "cosine" : "linear"}}},
      {"reconstruct",
       {{"iterations", reconstruct.iterations},
        {"rays_per_batch", reconstruct.rays_per_batch},
        {"lr", reconstruct.lr},
        {"samples_per_ray", reconstruct.samples_per_ray},
        {"log_every", reconstruct.log_every}}},
      {"edit",
       {{"mode", to_string(edit.mode)},
        {"iterations", edit.iterations},
        {"du_period", edit.du_period},
        {"du_source", to_string(edit.du_source)},
        {"initial_fill", edit.initial_fill},
        {"lr", edit.lr},
        {"baseline_l1_weight", edit.baseline_l1_weight},
        {"baseline_perceptual_weight", edit.baseline_perceptual_weight},
        {"staged", edit.staged},
        {"stage_fractions", edit.stage_fractions},
        {"canonical_frame", edit.canonical_frame},
        {"log_every", edit.log_every},
        {"eval_camera", edit.eval_camera},
        {"eval_every", edit.eval_every}}},
  };
}

RunConfig RunConfig::from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  require_keys_subset(j, {"seed", "scene_bounds", "field", "render", "gan", "editor", "reconstruct", "edit"}, "config");
  read(j, "seed", c.seed, "config");
  if (j.contains("scene_bounds")) {
    const auto& b = j["scene_bounds"];
    if (!b.is_array() || b.size() != 3) throw ConfigError("config.scene_bounds: expected 3 [lo, hi] pairs");
    for (size_t a = 0; a < 3; ++a) {
      if (!b[a].is_array() || b[a].size() != 2 || !b[a][0].is_number() || !b[a][1].is_number()) {
        throw ConfigError("config.scene_bounds: expected 3 [lo, hi] pairs");
      }
      c.scene_bounds[a] = {b[a][0].get<double>(), b[a][1].get<double>()};
    }
  }
  if (j.contains("field")) {
    const auto& f = j["field"];
    require_keys_subset(f, {"flow", "canonical"}, "field");
    if (f.contains("flow")) {
      const auto& x = f["flow"];
      require_keys_subset(x, {"spatial_res", "time_res", "channels", "pe_frequencies", "hidden", "hidden_layers",
                              "clip_scale"},
                          "field.flow");
      auto& o = c.field.flow;
      read(x, "spatial_res", o.spatial_res, "field.flow");
      read(x, "time_res", o.time_res, "field.flow");
      read(x, "channels", o.channels, "field.flow");
      read(x, "pe_frequencies", o.pe_frequencies, "field.flow");
      read(x, "hidden", o.hidden, "field.flow");
      read(x, "hidden_layers", o.hidden_layers, "field.flow");
      read(x, "clip_scale", o.clip_scale, "field.flow");
    }
    if (f.contains("canonical")) {
      const auto& x = f["canonical"];
      require_keys_subset(x, {"hr_res", "lr_res", "channels", "appearance_dim", "latent_dim", "hidden"},
                          "field.canonical");
      auto& o = c.field.canonical;
      read(x, "hr_res", o.hr_res, "field.canonical");
      read(x, "lr_res", o.lr_res, "field.canonical");
      read(x, "channels", o.channels, "field.canonical");
      read(x, "appearance_dim", o.appearance_dim, "field.canonical");
      read(x, "latent_dim", o.latent_dim, "field.canonical");
      read(x, "hidden", o.hidden, "field.canonical");
    }
  }
  if (j.contains("render")) {
    const auto& x = j["render"];
    require_keys_subset(x, {"samples_per_ray", "width", "height", "latent_draw", "background", "chunk",
                            "eval_latent_seed"},
                        "render");
    auto& o = c.render;
    read(x, "samples_per_ray", o.samples_per_ray, "render");
    read(x, "width", o.width, "render");
    read(x, "height", o.height, "render");
    std::string draw = "per_image";
    read(x, "latent_draw", draw, "render");
    if (draw != "per_image" && draw != "per_pixel") throw ConfigError("render.latent_draw: unknown value '" + draw + "'");
    o.latent_draw = draw == "per_pixel" ? LatentDraw::kPerPixel : LatentDraw::kPerImage;
    read_array(x, "background", o.background, "render");
    read(x, "chunk", o.chunk, "render");
    read(x, "eval_latent_seed", o.eval_latent_seed, "render");
  }
  if (j.contains("gan")) {
    const auto& x = j["gan"];
    require_keys_subset(x, {"upsample", "base_channels", "global_dim", "local_channels", "disc_channels", "gp_lambda",
                            "perceptual_weight", "l1_weight", "level_probs", "d_steps"},
                        "gan");
    auto& o = c.gan;
    read(x, "upsample", o.options.upsample, "gan");
    read(x, "base_channels", o.options.base_channels, "gan");
    read(x, "global_dim", o.options.global_dim, "gan");
    read(x, "local_channels", o.options.local_channels, "gan");
    read(x, "disc_channels", o.options.disc_channels, "gan");
    read(x, "gp_lambda", o.gp_lambda, "gan");
    read(x, "perceptual_weight", o.weights.perceptual, "gan");
    read(x, "l1_weight", o.weights.l1, "gan");
    read_array(x, "level_probs", o.levels.probs, "gan");
    read(x, "d_steps", o.d_steps, "gan");
  }
  if (j.contains("editor")) {
    const auto& x = j["editor"];
    require_keys_subset(x, {"kind", "synthetic", "remote", "prompt", "noise_max", "noise_min", "noise_shape"}, "editor");
    auto& o = c.editor;
    read(x, "kind", o.kind, "editor");
    if (x.contains("synthetic")) {
      const auto& s = x["synthetic"];
      require_keys_subset(s, {"style", "jitter_std", "detail_jitter_std", "seed_base"}, "editor.synthetic");
      read_array(s, "style", o.synthetic.style, "editor.synthetic");
      read(s, "jitter_std", o.synthetic.jitter_std, "editor.synthetic");
      read(s, "detail_jitter_std", o.synthetic.detail_jitter_std, "editor.synthetic");
      read(s, "seed_base", o.synthetic.seed_base, "editor.synthetic");
    }
    if (x.contains("remote")) {
      const auto& r = x["remote"];
      require_keys_subset(r, {"endpoint", "timeout_s", "attempts", "backoff_s"}, "editor.remote");
      read(r, "endpoint", o.remote.endpoint, "editor.remote");
      read(r, "timeout_s", o.remote.timeout_s, "editor.remote");
      read(r, "attempts", o.remote.attempts, "editor.remote");
      read(r, "backoff_s", o.remote.backoff_s, "editor.remote");
    }
    read(x, "prompt", o.prompt, "editor");
    read(x, "noise_max", o.noise_max, "editor");
    read(x, "noise_min", o.noise_min, "editor");
    std::string shape = "linear";
    read(x, "noise_shape", shape, "editor");
    if (shape != "linear" && shape != "cosine") throw ConfigError("editor.noise_shape: unknown value '" + shape + "'");
    o.noise_shape = shape == "cosine" ? NoiseShape::kCosine : NoiseShape::kLinear;
  }
  if (j.contains("reconstruct")) {
    const auto& x = j["reconstruct"];
    require_keys_subset(x, {"iterations", "rays_per_batch", "lr", "samples_per_ray", "log_every"}, "reconstruct");
    auto& o = c.reconstruct;
    read(x, "iterations", o.iterations, "reconstruct");
    read(x, "rays_per_batch", o.rays_per_batch, "reconstruct");
    if (x.contains("lr")) {
      for (const auto& [k, v] : x["lr"].items()) {
        if (!v.is_number()) throw ConfigError("reconstruct.lr." + k + ": expected a number");
        o.lr[k] = v.get<double>();
      }
    }
    read(x, "samples_per_ray", o.samples_per_ray, "reconstruct");
    read(x, "log_every", o.log_every, "reconstruct");
  }
  if (j.contains("edit")) {
    const auto& x = j["edit"];
    require_keys_subset(x, {"mode", "iterations", "du_period", "du_source", "initial_fill", "lr", "baseline_l1_weight",
                            "baseline_perceptual_weight", "staged", "stage_fractions", "canonical_frame", "log_every",
                            "eval_camera", "eval_every"},
                        "edit");
    auto& o = c.edit;
    std::string mode = to_string(o.mode);
    read(x, "mode", mode, "edit");
    o.mode = train_mode_from_string(mode);
    read(x, "iterations", o.iterations, "edit");
    read(x, "du_period", o.du_period, "edit");
    std::string src = to_string(o.du_source);
    read(x, "du_source", src, "edit");
    o.du_source = du_source_from_string(src);
    read(x, "initial_fill", o.initial_fill, "edit");
    if (x.contains("lr")) {
      for (const auto& [k, v] : x["lr"].items()) {
        if (!v.is_number()) throw ConfigError("edit.lr." + k + ": expected a number");
        o.lr[k] = v.get<double>();
      }
    }
    read(x, "baseline_l1_weight", o.baseline_l1_weight, "edit");
    read(x, "baseline_perceptual_weight", o.baseline_perceptual_weight, "edit");
    read(x, "staged", o.staged, "edit");
    read_array(x, "stage_fractions", o.stage_fractions, "edit");
    read(x, "canonical_frame", o.canonical_frame, "edit");
    read(x, "log_every", o.log_every, "edit");
    read(x, "eval_camera", o.eval_camera, "edit");
    read(x, "eval_every", o.eval_every, "edit");
  }
  c.validate();
  return c;
}

RunConfig RunConfig::from_json(const json& j) { return from_json(j, RunConfig{}); }

RunConfig RunConfig::load(const std::filesystem::path& path) { return load(path, RunConfig{}); }

RunConfig RunConfig::load(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j, base);
}

void RunConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_json().dump(2) << "\n";
}

std::string RunConfig::architecture_hash() const {
  const auto j = to_json();
  const json arch{{"scene_bounds", j["scene_bounds"]},
                  {"field", j["field"]},
                  {"gan",
                   {{"upsample", gan.options.upsample},
                    {"base_channels", gan.options.base_channels},
                    {"global_dim", gan.options.global_dim},
                    {"local_channels", gan.options.local_channels},
                    {"disc_channels", gan.options.disc_channels}}}};
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : arch.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace c4d
