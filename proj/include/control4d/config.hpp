#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>

#include "control4d/editor.hpp"
#include "control4d/gan.hpp"
#include "control4d/renderer.hpp"
#include "control4d/scene_field.hpp"

namespace c4d {

enum class TrainMode { kBaselineDU, kControl4D };
/// What the editor sees as the current result: the generator output once a
/// generator exists (control4d) and the upsampled render otherwise.
enum class DuSource { kAuto, kRender, kGenerator };

const char* to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

struct RenderConfig {
  int samples_per_ray = 64;
  /// Low-resolution render size used during editing; the generator output is
  /// this times gan.upsample.
  int width = 64;
  int height = 64;
  LatentDraw latent_draw = LatentDraw::kPerImage;
  std::array<double, 3> background{1.0, 1.0, 1.0};
  int64_t chunk = 8192;
  /// Seed of the Eq. 3 draw for evaluation renders; every frame reuses it.
  uint64_t eval_latent_seed = 7;
};

struct GanConfig {
  GanOptions options;
  double gp_lambda = 10.0;
  GenLossWeights weights;
  LevelSchedule levels;
  /// Critic updates per generator update.
  int d_steps = 1;
};

struct EditorSettings {
  std::string kind = "synthetic";  // synthetic | remote
  SyntheticEditorConfig synthetic;
  RemoteEditorOptions remote;
  std::string prompt;
  double noise_max = 0.8;
  double noise_min = 0.1;
  NoiseShape noise_shape = NoiseShape::kLinear;
};

struct ReconstructConfig {
  int64_t iterations = 3000;
  int64_t rays_per_batch = 1024;
  std::map<std::string, double> lr{{"flow", 5e-3}, {"canonical_planes", 2e-2}, {"canonical_nets", 1e-3}};
  int samples_per_ray = 64;
  int64_t log_every = 100;
};

struct EditConfig {
  TrainMode mode = TrainMode::kControl4D;
  int64_t iterations = 2000;
  /// One editor call per this many optimizer steps.
  int64_t du_period = 10;
  DuSource du_source = DuSource::kAuto;
  /// Edit every cache entry before the first step.
  bool initial_fill = true;
  std::map<std::string, double> lr{{"flow", 1e-4},          {"canonical_planes", 1e-3}, {"canonical_nets", 1e-4},
                                   {"generator", 1e-4},     {"discriminator", 2e-4},    {"global_encoder", 1e-4},
                                   {"local_encoder", 1e-4}};
  double baseline_l1_weight = 1.0;
  double baseline_perceptual_weight = 1.0;
  bool staged = true;
  std::array<double, 3> stage_fractions{0.4, 0.2, 0.4};
  int canonical_frame = 0;
  int64_t log_every = 50;
  /// Camera used for flicker / sharpness snapshots.
  int eval_camera = 0;
  /// Snapshot metrics every this many steps (0: only at the end).
  int64_t eval_every = 0;
};

/// Complete declarative configuration of a run.
struct RunConfig {
  uint64_t seed = 0;
  std::array<AxisBounds, 3> scene_bounds{AxisBounds{-1, 1}, AxisBounds{-1, 1}, AxisBounds{-1, 1}};
  SceneFieldOptions field;
  RenderConfig render;
  GanConfig gan;
  EditorSettings editor;
  ReconstructConfig reconstruct;
  EditConfig edit;

  /// Throws ConfigError on any out-of-range knob.
  void validate() const;

  /// Field options with scene bounds applied.
  SceneFieldOptions field_options() const;
  /// GAN options with latent_dim tied to the field.
  GanOptions gan_options() const;

  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected. Missing keys keep the values of `base`.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path, const RunConfig& base);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Hash of everything that determines tensor shapes (field, GAN, bounds).
  std::string architecture_hash() const;
};

}  // namespace c4d
