#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "control4d/config.hpp"
#include "control4d/data.hpp"
#include "control4d/editor.hpp"
#include "control4d/gan.hpp"
#include "control4d/renderer.hpp"
#include "control4d/scene_field.hpp"

namespace c4d {

// ---------------------------------------------------------------------------
// Stage plan

enum class StageName { kCanonicalEdit, kFlowTrain, kJointFinetune };
const char* to_string(StageName s);

struct Stage {
  StageName name = StageName::kJointFinetune;
  std::set<std::string> trainable;
  std::set<std::string> frozen;
  int64_t iterations = 0;
  /// Only the canonical frame is sampled for supervision.
  bool canonical_frame_only = false;
};

struct StagePlan {
  std::vector<Stage> stages;

  /// Throws ConfigError unless the stages are exactly canonical_edit ->
  /// flow_train -> joint_finetune and each stage's trainable/frozen groups are
  /// disjoint and cover `groups`.
  void validate(const std::set<std::string>& groups) const;
  int64_t total_iterations() const;

  /// Flow frozen, then flow only, then everything; budgets split by `fractions`.
  static StagePlan three_stage(int64_t total, const std::array<double, 3>& fractions,
                               const std::set<std::string>& groups);
  /// Everything trainable from the first step (the first two stages are empty).
  static StagePlan joint_only(int64_t total, const std::set<std::string>& groups);
};

// ---------------------------------------------------------------------------
// Dataset cache

struct CacheEntry {
  EditedFrame frame;
  /// Iteration that produced the cached image, -1 before the first edit.
  int64_t stamp = -1;
};

struct EditorCall {
  int64_t iteration = 0;
  int frame = 0;
  int camera = 0;
  bool ok = true;
};

struct DatasetState {
  int num_frames = 0;
  int num_cameras = 0;
  std::vector<CacheEntry> entries;  // frame-major
  int64_t replacements = 0;
  int64_t skips = 0;
  std::vector<EditorCall> calls;

  void reset(int frames, int cameras);
  size_t index(int frame, int camera) const { return static_cast<size_t>(frame) * num_cameras + camera; }
  CacheEntry& at(int frame, int camera) { return entries.at(index(frame, camera)); }
  const CacheEntry& at(int frame, int camera) const { return entries.at(index(frame, camera)); }
  bool filled() const;
};

// ---------------------------------------------------------------------------
// Report

struct TrainReport {
  std::vector<nlohmann::json> records;

  /// Appends a record; its "iteration" must not go backwards within a phase.
  void add(nlohmann::json record);
  void write_jsonl(const std::filesystem::path& path) const;
  static TrainReport read_jsonl(const std::filesystem::path& path);
  /// Last record carrying a "metrics" object, or null.
  nlohmann::json last_metrics() const;
};

std::unique_ptr<Editor> make_editor(const EditorSettings& settings);

/// Reads and version-checks a checkpoint manifest; optionally returns the tensor bytes.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path, std::string* blob = nullptr);

/// Fixed-size checksum over the raw bytes of a tensor list.
uint64_t tensor_checksum(const std::vector<torch::Tensor>& tensors);

// ---------------------------------------------------------------------------
// Trainer

/// Owns the scene field, the GAN, optimizers, the edited-frame cache, and all
/// random state of one run.
class Trainer {
 public:
  Trainer(RunConfig config, Dataset dataset);

  const RunConfig& config() const { return cfg_; }
  /// Re-derives every random stream from `seed` (used when editing starts
  /// from a reconstruction checkpoint).
  void reseed(uint64_t seed);
  RunConfig& mutable_config() { return cfg_; }
  const Dataset& dataset() const { return ds_; }
  SceneField& field() { return field_; }
  Gan& gan() { return gan_; }
  PerceptualExtractor& extractor() { return extractor_; }
  DatasetState& state() { return state_; }
  TrainReport& report() { return report_; }

  /// All seven parameter groups (field and GAN).
  ParamGroups groups();
  /// Groups that the current mode trains.
  std::set<std::string> mode_groups() const;
  uint64_t checksum(const std::vector<std::string>& group_names);

  // Reconstruction -------------------------------------------------------
  /// One photometric L2 step on a random ray batch. Returns the loss.
  double reconstruction_step();
  /// Runs steps until `iterations` reconstruction steps have been taken in total.
  void pretrain_reconstruction(int64_t iterations);
  int64_t reconstruction_iteration() const { return recon_iter_; }

  // Editing --------------------------------------------------------------
  void set_editor(std::shared_ptr<Editor> editor) { editor_ = std::move(editor); }
  /// Switches optimizers to the editing rates and fills the cache if configured.
  void begin_edit();
  bool editing() const { return phase_ == "edit"; }
  /// Edits every cache entry at `iteration`.
  void fill_cache(int64_t iteration = 0);
  /// Picks one (frame, camera) uniformly and replaces its cache entry.
  /// Returns false when the editor failed and the entry was left unchanged.
  bool dataset_update_step(int64_t iteration);
  /// The (frame, camera) the DU generator draws next; advances it.
  std::pair<int, int> draw_update_index();

  struct Sample {
    int frame = 0;
    int camera = 0;
  };
  Sample draw_sample(bool canonical_only);

  /// Direct supervision: L1 + perceptual between the upsampled render and the cache.
  std::map<std::string, double> baseline_step(const Sample& s, const std::set<std::string>& trainable);

  struct GanBatch {
    Sample sample;
    int level = 1;
    RenderPacket packet;
    torch::Tensor rgb, latent, edited, generated;
  };
  /// Renders the packet, draws the level, and synthesizes I_G (graph kept).
  GanBatch make_gan_batch(const Sample& s, int64_t iteration, std::optional<int> level = std::nullopt);
  /// Critic update on a batch; touches only discriminator parameters.
  std::map<std::string, double> discriminator_update(GanBatch& batch);
  /// Generator-side update of the trainable groups among field, G and encoders.
  std::map<std::string, double> generator_update(GanBatch& batch, const std::set<std::string>& trainable);
  std::map<std::string, double> control4d_step(const Sample& s, int64_t iteration,
                                               const std::set<std::string>& trainable);

  /// One editing iteration under `stage`: DU when due, then the mode's step.
  std::map<std::string, double> edit_step(const Stage& stage);
  /// Runs (or resumes) the stage plan up to its total iteration count.
  void run_stages(const StagePlan& plan);
  StagePlan default_plan() const;
  int64_t edit_iteration() const { return edit_iter_; }

  // Outputs --------------------------------------------------------------
  /// Field render at an arbitrary resolution (no jitter).
  RenderPacket render_field(const CameraModel& camera, double time);
  /// Final output for (frame, camera) at edit resolution: generator level 1
  /// in control4d mode, upsampled render in baseline mode.
  torch::Tensor render_output(int frame, int camera);
  /// Same at an arbitrary time and low-resolution camera.
  torch::Tensor render_output_at(double time, const CameraModel& low_res_camera);
  /// Field renders of every (frame, camera) of `gt` at its native resolution, [F,C,3,H,W].
  torch::Tensor render_dataset(const Dataset& gt);
  /// [F,3,H,W] outputs of one camera over all frames.
  torch::Tensor output_video(int camera);
  /// Edit targets without per-call jitter, [F,3,H,W] at edit resolution.
  torch::Tensor target_video(int camera) const;
  torch::Tensor mask_video(int camera) const;
  /// Flicker, sharpness, and PSNR of output_video(eval_camera) against target_video.
  nlohmann::json edit_metrics();

  /// Original frames at edit resolution, [3,H,W].
  torch::Tensor original(int frame, int camera) const;
  CameraModel low_res_camera(int camera) const;
  int edit_width() const;
  int edit_height() const;

  // Checkpoints ------------------------------------------------------------
  void save(const std::filesystem::path& path) const;
  /// Restores a checkpoint written by a trainer with the same architecture;
  /// throws SchemaError otherwise.
  void load(const std::filesystem::path& path);

 private:
  void configure_optimizers(const std::string& phase);
  void set_trainable(const std::set<std::string>& trainable);
  void step_groups(const std::set<std::string>& groups);
  void zero_grads();
  EditRequest build_request(int frame, int camera, int64_t iteration);
  void log_edit(const std::map<std::string, double>& losses, const Stage& stage);

  RunConfig cfg_;
  Dataset ds_;
  torch::Tensor images_;  // [F,C,3,H,W] dataset resolution
  torch::Tensor masks_;   // [F,C,H,W] or undefined
  torch::Tensor originals_edit_;  // [F,C,3,He,We]
  torch::Tensor masks_edit_;      // [F,C,He,We]
  std::vector<RayBatch> rays_;    // dataset-resolution rays per camera

  SceneField field_{nullptr};
  Gan gan_{nullptr};
  PerceptualExtractor extractor_{nullptr};
  std::map<std::string, std::unique_ptr<torch::optim::Adam>> optimizers_;
  std::string phase_ = "reconstruct";
  std::string stage_name_;

  std::shared_ptr<Editor> editor_;
  DatasetState state_;
  TrainReport report_;

  std::mt19937_64 rng_;
  std::mt19937_64 du_rng_;
  at::Generator gen_;
  int64_t recon_iter_ = 0;
  int64_t edit_iter_ = 0;
  double wall_start_ = 0.0;
  std::map<std::string, std::pair<double, int64_t>> loss_acc_;
};

// ---------------------------------------------------------------------------
// GAN-only training on fixed pairs

struct GanPairSet {
  torch::Tensor rgb;     // [N,3,h,w]
  torch::Tensor latent;  // [N,C_l,h,w]
  torch::Tensor edited;  // [N,3,h*up,w*up]
};

struct GanPairResult {
  std::vector<double> gen_losses;
  std::vector<double> disc_losses;
  /// Mean |G_level3 - I_ed| over the set after training.
  double level3_l1 = 0.0;
  bool diverged = false;
};

/// Trains G, D and both encoders on a fixed set with the given level mix.
GanPairResult train_gan_on_pairs(Gan& gan, PerceptualExtractor& extractor, const GanPairSet& set,
                                 const LevelSchedule& levels, int64_t steps, const GanConfig& cfg, double lr_g,
                                 double lr_d, uint64_t seed);

/// Level-3 reconstruction L1 of the generator over a pair set.
double level3_l1(Gan& gan, const GanPairSet& set);

}  // namespace c4d
