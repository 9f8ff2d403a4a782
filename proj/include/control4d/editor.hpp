#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <memory>
#include <nlohmann/json_fwd.hpp>
#include <string>

#include "control4d/renderer.hpp"

namespace c4d {

/// Everything an editor sees for one (frame, camera) entry. Images are [3,H,W] in [0,1].
struct EditRequest {
  torch::Tensor render;
  torch::Tensor original;
  torch::Tensor condition;
  std::string prompt;
  double noise_level = 0.0;
  int frame_id = 0;
  int camera_id = 0;
  uint64_t seed = 0;
  int64_t iteration = 0;

  /// Same-resolution images, noise_level in [0, 1]. Throws UsageError.
  void validate() const;
};

struct EditedFrame {
  torch::Tensor image;
  EditRequest request;
  std::string editor_id;
  int64_t iteration = 0;
};

class Editor {
 public:
  virtual ~Editor() = default;
  virtual EditedFrame edit(const EditRequest& request) = 0;
  virtual std::string id() const = 0;
};

/// Stand-in for a diffusion editor: a fixed colour affine "edit" plus a
/// per-(frame, camera, iteration) global colour shift and pixel noise.
struct SyntheticEditorConfig {
  /// Row-major 3x4 affine: out_c = sum_k M[c][k] * in_k + M[c][3].
  std::array<double, 12> style{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  double jitter_std = 0.0;
  double detail_jitter_std = 0.0;
  uint64_t seed_base = 0;

  bool is_identity_style() const;
};

/// Global colour shift drawn for one call; exposed for statistics tests.
std::array<double, 3> synthetic_global_shift(const SyntheticEditorConfig& cfg, int frame_id, int camera_id,
                                             int64_t iteration);

/// clamp(style(original) + shift + N(0, detail^2) * noise_level).
EditedFrame synthetic_edit(const EditRequest& request, const SyntheticEditorConfig& cfg);

class SyntheticEditor : public Editor {
 public:
  explicit SyntheticEditor(SyntheticEditorConfig cfg) : cfg_(cfg) {}
  EditedFrame edit(const EditRequest& request) override { return synthetic_edit(request, cfg_); }
  std::string id() const override { return "synthetic"; }
  const SyntheticEditorConfig& config() const { return cfg_; }

 private:
  SyntheticEditorConfig cfg_;
};

struct RemoteEditorOptions {
  /// Base URL, e.g. "http://127.0.0.1:7860". Requests go to POST <endpoint>/edit.
  std::string endpoint;
  double timeout_s = 120.0;
  int attempts = 3;
  /// First retry delay; doubles after every failed attempt.
  double backoff_s = 0.5;
};

/// Wire body for POST /edit.
nlohmann::json encode_edit_request(const EditRequest& request);

/// Parses the JSON response body. Throws TransportError when malformed or
/// when the decoded image does not match the request resolution.
EditedFrame decode_edit_response(const std::string& body, const EditRequest& request);

/// Sends the request with retries and exponential backoff; TransportError
/// after the last failed attempt.
EditedFrame remote_edit(const EditRequest& request, const RemoteEditorOptions& options);

class RemoteEditor : public Editor {
 public:
  explicit RemoteEditor(RemoteEditorOptions options) : options_(std::move(options)) {}
  EditedFrame edit(const EditRequest& request) override;
  std::string id() const override { return last_id_.empty() ? "remote" : last_id_; }

 private:
  RemoteEditorOptions options_;
  std::string last_id_;
};

struct NormalMap {
  torch::Tensor encoded;  // [3,H,W], (n + 1) / 2, 0.5 grey at invalid pixels
  torch::Tensor normals;  // [3,H,W], unit at valid pixels, zero elsewhere
  torch::Tensor valid;    // [H,W] bool
  bool empty = false;
};

/// Camera-space normals from screen-space gradients of a z-depth map.
/// Pixels with depth <= 0 (or alpha <= 0.5 when alpha is given) are invalid.
NormalMap extract_normals(const torch::Tensor& depth, const CameraModel& cam, const torch::Tensor& alpha = {});

enum class NoiseShape { kLinear, kCosine };

/// Non-increasing interpolation from n_max (iteration 0) to n_min (iteration == total).
double noise_schedule(int64_t iteration, int64_t total, double n_max, double n_min,
                      NoiseShape shape = NoiseShape::kLinear);

}  // namespace c4d
