#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <vector>

#include "control4d/renderer.hpp"

namespace c4d {

namespace fs = std::filesystem;

struct FrameRecord {
  int frame_id = 0;
  double time = 0.0;
  int camera_id = 0;
  fs::path image;
  std::optional<fs::path> mask;
};

/// Multi-view video on disk:
///   root/cams.json                array of {fx, fy, cx, cy, R[9], t[3], width, height}
///   root/frames/<cam>/<frame>.png 8-bit RGB
///   root/masks/<cam>/<frame>.png  optional 8-bit grey, > 127 = foreground
/// Frame times are frame / (num_frames - 1).
struct Dataset {
  fs::path root;
  std::vector<CameraModel> cameras;
  /// Frame-major: index = frame * num_cameras + camera.
  std::vector<FrameRecord> records;
  int num_frames = 0;
  int num_cameras = 0;

  const FrameRecord& record(int frame, int camera) const {
    return records.at(static_cast<size_t>(frame) * num_cameras + camera);
  }
  double time_of(int frame) const { return num_frames > 1 ? static_cast<double>(frame) / (num_frames - 1) : 0.0; }
  bool has_masks() const;
};

nlohmann::json cameras_to_json(const std::vector<CameraModel>& cams);
void write_cameras(const fs::path& path, const std::vector<CameraModel>& cams);
/// Strict parse of a cams.json-style file; throws ConfigError.
std::vector<CameraModel> read_cameras(const fs::path& path);

/// Validates the whole tree and throws DatasetError listing every violation.
Dataset load_dataset(const fs::path& root);

/// [frames, cameras, 3, H, W] float images.
torch::Tensor load_images(const Dataset& ds);
/// [frames, cameras, H, W] float masks (1 = foreground), or undefined when absent.
torch::Tensor load_masks(const Dataset& ds);

std::string frame_filename(int frame);

// ---------------------------------------------------------------------------
// Synthetic scene

/// Gaussian density blob whose centre follows c0 + c1 t + c2 t^2 + c3 t^3.
struct BlobSpec {
  std::array<std::array<double, 3>, 4> trajectory{};
  double radius = 0.3;  // Gaussian standard deviation, world units
  double peak_density = 10.0;
  std::array<double, 3> albedo{0.8, 0.2, 0.2};
  std::vector<double> latent_signature;
};

struct CameraRing {
  int count = 4;
  double radius = 3.0;
  double elevation_deg = 15.0;
  double azimuth_offset_deg = 0.0;
  double focal = 80.0;
  int width = 64;
  int height = 64;
};

struct SyntheticSceneSpec {
  std::vector<BlobSpec> blobs;
  std::array<AxisBounds, 3> bounds{AxisBounds{-1, 1}, AxisBounds{-1, 1}, AxisBounds{-1, 1}};
  CameraRing ring;
  int num_frames = 50;
  std::array<double, 3> background{1.0, 1.0, 1.0};
  /// Drives random blobs when `blobs` is empty and `random_blobs` > 0.
  uint64_t seed = 0;
  int random_blobs = 0;

  /// Throws ConfigError (blob centre leaving bounds, non-positive density, ...).
  void validate() const;

  /// Two blobs, four cameras at 90 degrees, 50 frames, 64x64.
  static SyntheticSceneSpec default_spec();

  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected with ConfigError.
  static SyntheticSceneSpec from_json(const nlohmann::json& j);
};

/// Analytic ground truth for a blob scene. Ray integrals use closed-form
/// Gaussian line integrals for transmittance; nothing here touches the
/// learned renderer.
class SyntheticScene {
 public:
  explicit SyntheticScene(SyntheticSceneSpec spec);

  const SyntheticSceneSpec& spec() const { return spec_; }
  const std::vector<BlobSpec>& blobs() const { return blobs_; }

  std::vector<CameraModel> cameras() const;
  CameraModel ring_camera(double azimuth_deg, int width, int height) const;

  std::array<double, 3> blob_center(size_t blob, double t) const;
  double density(const std::array<double, 3>& p, double t) const;

  struct RayResult {
    std::array<double, 3> rgb{};
    double alpha = 0.0;
    double depth = 0.0;  // along the ray, weight-normalized
  };
  RayResult integrate_ray(const std::array<double, 3>& origin, const std::array<double, 3>& dir, double t) const;

  /// 1 - exp(-sum_k peak_k sqrt(2 pi) s_k exp(-b_k^2 / 2 s_k^2)): whole-line optical depth.
  double line_alpha(const std::array<double, 3>& origin, const std::array<double, 3>& dir, double t) const;

  struct View {
    torch::Tensor rgb;    // [3,H,W]
    torch::Tensor alpha;  // [H,W]
    torch::Tensor depth;  // [H,W] camera-space z
  };
  View render(const CameraModel& cam, double t) const;

  /// Writes cams.json, scene.json, frames/ and masks/ under root.
  Dataset write(const fs::path& root) const;

 private:
  SyntheticSceneSpec spec_;
  std::vector<BlobSpec> blobs_;
};

// ---------------------------------------------------------------------------
// Metrics

/// Returned by psnr() for identical inputs.
inline constexpr double kPsnrSentinel = 100.0;

/// -10 log10(MSE) for images in [0,1]. `mask` broadcasts over channels.
double psnr(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask = {});

/// Mean over consecutive frames of the (masked) RMS frame difference.
/// video [T,3,H,W]; mask [T,H,W] or [H,W] (pair mask = union of both frames).
double consecutive_rms(const torch::Tensor& video, const torch::Tensor& mask = {});

/// consecutive_rms(video) - consecutive_rms(gt).
double temporal_flicker(const torch::Tensor& video, const torch::Tensor& gt, const torch::Tensor& mask = {});

/// Variance of the 4-neighbour Laplacian of the grey image ([3,H,W] or
/// [T,3,H,W], averaged over frames), restricted to interior pixels of `mask`.
double laplacian_variance(const torch::Tensor& images, const torch::Tensor& mask = {});

struct VideoMetrics {
  double psnr = 0.0;       // over every frame and camera
  double flicker = 0.0;    // mean over cameras
  double sharpness = 0.0;  // mean over cameras
  int num_frames = 0;
  int num_cameras = 0;
};

/// pred and gt [F,C,3,H,W]; mask [F,C,H,W] or undefined. Throws UsageError on
/// shape mismatch.
VideoMetrics evaluate_videos(const torch::Tensor& pred, const torch::Tensor& gt, const torch::Tensor& mask = {});

/// Reads <dir>/<camera>/<frame>.png (or <dir>/frames/...) into [F,C,3,H,W].
torch::Tensor load_frame_tree(const fs::path& dir);

}  // namespace c4d
