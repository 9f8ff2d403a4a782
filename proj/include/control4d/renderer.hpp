#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>

#include "control4d/scene_field.hpp"

namespace c4d {

/// Pinhole camera with an OpenCV-style world-to-camera transform
/// (x right, y down, z forward). Pixel (u, v) is sampled at its index,
/// so a symmetric image uses cx = (width - 1) / 2.
struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::array<double, 9> R{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> t{0, 0, 0};
  int width = 1, height = 1;

  /// Throws ConfigError on non-positive focal lengths/resolution or a
  /// rotation that is not orthonormal with det +1 (tolerance 1e-5).
  void validate() const;

  /// Camera center in world coordinates, -R^T t.
  std::array<double, 3> center() const;

  /// Same view at a different resolution (intrinsics rescaled).
  CameraModel resized(int new_width, int new_height) const;

  /// Camera at `eye` looking at `target`; `up` is the world up vector.
  static CameraModel look_at(const std::array<double, 3>& eye, const std::array<double, 3>& target,
                             const std::array<double, 3>& up, double focal, int width, int height);
};

struct RayBatch {
  torch::Tensor origins;     // [N, 3]
  torch::Tensor directions;  // [N, 3], unit
  torch::Tensor near;        // [N]
  torch::Tensor far;         // [N], > near
  torch::Tensor pixels;      // [N] int64, v * width + u
  torch::Tensor z_scale;     // [N], camera-space z of the unit direction
  torch::Tensor hit;         // [N] bool, ray intersects the scene box
  int width = 0, height = 0;

  int64_t size() const { return origins.size(0); }
  RayBatch select(const torch::Tensor& index) const;
};

/// One ray per pixel. Near/far come from the intersection with `bounds`;
/// rays missing the box get a short dummy interval and `hit = false`.
RayBatch generate_rays(const CameraModel& cam, const std::array<AxisBounds, 3>& bounds,
                       torch::Dtype dtype = torch::kFloat);

struct CompositeResult {
  torch::Tensor payload;  // [R, C]
  torch::Tensor alpha;    // [R]
  torch::Tensor depth;    // [R]
  torch::Tensor weights;  // [R, S]
};

/// Emission-absorption compositing. sigmas/deltas/depths [R, S], values [R, S, C].
/// Throws DomainError on negative density.
CompositeResult composite(const torch::Tensor& sigmas, const torch::Tensor& deltas,
                          const torch::Tensor& values, const torch::Tensor& depths, double eps = 1e-10);

enum class LatentDraw { kPerImage, kPerPixel };

struct RenderOptions {
  int samples_per_ray = 64;
  bool stratified = false;
  std::array<double, 3> background{1.0, 1.0, 1.0};
  /// Rays per chunk when gradients are disabled.
  int64_t chunk = 8192;
};

/// Low-resolution render outputs; maps are channel-first.
struct RenderPacket {
  torch::Tensor rgb;          // [3, H, W]
  torch::Tensor latent_mean;  // [C_l, H, W]
  torch::Tensor latent_std;   // [C_l, H, W]
  torch::Tensor depth;        // [H, W], camera-space z
  torch::Tensor alpha;        // [H, W]
  double time = 0.0;
  int camera_id = -1;
  uint64_t seed = 0;
};

/// Per-ray render outputs.
struct RayRender {
  torch::Tensor rgb;          // [N, 3]
  torch::Tensor latent_mean;  // [N, C_l]
  torch::Tensor latent_std;   // [N, C_l]
  torch::Tensor depth;        // [N]
  torch::Tensor alpha;        // [N]
};

/// Renders a ray batch at per-ray times [N]. `gen` drives stratified jitter.
RayRender render_rays(const FieldFn& field, const RayBatch& rays, const torch::Tensor& times,
                      const RenderOptions& opt, std::optional<at::Generator> gen = std::nullopt);

RenderPacket render_view(const FieldFn& field, const CameraModel& cam, const std::array<AxisBounds, 3>& bounds,
                         double t, const RenderOptions& opt, std::optional<at::Generator> gen = std::nullopt,
                         torch::Dtype dtype = torch::kFloat);

/// I_l = I_a + t * I_b with t ~ N(0, 1) drawn from `seed`: a single scalar per
/// image by default, or one draw per element with kPerPixel.
torch::Tensor sample_latent_map(const torch::Tensor& latent_mean, const torch::Tensor& latent_std, uint64_t seed,
                                LatentDraw draw = LatentDraw::kPerImage);

inline torch::Tensor sample_latent_map(const RenderPacket& pkt, uint64_t seed,
                                       LatentDraw draw = LatentDraw::kPerImage) {
  return sample_latent_map(pkt.latent_mean, pkt.latent_std, seed, draw);
}

}  // namespace c4d
