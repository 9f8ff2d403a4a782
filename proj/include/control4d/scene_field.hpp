#pragma once

#include <torch/torch.h>

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace c4d {

enum class Axis : int { kX = 0, kY = 1, kZ = 2, kT = 3 };

const char* axis_name(Axis a);

/// Sin/cos features at frequencies 2^k * pi, k = 0..num_frequencies-1.
/// Layout per frequency: D sin terms followed by D cos terms, optionally
/// prefixed by the raw input.
struct PositionalEncoding {
  int num_frequencies = 6;
  bool include_input = true;

  int64_t output_dim(int64_t input_dim) const {
    return input_dim * (2 * num_frequencies + (include_input ? 1 : 0));
  }

  /// Batched encoding of [..., D] coordinates. Throws DomainError on non-finite input.
  torch::Tensor operator()(const torch::Tensor& p) const;

  std::vector<double> encode(std::span<const double> p) const;
};

struct AxisBounds {
  double lo = -1.0;
  double hi = 1.0;
};

/// One 2D feature grid over the (u, v) axis pair. Stored as [1, C, res_v, res_u].
struct PlaneSpec {
  Axis u = Axis::kX;
  Axis v = Axis::kY;
  int64_t res_u = 32;
  int64_t res_v = 32;
};

/// Layout of a factored feature field: outputs are the sum over branches of the
/// elementwise product of the plane samples within each branch.
struct AtlasLayout {
  std::vector<std::vector<PlaneSpec>> branches;
  int64_t channels = 16;
  /// x, y, z, t bounds; t is normalized to [0, 1].
  std::array<AxisBounds, 4> bounds{};
  /// Spatial planes are initialized U(init_lo, init_hi); planes touching t start at 1.
  double init_lo = 0.1;
  double init_hi = 0.5;

  int dims() const;
  size_t num_planes() const;
  bool covers_axis(Axis a) const;

  /// Three branches xy*zt, xz*yt, yz*xt.
  static AtlasLayout flow4d(int64_t spatial_res, int64_t time_res, int64_t channels,
                            const std::array<AxisBounds, 3>& scene);
  /// Three branches of a single spatial plane each: xy + xz + yz.
  static AtlasLayout spatial3d(int64_t res, int64_t channels, const std::array<AxisBounds, 3>& scene);
};

class PlaneAtlasImpl : public torch::nn::Module {
 public:
  PlaneAtlasImpl(AtlasLayout layout, uint64_t seed);

  /// coords [N, dims] in world units (t normalized) -> features [N, C].
  /// Out-of-bounds coordinates are clamped to the border.
  torch::Tensor forward(const torch::Tensor& coords) const;

  /// Contribution of a single branch, [N, C].
  torch::Tensor branch(size_t b, const torch::Tensor& coords) const;

  const AtlasLayout& layout() const { return layout_; }
  torch::Tensor& plane(size_t branch, size_t index) { return planes_[branch][index]; }
  const torch::Tensor& plane(size_t branch, size_t index) const { return planes_[branch][index]; }
  std::vector<torch::Tensor> all_planes() const;

  /// Total variation of all planes (mean squared neighbour difference).
  torch::Tensor total_variation() const;

 private:
  torch::Tensor sample_plane(const torch::Tensor& grid_plane, const PlaneSpec& spec,
                             const torch::Tensor& coords) const;

  AtlasLayout layout_;
  std::vector<std::vector<torch::Tensor>> planes_;
};
TORCH_MODULE(PlaneAtlas);

/// Fully connected stack with ReLU between layers. The last layer can be zeroed.
class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(int64_t in, int64_t hidden, int64_t out, int hidden_layers, bool zero_last);
  torch::Tensor forward(torch::Tensor x);
  torch::nn::Linear& last() { return layers_.back(); }

 private:
  std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(Mlp);

struct FlowFieldOptions {
  int64_t spatial_res = 32;
  int64_t time_res = 16;
  int64_t channels = 16;
  int pe_frequencies = 6;
  int64_t hidden = 64;
  int hidden_layers = 2;
  std::array<AxisBounds, 3> scene{};
  /// Canonical coordinates are clipped to this multiple of the scene box.
  double clip_scale = 1.5;
};

/// Maps (x, y, z, t) to canonical (x^, y^, z^) as (x, y, z) + residual.
class FlowFieldImpl : public torch::nn::Module {
 public:
  FlowFieldImpl(const FlowFieldOptions& opt, uint64_t seed);

  /// points [N, 3], times [N] -> canonical [N, 3].
  torch::Tensor forward(const torch::Tensor& points, const torch::Tensor& times);

  /// Residual predicted by the warp head, before clipping.
  torch::Tensor residual(const torch::Tensor& points, const torch::Tensor& times);

  int64_t clipped_count() const { return clipped_.load(); }
  PlaneAtlas& atlas() { return atlas_; }
  Mlp& head() { return head_; }
  const FlowFieldOptions& options() const { return opt_; }

 private:
  FlowFieldOptions opt_;
  PositionalEncoding encoding_;
  PlaneAtlas atlas_{nullptr};
  Mlp head_{nullptr};
  torch::Tensor clip_lo_, clip_hi_;
  std::atomic<int64_t> clipped_{0};
};
TORCH_MODULE(FlowField);

/// Per-point outputs of the canonical field.
struct FieldSample {
  torch::Tensor sigma;        // [N]
  torch::Tensor rgb;          // [N, 3]
  torch::Tensor latent_mean;  // [N, C_l]
  torch::Tensor latent_std;   // [N, C_l]
};

struct CanonicalFieldOptions {
  int64_t hr_res = 128;
  int64_t lr_res = 64;
  int64_t channels = 16;
  int64_t appearance_dim = 16;
  int64_t latent_dim = 8;
  int64_t hidden = 64;
  std::array<AxisBounds, 3> scene{};
};

class CanonicalFieldImpl : public torch::nn::Module {
 public:
  CanonicalFieldImpl(const CanonicalFieldOptions& opt, uint64_t seed);

  /// canonical [N, 3], unit view directions [N, 3].
  FieldSample forward(const torch::Tensor& canonical, const torch::Tensor& view_dirs);

  PlaneAtlas& atlas_hr() { return atlas_hr_; }
  PlaneAtlas& atlas_lr() { return atlas_lr_; }
  Mlp& geometry_head() { return geometry_; }
  Mlp& color_head() { return color_; }
  const CanonicalFieldOptions& options() const { return opt_; }

 private:
  CanonicalFieldOptions opt_;
  PlaneAtlas atlas_hr_{nullptr};
  PlaneAtlas atlas_lr_{nullptr};
  Mlp geometry_{nullptr};
  Mlp color_{nullptr};
};
TORCH_MODULE(CanonicalField);

struct SceneFieldOptions {
  FlowFieldOptions flow;
  CanonicalFieldOptions canonical;
};

/// Named parameter groups, used by optimizers and freeze plans.
using ParamGroups = std::map<std::string, std::vector<torch::Tensor>>;

/// Flow + canonical field. Thread-safe for concurrent read-only queries.
class SceneFieldImpl : public torch::nn::Module {
 public:
  SceneFieldImpl(const SceneFieldOptions& opt, uint64_t seed);

  /// points [N, 3], times [N], view_dirs [N, 3]. Non-unit directions are
  /// normalized and counted in `nonunit_dir_count()`.
  FieldSample forward(const torch::Tensor& points, const torch::Tensor& times,
                      const torch::Tensor& view_dirs);

  /// "flow", "canonical_planes", "canonical_nets".
  ParamGroups param_groups();

  FlowField& flow() { return flow_; }
  CanonicalField& canonical() { return canonical_; }
  const SceneFieldOptions& options() const { return opt_; }
  int64_t nonunit_dir_count() const { return nonunit_dirs_.load(); }

 private:
  SceneFieldOptions opt_;
  FlowField flow_{nullptr};
  CanonicalField canonical_{nullptr};
  std::atomic<int64_t> nonunit_dirs_{0};
};
TORCH_MODULE(SceneField);

/// Anything that can be volume rendered: (points, times, dirs) -> FieldSample.
using FieldFn = std::function<FieldSample(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

inline FieldFn as_field_fn(SceneField field) {
  return [field](const torch::Tensor& p, const torch::Tensor& t, const torch::Tensor& d) mutable {
    return field->forward(p, t, d);
  };
}

}  // namespace c4d
