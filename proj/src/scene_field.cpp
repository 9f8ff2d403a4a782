#include "control4d/scene_field.hpp"

#include <cmath>
#include <numbers>

#include "control4d/errors.hpp"

namespace c4d {

namespace F = torch::nn::functional;

const char* axis_name(Axis a) {
  switch (a) {
    case Axis::kX: return "x";
    case Axis::kY: return "y";
    case Axis::kZ: return "z";
    case Axis::kT: return "t";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// PositionalEncoding

torch::Tensor PositionalEncoding::operator()(const torch::Tensor& p) const {
  if (!torch::isfinite(p).all().item<bool>()) {
    throw DomainError("positional encoding: non-finite input");
  }
  std::vector<torch::Tensor> parts;
  parts.reserve(2 * num_frequencies + 1);
  if (include_input) parts.push_back(p);
  for (int k = 0; k < num_frequencies; ++k) {
    const double freq = std::ldexp(std::numbers::pi, k);
    auto scaled = p * freq;
    parts.push_back(torch::sin(scaled));
    parts.push_back(torch::cos(scaled));
  }
  return torch::cat(parts, -1);
}

std::vector<double> PositionalEncoding::encode(std::span<const double> p) const {
  for (double v : p) {
    if (!std::isfinite(v)) throw DomainError("positional encoding: non-finite input");
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(output_dim(static_cast<int64_t>(p.size()))));
  if (include_input) out.insert(out.end(), p.begin(), p.end());
  for (int k = 0; k < num_frequencies; ++k) {
    const double freq = std::ldexp(std::numbers::pi, k);
    for (double v : p) out.push_back(std::sin(freq * v));
    for (double v : p) out.push_back(std::cos(freq * v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// AtlasLayout

int AtlasLayout::dims() const {
  return covers_axis(Axis::kT) ? 4 : 3;
}

size_t AtlasLayout::num_planes() const {
  size_t n = 0;
  for (const auto& b : branches) n += b.size();
  return n;
}

bool AtlasLayout::covers_axis(Axis a) const {
  for (const auto& b : branches)
    for (const auto& p : b)
      if (p.u == a || p.v == a) return true;
  return false;
}

AtlasLayout AtlasLayout::flow4d(int64_t spatial_res, int64_t time_res, int64_t channels,
                                const std::array<AxisBounds, 3>& scene) {
  AtlasLayout l;
  l.channels = channels;
  l.bounds = {scene[0], scene[1], scene[2], AxisBounds{0.0, 1.0}};
  auto sp = [&](Axis u, Axis v) { return PlaneSpec{u, v, spatial_res, spatial_res}; };
  auto tp = [&](Axis u) { return PlaneSpec{u, Axis::kT, spatial_res, time_res}; };
  l.branches = {
      {sp(Axis::kX, Axis::kY), tp(Axis::kZ)},
      {sp(Axis::kX, Axis::kZ), tp(Axis::kY)},
      {sp(Axis::kY, Axis::kZ), tp(Axis::kX)},
  };
  return l;
}

AtlasLayout AtlasLayout::spatial3d(int64_t res, int64_t channels, const std::array<AxisBounds, 3>& scene) {
  AtlasLayout l;
  l.channels = channels;
  l.bounds = {scene[0], scene[1], scene[2], AxisBounds{0.0, 1.0}};
  l.branches = {
      {PlaneSpec{Axis::kX, Axis::kY, res, res}},
      {PlaneSpec{Axis::kX, Axis::kZ, res, res}},
      {PlaneSpec{Axis::kY, Axis::kZ, res, res}},
  };
  l.init_lo = -0.1;
  l.init_hi = 0.1;
  return l;
}

// ---------------------------------------------------------------------------
// PlaneAtlas

PlaneAtlasImpl::PlaneAtlasImpl(AtlasLayout layout, uint64_t seed) : layout_(std::move(layout)) {
  if (layout_.branches.empty()) throw ConfigError("plane atlas: no branches");
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  planes_.resize(layout_.branches.size());
  for (size_t b = 0; b < layout_.branches.size(); ++b) {
    for (size_t i = 0; i < layout_.branches[b].size(); ++i) {
      const auto& spec = layout_.branches[b][i];
      if (spec.res_u < 2 || spec.res_v < 2) throw ConfigError("plane atlas: resolution must be >= 2");
      const std::vector<int64_t> shape{1, layout_.channels, spec.res_v, spec.res_u};
      torch::Tensor init;
      if (spec.u == Axis::kT || spec.v == Axis::kT) {
        init = torch::ones(shape);
      } else {
        init = torch::rand(shape, gen) * (layout_.init_hi - layout_.init_lo) + layout_.init_lo;
      }
      const std::string name = "b" + std::to_string(b) + "_" + axis_name(spec.u) + axis_name(spec.v);
      planes_[b].push_back(register_parameter(name, init));
    }
  }
}

std::vector<torch::Tensor> PlaneAtlasImpl::all_planes() const {
  std::vector<torch::Tensor> out;
  for (const auto& b : planes_) out.insert(out.end(), b.begin(), b.end());
  return out;
}

torch::Tensor PlaneAtlasImpl::sample_plane(const torch::Tensor& grid_plane, const PlaneSpec& spec,
                                           const torch::Tensor& coords) const {
  auto normalize = [&](Axis a) {
    const auto& bd = layout_.bounds[static_cast<int>(a)];
    auto c = coords.select(1, static_cast<int>(a));
    return ((c - bd.lo) * (2.0 / (bd.hi - bd.lo)) - 1.0).clamp(-1.0, 1.0);
  };
  const int64_t n = coords.size(0);
  auto grid = torch::stack({normalize(spec.u), normalize(spec.v)}, -1).view({1, 1, n, 2});
  auto out = F::grid_sample(grid_plane, grid,
                            F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(true));
  return out.view({layout_.channels, n}).t();
}

torch::Tensor PlaneAtlasImpl::branch(size_t b, const torch::Tensor& coords) const {
  const auto& specs = layout_.branches.at(b);
  torch::Tensor acc = sample_plane(planes_[b][0], specs[0], coords);
  for (size_t i = 1; i < specs.size(); ++i) acc = acc * sample_plane(planes_[b][i], specs[i], coords);
  return acc;
}

torch::Tensor PlaneAtlasImpl::forward(const torch::Tensor& coords) const {
  TORCH_CHECK(coords.dim() == 2 && coords.size(1) >= layout_.dims(), "plane atlas: coords must be [N, ", layout_.dims(), "]");
  torch::Tensor out = branch(0, coords);
  for (size_t b = 1; b < layout_.branches.size(); ++b) out = out + branch(b, coords);
  return out;
}

torch::Tensor PlaneAtlasImpl::total_variation() const {
  torch::Tensor tv;
  int n = 0;
  for (const auto& p : all_planes()) {
    auto dh = p.slice(2, 1) - p.slice(2, 0, -1);
    auto dw = p.slice(3, 1) - p.slice(3, 0, -1);
    auto term = dh.pow(2).mean() + dw.pow(2).mean();
    tv = tv.defined() ? tv + term : term;
    ++n;
  }
  return tv / n;
}

// ---------------------------------------------------------------------------
// Mlp

MlpImpl::MlpImpl(int64_t in, int64_t hidden, int64_t out, int hidden_layers, bool zero_last) {
  int64_t width = in;
  for (int i = 0; i < hidden_layers; ++i) {
    layers_.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(width, hidden)));
    width = hidden;
  }
  layers_.push_back(register_module("out", torch::nn::Linear(width, out)));
  if (zero_last) {
    torch::NoGradGuard guard;
    layers_.back()->weight.zero_();
    layers_.back()->bias.zero_();
  }
}

torch::Tensor MlpImpl::forward(torch::Tensor x) {
  for (size_t i = 0; i + 1 < layers_.size(); ++i) x = torch::relu(layers_[i]->forward(x));
  return layers_.back()->forward(x);
}

// ---------------------------------------------------------------------------
// FlowField

FlowFieldImpl::FlowFieldImpl(const FlowFieldOptions& opt, uint64_t seed)
    : opt_(opt), encoding_{opt.pe_frequencies, true} {
  torch::manual_seed(seed);
  atlas_ = register_module("atlas", PlaneAtlas(AtlasLayout::flow4d(opt.spatial_res, opt.time_res, opt.channels, opt.scene), seed + 1));
  head_ = register_module("warp_head", Mlp(opt.channels + encoding_.output_dim(4), opt.hidden, 3, opt.hidden_layers, true));
  std::vector<double> lo, hi;
  for (const auto& b : opt.scene) {
    const double c = 0.5 * (b.lo + b.hi);
    const double h = 0.5 * (b.hi - b.lo) * opt.clip_scale;
    lo.push_back(c - h);
    hi.push_back(c + h);
  }
  clip_lo_ = register_buffer("clip_lo", torch::tensor(lo, torch::kFloat));
  clip_hi_ = register_buffer("clip_hi", torch::tensor(hi, torch::kFloat));
}

torch::Tensor FlowFieldImpl::residual(const torch::Tensor& points, const torch::Tensor& times) {
  auto xyzt = torch::cat({points, times.view({-1, 1})}, 1);
  auto features = atlas_->forward(xyzt);
  return head_->forward(torch::cat({features, encoding_(xyzt)}, 1));
}

torch::Tensor FlowFieldImpl::forward(const torch::Tensor& points, const torch::Tensor& times) {
  auto warped = points + residual(points, times);
  auto lo = clip_lo_.to(warped.dtype());
  auto hi = clip_hi_.to(warped.dtype());
  {
    torch::NoGradGuard guard;
    const auto outside = ((warped < lo) | (warped > hi)).any(1).sum().item<int64_t>();
    if (outside > 0) clipped_ += outside;
  }
  return torch::max(torch::min(warped, hi), lo);
}

// ---------------------------------------------------------------------------
// CanonicalField

CanonicalFieldImpl::CanonicalFieldImpl(const CanonicalFieldOptions& opt, uint64_t seed) : opt_(opt) {
  torch::manual_seed(seed);
  atlas_hr_ = register_module("atlas_hr", PlaneAtlas(AtlasLayout::spatial3d(opt.hr_res, opt.channels, opt.scene), seed + 1));
  atlas_lr_ = register_module("atlas_lr", PlaneAtlas(AtlasLayout::spatial3d(opt.lr_res, opt.channels, opt.scene), seed + 2));
  geometry_ = register_module("geometry_head",
                              Mlp(opt.channels, opt.hidden, 1 + opt.appearance_dim + 2 * opt.latent_dim, 1, true));
  color_ = register_module("color_head", Mlp(opt.appearance_dim + 3, opt.hidden, 3, 1, true));
}

FieldSample CanonicalFieldImpl::forward(const torch::Tensor& canonical, const torch::Tensor& view_dirs) {
  auto features = atlas_hr_->forward(canonical) + atlas_lr_->forward(canonical);
  auto raw = geometry_->forward(features);
  const int64_t cf = opt_.appearance_dim;
  const int64_t cl = opt_.latent_dim;
  FieldSample s;
  s.sigma = F::softplus(raw.select(1, 0));
  auto appearance = raw.slice(1, 1, 1 + cf);
  s.latent_mean = raw.slice(1, 1 + cf, 1 + cf + cl);
  s.latent_std = F::softplus(raw.slice(1, 1 + cf + cl, 1 + cf + 2 * cl));
  s.rgb = torch::sigmoid(color_->forward(torch::cat({appearance, view_dirs}, 1)));
  return s;
}

// ---------------------------------------------------------------------------
// SceneField

SceneFieldImpl::SceneFieldImpl(const SceneFieldOptions& opt, uint64_t seed) : opt_(opt) {
  flow_ = register_module("flow", FlowField(opt.flow, seed * 2 + 11));
  canonical_ = register_module("canonical", CanonicalField(opt.canonical, seed * 2 + 12));
}

FieldSample SceneFieldImpl::forward(const torch::Tensor& points, const torch::Tensor& times,
                                    const torch::Tensor& view_dirs) {
  auto norms = view_dirs.norm(2, 1, true);
  torch::Tensor dirs = view_dirs;
  int64_t bad = 0;
  {
    torch::NoGradGuard guard;
    bad = ((norms - 1.0).abs() > 1e-4).sum().item<int64_t>();
  }
  if (bad > 0) {
    nonunit_dirs_ += bad;
    dirs = view_dirs / norms.clamp_min(1e-12);
  }
  auto canonical = flow_->forward(points, times);
  return canonical_->forward(canonical, dirs);
}

ParamGroups SceneFieldImpl::param_groups() {
  ParamGroups g;
  g["flow"] = flow_->parameters();
  g["canonical_planes"] = canonical_->atlas_hr()->parameters();
  for (auto& p : canonical_->atlas_lr()->parameters()) g["canonical_planes"].push_back(p);
  g["canonical_nets"] = canonical_->geometry_head()->parameters();
  for (auto& p : canonical_->color_head()->parameters()) g["canonical_nets"].push_back(p);
  return g;
}

}  // namespace c4d
