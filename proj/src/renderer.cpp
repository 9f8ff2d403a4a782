#include "control4d/renderer.hpp"

#include <cmath>
#include <string>

#include "control4d/errors.hpp"

namespace c4d {

// ---------------------------------------------------------------------------
// CameraModel

void CameraModel::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw ConfigError("camera: resolution must be positive");
  for (double v : R)
    if (!std::isfinite(v)) throw ConfigError("camera: non-finite rotation");
  for (double v : t)
    if (!std::isfinite(v)) throw ConfigError("camera: non-finite translation");
  // R R^T = I
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double d = 0.0;
      for (int k = 0; k < 3; ++k) d += R[3 * i + k] * R[3 * j + k];
      if (std::abs(d - (i == j ? 1.0 : 0.0)) > 1e-5) throw ConfigError("camera: rotation is not orthonormal");
    }
  }
  const double det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
                     R[2] * (R[3] * R[7] - R[4] * R[6]);
  if (std::abs(det - 1.0) > 1e-5) throw ConfigError("camera: rotation determinant is " + std::to_string(det) + ", expected +1");
}

std::array<double, 3> CameraModel::center() const {
  std::array<double, 3> c{};
  for (int i = 0; i < 3; ++i) c[i] = -(R[i] * t[0] + R[3 + i] * t[1] + R[6 + i] * t[2]);
  return c;
}

CameraModel CameraModel::resized(int new_width, int new_height) const {
  CameraModel c = *this;
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  c.fx = fx * sx;
  c.fy = fy * sy;
  // keep pixel-center alignment: u' + 0.5 = (u + 0.5) * s
  c.cx = (cx + 0.5) * sx - 0.5;
  c.cy = (cy + 0.5) * sy - 0.5;
  c.width = new_width;
  c.height = new_height;
  return c;
}

CameraModel CameraModel::look_at(const std::array<double, 3>& eye, const std::array<double, 3>& target,
                                 const std::array<double, 3>& up, double focal, int width, int height) {
  auto sub = [](auto a, auto b) { return std::array<double, 3>{a[0] - b[0], a[1] - b[1], a[2] - b[2]}; };
  auto cross = [](auto a, auto b) {
    return std::array<double, 3>{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
  };
  auto normalize = [](std::array<double, 3> a) {
    const double n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    if (!(n > 0.0)) throw ConfigError("camera: degenerate look_at");
    return std::array<double, 3>{a[0] / n, a[1] / n, a[2] / n};
  };
  const auto forward = normalize(sub(target, eye));
  const auto right = normalize(cross(forward, up));
  const auto down = cross(forward, right);
  CameraModel c;
  c.R = {right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1], forward[2]};
  for (int i = 0; i < 3; ++i) c.t[i] = -(c.R[3 * i] * eye[0] + c.R[3 * i + 1] * eye[1] + c.R[3 * i + 2] * eye[2]);
  c.fx = c.fy = focal;
  c.width = width;
  c.height = height;
  c.cx = (width - 1) / 2.0;
  c.cy = (height - 1) / 2.0;
  return c;
}

// ---------------------------------------------------------------------------
// Rays

RayBatch RayBatch::select(const torch::Tensor& index) const {
  RayBatch r;
  r.origins = origins.index_select(0, index);
  r.directions = directions.index_select(0, index);
  r.near = near.index_select(0, index);
  r.far = far.index_select(0, index);
  r.pixels = pixels.index_select(0, index);
  r.z_scale = z_scale.index_select(0, index);
  r.hit = hit.index_select(0, index);
  r.width = width;
  r.height = height;
  return r;
}

RayBatch generate_rays(const CameraModel& cam, const std::array<AxisBounds, 3>& bounds, torch::Dtype dtype) {
  cam.validate();
  const auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto v = torch::arange(cam.height, opts).view({-1, 1}).expand({cam.height, cam.width}).reshape({-1});
  auto u = torch::arange(cam.width, opts).view({1, -1}).expand({cam.height, cam.width}).reshape({-1});
  auto d_cam = torch::stack({(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, torch::ones_like(u)}, 1);
  d_cam = d_cam / d_cam.norm(2, 1, true);
  auto rot = torch::tensor(std::vector<double>(cam.R.begin(), cam.R.end()), opts).view({3, 3});
  // world = R^T cam  ->  row vectors: d_world = d_cam R
  auto dirs = torch::matmul(d_cam, rot);
  const auto c = cam.center();
  auto origins = torch::tensor(std::vector<double>{c[0], c[1], c[2]}, opts).view({1, 3}).expand({u.size(0), 3});

  // slab intersection with the scene box
  auto lo = torch::tensor(std::vector<double>{bounds[0].lo, bounds[1].lo, bounds[2].lo}, opts);
  auto hi = torch::tensor(std::vector<double>{bounds[0].hi, bounds[1].hi, bounds[2].hi}, opts);
  auto safe = torch::where(dirs.abs() < 1e-12, torch::full_like(dirs, 1e-12), dirs);
  auto inv = 1.0 / safe;
  auto t0 = (lo - origins) * inv;
  auto t1 = (hi - origins) * inv;
  auto tmin = std::get<0>(torch::max(torch::min(t0, t1), 1)).clamp_min(0.0);
  auto tmax = std::get<0>(torch::min(torch::max(t0, t1), 1));
  auto hit = tmax > tmin + 1e-6;

  RayBatch r;
  r.origins = origins.contiguous().to(dtype);
  r.directions = dirs.to(dtype);
  r.near = torch::where(hit, tmin, torch::zeros_like(tmin)).to(dtype);
  r.far = torch::where(hit, tmax, torch::ones_like(tmax)).to(dtype);
  r.pixels = (v * cam.width + u).to(torch::kLong);
  r.z_scale = d_cam.select(1, 2).to(dtype);
  r.hit = hit;
  r.width = cam.width;
  r.height = cam.height;
  return r;
}

// ---------------------------------------------------------------------------
// Compositing

CompositeResult composite(const torch::Tensor& sigmas, const torch::Tensor& deltas, const torch::Tensor& values,
                          const torch::Tensor& depths, double eps) {
  {
    torch::NoGradGuard guard;
    if ((sigmas < 0).any().item<bool>()) throw DomainError("composite: negative density");
  }
  auto tau = sigmas * deltas;
  auto alpha_i = 1.0 - torch::exp(-tau);
  auto transmittance = torch::exp(-(torch::cumsum(tau, 1) - tau));
  CompositeResult out;
  out.weights = transmittance * alpha_i;
  out.payload = (out.weights.unsqueeze(-1) * values).sum(1);
  out.alpha = out.weights.sum(1);
  out.depth = (out.weights * depths).sum(1) / out.alpha.clamp_min(eps);
  return out;
}

namespace {

RayRender render_chunk(const FieldFn& field, const RayBatch& rays, const torch::Tensor& times,
                       const RenderOptions& opt, std::optional<at::Generator>& gen) {
  const int64_t n = rays.size();
  const int64_t s = opt.samples_per_ray;
  const auto dtype = rays.origins.scalar_type();
  auto step = ((rays.far - rays.near) / static_cast<double>(s)).unsqueeze(1);  // [N, 1]
  auto index = torch::arange(s, rays.origins.options()).unsqueeze(0);           // [1, S]
  torch::Tensor offsets;
  if (opt.stratified) {
    offsets = gen ? torch::rand({n, s}, *gen, rays.origins.options()) : torch::rand({n, s}, rays.origins.options());
  } else {
    offsets = torch::full({n, s}, 0.5, rays.origins.options());
  }
  auto dist = rays.near.unsqueeze(1) + (index + offsets) * step;  // [N, S]
  torch::Tensor deltas;
  if (opt.stratified) {
    auto next = torch::cat({dist.slice(1, 1), rays.far.unsqueeze(1)}, 1);
    deltas = (next - dist).clamp_min(1e-8);
  } else {
    deltas = step.expand({n, s});
  }
  auto points = rays.origins.unsqueeze(1) + dist.unsqueeze(-1) * rays.directions.unsqueeze(1);
  auto dirs = rays.directions.unsqueeze(1).expand({n, s, 3}).reshape({-1, 3});
  auto t = times.to(dtype).view({n, 1}).expand({n, s}).reshape({-1});
  FieldSample fs = field(points.reshape({-1, 3}), t, dirs);

  auto hit = rays.hit.to(dtype).unsqueeze(1);
  auto sigma = fs.sigma.view({n, s}) * hit;
  const int64_t cl = fs.latent_mean.size(1);
  auto values = torch::cat({fs.rgb, fs.latent_mean, fs.latent_std}, 1).view({n, s, 3 + 2 * cl});
  auto depths = dist * rays.z_scale.unsqueeze(1);
  auto comp = composite(sigma, deltas, values, depths);

  auto bg = torch::tensor(std::vector<double>(opt.background.begin(), opt.background.end()), rays.origins.options());
  RayRender out;
  out.rgb = comp.payload.slice(1, 0, 3) + (1.0 - comp.alpha).unsqueeze(1) * bg.unsqueeze(0);
  out.latent_mean = comp.payload.slice(1, 3, 3 + cl);
  out.latent_std = comp.payload.slice(1, 3 + cl, 3 + 2 * cl);
  out.depth = comp.depth;
  out.alpha = comp.alpha;
  return out;
}

}  // namespace

RayRender render_rays(const FieldFn& field, const RayBatch& rays, const torch::Tensor& times,
                      const RenderOptions& opt, std::optional<at::Generator> gen) {
  if (opt.samples_per_ray < 1) throw ConfigError("render: samples_per_ray must be >= 1");
  const int64_t n = rays.size();
  if (torch::GradMode::is_enabled() || n <= opt.chunk) return render_chunk(field, rays, times, opt, gen);
  std::vector<RayRender> parts;
  for (int64_t start = 0; start < n; start += opt.chunk) {
    const int64_t end = std::min(n, start + opt.chunk);
    auto idx = torch::arange(start, end, torch::kLong);
    parts.push_back(render_chunk(field, rays.select(idx), times.slice(0, start, end), opt, gen));
  }
  auto cat = [&](auto member) {
    std::vector<torch::Tensor> ts;
    for (auto& p : parts) ts.push_back(p.*member);
    return torch::cat(ts, 0);
  };
  RayRender out;
  out.rgb = cat(&RayRender::rgb);
  out.latent_mean = cat(&RayRender::latent_mean);
  out.latent_std = cat(&RayRender::latent_std);
  out.depth = cat(&RayRender::depth);
  out.alpha = cat(&RayRender::alpha);
  return out;
}

RenderPacket render_view(const FieldFn& field, const CameraModel& cam, const std::array<AxisBounds, 3>& bounds,
                         double t, const RenderOptions& opt, std::optional<at::Generator> gen, torch::Dtype dtype) {
  auto rays = generate_rays(cam, bounds, dtype);
  auto times = torch::full({rays.size()}, t, torch::TensorOptions().dtype(dtype));
  auto rr = render_rays(field, rays, times, opt, std::move(gen));
  const int64_t h = cam.height, w = cam.width;
  RenderPacket pkt;
  pkt.rgb = rr.rgb.t().reshape({3, h, w});
  pkt.latent_mean = rr.latent_mean.t().reshape({-1, h, w});
  pkt.latent_std = rr.latent_std.t().reshape({-1, h, w});
  pkt.depth = rr.depth.view({h, w});
  pkt.alpha = rr.alpha.view({h, w});
  pkt.time = t;
  return pkt;
}

torch::Tensor sample_latent_map(const torch::Tensor& latent_mean, const torch::Tensor& latent_std, uint64_t seed,
                                LatentDraw draw) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto opts = torch::TensorOptions().dtype(torch::kDouble);
  torch::Tensor t = draw == LatentDraw::kPerImage ? torch::randn({1}, gen, opts)
                                                  : torch::randn(latent_mean.sizes(), gen, opts);
  return latent_mean + t.to(latent_mean.scalar_type()) * latent_std;
}

}  // namespace c4d
