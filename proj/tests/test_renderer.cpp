#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "control4d/errors.hpp"
#include "control4d/renderer.hpp"

using namespace c4d;
namespace F = torch::nn::functional;

namespace {

std::array<AxisBounds, 3> unit_box() { return {AxisBounds{-1, 1}, AxisBounds{-1, 1}, AxisBounds{-1, 1}}; }

// Constant density inside z0 <= z <= z1, nothing elsewhere; colour encodes nothing.
FieldFn slab(double sigma, double z0, double z1, int latent = 2) {
  return [=](const torch::Tensor& p, const torch::Tensor&, const torch::Tensor&) {
    auto z = p.select(1, 2);
    FieldSample s;
    s.sigma = torch::where((z >= z0) & (z <= z1), torch::full_like(z, sigma), torch::zeros_like(z));
    s.rgb = torch::zeros({p.size(0), 3}, p.options());
    s.latent_mean = torch::zeros({p.size(0), latent}, p.options());
    s.latent_std = torch::zeros({p.size(0), latent}, p.options());
    return s;
  };
}

CameraModel axis_camera(int w = 8, int h = 8) {
  // At z = -3 looking down +z.
  CameraModel c;
  c.fx = c.fy = 10;
  c.cx = (w - 1) / 2.0;
  c.cy = (h - 1) / 2.0;
  c.width = w;
  c.height = h;
  c.t = {0, 0, 3};
  return c;
}

// A smooth blob, with colour that varies in space.
FieldSample smooth_field(const torch::Tensor& p, const torch::Tensor& t, const torch::Tensor&) {
  auto r2 = (p - torch::tensor({0.1, -0.1, 0.0}, p.options())).pow(2).sum(1);
  FieldSample s;
  s.sigma = 4.0 * torch::exp(-r2 / 0.2);
  s.rgb = torch::sigmoid(torch::stack({p.select(1, 0) * 3, p.select(1, 1) * 3, p.select(1, 2) + 0 * t}, 1));
  s.latent_mean = torch::stack({p.select(1, 0), p.select(1, 1)}, 1);
  s.latent_std = torch::stack({r2, 0.5 * r2}, 1);
  return s;
}

}  // namespace

TEST(Camera, ValidateRejectsBadModels) {
  CameraModel c = axis_camera();
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.fx = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.width = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.R = {1, 0, 0, 0, 1, 0, 0, 0, -1};  // det -1
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.R = {1, 0.1, 0, 0, 1, 0, 0, 0, 1};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Rays, PrincipalPointLooksDownOpticalAxis) {
  auto c = axis_camera(9, 9);  // cx = cy = 4 is a pixel centre
  auto rays = generate_rays(c, unit_box(), torch::kDouble);
  auto d = rays.directions[4 * 9 + 4];
  EXPECT_NEAR(d[0].item<double>(), 0, 1e-12);
  EXPECT_NEAR(d[1].item<double>(), 0, 1e-12);
  EXPECT_NEAR(d[2].item<double>(), 1, 1e-12);
}

TEST(Rays, IdentityExtrinsicsPutOriginsAtWorldOrigin) {
  auto c = axis_camera();
  c.t = {0, 0, 0};
  auto rays = generate_rays(c, unit_box());
  EXPECT_TRUE(torch::equal(rays.origins, torch::zeros_like(rays.origins)));
}

TEST(Rays, DirectionsMatchPinholeFormula) {
  CameraModel c;
  c.fx = 30;
  c.fy = 25;
  c.cx = 7.5;
  c.cy = 5.0;
  c.width = 16;
  c.height = 12;
  auto rays = generate_rays(c, unit_box(), torch::kDouble);
  std::mt19937_64 rng(2);
  for (int k = 0; k < 20; ++k) {
    const int u = static_cast<int>(rng() % 16), v = static_cast<int>(rng() % 12);
    double x = (u - c.cx) / c.fx, y = (v - c.cy) / c.fy, z = 1.0;
    const double n = std::sqrt(x * x + y * y + z * z);
    auto d = rays.directions[v * 16 + u];
    EXPECT_NEAR(d[0].item<double>(), x / n, 1e-12);
    EXPECT_NEAR(d[1].item<double>(), y / n, 1e-12);
    EXPECT_NEAR(d[2].item<double>(), z / n, 1e-12);
    EXPECT_NEAR(rays.z_scale[v * 16 + u].item<double>(), 1.0 / n, 1e-12);
  }
  EXPECT_TRUE(torch::allclose(rays.directions.norm(2, 1), torch::ones({16 * 12}, torch::kDouble)));
}

TEST(Rays, DegenerateIntrinsicsRejected) {
  auto c = axis_camera();
  c.fy = -1;
  EXPECT_THROW(generate_rays(c, unit_box()), ConfigError);
}

TEST(Composite, EmptySpace) {
  auto sig = torch::zeros({3, 5});
  auto r = composite(sig, torch::full({3, 5}, 0.1), torch::rand({3, 5, 2}), torch::rand({3, 5}));
  EXPECT_TRUE(torch::equal(r.payload, torch::zeros({3, 2})));
  EXPECT_TRUE(torch::equal(r.alpha, torch::zeros({3})));
}

TEST(Composite, OpaqueFirstHit) {
  auto sig = torch::tensor({{50.0, 3.0, 3.0}}, torch::kDouble);
  auto vals = torch::tensor({{{0.3}, {0.9}, {0.1}}}, torch::kDouble);
  auto r = composite(sig, torch::ones({1, 3}, torch::kDouble), vals, torch::tensor({{1.0, 2.0, 3.0}}, torch::kDouble));
  EXPECT_NEAR(r.weights[0][0].item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(r.alpha[0].item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(r.payload[0][0].item<double>(), 0.3, 1e-12);
}

TEST(Composite, TwoSampleHandCase) {
  const double l2 = std::log(2.0);
  auto sig = torch::tensor({{l2, l2}}, torch::kDouble);
  auto vals = torch::tensor({{{1.0}, {0.0}}}, torch::kDouble);
  auto r = composite(sig, torch::ones({1, 2}, torch::kDouble), vals, torch::tensor({{1.0, 2.0}}, torch::kDouble));
  EXPECT_NEAR(r.alpha[0].item<double>(), 0.75, 1e-15);
  EXPECT_NEAR(r.payload[0][0].item<double>(), 0.5, 1e-15);
  EXPECT_NEAR(r.weights[0][1].item<double>(), 0.25, 1e-15);
  EXPECT_NEAR(r.depth[0].item<double>(), (0.5 * 1 + 0.25 * 2) / 0.75, 1e-12);
}

TEST(Composite, NegativeDensityRejected) {
  auto sig = torch::tensor({{0.1, -0.1}});
  EXPECT_THROW(composite(sig, torch::ones({1, 2}), torch::ones({1, 2, 1}), torch::ones({1, 2})), DomainError);
}

TEST(Composite, WeightsBoundedAndZeroSamplesInert) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  auto sig = torch::rand({64, 16}, gen, torch::kDouble) * 5;
  auto del = torch::rand({64, 16}, gen, torch::kDouble) + 0.01;
  auto vals = torch::rand({64, 16, 3}, gen, torch::kDouble);
  auto dep = torch::cumsum(del, 1);
  auto r = composite(sig, del, vals, dep);
  EXPECT_TRUE((r.weights >= 0).all().item<bool>());
  EXPECT_TRUE((r.alpha <= 1).all().item<bool>());
  // Insert a zero-density sample at position 7.
  auto ins = [](const torch::Tensor& t, const torch::Tensor& v) {
    return torch::cat({t.slice(1, 0, 7), v, t.slice(1, 7)}, 1);
  };
  auto r2 = composite(ins(sig, torch::zeros({64, 1}, torch::kDouble)), ins(del, torch::full({64, 1}, 0.3, torch::kDouble)),
                      ins(vals, torch::rand({64, 1, 3}, gen, torch::kDouble)), ins(dep, dep.slice(1, 6, 7)));
  EXPECT_TRUE(torch::allclose(r.payload, r2.payload, 1e-12, 1e-14));
  EXPECT_TRUE(torch::allclose(r.alpha, r2.alpha, 1e-12, 1e-14));
  EXPECT_TRUE(torch::allclose(r.depth, r2.depth, 1e-12, 1e-14));
}

TEST(Render, ZeroDensityShowsBackground) {
  RenderOptions opt;
  opt.samples_per_ray = 16;
  opt.background = {0.2, 0.4, 0.6};
  auto pkt = render_view(slab(0.0, 0, 0), axis_camera(), unit_box(), 0.3, opt);
  EXPECT_TRUE(torch::allclose(pkt.rgb[0], torch::full({8, 8}, 0.2f)));
  EXPECT_TRUE(torch::allclose(pkt.rgb[2], torch::full({8, 8}, 0.6f)));
  EXPECT_TRUE(torch::equal(pkt.alpha, torch::zeros({8, 8})));
}

TEST(Render, SlabMatchesClosedForm) {
  RenderOptions opt;
  opt.samples_per_ray = 256;
  const double sigma = 1.7, z0 = -0.4, z1 = 0.35;
  auto c = axis_camera(9, 9);
  auto pkt = render_view(slab(sigma, z0, z1), c, unit_box(), 0.0, opt, std::nullopt, torch::kDouble);
  const double expect = 1.0 - std::exp(-sigma * (z1 - z0));
  const double got = pkt.alpha[4][4].item<double>();
  EXPECT_LT(std::abs(got - expect) / expect, 0.02);
}

TEST(Render, DoublingSamplesConverges) {
  RenderOptions a, b;
  a.samples_per_ray = 64;
  b.samples_per_ray = 128;
  auto c = axis_camera(16, 16);
  c.fx = c.fy = 12;
  auto fa = render_view(smooth_field, c, unit_box(), 0.0, a, std::nullopt, torch::kDouble);
  auto fb = render_view(smooth_field, c, unit_box(), 0.0, b, std::nullopt, torch::kDouble);
  const double rms = (fa.rgb - fb.rgb).pow(2).mean().sqrt().item<double>();
  EXPECT_LT(rms, 0.01);
}

TEST(Render, TimeConstantFieldIgnoresTime) {
  RenderOptions opt;
  opt.samples_per_ray = 24;
  auto c = axis_camera(8, 8);
  auto a = render_view(smooth_field, c, unit_box(), 0.0, opt);
  auto b = render_view(smooth_field, c, unit_box(), 0.77, opt);
  EXPECT_TRUE(torch::equal(a.rgb, b.rgb));
  EXPECT_TRUE(torch::equal(a.latent_mean, b.latent_mean));
}

TEST(Render, PixelGradientWrtDensityMatchesFiniteDifferences) {
  // A hand-built ray of S samples: the rendered value is a function of the
  // density vector only.
  const int s = 12;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(8);
  auto del = torch::rand({1, s}, gen, torch::kDouble) * 0.2 + 0.05;
  auto vals = torch::rand({1, s, 3}, gen, torch::kDouble);
  auto dep = torch::cumsum(del, 1);
  auto bg = 1.0;
  auto pixel = [&](const torch::Tensor& sig) {
    auto r = composite(sig, del, vals, dep);
    return r.payload[0][1] + (1.0 - r.alpha[0]) * bg;
  };
  const double h = 1e-6;
  int probes = 0, bad = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto sig = (torch::rand({1, s}, gen, torch::kDouble) * 4).requires_grad_(true);
    auto g = torch::autograd::grad({pixel(sig)}, {sig})[0];
    for (int i = 0; i < s; ++i) {
      torch::NoGradGuard ng;
      auto sp = sig.detach().clone(), sm = sig.detach().clone();
      sp[0][i] += h;
      sm[0][i] -= h;
      const double fd = (pixel(sp).item<double>() - pixel(sm).item<double>()) / (2 * h);
      const double an = g[0][i].item<double>();
      const double rel = std::abs(an - fd) / std::max(1e-9, std::max(std::abs(an), std::abs(fd)));
      ++probes;
      if (rel >= 1e-3 && std::abs(an - fd) > 1e-10) ++bad;
    }
  }
  EXPECT_GE(probes, 100);
  EXPECT_EQ(bad, 0);
}

TEST(Render, ChunkedMatchesSingleShot) {
  RenderOptions big, small;
  big.samples_per_ray = small.samples_per_ray = 16;
  small.chunk = 7;
  torch::NoGradGuard g;
  auto c = axis_camera(8, 8);
  auto a = render_view(smooth_field, c, unit_box(), 0.0, big);
  auto b = render_view(smooth_field, c, unit_box(), 0.0, small);
  EXPECT_TRUE(torch::allclose(a.rgb, b.rgb));
}

TEST(LatentMap, ZeroStdReturnsMeanBitwise) {
  auto mean = torch::randn({4, 5, 6});
  auto out = sample_latent_map(mean, torch::zeros_like(mean), 99);
  EXPECT_TRUE(torch::equal(out, mean));
  auto out2 = sample_latent_map(mean, torch::zeros_like(mean), 99, LatentDraw::kPerPixel);
  EXPECT_TRUE(torch::equal(out2, mean));
}

TEST(LatentMap, SeededDrawIsReproducible) {
  auto mean = torch::randn({2, 3, 3});
  auto sd = torch::rand({2, 3, 3});
  EXPECT_TRUE(torch::equal(sample_latent_map(mean, sd, 5), sample_latent_map(mean, sd, 5)));
  EXPECT_FALSE(torch::equal(sample_latent_map(mean, sd, 5), sample_latent_map(mean, sd, 6)));
}
