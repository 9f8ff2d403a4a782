// Acceptance runner: one PASS/FAIL line per criterion.
//
//   c4d_acceptance [criterion numbers...]
//
// Work files (synthetic data, the shared reconstruction checkpoint, a JSON
// summary) go to $C4D_ACCEPT_DIR, or ./acceptance_work when unset.
#include <httplib.h>
#include <torch/torch.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "control4d/config.hpp"
#include "control4d/data.hpp"
#include "control4d/editor.hpp"
#include "control4d/errors.hpp"
#include "control4d/gan.hpp"
#include "control4d/image_io.hpp"
#include "control4d/renderer.hpp"
#include "control4d/rng.hpp"
#include "control4d/scene_field.hpp"
#include "control4d/training.hpp"

using namespace c4d;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  json values = json::object();
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

fs::path work_root() {
  const char* env = std::getenv("C4D_ACCEPT_DIR");
  fs::path p = env && *env ? fs::path(env) : fs::current_path() / "acceptance_work";
  fs::create_directories(p);
  return p;
}

std::array<AxisBounds, 3> unit_box() { return {AxisBounds{-1, 1}, AxisBounds{-1, 1}, AxisBounds{-1, 1}}; }

// ---------------------------------------------------------------------------
// 1. Renderer correctness

Outcome renderer_correctness() {
  Outcome o;
  const double sigma = 1.7, z0 = -0.4, z1 = 0.35;
  FieldFn slab = [=](const torch::Tensor& p, const torch::Tensor&, const torch::Tensor&) {
    auto z = p.select(1, 2);
    FieldSample s;
    s.sigma = torch::where((z >= z0) & (z <= z1), torch::full_like(z, sigma), torch::zeros_like(z));
    s.rgb = torch::zeros({p.size(0), 3}, p.options());
    s.latent_mean = torch::zeros({p.size(0), 2}, p.options());
    s.latent_std = torch::zeros({p.size(0), 2}, p.options());
    return s;
  };
  CameraModel cam;
  cam.fx = cam.fy = 10;
  cam.cx = cam.cy = 4;
  cam.width = cam.height = 9;
  cam.t = {0, 0, 3};
  RenderOptions opt;
  opt.samples_per_ray = 256;
  auto pkt = render_view(slab, cam, unit_box(), 0.0, opt, std::nullopt, torch::kDouble);
  const double expect = 1.0 - std::exp(-sigma * (z1 - z0));
  const double got = pkt.alpha[4][4].item<double>();
  const double slab_rel = std::abs(got - expect) / expect;

  const float l2 = std::log(2.0f);
  auto r = composite(torch::tensor({{l2, l2}}), torch::ones({1, 2}), torch::tensor({{{1.0f}, {0.0f}}}),
                     torch::tensor({{1.0f, 2.0f}}));
  const double hand = r.alpha[0].item<double>();

  o.values = {{"slab_alpha", got}, {"slab_closed_form", expect}, {"slab_rel_err", slab_rel}, {"two_sample_alpha", hand}};
  o.pass = slab_rel < 0.02 && std::abs(hand - 0.75) < 1e-6;
  o.detail = "slab rel err " + fmt("%.2e", slab_rel) + " (< 2%), two-sample alpha " + fmt("%.7f", hand);
  return o;
}

// ---------------------------------------------------------------------------
// 2. Differentiability

Outcome differentiability() {
  Outcome o;
  const double h = 1e-6;
  // (a) a rendered pixel as a function of the density samples along its ray.
  int probes_a = 0, bad_a = 0;
  double worst_a = 0;
  {
    const int s = 12;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(8);
    auto del = torch::rand({1, s}, gen, torch::kDouble) * 0.2 + 0.05;
    auto vals = torch::rand({1, s, 3}, gen, torch::kDouble);
    auto dep = torch::cumsum(del, 1);
    auto pixel = [&](const torch::Tensor& sig) {
      auto r = composite(sig, del, vals, dep);
      return r.payload[0][1] + (1.0 - r.alpha[0]);
    };
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
        ++probes_a;
        if (std::abs(an - fd) > 1e-10) {
          worst_a = std::max(worst_a, rel);
          if (rel >= 1e-3) ++bad_a;
        }
      }
    }
  }
  // (b) the warp (flow field) output with respect to (x, y, z, t).
  int probes_b = 0, bad_b = 0;
  double worst_b = 0;
  {
    SceneFieldOptions opt;
    opt.flow.spatial_res = 8;
    opt.flow.time_res = 4;
    opt.flow.channels = 4;
    opt.flow.pe_frequencies = 2;
    opt.flow.hidden = 16;
    opt.flow.scene = unit_box();
    opt.canonical.scene = unit_box();
    SceneField field(opt, 13);
    auto& flow = field->flow();
    flow->to(torch::kDouble);
    {
      torch::NoGradGuard g;
      auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
      for (auto& p : flow->parameters()) p.copy_(torch::randn(p.sizes(), gen, p.options()) * 0.2);
    }
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-0.8, 0.8), ut(0.05, 0.95);
    for (int trial = 0; trial < 30; ++trial) {
      std::array<double, 4> x{u(rng), u(rng), u(rng), ut(rng)};
      auto pt = torch::tensor({x[0], x[1], x[2]}, torch::kDouble).view({1, 3}).requires_grad_(true);
      auto tt = torch::tensor({x[3]}, torch::kDouble).requires_grad_(true);
      auto out = flow->forward(pt, tt);
      for (int oi = 0; oi < 3; ++oi) {
        auto grads = torch::autograd::grad({out[0][oi]}, {pt, tt}, {}, true);
        for (int d = 0; d < 4; ++d) {
          const double an = d < 3 ? grads[0][0][d].item<double>() : grads[1][0].item<double>();
          auto eval = [&](double delta) {
            auto xp = x;
            xp[d] += delta;
            torch::NoGradGuard g;
            auto p = torch::tensor({xp[0], xp[1], xp[2]}, torch::kDouble).view({1, 3});
            return flow->forward(p, torch::tensor({xp[3]}, torch::kDouble))[0][oi].item<double>();
          };
          const double fd = (eval(h) - eval(-h)) / (2 * h);
          const double rel = std::abs(an - fd) / std::max(1e-6, std::max(std::abs(an), std::abs(fd)));
          ++probes_b;
          worst_b = std::max(worst_b, rel);
          if (rel >= 1e-3) ++bad_b;
        }
      }
    }
  }
  o.values = {{"pixel_probes", probes_a}, {"pixel_bad", bad_a}, {"pixel_worst_rel", worst_a},
              {"warp_probes", probes_b},  {"warp_bad", bad_b},   {"warp_worst_rel", worst_b}};
  o.pass = probes_a >= 100 && probes_b >= 100 && bad_a == 0 && bad_b == 0;
  o.detail = "pixel/density " + std::to_string(probes_a) + " probes worst rel " + fmt("%.1e", worst_a) +
             ", warp " + std::to_string(probes_b) + " probes worst rel " + fmt("%.1e", worst_b);
  return o;
}

// ---------------------------------------------------------------------------
// 3. Latent reparameterization

Outcome latent_reparameterization() {
  Outcome o;
  const int n = 10000;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(31);
  auto ia = torch::randn({4, 8, 8}, gen, torch::kDouble);
  auto ib = torch::rand({4, 8, 8}, gen, torch::kDouble) * 0.9 + 0.1;
  bool ok = true;
  std::ostringstream detail;
  for (auto draw : {LatentDraw::kPerImage, LatentDraw::kPerPixel}) {
    auto sum = torch::zeros_like(ia), sq = torch::zeros_like(ia);
    for (int s = 0; s < n; ++s) {
      auto il = sample_latent_map(ia, ib, static_cast<uint64_t>(s), draw).to(torch::kDouble);
      sum += il;
      sq += il * il;
    }
    auto mean = sum / n;
    auto std = ((sq - n * mean * mean) / (n - 1)).clamp_min(0).sqrt();
    const double mean_z = ((mean - ia).abs() / (ib / std::sqrt(static_cast<double>(n)))).max().item<double>();
    const double std_rel = ((std - ib).abs() / ib).max().item<double>();
    const std::string name = draw == LatentDraw::kPerImage ? "per_image" : "per_pixel";
    o.values[name] = {{"max_mean_error_in_se", mean_z}, {"max_std_rel_error", std_rel}};
    ok = ok && mean_z <= 3.0 && std_rel <= 0.03;
    detail << name << ": mean err " << fmt("%.2f", mean_z) << " SE, std err " << fmt("%.2f", std_rel * 100) << "%; ";
  }
  bool bitwise = true;
  for (uint64_t s : {0ULL, 1ULL, 999ULL}) {
    bitwise = bitwise && torch::equal(sample_latent_map(ia, torch::zeros_like(ib), s), ia) &&
              torch::equal(sample_latent_map(ia, torch::zeros_like(ib), s, LatentDraw::kPerPixel), ia);
  }
  o.values["zero_std_bitwise"] = bitwise;
  o.pass = ok && bitwise;
  detail << "I_b = 0 bitwise " << (bitwise ? "yes" : "no");
  o.detail = detail.str();
  return o;
}

// ---------------------------------------------------------------------------
// 4. WGAN-GP closed forms

Outcome gradient_penalty_closed_forms() {
  Outcome o;
  auto linear = [](double scale) -> Critic {
    return [scale](const torch::Tensor& x) {
      const double n = static_cast<double>(x[0].numel());
      return scale * x.reshape({x.size(0), -1}).sum(1) / std::sqrt(n);
    };
  };
  Critic constant = [](const torch::Tensor& x) { return torch::full({x.size(0)}, 0.7, x.options()); };
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  auto real = torch::rand({3, 3, 8, 8}, gen), fake = torch::rand({3, 3, 8, 8}, gen);
  const double lambda = 10.0;
  const double unit = gradient_penalty(linear(1.0), real, fake, lambda, gen).item<double>();
  const double cst = gradient_penalty(constant, real, fake, lambda, gen).item<double>();
  const double dbl = gradient_penalty(linear(2.0), real, fake, lambda, gen).item<double>();
  const double tol = 1e-5 * lambda;
  o.values = {{"unit", unit}, {"constant", cst}, {"doubled", dbl}, {"lambda", lambda}};
  o.pass = std::abs(unit) < tol && std::abs(cst - lambda) < tol && std::abs(dbl - lambda) < tol;
  o.detail = "unit " + fmt("%.2e", unit) + ", constant " + fmt("%.6f", cst) + ", doubled " + fmt("%.6f", dbl) +
             " (lambda " + fmt("%.0f", lambda) + ")";
  return o;
}

// ---------------------------------------------------------------------------
// Shared reconstruction (5) and its downstream runs (6-9)

struct Recon {
  SyntheticSceneSpec spec;
  Dataset ds;
  RunConfig cfg;
  fs::path checkpoint;
  CameraModel heldout_cam;
  torch::Tensor heldout_rgb;   // [F,1,3,H,W]
  torch::Tensor heldout_mask;  // [F,1,H,W]
};

Recon prepare_recon_inputs() {
  Recon r;
  const auto root = work_root();
  r.spec = SyntheticSceneSpec::default_spec();
  SyntheticScene scene(r.spec);
  const auto data = root / "scene";
  const bool fresh = !fs::exists(data / "scene.json") ||
                     json::parse(std::ifstream(data / "scene.json")) != r.spec.to_json();
  if (fresh) {
    fs::remove_all(data);
    progress("writing synthetic scene to " + data.string());
    scene.write(data);
  }
  r.ds = load_dataset(data);
  // Held-out view halfway between the first two ring cameras.
  const double az = r.spec.ring.azimuth_offset_deg + 180.0 / r.spec.ring.count;
  r.heldout_cam = scene.ring_camera(az, r.spec.ring.width, r.spec.ring.height);
  std::vector<torch::Tensor> rgb, mask;
  for (int f = 0; f < r.spec.num_frames; ++f) {
    const auto v = scene.render(r.heldout_cam, r.ds.time_of(f));
    // Quantize like the on-disk frames.
    rgb.push_back(decode_png(encode_png(v.rgb)).unsqueeze(0));
    mask.push_back((v.alpha > 0.05).to(torch::kFloat).unsqueeze(0));
  }
  r.heldout_rgb = torch::stack(rgb);
  r.heldout_mask = torch::stack(mask);
  r.cfg = RunConfig{};
  r.cfg.seed = 0;
  r.checkpoint = root / "recon" / "checkpoint.c4d";
  return r;
}

double heldout_psnr(Trainer& t, const Recon& r) {
  std::vector<torch::Tensor> pred;
  for (int f = 0; f < r.ds.num_frames; ++f) pred.push_back(t.render_field(r.heldout_cam, r.ds.time_of(f)).rgb.unsqueeze(0));
  return evaluate_videos(torch::stack(pred), r.heldout_rgb, r.heldout_mask).psnr;
}

Recon& recon_state() {
  static Recon r = prepare_recon_inputs();
  return r;
}

Outcome reconstruction() {
  Outcome o;
  auto& r = recon_state();
  Trainer t(r.cfg, r.ds);
  const auto t0 = std::chrono::steady_clock::now();
  const int64_t total = r.cfg.reconstruct.iterations;
  for (int64_t it = 500; it <= total; it += 500) {
    t.pretrain_reconstruction(it);
    progress("reconstruction " + std::to_string(it) + "/" + std::to_string(total) + " after " +
             fmt("%.0f", seconds_since(t0)) + " s");
  }
  t.pretrain_reconstruction(total);
  const double wall = seconds_since(t0);
  fs::create_directories(r.checkpoint.parent_path());
  t.save(r.checkpoint);
  const double p = heldout_psnr(t, r);
  const bool cuda = torch::cuda::is_available();
  const double budget = cuda ? 30 * 60.0 : 3 * 3600.0;
  o.values = {{"heldout_psnr", p}, {"iterations", t.reconstruction_iteration()}, {"wall_s", wall}, {"budget_s", budget}};
  o.pass = p >= 30.0 && t.reconstruction_iteration() <= 3000 && wall <= budget;
  o.detail = "held-out PSNR " + fmt("%.2f", p) + " dB after " + std::to_string(t.reconstruction_iteration()) +
             " iterations in " + fmt("%.0f", wall) + " s (budget " + fmt("%.0f", budget) + " s)";
  return o;
}

const fs::path& recon_checkpoint() {
  auto& r = recon_state();
  if (!fs::exists(r.checkpoint)) {
    progress("no reconstruction checkpoint yet; training one");
    reconstruction();
  }
  return r.checkpoint;
}

// A colour restyle used as the toy edit.
SyntheticEditorConfig toy_style(double jitter) {
  SyntheticEditorConfig s;
  s.style = {0.55, 0.35, 0.10, 0.12, 0.30, 0.45, 0.10, 0.02, 0.10, 0.20, 0.30, -0.05};
  s.jitter_std = jitter;
  return s;
}

// Desk-scale editing: 16x16 renders upsampled 4x to the 64x64 frames.
RunConfig desk_edit_config(TrainMode mode, bool staged, const SyntheticEditorConfig& style, int64_t iterations) {
  auto cfg = recon_state().cfg;
  cfg.seed = 11;
  cfg.render.width = cfg.render.height = 16;
  cfg.edit.mode = mode;
  cfg.edit.staged = staged;
  cfg.edit.iterations = iterations;
  cfg.edit.du_period = 10;
  cfg.edit.log_every = 100;
  cfg.editor.kind = "synthetic";
  cfg.editor.synthetic = style;
  cfg.validate();
  return cfg;
}

struct EditRun {
  json metrics;
  std::vector<std::pair<std::string, std::pair<uint64_t, uint64_t>>> flow_sums, gan_sums;  // per stage
  size_t calls = 0;
  double wall = 0;
  // Field renders I_r at the edit render resolution, and at the native frame resolution.
  std::pair<double, double> psnr_before{0, 0}, psnr_after{0, 0};
};

const std::vector<std::string> kGanGroups{"generator", "discriminator", "global_encoder", "local_encoder"};

// Masked PSNR of I_r over every training view: first against the analytic
// scene rendered at the edit render resolution, then at the native resolution.
std::pair<double, double> render_psnr(Trainer& t) {
  const auto& ds = t.dataset();
  SyntheticScene scene(recon_state().spec);
  std::vector<torch::Tensor> pred, gt, mask;
  for (int f = 0; f < ds.num_frames; ++f) {
    std::vector<torch::Tensor> p, g, m;
    for (int c = 0; c < ds.num_cameras; ++c) {
      const auto cam = t.low_res_camera(c);
      p.push_back(t.render_field(cam, ds.time_of(f)).rgb);
      const auto v = scene.render(cam, ds.time_of(f));
      g.push_back(v.rgb.to(torch::kFloat));
      m.push_back((v.alpha > 0.05).to(torch::kFloat));
    }
    pred.push_back(torch::stack(p));
    gt.push_back(torch::stack(g));
    mask.push_back(torch::stack(m));
  }
  const double low = evaluate_videos(torch::stack(pred), torch::stack(gt), torch::stack(mask)).psnr;
  const double native = evaluate_videos(t.render_dataset(ds), load_images(ds), load_masks(ds)).psnr;
  return {low, native};
}

// Mirrors the edit command: load the reconstruction, reseed, run the stage plan.
EditRun run_edit(const RunConfig& cfg, const std::string& label, bool measure_renders = false) {
  EditRun out;
  auto& r = recon_state();
  Trainer t(cfg, r.ds);
  t.load(recon_checkpoint());
  t.reseed(cfg.seed);
  if (measure_renders) out.psnr_before = render_psnr(t);
  const auto t0 = std::chrono::steady_clock::now();
  t.begin_edit();
  const auto plan = t.default_plan();
  plan.validate(t.mode_groups());
  int64_t end = 0;
  for (const auto& stage : plan.stages) {
    const auto f0 = t.checksum({"flow"}), g0 = t.checksum(kGanGroups);
    end += stage.iterations;
    while (t.edit_iteration() < end) {
      t.edit_step(stage);
      if (t.edit_iteration() % 250 == 0) {
        progress(label + " " + std::to_string(t.edit_iteration()) + "/" + std::to_string(plan.total_iterations()) +
                 " after " + fmt("%.0f", seconds_since(t0)) + " s");
      }
    }
    out.flow_sums.push_back({to_string(stage.name), {f0, t.checksum({"flow"})}});
    out.gan_sums.push_back({to_string(stage.name), {g0, t.checksum(kGanGroups)}});
  }
  out.wall = seconds_since(t0);
  out.metrics = t.edit_metrics();
  out.calls = t.state().calls.size();
  if (measure_renders) out.psnr_after = render_psnr(t);
  return out;
}

std::optional<EditRun> g_control_staged;

const EditRun& control_staged_run() {
  if (!g_control_staged) {
    g_control_staged = run_edit(desk_edit_config(TrainMode::kControl4D, true, toy_style(0.1), 2000), "control4d");
  }
  return *g_control_staged;
}

// ---------------------------------------------------------------------------
// 6. Central A/B

Outcome central_ab() {
  Outcome o;
  const auto& c = control_staged_run();
  const auto b = run_edit(desk_edit_config(TrainMode::kBaselineDU, true, toy_style(0.1), 2000), "baseline_du");
  const double fc = c.metrics["flicker"], fb = b.metrics["flicker"];
  const double sc = c.metrics["sharpness"], sb = b.metrics["sharpness"];
  const double reduction = fb > 0 ? (fb - fc) / fb : 0.0;
  o.values = {{"control4d", c.metrics},     {"baseline_du", b.metrics},  {"flicker_reduction", reduction},
              {"editor_calls", c.calls},    {"baseline_calls", b.calls}, {"control4d_wall_s", c.wall},
              {"baseline_wall_s", b.wall}};
  const bool flicker_ok = fc < fb && reduction >= 0.30;
  const bool sharp_ok = sc > sb;
  o.pass = flicker_ok && sharp_ok && c.calls == b.calls && c.wall + b.wall <= 2 * 3600.0;
  o.detail = "excess flicker " + fmt("%.5f", fc) + " vs " + fmt("%.5f", fb) + " (" + fmt("%.1f", reduction * 100) +
             "% lower, target 30%), sharpness " + fmt("%.5f", sc) + " vs " + fmt("%.5f", sb) + ", editor calls " +
             std::to_string(c.calls) + "/" + std::to_string(b.calls) + ", " + fmt("%.0f", c.wall + b.wall) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 7. Multi-level ablation

Outcome multi_level_ablation() {
  Outcome o;
  auto& r = recon_state();
  const auto cfg = desk_edit_config(TrainMode::kControl4D, true, toy_style(0.0), 2000);
  Trainer t(cfg, r.ds);
  t.load(recon_checkpoint());
  // Four fixed (render, edit) pairs of the toy edit.
  const std::vector<std::pair<int, int>> picks{{0, 0}, {16, 1}, {33, 2}, {49, 3}};
  std::vector<torch::Tensor> rgb, latent, edited;
  {
    torch::NoGradGuard guard;
    for (size_t i = 0; i < picks.size(); ++i) {
      const auto [f, c] = picks[i];
      auto pkt = t.render_field(t.low_res_camera(c), r.ds.time_of(f));
      rgb.push_back(pkt.rgb);
      latent.push_back(sample_latent_map(pkt, 100 + i));
      EditRequest req;
      req.original = t.original(f, c);
      req.render = req.original;
      req.frame_id = f;
      req.camera_id = c;
      edited.push_back(synthetic_edit(req, cfg.editor.synthetic).image);
    }
  }
  GanPairSet set{torch::stack(rgb), torch::stack(latent), torch::stack(edited)};
  PerceptualExtractor ex(perceptual_cache_dir());
  const int64_t steps = 2000;
  const double lr_g = 5e-4, lr_d = 2e-4;
  LevelSchedule full, single;
  single.probs = {1.0, 0.0, 0.0};
  const auto t0 = std::chrono::steady_clock::now();
  Gan gan_full(cfg.gan_options(), 21), gan_single(cfg.gan_options(), 21);
  const auto rf = train_gan_on_pairs(gan_full, ex, set, full, steps, cfg.gan, lr_g, lr_d, 5);
  progress("three-level run done after " + fmt("%.0f", seconds_since(t0)) + " s");
  const auto rs = train_gan_on_pairs(gan_single, ex, set, single, steps, cfg.gan, lr_g, lr_d, 5);
  const double ratio = rs.level3_l1 / std::max(rf.level3_l1, 1e-12);
  o.values = {{"full_l1", rf.level3_l1}, {"single_l1", rs.level3_l1},   {"ratio", ratio},
              {"single_diverged", rs.diverged}, {"full_diverged", rf.diverged}, {"steps", steps},
              {"wall_s", seconds_since(t0)}};
  o.pass = !rf.diverged && rf.level3_l1 < 0.05 && (rs.diverged || ratio >= 2.0);
  o.detail = "level-3 L1 full " + fmt("%.4f", rf.level3_l1) + " (< 0.05), level-1 only " +
             (rs.diverged ? std::string("diverged") : fmt("%.4f", rs.level3_l1)) + " (ratio " + fmt("%.2f", ratio) +
             ", need >= 2) after " + std::to_string(steps) + " steps";
  return o;
}

// ---------------------------------------------------------------------------
// 8. Staged training contracts

Outcome staged_contracts() {
  Outcome o;
  const auto& c = control_staged_run();
  const auto j = run_edit(desk_edit_config(TrainMode::kControl4D, false, toy_style(0.1), 2000), "joint-only");
  const auto& flow0 = c.flow_sums.at(0);
  const auto& gan1 = c.gan_sums.at(1);
  const bool flow_frozen = flow0.first == "canonical_edit" && flow0.second.first == flow0.second.second;
  const bool gan_frozen = gan1.first == "flow_train" && gan1.second.first == gan1.second.second;
  const bool flow_moved = c.flow_sums.at(1).second.first != c.flow_sums.at(1).second.second;
  const double fs_ = c.metrics["flicker"], fj = j.metrics["flicker"];
  o.values = {{"flow_frozen_in_canonical_edit", flow_frozen},
              {"gan_frozen_in_flow_train", gan_frozen},
              {"flow_trained_in_flow_train", flow_moved},
              {"staged", c.metrics},
              {"joint_only", j.metrics}};
  o.pass = flow_frozen && gan_frozen && fs_ <= fj;
  o.detail = std::string("flow frozen in canonical_edit ") + (flow_frozen ? "yes" : "no") +
             ", GAN frozen in flow_train " + (gan_frozen ? "yes" : "no") + ", excess flicker staged " +
             fmt("%.5f", fs_) + " vs joint-only " + fmt("%.5f", fj);
  return o;
}

// ---------------------------------------------------------------------------
// 9. Identity-editor fixed point

Outcome identity_fixed_point() {
  Outcome o;
  SyntheticEditorConfig identity;
  const auto cfg = desk_edit_config(TrainMode::kControl4D, true, identity, 1000);
  const auto run = run_edit(cfg, "identity", true);
  const double d = run.psnr_after.first - run.psnr_before.first;
  const double d_native = run.psnr_after.second - run.psnr_before.second;
  o.values = {{"render_psnr_before", run.psnr_before.first}, {"render_psnr_after", run.psnr_after.first},
              {"delta", d},
              {"native_psnr_before", run.psnr_before.second}, {"native_psnr_after", run.psnr_after.second},
              {"native_delta", d_native},
              {"output_metrics", run.metrics}};
  o.pass = std::abs(d) <= 1.0;
  o.detail = "I_r PSNR at " + std::to_string(cfg.render.width) + "x" + std::to_string(cfg.render.height) + " " +
             fmt("%.2f", run.psnr_before.first) + " -> " + fmt("%.2f", run.psnr_after.first) + " dB (delta " +
             fmt("%+.2f", d) + ") after 1000 steps; native-resolution field renders " +
             fmt("%.2f", run.psnr_before.second) + " -> " + fmt("%.2f", run.psnr_after.second) + " dB";
  return o;
}

// ---------------------------------------------------------------------------
// 10. Plumbing

RunConfig tiny_run_config() {
  RunConfig c;
  c.seed = 3;
  auto& fl = c.field.flow;
  fl.spatial_res = 8;
  fl.time_res = 4;
  fl.channels = 4;
  fl.pe_frequencies = 2;
  fl.hidden = 16;
  auto& cn = c.field.canonical;
  cn.hr_res = 16;
  cn.lr_res = 8;
  cn.channels = 4;
  cn.appearance_dim = 4;
  cn.latent_dim = 3;
  cn.hidden = 16;
  c.render.width = c.render.height = 8;
  c.render.samples_per_ray = 12;
  c.gan.options.upsample = 2;
  c.gan.options.base_channels = 8;
  c.gan.options.global_dim = 8;
  c.gan.options.local_channels = 4;
  c.gan.options.disc_channels = 8;
  c.reconstruct.rays_per_batch = 128;
  c.reconstruct.samples_per_ray = 12;
  c.edit.iterations = 6;
  c.edit.du_period = 2;
  c.editor.synthetic.jitter_std = 0.05;
  return c;
}

class EchoServer {
 public:
  explicit EchoServer(int status) {
    server_.Post("/edit", [this, status](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      if (status != 200) {
        res.status = status;
        return;
      }
      auto j = json::parse(req.body);
      res.set_content(json{{"edited_png_b64", j["render_png_b64"]}, {"editor_id", "echo"}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~EchoServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::atomic<int> hits{0};

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

Outcome plumbing() {
  Outcome o;
  std::vector<std::string> failures;
  const auto root = work_root() / "plumbing";
  fs::remove_all(root);

  auto spec = SyntheticSceneSpec::default_spec();
  spec.ring.count = 2;
  spec.ring.width = spec.ring.height = 12;
  spec.ring.focal = 15.0;
  spec.num_frames = 4;
  const auto base = root / "base";
  auto ds = SyntheticScene(spec).write(base);

  // Checkpoint round trip.
  {
    const auto cfg = tiny_run_config();
    Trainer a(cfg, ds);
    a.pretrain_reconstruction(5);
    a.run_stages(a.default_plan());
    a.save(root / "tiny.c4d");
    Trainer b(cfg, ds);
    b.load(root / "tiny.c4d");
    auto cam = a.low_res_camera(1);
    auto pa = a.render_field(cam, 0.37), pb = b.render_field(cam, 0.37);
    const bool same = torch::equal(pa.rgb, pb.rgb) && torch::equal(pa.latent_mean, pb.latent_mean) &&
                      torch::equal(pa.latent_std, pb.latent_std) && torch::equal(a.render_output(2, 1), b.render_output(2, 1));
    if (!same) failures.push_back("checkpoint round trip is not bitwise");
    auto other = cfg;
    other.field.canonical.hr_res = 32;
    Trainer c(other, ds);
    try {
      c.load(root / "tiny.c4d");
      failures.push_back("mismatched checkpoint loaded");
    } catch (const SchemaError&) {
    }
  }

  // Remote editor: echo server and failure paths.
  {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
    EditRequest req;
    req.original = torch::rand({3, 12, 16}, gen);
    req.render = torch::rand({3, 12, 16}, gen);
    req.prompt = "make it bronze";
    req.noise_level = 0.4;
    {
      EchoServer echo(200);
      auto out = remote_edit(req, {echo.url(), 5.0, 3, 0.01});
      if ((out.image - req.render).abs().max().item<double>() > 1.0 / 255 + 1e-6) failures.push_back("echo mismatch");
    }
    {
      EchoServer broken(500);
      try {
        remote_edit(req, {broken.url(), 5.0, 3, 0.01});
        failures.push_back("HTTP 500 accepted");
      } catch (const TransportError& e) {
        if (e.exit_code() != ExitCode::kTransport || broken.hits.load() != 3) {
          failures.push_back("HTTP 500 path: wrong exit code or attempt count");
        }
      }
    }
    try {
      decode_edit_response("not json", req);
      failures.push_back("malformed response accepted");
    } catch (const TransportError&) {
    }
    try {
      remote_edit(req, {"http://127.0.0.1:9", 1.0, 2, 0.0});
      failures.push_back("unreachable endpoint accepted");
    } catch (const TransportError&) {
    }
  }

  // Dataset loader malformations.
  {
    try {
      if (load_dataset(base).records.size() != 8) failures.push_back("well-formed tree miscounted");
    } catch (const std::exception& e) {
      failures.push_back(std::string("well-formed tree rejected: ") + e.what());
    }
    int n = 0;
    auto variant = [&](const std::string& name, const std::function<void(const fs::path&)>& damage, size_t min_violations,
                       const std::string& needle) {
      const auto dir = root / ("bad_" + std::to_string(n++));
      fs::copy(base, dir, fs::copy_options::recursive);
      damage(dir);
      try {
        load_dataset(dir);
        failures.push_back("loader accepted: " + name);
      } catch (const DatasetError& e) {
        if (e.violations().size() < min_violations) failures.push_back("too few violations for: " + name);
        if (std::string(e.what()).find(needle) == std::string::npos) failures.push_back("message lacks '" + needle + "': " + name);
      }
    };
    auto rewrite_cams = [](const fs::path& dir, const std::function<void(json&)>& edit) {
      json j = json::parse(std::ifstream(dir / "cams.json"));
      edit(j);
      std::ofstream(dir / "cams.json") << j.dump();
    };
    variant("missing cams.json", [](const fs::path& d) { fs::remove(d / "cams.json"); }, 1, "cams.json");
    variant("malformed cams.json", [](const fs::path& d) { std::ofstream(d / "cams.json") << "[{\"fx\": "; }, 1,
            "cams.json");
    variant("cams.json not an array", [](const fs::path& d) { std::ofstream(d / "cams.json") << "{}"; }, 1, "cams.json");
    variant("reflection rotation",
            [&](const fs::path& d) { rewrite_cams(d, [](json& j) { j[1]["R"] = {1, 0, 0, 0, 1, 0, 0, 0, -1}; }); }, 1,
            "cams.json[1]");
    variant("non-positive focal", [&](const fs::path& d) { rewrite_cams(d, [](json& j) { j[0]["fx"] = 0.0; }); }, 1,
            "cams.json[0]");
    variant("missing camera field", [&](const fs::path& d) { rewrite_cams(d, [](json& j) { j[0].erase("width"); }); },
            1, "width");
    variant("missing frame", [](const fs::path& d) { fs::remove(d / "frames" / "1" / frame_filename(2)); }, 1,
            frame_filename(2));
    variant("wrong frame size",
            [](const fs::path& d) { write_png(d / "frames" / "0" / frame_filename(1), torch::zeros({3, 5, 5})); }, 1,
            "size");
    variant("corrupt png", [](const fs::path& d) { std::ofstream(d / "frames" / "1" / frame_filename(0)) << "nope"; }, 1,
            frame_filename(0));
    variant("extra frame",
            [](const fs::path& d) {
              fs::copy_file(d / "frames" / "1" / frame_filename(0), d / "frames" / "1" / frame_filename(7));
            },
            1, frame_filename(7));
    variant("missing mask", [](const fs::path& d) { fs::remove(d / "masks" / "0" / frame_filename(3)); }, 1, "mask");
    variant("several faults at once",
            [&](const fs::path& d) {
              rewrite_cams(d, [](json& j) { j[0]["fy"] = -1.0; });
              fs::remove(d / "frames" / "1" / frame_filename(1));
              fs::remove(d / "masks" / "1" / frame_filename(2));
            },
            3, "violation");
    o.values["loader_variants"] = n;
  }
  o.values["failures"] = failures;
  o.pass = failures.empty();
  if (o.pass) {
    o.detail = "checkpoint bitwise, echo/500/malformed/unreachable editor paths, " +
               std::to_string(o.values["loader_variants"].get<int>()) + " loader malformations rejected";
  } else {
    for (const auto& f : failures) o.detail += (o.detail.empty() ? "" : "; ") + f;
  }
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
  double time_limit_s;  // 0: none beyond the criterion's own check
};

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(std::max(1u, std::thread::hardware_concurrency()));
  const std::vector<Criterion> all{
      {1, "renderer correctness", renderer_correctness, 60},
      {2, "differentiability", differentiability, 300},
      {3, "latent reparameterization", latent_reparameterization, 120},
      {4, "WGAN-GP closed forms", gradient_penalty_closed_forms, 0},
      {5, "reconstruction pretraining", reconstruction, 0},
      {6, "control4d vs baseline_du A/B", central_ab, 0},
      {7, "multi-level ablation", multi_level_ablation, 0},
      {8, "staged training contracts", staged_contracts, 0},
      {9, "identity-editor fixed point", identity_fixed_point, 0},
      {10, "plumbing", plumbing, 0},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  json summary = json::object();
  const auto summary_path = work_root() / "acceptance.json";
  if (fs::exists(summary_path)) {
    try {
      summary = json::parse(std::ifstream(summary_path));
    } catch (const json::exception&) {
    }
  }
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    std::cerr << "criterion " << c.id << ": " << c.name << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = seconds_since(t0);
    if (c.time_limit_s > 0 && secs > c.time_limit_s) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", c.time_limit_s) + " s limit";
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
              << fmt("%.1f", secs) << " s]" << std::endl;
    summary[std::to_string(c.id)] = {{"name", c.name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", secs},
                                     {"values", o.values}};
    std::ofstream(summary_path) << summary.dump(2) << "\n";
  }
  return failed == 0 ? 0 : 1;
}
