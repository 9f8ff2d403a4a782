#include "control4d/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "control4d/errors.hpp"
#include "control4d/rng.hpp"

namespace c4d {

using nlohmann::json;
namespace F = torch::nn::functional;

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

const std::vector<std::string>& field_group_names() {
  static const std::vector<std::string> g{"flow", "canonical_planes", "canonical_nets"};
  return g;
}

const std::vector<std::string>& gan_group_names() {
  static const std::vector<std::string> g{"generator", "discriminator", "global_encoder", "local_encoder"};
  return g;
}

/// [N,3,H,W] -> [N,3,h,w]; antialiased when shrinking.
torch::Tensor resize(const torch::Tensor& x, int64_t h, int64_t w, bool nearest = false) {
  if (x.size(-2) == h && x.size(-1) == w) return x;
  if (nearest) return F::interpolate(x, F::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kNearest));
  const bool shrink = h < x.size(-2) || w < x.size(-1);
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false)
                               .antialias(shrink));
}

void check_finite(const std::map<std::string, double>& losses, const std::string& where) {
  for (const auto& [k, v] : losses) {
    if (!std::isfinite(v)) throw NumericalError(where + ": non-finite " + k + " loss");
  }
}

torch::optim::AdamOptions adam_options(const std::string& group, double lr) {
  auto o = torch::optim::AdamOptions(lr);
  // Critic and generator use the usual WGAN-GP moments.
  if (group == "generator" || group == "discriminator" || group == "global_encoder" || group == "local_encoder") {
    o.betas({0.5, 0.9});
  }
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage plan

const char* to_string(StageName s) {
  switch (s) {
    case StageName::kCanonicalEdit:
      return "canonical_edit";
    case StageName::kFlowTrain:
      return "flow_train";
    default:
      return "joint_finetune";
  }
}

void StagePlan::validate(const std::set<std::string>& groups) const {
  static const StageName order[3] = {StageName::kCanonicalEdit, StageName::kFlowTrain, StageName::kJointFinetune};
  if (stages.size() != 3) throw ConfigError("stage plan must list canonical_edit, flow_train, joint_finetune");
  for (size_t i = 0; i < 3; ++i) {
    const auto& s = stages[i];
    if (s.name != order[i]) {
      throw ConfigError(std::string("stage plan misordered: position ") + std::to_string(i) + " is " + to_string(s.name) +
                        ", expected " + to_string(order[i]));
    }
    if (s.iterations < 0) throw ConfigError(std::string("stage ") + to_string(s.name) + ": negative iterations");
    std::set<std::string> all;
    for (const auto& g : s.trainable) {
      if (s.frozen.count(g)) throw ConfigError(std::string("stage ") + to_string(s.name) + ": group " + g + " both trainable and frozen");
      all.insert(g);
    }
    all.insert(s.frozen.begin(), s.frozen.end());
    if (all != groups) throw ConfigError(std::string("stage ") + to_string(s.name) + ": groups do not cover the model");
  }
}

int64_t StagePlan::total_iterations() const {
  int64_t n = 0;
  for (const auto& s : stages) n += s.iterations;
  return n;
}

StagePlan StagePlan::three_stage(int64_t total, const std::array<double, 3>& fractions,
                                 const std::set<std::string>& groups) {
  const auto n1 = static_cast<int64_t>(std::llround(static_cast<double>(total) * fractions[0]));
  const auto n2 = std::min(total - n1, static_cast<int64_t>(std::llround(static_cast<double>(total) * fractions[1])));
  StagePlan p;
  Stage s1{StageName::kCanonicalEdit, {}, {}, n1, true};
  Stage s2{StageName::kFlowTrain, {}, {}, n2, false};
  Stage s3{StageName::kJointFinetune, groups, {}, total - n1 - n2, false};
  for (const auto& g : groups) {
    (g == "flow" ? s1.frozen : s1.trainable).insert(g);
    (g == "flow" ? s2.trainable : s2.frozen).insert(g);
  }
  p.stages = {s1, s2, s3};
  return p;
}

StagePlan StagePlan::joint_only(int64_t total, const std::set<std::string>& groups) {
  auto p = three_stage(0, {0.0, 0.0, 1.0}, groups);
  p.stages[2].iterations = total;
  return p;
}

// ---------------------------------------------------------------------------
// Cache and report

void DatasetState::reset(int frames, int cameras) {
  num_frames = frames;
  num_cameras = cameras;
  entries.assign(static_cast<size_t>(frames) * cameras, CacheEntry{});
  replacements = skips = 0;
  calls.clear();
}

bool DatasetState::filled() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.stamp >= 0; });
}

void TrainReport::add(json record) {
  if (!record.contains("iteration")) throw std::logic_error("report record lacks an iteration");
  const auto phase = record.value("phase", std::string());
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->value("phase", std::string()) != phase) continue;
    if ((*it)["iteration"].get<int64_t>() > record["iteration"].get<int64_t>()) {
      throw std::logic_error("report iterations must not go backwards");
    }
    break;
  }
  records.push_back(std::move(record));
}

void TrainReport::write_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << "\n";
}

TrainReport TrainReport::read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path.string());
  TrainReport r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      r.records.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw SchemaError("report " + path.string() + ": " + e.what());
    }
  }
  return r;
}

json TrainReport::last_metrics() const {
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->contains("metrics")) return (*it)["metrics"];
  }
  return nullptr;
}

std::unique_ptr<Editor> make_editor(const EditorSettings& settings) {
  if (settings.kind == "remote") return std::make_unique<RemoteEditor>(settings.remote);
  return std::make_unique<SyntheticEditor>(settings.synthetic);
}

uint64_t tensor_checksum(const std::vector<torch::Tensor>& tensors) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    auto c = t.detach().contiguous();
    const auto* p = static_cast<const unsigned char*>(c.data_ptr());
    const size_t n = static_cast<size_t>(c.numel()) * c.element_size();
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(RunConfig config, Dataset dataset)
    : cfg_(std::move(config)),
      ds_(std::move(dataset)),
      rng_(hash_keys({cfg_.seed, 0x7a41ULL})),
      du_rng_(hash_keys({cfg_.seed, 0xd0ULL})),
      gen_(at::make_generator<at::CPUGeneratorImpl>(hash_keys({cfg_.seed, 0x6e4ULL}))) {
  cfg_.validate();
  if (ds_.num_frames < 1 || ds_.num_cameras < 1) throw ConfigError("trainer: empty dataset");
  for (const auto& c : ds_.cameras) {
    if (c.width != ds_.cameras[0].width || c.height != ds_.cameras[0].height) {
      throw ConfigError("trainer: all cameras must share one resolution");
    }
  }
  if (cfg_.edit.eval_camera >= ds_.num_cameras) throw ConfigError("edit.eval_camera exceeds the camera count");
  if (cfg_.edit.canonical_frame >= ds_.num_frames) throw ConfigError("edit.canonical_frame exceeds the frame count");

  images_ = load_images(ds_);
  masks_ = load_masks(ds_);
  const int64_t nf = ds_.num_frames, nc = ds_.num_cameras;
  const int64_t h = images_.size(3), w = images_.size(4);
  originals_edit_ = resize(images_.view({nf * nc, 3, h, w}), edit_height(), edit_width())
                        .view({nf, nc, 3, edit_height(), edit_width()})
                        .contiguous();
  if (masks_.defined()) {
    masks_edit_ = resize(masks_.view({nf * nc, 1, h, w}), edit_height(), edit_width(), true)
                      .view({nf, nc, edit_height(), edit_width()})
                      .contiguous();
  } else {
    masks_edit_ = torch::ones({nf, nc, edit_height(), edit_width()});
  }
  for (int c = 0; c < nc; ++c) rays_.push_back(generate_rays(ds_.cameras[static_cast<size_t>(c)], cfg_.scene_bounds));

  field_ = SceneField(cfg_.field_options(), cfg_.seed);
  gan_ = Gan(cfg_.gan_options(), cfg_.seed);
  extractor_ = PerceptualExtractor(perceptual_cache_dir());
  state_.reset(ds_.num_frames, ds_.num_cameras);
  editor_ = make_editor(cfg_.editor);
  configure_optimizers("reconstruct");
  wall_start_ = now_s();
}

void Trainer::reseed(uint64_t seed) {
  cfg_.seed = seed;
  rng_.seed(hash_keys({seed, 0x7a41ULL}));
  du_rng_.seed(hash_keys({seed, 0xd0ULL}));
  gen_ = at::make_generator<at::CPUGeneratorImpl>(hash_keys({seed, 0x6e4ULL}));
}

int Trainer::edit_width() const { return cfg_.render.width * static_cast<int>(cfg_.gan.options.upsample); }
int Trainer::edit_height() const { return cfg_.render.height * static_cast<int>(cfg_.gan.options.upsample); }

CameraModel Trainer::low_res_camera(int camera) const {
  return ds_.cameras.at(static_cast<size_t>(camera)).resized(cfg_.render.width, cfg_.render.height);
}

torch::Tensor Trainer::original(int frame, int camera) const { return originals_edit_[frame][camera]; }

ParamGroups Trainer::groups() {
  auto g = field_->param_groups();
  for (auto& [k, v] : gan_->param_groups()) g[k] = v;
  return g;
}

std::set<std::string> Trainer::mode_groups() const {
  std::set<std::string> g(field_group_names().begin(), field_group_names().end());
  if (cfg_.edit.mode == TrainMode::kControl4D) g.insert(gan_group_names().begin(), gan_group_names().end());
  return g;
}

uint64_t Trainer::checksum(const std::vector<std::string>& group_names) {
  auto g = groups();
  std::vector<torch::Tensor> all;
  for (const auto& name : group_names) {
    const auto& v = g.at(name);
    all.insert(all.end(), v.begin(), v.end());
  }
  return tensor_checksum(all);
}

void Trainer::configure_optimizers(const std::string& phase) {
  optimizers_.clear();
  const auto& lr = phase == "reconstruct" ? cfg_.reconstruct.lr : cfg_.edit.lr;
  auto g = groups();
  for (const auto& [name, rate] : lr) {
    if (!g.count(name)) continue;
    optimizers_[name] = std::make_unique<torch::optim::Adam>(g.at(name), adam_options(name, rate));
  }
  phase_ = phase;
}

void Trainer::set_trainable(const std::set<std::string>& trainable) {
  for (auto& [name, params] : groups()) {
    const bool on = trainable.count(name) > 0;
    for (auto& p : params) p.requires_grad_(on);
  }
}

void Trainer::zero_grads() {
  for (auto& [name, params] : groups()) {
    for (auto& p : params) p.mutable_grad() = torch::Tensor();
  }
}

void Trainer::step_groups(const std::set<std::string>& names) {
  for (const auto& n : names) {
    auto it = optimizers_.find(n);
    if (it != optimizers_.end()) it->second->step();
  }
}

// ---------------------------------------------------------------------------
// Reconstruction

double Trainer::reconstruction_step() {
  if (phase_ != "reconstruct") configure_optimizers("reconstruct");
  set_trainable({field_group_names().begin(), field_group_names().end()});
  const int64_t n = cfg_.reconstruct.rays_per_batch;
  const int64_t hw = images_.size(3) * images_.size(4);
  auto frames = torch::randint(ds_.num_frames, {n}, gen_, torch::kLong);
  auto cams = torch::randint(ds_.num_cameras, {n}, gen_, torch::kLong);
  auto pix = torch::randint(hw, {n}, gen_, torch::kLong);

  // Gather rays camera by camera so each RayBatch stays per-camera.
  std::vector<torch::Tensor> o, d, nr, fr, hit, order;
  for (int c = 0; c < ds_.num_cameras; ++c) {
    auto idx = (cams == c).nonzero().view({-1});
    if (idx.numel() == 0) continue;
    auto sel = rays_[static_cast<size_t>(c)].select(pix.index_select(0, idx));
    o.push_back(sel.origins);
    d.push_back(sel.directions);
    nr.push_back(sel.near);
    fr.push_back(sel.far);
    hit.push_back(sel.hit);
    order.push_back(idx);
  }
  RayBatch rays;
  rays.origins = torch::cat(o);
  rays.directions = torch::cat(d);
  rays.near = torch::cat(nr);
  rays.far = torch::cat(fr);
  rays.hit = torch::cat(hit);
  auto ord = torch::cat(order);
  rays.pixels = pix.index_select(0, ord);
  rays.z_scale = torch::ones_like(rays.near);
  auto f = frames.index_select(0, ord);
  auto c = cams.index_select(0, ord);
  const double denom = ds_.num_frames > 1 ? ds_.num_frames - 1 : 1;
  auto times = f.to(torch::kFloat) / static_cast<float>(denom);
  auto flat = images_.view({ds_.num_frames, ds_.num_cameras, 3, hw});
  auto target = flat.index({f, c, torch::indexing::Slice(), rays.pixels});  // [n,3]

  RenderOptions opt;
  opt.samples_per_ray = cfg_.reconstruct.samples_per_ray;
  opt.stratified = true;
  opt.background = cfg_.render.background;
  auto rr = render_rays(as_field_fn(field_), rays, times, opt, gen_);
  auto loss = (rr.rgb - target).pow(2).mean();
  zero_grads();
  loss.backward();
  step_groups({field_group_names().begin(), field_group_names().end()});
  const double v = loss.item<double>();
  if (!std::isfinite(v)) throw NumericalError("reconstruction: non-finite loss at iteration " + std::to_string(recon_iter_));
  return v;
}

void Trainer::pretrain_reconstruction(int64_t iterations) {
  double acc = 0.0;
  int64_t count = 0;
  while (recon_iter_ < iterations) {
    acc += reconstruction_step();
    ++count;
    ++recon_iter_;
    if (recon_iter_ % cfg_.reconstruct.log_every == 0 || recon_iter_ == iterations) {
      report_.add({{"phase", "reconstruct"},
                   {"iteration", recon_iter_},
                   {"losses", {{"l2", acc / static_cast<double>(count)}}},
                   {"editor_calls", 0},
                   {"wall_clock_s", now_s() - wall_start_}});
      acc = 0.0;
      count = 0;
    }
  }
}

// ---------------------------------------------------------------------------
// Rendering helpers

RenderPacket Trainer::render_field(const CameraModel& camera, double time) {
  torch::NoGradGuard guard;
  RenderOptions opt;
  opt.samples_per_ray = cfg_.render.samples_per_ray;
  opt.background = cfg_.render.background;
  opt.chunk = cfg_.render.chunk;
  auto pkt = render_view(as_field_fn(field_), camera, cfg_.scene_bounds, time, opt);
  pkt.seed = cfg_.render.eval_latent_seed;
  return pkt;
}

torch::Tensor Trainer::render_output(int frame, int camera) {
  return render_output_at(ds_.time_of(frame), low_res_camera(camera));
}

torch::Tensor Trainer::render_dataset(const Dataset& gt) {
  std::vector<torch::Tensor> frames;
  for (int f = 0; f < gt.num_frames; ++f) {
    std::vector<torch::Tensor> views;
    for (int c = 0; c < gt.num_cameras; ++c) {
      views.push_back(render_field(gt.cameras[static_cast<size_t>(c)], gt.time_of(f)).rgb);
    }
    frames.push_back(torch::stack(views));
  }
  return torch::stack(frames);
}

torch::Tensor Trainer::render_output_at(double time, const CameraModel& low_res_camera) {
  torch::NoGradGuard guard;
  auto pkt = render_field(low_res_camera, time);
  if (cfg_.edit.mode == TrainMode::kControl4D) {
    auto latent = sample_latent_map(pkt, cfg_.render.eval_latent_seed, cfg_.render.latent_draw);
    return gan_->generate(1, pkt.rgb.unsqueeze(0), latent.unsqueeze(0), std::nullopt)[0];
  }
  return resize(pkt.rgb.unsqueeze(0), edit_height(), edit_width())[0];
}

torch::Tensor Trainer::output_video(int camera) {
  std::vector<torch::Tensor> frames;
  for (int f = 0; f < ds_.num_frames; ++f) frames.push_back(render_output(f, camera));
  return torch::stack(frames);
}

torch::Tensor Trainer::target_video(int camera) const {
  std::vector<torch::Tensor> frames;
  auto style_only = cfg_.editor.synthetic;
  style_only.jitter_std = 0.0;
  style_only.detail_jitter_std = 0.0;
  for (int f = 0; f < ds_.num_frames; ++f) {
    if (cfg_.editor.kind == "synthetic") {
      EditRequest req;
      req.original = original(f, camera);
      req.frame_id = f;
      req.camera_id = camera;
      frames.push_back(synthetic_edit(req, style_only).image);
    } else {
      frames.push_back(original(f, camera));
    }
  }
  return torch::stack(frames);
}

torch::Tensor Trainer::mask_video(int camera) const { return masks_edit_.select(1, camera); }

json Trainer::edit_metrics() {
  const int cam = cfg_.edit.eval_camera;
  auto video = output_video(cam);
  auto gt = target_video(cam);
  auto mask = mask_video(cam);
  const double out_rms = consecutive_rms(video, mask);
  const double gt_rms = consecutive_rms(gt, mask);
  return {{"flicker", out_rms - gt_rms},
          {"consecutive_rms", out_rms},
          {"gt_consecutive_rms", gt_rms},
          {"sharpness", laplacian_variance(video, mask)},
          {"gt_sharpness", laplacian_variance(gt, mask)},
          {"psnr", psnr(video, gt)},
          {"camera", cam}};
}

// ---------------------------------------------------------------------------
// Dataset update

EditRequest Trainer::build_request(int frame, int camera, int64_t iteration) {
  torch::NoGradGuard guard;
  const auto cam = low_res_camera(camera);
  auto pkt = render_field(cam, ds_.time_of(frame));
  const bool use_generator =
      cfg_.edit.du_source == DuSource::kGenerator ||
      (cfg_.edit.du_source == DuSource::kAuto && cfg_.edit.mode == TrainMode::kControl4D);
  EditRequest req;
  if (use_generator) {
    const uint64_t seed = hash_keys({cfg_.seed, static_cast<uint64_t>(iteration), 0x1a7eULL});
    auto latent = sample_latent_map(pkt, seed, cfg_.render.latent_draw);
    req.render = gan_->generate(1, pkt.rgb.unsqueeze(0), latent.unsqueeze(0), std::nullopt)[0];
  } else {
    req.render = resize(pkt.rgb.unsqueeze(0), edit_height(), edit_width())[0];
  }
  req.original = original(frame, camera);
  auto normals = extract_normals(pkt.depth, cam, pkt.alpha);
  req.condition = resize(normals.encoded.unsqueeze(0), edit_height(), edit_width(), true)[0];
  req.prompt = cfg_.editor.prompt;
  req.noise_level =
      noise_schedule(iteration, cfg_.edit.iterations, cfg_.editor.noise_max, cfg_.editor.noise_min, cfg_.editor.noise_shape);
  req.frame_id = frame;
  req.camera_id = camera;
  req.seed = hash_keys({cfg_.seed, static_cast<uint64_t>(iteration), static_cast<uint64_t>(frame),
                        static_cast<uint64_t>(camera)});
  req.iteration = iteration;
  return req;
}

namespace {

bool apply_edit(DatasetState& state, Editor& editor, const EditRequest& req) {
  EditorCall call{req.iteration, req.frame_id, req.camera_id, true};
  try {
    auto edited = editor.edit(req);
    if (edited.image.sizes() != req.original.sizes() || !torch::isfinite(edited.image).all().item<bool>()) {
      throw TransportError("editor returned an invalid image");
    }
    auto& e = state.at(req.frame_id, req.camera_id);
    e.frame = std::move(edited);
    e.stamp = req.iteration;
    ++state.replacements;
  } catch (const TransportError&) {
    call.ok = false;
    ++state.skips;
  }
  state.calls.push_back(call);
  return call.ok;
}

}  // namespace

void Trainer::fill_cache(int64_t iteration) {
  if (!editor_) throw UsageError("no editor configured");
  for (int f = 0; f < ds_.num_frames; ++f) {
    for (int c = 0; c < ds_.num_cameras; ++c) apply_edit(state_, *editor_, build_request(f, c, iteration));
  }
}

std::pair<int, int> Trainer::draw_update_index() {
  std::uniform_int_distribution<int64_t> pick(0, static_cast<int64_t>(ds_.num_frames) * ds_.num_cameras - 1);
  const auto i = pick(du_rng_);
  return {static_cast<int>(i / ds_.num_cameras), static_cast<int>(i % ds_.num_cameras)};
}

bool Trainer::dataset_update_step(int64_t iteration) {
  if (!editor_) throw UsageError("no editor configured");
  const auto [f, c] = draw_update_index();
  return apply_edit(state_, *editor_, build_request(f, c, iteration));
}

Trainer::Sample Trainer::draw_sample(bool canonical_only) {
  std::uniform_int_distribution<int> frame(0, ds_.num_frames - 1);
  std::uniform_int_distribution<int> cam(0, ds_.num_cameras - 1);
  Sample s;
  s.frame = canonical_only ? cfg_.edit.canonical_frame : frame(rng_);
  s.camera = cam(rng_);
  return s;
}

// ---------------------------------------------------------------------------
// Editing steps

namespace {

torch::Tensor cached_target(const DatasetState& state, const Trainer& t, int frame, int camera) {
  const auto& e = state.at(frame, camera);
  // Entries never edited fall back to the original frame.
  return e.stamp >= 0 ? e.frame.image : t.original(frame, camera);
}

}  // namespace

std::map<std::string, double> Trainer::baseline_step(const Sample& s, const std::set<std::string>& trainable) {
  std::set<std::string> active;
  for (const auto& g : field_group_names()) {
    if (trainable.count(g)) active.insert(g);
  }
  set_trainable(active);
  RenderOptions opt;
  opt.samples_per_ray = cfg_.render.samples_per_ray;
  opt.stratified = true;
  opt.background = cfg_.render.background;
  auto pkt = render_view(as_field_fn(field_), low_res_camera(s.camera), cfg_.scene_bounds, ds_.time_of(s.frame), opt,
                         gen_);
  auto up = resize(pkt.rgb.unsqueeze(0), edit_height(), edit_width());
  auto target = cached_target(state_, *this, s.frame, s.camera).unsqueeze(0);
  auto l1 = (up - target).abs().mean();
  auto lp = perceptual_loss(extractor_, up, target);
  auto total = cfg_.edit.baseline_l1_weight * l1 + cfg_.edit.baseline_perceptual_weight * lp;
  zero_grads();
  if (total.requires_grad()) total.backward();
  step_groups(active);
  std::map<std::string, double> out{{"l1", l1.item<double>()}, {"perceptual", lp.item<double>()},
                                    {"total", total.item<double>()}};
  check_finite(out, "baseline step");
  return out;
}

Trainer::GanBatch Trainer::make_gan_batch(const Sample& s, int64_t iteration, std::optional<int> level) {
  GanBatch b;
  b.sample = s;
  RenderOptions opt;
  opt.samples_per_ray = cfg_.render.samples_per_ray;
  opt.stratified = true;
  opt.background = cfg_.render.background;
  b.packet = render_view(as_field_fn(field_), low_res_camera(s.camera), cfg_.scene_bounds, ds_.time_of(s.frame), opt,
                         gen_);
  b.packet.camera_id = s.camera;
  b.packet.seed = hash_keys({cfg_.seed, static_cast<uint64_t>(iteration), 0x1a7eULL});
  b.rgb = b.packet.rgb.unsqueeze(0);
  b.latent = sample_latent_map(b.packet, b.packet.seed, cfg_.render.latent_draw).unsqueeze(0);
  b.edited = cached_target(state_, *this, s.frame, s.camera).unsqueeze(0);
  b.level = level ? *level : cfg_.gan.levels.sample(rng_);
  b.generated = gan_->generate(b.level, b.rgb, b.latent, b.edited);
  return b;
}

std::map<std::string, double> Trainer::discriminator_update(GanBatch& batch) {
  auto params = gan_->discriminator()->parameters();
  std::vector<bool> was;
  for (auto& p : params) {
    was.push_back(p.requires_grad());
    p.requires_grad_(true);
  }
  auto critic = as_critic(gan_->discriminator());
  DiscLossTerms terms;
  for (int k = 0; k < cfg_.gan.d_steps; ++k) {
    terms = disc_loss(critic, batch.generated, batch.edited, cfg_.gan.gp_lambda, gen_);
    zero_grads();
    terms.total.backward();
    step_groups({"discriminator"});
  }
  for (size_t i = 0; i < params.size(); ++i) params[i].requires_grad_(was[i]);
  std::map<std::string, double> out{{"d_fake", terms.fake_score.item<double>()},
                                    {"d_real", terms.real_score.item<double>()},
                                    {"gp", terms.penalty.item<double>()},
                                    {"d_total", terms.total.item<double>()}};
  check_finite(out, "discriminator update");
  return out;
}

std::map<std::string, double> Trainer::generator_update(GanBatch& batch, const std::set<std::string>& trainable) {
  auto dparams = gan_->discriminator()->parameters();
  std::vector<bool> was;
  for (auto& p : dparams) {
    was.push_back(p.requires_grad());
    p.requires_grad_(false);
  }
  auto terms = gen_loss(batch.level, as_critic(gan_->discriminator()), batch.generated, batch.edited, extractor_,
                        cfg_.gan.weights);
  zero_grads();
  if (terms.total.requires_grad()) terms.total.backward();
  std::set<std::string> active;
  for (const auto& g : trainable) {
    if (g != "discriminator") active.insert(g);
  }
  step_groups(active);
  for (size_t i = 0; i < dparams.size(); ++i) dparams[i].requires_grad_(was[i]);
  std::map<std::string, double> out{{"g_adv", terms.adversarial.item<double>()},
                                    {"g_perceptual", terms.perceptual.item<double>()},
                                    {"g_l1", terms.l1.item<double>()},
                                    {"g_total", terms.total.item<double>()},
                                    {"level", static_cast<double>(batch.level)}};
  check_finite(out, "generator update");
  return out;
}

std::map<std::string, double> Trainer::control4d_step(const Sample& s, int64_t iteration,
                                                      const std::set<std::string>& trainable) {
  set_trainable(trainable);
  auto batch = make_gan_batch(s, iteration);
  std::map<std::string, double> out;
  if (trainable.count("discriminator")) out = discriminator_update(batch);
  for (const auto& [k, v] : generator_update(batch, trainable)) out[k] = v;
  return out;
}

void Trainer::begin_edit() {
  if (phase_ == "edit") return;
  configure_optimizers("edit");
  edit_iter_ = 0;
  if (cfg_.edit.initial_fill && !state_.filled()) fill_cache(0);
}

std::map<std::string, double> Trainer::edit_step(const Stage& stage) {
  begin_edit();
  stage_name_ = to_string(stage.name);
  const int64_t it = edit_iter_;
  if (it > 0 && it % cfg_.edit.du_period == 0) dataset_update_step(it);
  const auto s = draw_sample(stage.canonical_frame_only);
  auto losses = cfg_.edit.mode == TrainMode::kBaselineDU ? baseline_step(s, stage.trainable)
                                                         : control4d_step(s, it, stage.trainable);
  ++edit_iter_;
  log_edit(losses, stage);
  return losses;
}

void Trainer::log_edit(const std::map<std::string, double>& losses, const Stage& stage) {
  auto& acc = loss_acc_;
  for (const auto& [k, v] : losses) {
    acc[k].first += v;
    acc[k].second += 1;
  }
  const bool eval_due = cfg_.edit.eval_every > 0 && edit_iter_ % cfg_.edit.eval_every == 0;
  if (edit_iter_ % cfg_.edit.log_every != 0 && !eval_due) return;
  json l = json::object();
  for (const auto& [k, v] : acc) l[k] = v.first / static_cast<double>(std::max<int64_t>(1, v.second));
  acc.clear();
  json rec{{"phase", "edit"},
           {"stage", to_string(stage.name)},
           {"mode", to_string(cfg_.edit.mode)},
           {"iteration", edit_iter_},
           {"losses", l},
           {"editor_calls", state_.calls.size()},
           {"replacements", state_.replacements},
           {"skips", state_.skips},
           {"wall_clock_s", now_s() - wall_start_}};
  if (eval_due) rec["metrics"] = edit_metrics();
  report_.add(std::move(rec));
}

StagePlan Trainer::default_plan() const {
  const auto groups = mode_groups();
  return cfg_.edit.staged ? StagePlan::three_stage(cfg_.edit.iterations, cfg_.edit.stage_fractions, groups)
                          : StagePlan::joint_only(cfg_.edit.iterations, groups);
}

void Trainer::run_stages(const StagePlan& plan) {
  plan.validate(mode_groups());
  begin_edit();
  int64_t end = 0;
  for (const auto& stage : plan.stages) {
    end += stage.iterations;
    while (edit_iter_ < end) edit_step(stage);
  }
  set_trainable(mode_groups());
  report_.add({{"phase", "edit"},
               {"stage", "final"},
               {"mode", to_string(cfg_.edit.mode)},
               {"iteration", edit_iter_},
               {"editor_calls", state_.calls.size()},
               {"replacements", state_.replacements},
               {"skips", state_.skips},
               {"wall_clock_s", now_s() - wall_start_},
               {"metrics", edit_metrics()}});
}

// ---------------------------------------------------------------------------
// GAN on fixed pairs

double level3_l1(Gan& gan, const GanPairSet& set) {
  torch::NoGradGuard guard;
  auto out = gan->generate(3, set.rgb, set.latent, set.edited);
  const double v = (out - set.edited).abs().mean().item<double>();
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

GanPairResult train_gan_on_pairs(Gan& gan, PerceptualExtractor& extractor, const GanPairSet& set,
                                 const LevelSchedule& levels, int64_t steps, const GanConfig& cfg, double lr_g,
                                 double lr_d, uint64_t seed) {
  levels.validate();
  auto groups = gan->param_groups();
  std::vector<torch::Tensor> gparams;
  for (const auto& name : {"generator", "global_encoder", "local_encoder"}) {
    const auto& v = groups.at(name);
    gparams.insert(gparams.end(), v.begin(), v.end());
  }
  auto dparams = groups.at("discriminator");
  torch::optim::Adam opt_g(gparams, torch::optim::AdamOptions(lr_g).betas({0.5, 0.9}));
  torch::optim::Adam opt_d(dparams, torch::optim::AdamOptions(lr_d).betas({0.5, 0.9}));
  std::mt19937_64 rng(hash_keys({seed, 0x9a9ULL}));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(hash_keys({seed, 0x9a8ULL}));
  auto critic = as_critic(gan->discriminator());
  GanPairResult result;
  for (int64_t step = 0; step < steps; ++step) {
    const int level = levels.sample(rng);
    auto generated = gan->generate(level, set.rgb, set.latent, set.edited);
    auto d = disc_loss(critic, generated, set.edited, cfg.gp_lambda, gen);
    opt_d.zero_grad();
    d.total.backward();
    opt_d.step();
    for (auto& p : dparams) p.requires_grad_(false);
    auto g = gen_loss(level, critic, generated, set.edited, extractor, cfg.weights);
    opt_g.zero_grad();
    g.total.backward();
    opt_g.step();
    for (auto& p : dparams) p.requires_grad_(true);
    result.gen_losses.push_back(g.total.item<double>());
    result.disc_losses.push_back(d.total.item<double>());
    if (!std::isfinite(result.gen_losses.back()) || !std::isfinite(result.disc_losses.back())) {
      result.diverged = true;
      break;
    }
  }
  result.level3_l1 = level3_l1(gan, set);
  return result;
}

}  // namespace c4d
