#include "control4d/gan.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "control4d/errors.hpp"

namespace c4d {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace {

constexpr double kSlope = 0.2;

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2));
}

torch::Tensor lrelu(const torch::Tensor& x) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(kSlope));
}

int stages_for(int64_t upsample) {
  if (upsample < 1 || (upsample & (upsample - 1)) != 0) throw ConfigError("gan: upsample factor must be a power of two");
  int s = 0;
  while ((int64_t{1} << s) < upsample) ++s;
  return s;
}

int64_t stage_channels(int64_t base, int k) { return std::max<int64_t>(base >> k, 8); }

}  // namespace

// ---------------------------------------------------------------------------
// Film

FilmImpl::FilmImpl(int64_t code_dim, int64_t channels) {
  proj_ = register_module("proj", torch::nn::Linear(code_dim, 2 * channels));
  torch::NoGradGuard guard;
  proj_->weight.zero_();
  proj_->bias.zero_();
}

torch::Tensor FilmImpl::forward(const torch::Tensor& x, const torch::Tensor& code) {
  auto gb = proj_->forward(code).unsqueeze(-1).unsqueeze(-1);
  auto parts = gb.chunk(2, 1);
  return x * (1.0 + parts[0]) + parts[1];
}

// ---------------------------------------------------------------------------
// Generator

GeneratorImpl::GeneratorImpl(const GanOptions& opt) : opt_(opt) {
  const int s = stages_for(opt.upsample);
  const int64_t c0 = stage_channels(opt.base_channels, 0);
  stem_.conv1 = register_module("stem_conv1", conv(3 + opt.latent_dim, c0, 3));
  stem_.conv2 = register_module("stem_conv2", conv(c0, c0, 3));
  stem_.film1 = register_module("stem_film1", Film(opt.global_dim, c0));
  stem_.film2 = register_module("stem_film2", Film(opt.global_dim, c0));
  int64_t prev = c0;
  for (int k = 1; k <= s; ++k) {
    const int64_t ck = stage_channels(opt.base_channels, k);
    const std::string p = "stage" + std::to_string(k) + "_";
    Block b;
    b.conv1 = register_module(p + "conv1", conv(prev + opt.local_channels, ck, 3));
    b.conv2 = register_module(p + "conv2", conv(ck, ck, 3));
    b.film1 = register_module(p + "film1", Film(opt.global_dim, ck));
    b.film2 = register_module(p + "film2", Film(opt.global_dim, ck));
    stages_.push_back(b);
    prev = ck;
  }
  to_rgb_ = register_module("to_rgb", conv(prev, 3, 1));
  torch::NoGradGuard guard;
  to_rgb_->weight.zero_();
  to_rgb_->bias.zero_();
}

torch::Tensor GeneratorImpl::run_block(Block& b, torch::Tensor x, const torch::Tensor& code) {
  x = lrelu(b.film1->forward(b.conv1->forward(x), code));
  return lrelu(b.film2->forward(b.conv2->forward(x), code));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& rgb, const torch::Tensor& latent, const torch::Tensor& code,
                                     const std::vector<torch::Tensor>& locals) {
  TORCH_CHECK(rgb.dim() == 4 && latent.dim() == 4, "generator: expects [B,C,H,W] inputs");
  if (!locals.empty() && locals.size() != stages_.size()) {
    throw UsageError("generator: expected " + std::to_string(stages_.size()) + " local feature maps");
  }
  auto x = run_block(stem_, torch::cat({rgb, latent}, 1), code);
  for (size_t k = 0; k < stages_.size(); ++k) {
    x = F::interpolate(x, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{2.0, 2.0})
                              .mode(torch::kBilinear)
                              .align_corners(false));
    torch::Tensor local;
    if (locals.empty()) {
      local = torch::zeros({x.size(0), opt_.local_channels, x.size(2), x.size(3)}, x.options());
    } else {
      local = locals[k];
      TORCH_CHECK(local.size(2) == x.size(2) && local.size(3) == x.size(3), "generator: local feature size mismatch");
    }
    x = run_block(stages_[k], torch::cat({x, local}, 1), code);
  }
  const double up = static_cast<double>(opt_.upsample);
  auto base = F::interpolate(rgb, F::InterpolateFuncOptions()
                                      .scale_factor(std::vector<double>{up, up})
                                      .mode(torch::kBilinear)
                                      .align_corners(false))
                  .clamp(1e-3, 1.0 - 1e-3);
  return torch::sigmoid(to_rgb_->forward(x) + torch::log(base / (1.0 - base)));
}

// ---------------------------------------------------------------------------
// Discriminator

DiscriminatorImpl::DiscriminatorImpl(const GanOptions& opt) {
  int64_t ch = opt.disc_channels;
  convs_.push_back(register_module("conv0", conv(3, ch, 3)));
  for (int i = 1; i <= 4; ++i) {
    const int64_t next = std::min(ch * 2, opt.disc_channels * 4);
    convs_.push_back(register_module("conv" + std::to_string(i),
                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, next, 4).stride(2).padding(1))));
    ch = next;
  }
  head_ = register_module("head", torch::nn::Linear(ch, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& image) {
  auto x = image * 2.0 - 1.0;
  for (auto& c : convs_) x = lrelu(c->forward(x));
  return head_->forward(x.mean({2, 3})).squeeze(1);
}

// ---------------------------------------------------------------------------
// Encoders

GlobalEncoderImpl::GlobalEncoderImpl(const GanOptions& opt) {
  const std::array<int64_t, 4> ch{3, 16, 32, 64};
  for (int i = 0; i < 3; ++i) convs_.push_back(register_module("conv" + std::to_string(i), conv(ch[i], ch[i + 1], 3, 2)));
  head_ = register_module("head", torch::nn::Linear(ch.back(), opt.global_dim));
}

torch::Tensor GlobalEncoderImpl::forward(const torch::Tensor& image) {
  auto x = image * 2.0 - 1.0;
  for (auto& c : convs_) x = lrelu(c->forward(x));
  return head_->forward(x.mean({2, 3}));
}

LocalEncoderImpl::LocalEncoderImpl(const GanOptions& opt) : opt_(opt) {
  constexpr int64_t width = 16;
  const int s = stages_for(opt.upsample);
  stem_ = register_module("stem", conv(3, width, 3));
  for (int k = s; k >= 1; --k) {
    stage_heads_.push_back(register_module("head" + std::to_string(k), conv(width, opt.local_channels, 1)));
    downs_.push_back(register_module("down" + std::to_string(k), conv(width, width, 3, 2)));
  }
  latent_head_ = register_module("latent_head", conv(width, opt.latent_dim, 3));
}

LocalFeatures LocalEncoderImpl::forward(const torch::Tensor& image) {
  LocalFeatures out;
  auto x = lrelu(stem_->forward(image * 2.0 - 1.0));
  const size_t s = stage_heads_.size();
  out.stages.resize(s);
  // heads run from the finest stage (k = S) down to k = 1
  for (size_t i = 0; i < s; ++i) {
    out.stages[s - 1 - i] = stage_heads_[i]->forward(x);
    x = lrelu(downs_[i]->forward(x));
  }
  out.latent = latent_head_->forward(x);
  return out;
}

// ---------------------------------------------------------------------------
// Perceptual extractor

namespace {

constexpr uint64_t kPerceptualSeed = 0x5eed'c0de'2023ULL;
constexpr char kPerceptualMagic[8] = {'C', '4', 'D', 'P', 'E', 'R', 'C', '1'};

}  // namespace

const std::vector<PerceptualExtractorImpl::Layer>& PerceptualExtractorImpl::architecture() {
  static const std::vector<Layer> layers{
      {"conv1_1", 3, 16, false, false},  {"conv1_2", 16, 16, false, true},
      {"conv2_1", 16, 32, true, false},  {"conv2_2", 32, 32, false, true},
      {"conv3_1", 32, 64, true, true},
  };
  return layers;
}

std::string perceptual_cache_dir() {
  const char* env = std::getenv("CONTROL4D_CACHE");
  return env ? std::string(env) : std::string();
}

PerceptualExtractorImpl::PerceptualExtractorImpl(const std::string& cache_dir) {
  const auto& arch = architecture();
  const fs::path asset = cache_dir.empty() ? fs::path() : fs::path(cache_dir) / "perceptual_backbone.bin";
  bool loaded = false;
  if (!asset.empty() && fs::exists(asset)) {
    std::ifstream in(asset, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != std::string(kPerceptualMagic, 8)) {
      throw SchemaError("perceptual backbone asset has a bad header: " + asset.string());
    }
    for (const auto& l : arch) {
      auto w = torch::empty({l.out, l.in, 3, 3});
      auto b = torch::empty({l.out});
      in.read(reinterpret_cast<char*>(w.data_ptr<float>()), static_cast<std::streamsize>(w.numel() * sizeof(float)));
      in.read(reinterpret_cast<char*>(b.data_ptr<float>()), static_cast<std::streamsize>(b.numel() * sizeof(float)));
      if (!in) throw SchemaError("perceptual backbone asset is truncated: " + asset.string());
      weights_.push_back(w);
      biases_.push_back(b);
    }
    loaded = true;
  }
  if (!loaded) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(kPerceptualSeed);
    for (const auto& l : arch) {
      const double scale = std::sqrt(2.0 / static_cast<double>(l.in * 9));
      weights_.push_back(torch::randn({l.out, l.in, 3, 3}, gen) * scale);
      biases_.push_back(torch::zeros({l.out}));
    }
    if (!asset.empty()) {
      fs::create_directories(asset.parent_path());
      std::ofstream out(asset, std::ios::binary);
      out.write(kPerceptualMagic, 8);
      for (size_t i = 0; i < arch.size(); ++i) {
        out.write(reinterpret_cast<const char*>(weights_[i].data_ptr<float>()),
                  static_cast<std::streamsize>(weights_[i].numel() * sizeof(float)));
        out.write(reinterpret_cast<const char*>(biases_[i].data_ptr<float>()),
                  static_cast<std::streamsize>(biases_[i].numel() * sizeof(float)));
      }
    }
  }
  for (size_t i = 0; i < arch.size(); ++i) {
    weights_[i] = register_buffer(arch[i].name + "_w", weights_[i]);
    biases_[i] = register_buffer(arch[i].name + "_b", biases_[i]);
  }
}

std::vector<torch::Tensor> PerceptualExtractorImpl::forward(const torch::Tensor& image) {
  const auto& arch = architecture();
  std::vector<torch::Tensor> taps;
  auto x = image * 2.0 - 1.0;
  for (size_t i = 0; i < arch.size(); ++i) {
    if (arch[i].pool_before) x = F::avg_pool2d(x, F::AvgPool2dFuncOptions(2));
    x = torch::relu(F::conv2d(x, weights_[i].to(x.dtype()), F::Conv2dFuncOptions().bias(biases_[i].to(x.dtype())).padding(1)));
    if (arch[i].tap) taps.push_back(x);
  }
  return taps;
}

uint64_t PerceptualExtractorImpl::fingerprint() const {
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const torch::Tensor& t) {
    auto c = t.contiguous();
    const auto* bytes = reinterpret_cast<const unsigned char*>(c.data_ptr());
    const size_t n = static_cast<size_t>(c.numel()) * c.element_size();
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (size_t i = 0; i < weights_.size(); ++i) {
    mix(weights_[i]);
    mix(biases_[i]);
  }
  return h;
}

torch::Tensor perceptual_loss(PerceptualExtractor& extractor, const torch::Tensor& x, const torch::Tensor& y) {
  TORCH_CHECK(x.sizes() == y.sizes(), "perceptual loss: shape mismatch");
  auto fx = extractor->forward(x);
  auto fy = extractor->forward(y);
  torch::Tensor total = torch::zeros({}, x.options());
  for (size_t i = 0; i < fx.size(); ++i) total = total + (fx[i] - fy[i]).pow(2).mean();
  return total;
}

// ---------------------------------------------------------------------------
// LevelSchedule

void LevelSchedule::validate() const {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ConfigError("level schedule: probabilities must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("level schedule: probabilities must sum to 1");
}

int LevelSchedule::sample(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  double acc = 0.0;
  for (int i = 0; i < 3; ++i) {
    acc += probs[i];
    if (r < acc && probs[i] > 0.0) return i + 1;
  }
  for (int i = 2; i >= 0; --i)
    if (probs[i] > 0.0) return i + 1;
  return 1;
}

// ---------------------------------------------------------------------------
// Gan

GanImpl::GanImpl(const GanOptions& opt, uint64_t seed) : opt_(opt) {
  torch::manual_seed(seed);
  g_ = register_module("generator", Generator(opt));
  d_ = register_module("discriminator", Discriminator(opt));
  eg_ = register_module("global_encoder", GlobalEncoder(opt));
  el_ = register_module("local_encoder", LocalEncoder(opt));
}

torch::Tensor GanImpl::generate(int level, const torch::Tensor& rgb, const torch::Tensor& latent,
                                const std::optional<torch::Tensor>& edited) {
  if (level < 1 || level > 3) throw UsageError("generate: level must be 1, 2 or 3");
  if (level >= 2 && !edited) throw UsageError("generate: level " + std::to_string(level) + " needs an edited image");
  switch (level) {
    case 1:
      return g_->forward(rgb, latent, eg_->forward(rgb));
    case 2:
      return g_->forward(rgb, latent, eg_->forward(*edited));
    default: {
      auto local = el_->forward(*edited);
      return g_->forward(rgb, local.latent, eg_->forward(*edited), local.stages);
    }
  }
}

ParamGroups GanImpl::param_groups() {
  return {{"generator", g_->parameters()},
          {"discriminator", d_->parameters()},
          {"global_encoder", eg_->parameters()},
          {"local_encoder", el_->parameters()}};
}

// ---------------------------------------------------------------------------
// Losses

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               double lambda, at::Generator& gen) {
  TORCH_CHECK(real.sizes() == fake.sizes(), "gradient penalty: shape mismatch");
  const int64_t b = real.size(0);
  auto eps = torch::rand({b, 1, 1, 1}, gen, real.options().requires_grad(false));
  auto mixed = (eps * real.detach() + (1.0 - eps) * fake.detach()).requires_grad_(true);
  auto scores = critic(mixed);
  torch::Tensor grads;
  if (scores.requires_grad()) {
    grads = torch::autograd::grad({scores.sum()}, {mixed}, {}, /*retain_graph=*/true, /*create_graph=*/true,
                                  /*allow_unused=*/true)[0];
  }
  if (!grads.defined()) grads = torch::zeros_like(mixed);
  auto norms = grads.reshape({b, -1}).norm(2, 1);
  return lambda * (norms - 1.0).pow(2).mean();
}

DiscLossTerms disc_loss(const Critic& critic, const torch::Tensor& generated, const torch::Tensor& edited,
                        double lambda, at::Generator& gen) {
  DiscLossTerms t;
  t.fake_score = critic(generated.detach()).mean();
  t.real_score = critic(edited).mean();
  t.penalty = gradient_penalty(critic, edited, generated, lambda, gen);
  t.total = t.fake_score - t.real_score + t.penalty;
  return t;
}

GenLossTerms gen_loss(int level, const Critic& critic, const torch::Tensor& generated,
                      const std::optional<torch::Tensor>& edited, PerceptualExtractor& extractor,
                      const GenLossWeights& weights) {
  if (level < 1 || level > 3) throw UsageError("gen_loss: level must be 1, 2 or 3");
  if (level >= 2 && !edited) throw UsageError("gen_loss: level " + std::to_string(level) + " needs an edited image");
  GenLossTerms t;
  auto zero = torch::zeros({}, generated.options().requires_grad(false));
  t.adversarial = -critic(generated).mean();
  t.perceptual = level >= 2 ? perceptual_loss(extractor, generated, *edited) : zero;
  t.l1 = level == 3 ? (generated - *edited).abs().mean() : zero;
  t.total = t.adversarial;
  if (level >= 2) t.total = t.total + weights.perceptual * t.perceptual;
  if (level == 3) t.total = t.total + weights.l1 * t.l1;
  return t;
}

}  // namespace c4d
