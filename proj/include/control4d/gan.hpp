#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "control4d/scene_field.hpp"

namespace c4d {

struct GanOptions {
  int64_t latent_dim = 8;
  /// Power of two.
  int64_t upsample = 4;
  int64_t base_channels = 32;
  int64_t global_dim = 64;
  /// Local-encoder channels concatenated at each upsampling stage.
  int64_t local_channels = 8;
  int64_t disc_channels = 32;
};

/// Per-channel scale/shift driven by the global code. Starts as the identity.
class FilmImpl : public torch::nn::Module {
 public:
  FilmImpl(int64_t code_dim, int64_t channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& code);

 private:
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(Film);

/// Super-resolving image-to-image generator. Output = sigmoid(residual +
/// logit(upsampled I_r)), so an untrained generator is a bilinear upsampler.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const GanOptions& opt);

  /// rgb [B,3,h,w], latent [B,C_l,h,w], code [B,C_g]; `locals` holds one map
  /// per upsampling stage (absent -> zeros). Returns [B,3,h*up,w*up] in [0,1].
  torch::Tensor forward(const torch::Tensor& rgb, const torch::Tensor& latent, const torch::Tensor& code,
                        const std::vector<torch::Tensor>& locals = {});

  int num_stages() const { return static_cast<int>(stages_.size()); }

 private:
  struct Block {
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    Film film1{nullptr}, film2{nullptr};
  };
  torch::Tensor run_block(Block& b, torch::Tensor x, const torch::Tensor& code);

  GanOptions opt_;
  Block stem_;
  std::vector<Block> stages_;
  torch::nn::Conv2d to_rgb_{nullptr};
};
TORCH_MODULE(Generator);

/// Wasserstein critic: image -> unbounded scalar score per batch element.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const GanOptions& opt);
  torch::Tensor forward(const torch::Tensor& image);  // [B]

 private:
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Image (any resolution >= 8) -> global code [B, C_g].
class GlobalEncoderImpl : public torch::nn::Module {
 public:
  explicit GlobalEncoderImpl(const GanOptions& opt);
  torch::Tensor forward(const torch::Tensor& image);

 private:
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(GlobalEncoder);

struct LocalFeatures {
  /// Stands in for the sampled latent map at render resolution, [B,C_l,h,w].
  torch::Tensor latent;
  /// One map per generator upsampling stage, [B,C_loc,h*2^k,w*2^k], k = 1..S.
  std::vector<torch::Tensor> stages;
};

/// High-resolution image -> multi-scale features matching the generator stages.
class LocalEncoderImpl : public torch::nn::Module {
 public:
  explicit LocalEncoderImpl(const GanOptions& opt);
  LocalFeatures forward(const torch::Tensor& image);

 private:
  GanOptions opt_;
  torch::nn::Conv2d stem_{nullptr};
  std::vector<torch::nn::Conv2d> downs_;
  std::vector<torch::nn::Conv2d> stage_heads_;
  torch::nn::Conv2d latent_head_{nullptr};
};
TORCH_MODULE(LocalEncoder);

/// Frozen convolutional feature extractor used by the perceptual loss.
/// Weights are buffers, never parameters.
class PerceptualExtractorImpl : public torch::nn::Module {
 public:
  /// Loads `<cache>/perceptual_backbone.bin` when `cache_dir` holds one,
  /// otherwise builds the pinned weights from a fixed seed (and writes the
  /// asset when `cache_dir` is given).
  explicit PerceptualExtractorImpl(const std::string& cache_dir = {});

  std::vector<torch::Tensor> forward(const torch::Tensor& image);

  /// Stable hash of the weights, for asset pinning.
  uint64_t fingerprint() const;

 private:
  struct Layer {
    std::string name;
    int64_t in, out;
    bool pool_before;
    bool tap;
  };
  static const std::vector<Layer>& architecture();
  std::vector<torch::Tensor> weights_, biases_;
};
TORCH_MODULE(PerceptualExtractor);

/// Cache location from CONTROL4D_CACHE, empty when unset.
std::string perceptual_cache_dir();

/// Mean squared distance between multi-layer activations.
torch::Tensor perceptual_loss(PerceptualExtractor& extractor, const torch::Tensor& x, const torch::Tensor& y);

/// Probabilities of choosing guidance level 1/2/3 per step.
struct LevelSchedule {
  std::array<double, 3> probs{1.0 / 3, 1.0 / 3, 1.0 / 3};

  /// Throws ConfigError unless probs are >= 0 and sum to 1 (1e-6).
  void validate() const;
  int sample(std::mt19937_64& rng) const;
};

/// Generator, critic, and the two encoders.
class GanImpl : public torch::nn::Module {
 public:
  explicit GanImpl(const GanOptions& opt, uint64_t seed);

  /// Multi-level synthesis. Level 2 and 3 need `edited` (UsageError otherwise).
  torch::Tensor generate(int level, const torch::Tensor& rgb, const torch::Tensor& latent,
                         const std::optional<torch::Tensor>& edited);

  /// "generator", "discriminator", "global_encoder", "local_encoder".
  ParamGroups param_groups();

  Generator& generator() { return g_; }
  Discriminator& discriminator() { return d_; }
  GlobalEncoder& global_encoder() { return eg_; }
  LocalEncoder& local_encoder() { return el_; }
  const GanOptions& options() const { return opt_; }

 private:
  GanOptions opt_;
  Generator g_{nullptr};
  Discriminator d_{nullptr};
  GlobalEncoder eg_{nullptr};
  LocalEncoder el_{nullptr};
};
TORCH_MODULE(Gan);

/// Image batch -> score batch.
using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

inline Critic as_critic(Discriminator d) {
  return [d](const torch::Tensor& x) mutable { return d->forward(x); };
}

/// lambda * mean_b (||grad_x D(x_hat_b)||_2 - 1)^2 with x_hat a per-sample
/// uniform interpolation of real and (detached) fake.
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               double lambda, at::Generator& gen);

struct DiscLossTerms {
  torch::Tensor fake_score, real_score, penalty, total;
};

/// mean D(fake) - mean D(real) + GP. The fake image is detached.
DiscLossTerms disc_loss(const Critic& critic, const torch::Tensor& generated, const torch::Tensor& edited,
                        double lambda, at::Generator& gen);

struct GenLossWeights {
  double perceptual = 1.0;
  double l1 = 10.0;
};

struct GenLossTerms {
  torch::Tensor adversarial, perceptual, l1, total;
};

/// Level 1: -D(I_G); level 2: + w_p L_P; level 3: + w_l1 |I_G - I_ed|_1 (mean).
GenLossTerms gen_loss(int level, const Critic& critic, const torch::Tensor& generated,
                      const std::optional<torch::Tensor>& edited, PerceptualExtractor& extractor,
                      const GenLossWeights& weights = {});

}  // namespace c4d
