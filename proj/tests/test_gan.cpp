#include <gtest/gtest.h>

#include <cmath>

#include "control4d/errors.hpp"
#include "control4d/gan.hpp"

using namespace c4d;

namespace {

GanOptions tiny() {
  GanOptions o;
  o.latent_dim = 3;
  o.upsample = 2;
  o.base_channels = 8;
  o.global_dim = 8;
  o.local_channels = 4;
  o.disc_channels = 8;
  return o;
}

struct Inputs {
  torch::Tensor rgb, latent, edited;
};

Inputs inputs(int64_t b, int64_t h, int64_t up, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return {torch::rand({b, 3, h, h}, gen), torch::randn({b, 3, h, h}, gen), torch::rand({b, 3, h * up, h * up}, gen)};
}

Critic linear_critic(double scale) {
  return [scale](const torch::Tensor& x) {
    const double n = static_cast<double>(x[0].numel());
    return scale * x.reshape({x.size(0), -1}).sum(1) / std::sqrt(n);
  };
}

}  // namespace

TEST(GradientPenalty, UnitGradientLinearCriticIsZero) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  auto real = torch::rand({3, 3, 8, 8}, torch::kDouble), fake = torch::rand({3, 3, 8, 8}, torch::kDouble);
  auto gp = gradient_penalty(linear_critic(1.0), real, fake, 10.0, gen);
  EXPECT_NEAR(gp.item<double>(), 0.0, 1e-12);
}

TEST(GradientPenalty, ConstantCriticIsLambda) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  auto real = torch::rand({2, 3, 8, 8}), fake = torch::rand({2, 3, 8, 8});
  Critic constant = [](const torch::Tensor& x) { return torch::full({x.size(0)}, 0.7, x.options()); };
  EXPECT_NEAR(gradient_penalty(constant, real, fake, 10.0, gen).item<double>(), 10.0, 1e-6);
  Critic detached = [](const torch::Tensor& x) { return x.detach().sum({1, 2, 3}) * 0.0 + 3.0; };
  EXPECT_NEAR(gradient_penalty(detached, real, fake, 4.0, gen).item<double>(), 4.0, 1e-6);
}

TEST(GradientPenalty, DoubledLinearCritic) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  auto real = torch::rand({2, 3, 6, 6}, torch::kDouble), fake = torch::rand({2, 3, 6, 6}, torch::kDouble);
  EXPECT_NEAR(gradient_penalty(linear_critic(2.0), real, fake, 10.0, gen).item<double>(), 10.0, 1e-10);
  EXPECT_NEAR(gradient_penalty(linear_critic(3.0), real, fake, 1.0, gen).item<double>(), 4.0, 1e-10);
}

TEST(DiscLoss, IdenticalInputsWithUnitCriticIsZero) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  auto x = torch::rand({2, 3, 8, 8}, torch::kDouble);
  auto t = disc_loss(linear_critic(1.0), x, x, 10.0, gen);
  EXPECT_NEAR(t.total.item<double>(), 0.0, 1e-12);
}

TEST(DiscLoss, MatchesTermByTermAssembly) {
  Discriminator d(tiny());
  auto critic = as_critic(d);
  auto fake = torch::rand({2, 3, 16, 16}), real = torch::rand({2, 3, 16, 16});
  auto g1 = at::make_generator<at::CPUGeneratorImpl>(9);
  auto g2 = at::make_generator<at::CPUGeneratorImpl>(9);
  auto t = disc_loss(critic, fake, real, 10.0, g1);
  auto expect = d->forward(fake).mean() - d->forward(real).mean() + gradient_penalty(critic, real, fake, 10.0, g2);
  EXPECT_NEAR(t.total.item<double>(), expect.item<double>(), 1e-5);
}

TEST(DiscLoss, GeneratorGetsNoGradient) {
  Gan gan(tiny(), 4);
  auto in = inputs(2, 8, 2, 1);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  auto fake = gan->generate(1, in.rgb, in.latent, std::nullopt);
  auto t = disc_loss(as_critic(gan->discriminator()), fake, in.edited, 10.0, gen);
  t.total.backward();
  for (auto& p : gan->generator()->parameters()) EXPECT_FALSE(p.grad().defined() && p.grad().abs().sum().item<double>() > 0);
  bool d_touched = false;
  for (auto& p : gan->discriminator()->parameters()) d_touched |= p.grad().defined() && p.grad().abs().sum().item<double>() > 0;
  EXPECT_TRUE(d_touched);
}

TEST(DiscLoss, DecreasesWhenTrainingCriticAlone) {
  torch::manual_seed(0);
  Discriminator d(tiny());
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  auto real = torch::rand({4, 3, 16, 16}, gen) * 0.3 + 0.7;
  auto fake = torch::rand({4, 3, 16, 16}, gen) * 0.3;
  torch::optim::Adam opt(d->parameters(), torch::optim::AdamOptions(2e-4).betas({0.5, 0.9}));
  double first = 0, last = 0;
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    auto t = disc_loss(as_critic(d), fake, real, 10.0, gen);
    t.total.backward();
    opt.step();
    if (i == 0) first = t.total.item<double>();
    last = t.total.item<double>();
  }
  EXPECT_LT(last, first);
}

TEST(GenLoss, LevelOneIsNegativeScore) {
  Discriminator d(tiny());
  PerceptualExtractor ex;
  auto x = torch::rand({2, 3, 16, 16});
  auto t = gen_loss(1, as_critic(d), x, std::nullopt, ex);
  EXPECT_FLOAT_EQ(t.total.item<float>(), (-d->forward(x).mean()).item<float>());
}

TEST(GenLoss, MatchedPairLeavesOnlyAdversarialTerm) {
  Discriminator d(tiny());
  PerceptualExtractor ex;
  auto x = torch::rand({2, 3, 16, 16});
  auto t = gen_loss(3, as_critic(d), x, x, ex);
  EXPECT_FLOAT_EQ(t.total.item<float>(), (-d->forward(x).mean()).item<float>());
  EXPECT_EQ(t.l1.item<float>(), 0.0f);
  EXPECT_EQ(t.perceptual.item<float>(), 0.0f);
}

TEST(GenLoss, LevelTwoIsSumOfTerms) {
  Discriminator d(tiny());
  PerceptualExtractor ex;
  auto x = torch::rand({2, 3, 16, 16}), y = torch::rand({2, 3, 16, 16});
  GenLossWeights w;
  auto t = gen_loss(2, as_critic(d), x, y, ex, w);
  const double expect = -d->forward(x).mean().item<double>() + w.perceptual * perceptual_loss(ex, x, y).item<double>();
  EXPECT_NEAR(t.total.item<double>(), expect, 1e-5);
  auto t3 = gen_loss(3, as_critic(d), x, y, ex, w);
  EXPECT_NEAR(t3.total.item<double>(), expect + w.l1 * (x - y).abs().mean().item<double>(), 1e-5);
}

TEST(GenLoss, GuidedLevelsNeedEditedImage) {
  Discriminator d(tiny());
  PerceptualExtractor ex;
  auto x = torch::rand({1, 3, 16, 16});
  EXPECT_THROW(gen_loss(2, as_critic(d), x, std::nullopt, ex), UsageError);
  EXPECT_THROW(gen_loss(3, as_critic(d), x, std::nullopt, ex), UsageError);
  EXPECT_THROW(gen_loss(4, as_critic(d), x, x, ex), UsageError);
}

TEST(Perceptual, IdentitySymmetryAndMonotonicity) {
  PerceptualExtractor ex;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(12);
  for (int i = 0; i < 20; ++i) {
    auto x = torch::rand({1, 3, 32, 32}, gen), y = torch::rand({1, 3, 32, 32}, gen);
    auto near = (x + 0.01 * torch::randn({1, 3, 32, 32}, gen)).clamp(0, 1);
    EXPECT_EQ(perceptual_loss(ex, x, x).item<float>(), 0.0f);
    EXPECT_FLOAT_EQ(perceptual_loss(ex, x, y).item<float>(), perceptual_loss(ex, y, x).item<float>());
    EXPECT_GT(perceptual_loss(ex, x, y).item<float>(), perceptual_loss(ex, x, near).item<float>());
  }
}

TEST(Perceptual, ExtractorIsFrozenAndPinned) {
  PerceptualExtractor a, b;
  EXPECT_TRUE(a->parameters().empty());
  EXPECT_EQ(a->fingerprint(), b->fingerprint());
}

TEST(Generator, UntrainedGeneratorIsBilinearUpsampler) {
  Gan gan(tiny(), 3);
  auto in = inputs(2, 8, 2, 4);
  auto rgb = in.rgb * 0.9 + 0.05;
  auto out = gan->generate(1, rgb, in.latent, std::nullopt);
  auto up = torch::nn::functional::interpolate(
      rgb, torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{16, 16}).mode(torch::kBilinear).align_corners(false));
  EXPECT_TRUE(torch::allclose(out, up, 1e-4, 1e-5));
}

TEST(Generator, DeterministicAndShaped) {
  auto opt = tiny();
  opt.upsample = 4;
  Gan gan(opt, 3);
  auto in = inputs(1, 16, 4, 4);
  auto a = gan->generate(1, in.rgb, in.latent, std::nullopt);
  auto b = gan->generate(1, in.rgb, in.latent, std::nullopt);
  EXPECT_TRUE(torch::equal(a, b));
  auto c = gan->generate(3, in.rgb, in.latent, in.edited);
  EXPECT_EQ(c.sizes(), (std::vector<int64_t>{1, 3, 64, 64}));
  EXPECT_TRUE(((c >= 0) & (c <= 1)).all().item<bool>());
}

TEST(Generator, GuidedLevelsNeedEditedImage) {
  Gan gan(tiny(), 3);
  auto in = inputs(1, 8, 2, 4);
  EXPECT_THROW(gan->generate(2, in.rgb, in.latent, std::nullopt), UsageError);
  EXPECT_THROW(gan->generate(3, in.rgb, in.latent, std::nullopt), UsageError);
}

TEST(Generator, LevelsUseTheRightEncoders) {
  Gan gan(tiny(), 3);
  auto in = inputs(1, 8, 2, 4);
  auto use = [&](int level) {
    gan->zero_grad();
    gan->generate(level, in.rgb, in.latent, in.edited).sum().backward();
    auto touched = [](torch::nn::Module& m) {
      for (auto& p : m.parameters()) {
        if (p.grad().defined() && p.grad().abs().sum().item<double>() > 0) return true;
      }
      return false;
    };
    return std::make_pair(touched(*gan->global_encoder()), touched(*gan->local_encoder()));
  };
  // The generator output layer starts at zero, so give it some weight first.
  {
    torch::NoGradGuard g;
    for (auto& p : gan->generator()->parameters()) p.add_(torch::randn_like(p) * 0.05);
  }
  EXPECT_EQ(use(1), std::make_pair(true, false));
  EXPECT_EQ(use(2), std::make_pair(true, false));
  EXPECT_EQ(use(3), std::make_pair(true, true));
}

TEST(Generator, OverfitsOneImageAtLevelThree) {
  torch::manual_seed(0);
  Gan gan(tiny(), 11);
  auto in = inputs(1, 8, 2, 6);
  auto target = torch::nn::functional::interpolate(
      in.rgb, torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{16, 16}).mode(torch::kBilinear).align_corners(false));
  // A smooth colour field stands in for the edit so the target is reachable by a small generator.
  auto gen = at::make_generator<at::CPUGeneratorImpl>(12);
  auto tint = torch::nn::functional::interpolate(
      torch::rand({1, 3, 4, 4}, gen),
      torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{16, 16}).mode(torch::kBilinear).align_corners(false));
  target = (target * 0.5 + tint * 0.5).detach();
  std::vector<torch::Tensor> params;
  for (auto* m : std::vector<torch::nn::Module*>{gan->generator().get(), gan->global_encoder().get(), gan->local_encoder().get()}) {
    for (auto& p : m->parameters()) params.push_back(p);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(2e-3));
  double l1 = 1;
  for (int i = 0; i < 1000; ++i) {
    opt.zero_grad();
    auto out = gan->generate(3, in.rgb, in.latent, target);
    auto loss = (out - target).abs().mean();
    loss.backward();
    opt.step();
    l1 = loss.item<double>();
  }
  EXPECT_LT(l1, 0.02);
}

TEST(Discriminator, ScoreIsUnbounded) {
  Discriminator d(tiny());
  auto x = torch::rand({2, 3, 16, 16});
  auto s1 = d->forward(x).abs().max().item<double>();
  auto s2 = d->forward(x * 1000).abs().max().item<double>();
  EXPECT_GT(s2, 10 * s1);
}

TEST(Gan, LossesFiniteAtInitialization) {
  Gan gan(tiny(), 1);
  PerceptualExtractor ex;
  auto in = inputs(2, 8, 2, 9);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  for (int level = 1; level <= 3; ++level) {
    auto fake = gan->generate(level, in.rgb, in.latent, in.edited);
    auto g = gen_loss(level, as_critic(gan->discriminator()), fake, in.edited, ex);
    auto d = disc_loss(as_critic(gan->discriminator()), fake, in.edited, 10.0, gen);
    EXPECT_TRUE(std::isfinite(g.total.item<double>()));
    EXPECT_TRUE(std::isfinite(d.total.item<double>()));
  }
}

TEST(LevelSchedule, ValidatesAndSamples) {
  LevelSchedule s;
  EXPECT_NO_THROW(s.validate());
  s.probs = {0.5, 0.5, 0.5};
  EXPECT_THROW(s.validate(), ConfigError);
  s.probs = {-0.1, 0.6, 0.5};
  EXPECT_THROW(s.validate(), ConfigError);
  s.probs = {0, 0, 1};
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(s.sample(rng), 3);
  s.probs = {0.2, 0.3, 0.5};
  std::array<int, 3> counts{};
  for (int i = 0; i < 10000; ++i) counts[s.sample(rng) - 1]++;
  EXPECT_NEAR(counts[0] / 1e4, 0.2, 0.02);
  EXPECT_NEAR(counts[2] / 1e4, 0.5, 0.02);
}

TEST(Gan, ParamGroupsCoverModule) {
  Gan gan(tiny(), 1);
  auto groups = gan->param_groups();
  ASSERT_EQ(groups.size(), 4u);
  size_t n = 0;
  for (auto& [_, ps] : groups) n += ps.size();
  EXPECT_EQ(n, gan->parameters().size());
}
