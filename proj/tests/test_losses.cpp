#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "swiftsr/losses.hpp"

using namespace swiftsr;
using oracle::random_tensor;

namespace {

// Squared distance per feature map over W*H, written as nested loops.
double content_oracle(const Tensor& a, const Tensor& b, bool mean) {
  const Shape s = a.shape();
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double map = 0.0;
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) {
          const double d = double(a.at(n, c, y, x)) - b.at(n, c, y, x);
          map += d * d;
        }
      total += map / double(s.w * s.h);
    }
  return mean ? total / double(s.n * s.c) : total;
}

}  // namespace

TEST(ContentLoss, MatchesLoopOracle) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Tensor a = random_tensor({2, 3, 5, 7}, seed), b = random_tensor({2, 3, 5, 7}, seed + 50);
    EXPECT_NEAR(content_loss(a, b), content_oracle(a, b, true), 1e-6);
    EXPECT_NEAR(content_loss(a, b, ContentNorm::Literal), content_oracle(a, b, false), 1e-6);
  }
  const Tensor a = random_tensor({1, 2, 3, 3}, 9);
  EXPECT_EQ(content_loss(a, a), 0.0);
  EXPECT_THROW(content_loss(a, Tensor(Shape{1, 2, 3, 4})), ShapeError);
}

TEST(ContentLoss, GradientMatchesDifferences) {
  for (ContentNorm norm : {ContentNorm::Mean, ContentNorm::Literal}) {
    const Tensor hr = random_tensor({2, 2, 3, 4}, 3);
    Tensor sr = random_tensor({2, 2, 3, 4}, 4);
    const Tensor g = content_loss_grad(hr, sr, norm);
    auto loss = [&] { return content_loss(hr, sr, norm); };
    EXPECT_LT(oracle::finite_difference(sr, g, loss, 1e-2).max_rel, 1e-2);
  }
}

TEST(AdversarialLoss, ClosedForms) {
  const float half[] = {0.5f};
  EXPECT_NEAR(adversarial_loss(half), 0.693147, 1e-6);
  EXPECT_NEAR(adversarial_loss(half), -std::log(0.5), 1e-12);
  const float batch[] = {0.5f, 0.25f, 1.0f};
  EXPECT_NEAR(adversarial_loss(batch), std::log(2.0) + std::log(4.0), 1e-6);
  EXPECT_NEAR(adversarial_loss(batch, AdversarialReduction::Mean), (std::log(2.0) + std::log(4.0)) / 3, 1e-6);
  EXPECT_THROW(adversarial_loss(std::span<const float>{}), Error);
}

TEST(AdversarialLoss, GradientMatchesDifferences) {
  for (auto red : {AdversarialReduction::Sum, AdversarialReduction::Mean}) {
    Tensor p = random_tensor({4, 1, 1, 1}, 5, 0.2f, 0.9f);
    const Tensor g = adversarial_loss_grad(p, red);
    auto loss = [&] { return adversarial_loss(p.data(), red); };
    EXPECT_LT(oracle::finite_difference(p, g, loss, 1e-3).max_rel, 1e-2);
  }
}

TEST(PerceptualLoss, IsContentPlusWeightedAdversarial) {
  EXPECT_NEAR(perceptual_loss(0.5, 2.0), 0.502, 1e-12);
  EXPECT_EQ(perceptual_loss(1.25, 3.0, 0.0), 1.25);
  EXPECT_NEAR(perceptual_loss(1.0, 1.0, 0.5), 1.5, 1e-12);
  EXPECT_THROW(perceptual_loss(std::nan(""), 1.0), NonFiniteError);
}

TEST(DiscriminatorLoss, ClosedFormsAndGradients) {
  const float half[] = {0.5f};
  EXPECT_NEAR(discriminator_loss(half, half), 1.386294, 1e-6);
  const float real[] = {0.9f, 0.6f}, fake[] = {0.1f, 0.3f};
  const double want = (-std::log(0.9) - std::log(0.9) - std::log(0.6) - std::log(0.7)) / 2.0;
  EXPECT_NEAR(discriminator_loss(real, fake), want, 1e-6);
  const float one[] = {0.5f};
  EXPECT_THROW(discriminator_loss(real, one), Error);

  Tensor r = random_tensor({3, 1, 1, 1}, 6, 0.2f, 0.8f), f = random_tensor({3, 1, 1, 1}, 7, 0.2f, 0.8f);
  auto loss = [&] { return discriminator_loss(r.data(), f.data()); };
  EXPECT_LT(oracle::finite_difference(r, discriminator_loss_grad_real(r), loss, 1e-3).max_rel, 1e-2);
  EXPECT_LT(oracle::finite_difference(f, discriminator_loss_grad_fake(f), loss, 1e-3).max_rel, 1e-2);
}

TEST(FeatureExtractor, IdentityTapIsTheImage) {
  FeatureExtractor fx = FeatureExtractor::identity();
  const Tensor x = random_tensor({1, 3, 4, 4}, 8);
  EXPECT_EQ(fx.extract(x), x);
}

TEST(FeatureExtractor, ContentGradientFlowsToImageOnly) {
  ExtractorConfig cfg;
  cfg.channels = {6, 8};
  cfg.strides = {1, 2};
  cfg.tap_block = 2;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    FeatureExtractor fx = FeatureExtractor::reference(seed, cfg);
    fx.graph().zero_grad();
    const Tensor hr = random_tensor({2, 3, 6, 6}, seed + 10, 0.0f, 1.0f);
    Tensor sr = random_tensor({2, 3, 6, 6}, seed + 20, 0.0f, 1.0f);
    auto [value, g] = content_loss_with_grad(fx, hr, sr);
    EXPECT_NEAR(value, content_loss(fx.extract(hr), fx.extract(sr)), 1e-9);
    auto loss = [&] { return content_loss(fx.extract(hr), fx.extract(sr)); };
    const auto r = oracle::finite_difference_kink_aware(sr, g, loss, 1e-3, 48, 1e-2);
    EXPECT_LT(r.max_rel, 1e-2) << "seed " << seed;
    EXPECT_GT(r.checked, r.skipped);
    for (auto& p : fx.graph().trainable()) {
      for (float v : p.grad->data()) ASSERT_EQ(v, 0.0f) << p.name;
    }
  }
}
