#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "swiftsr/layers.hpp"
#include "swiftsr/ops.hpp"

using namespace swiftsr;
using oracle::random_tensor;

namespace {

constexpr double kGradTol = 1e-2;
constexpr std::uint64_t kSeeds[] = {11, 22, 33, 44, 55};

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], tol) << "at " << i;
}

ConvParams conv_params(Shape w, std::size_t stride, std::uint64_t seed, bool bias = true) {
  ConvParams p;
  p.weight = random_tensor(w, seed);
  p.has_bias = bias;
  if (bias) p.bias = random_tensor(vec_shape(w.n), seed + 1);
  p.stride = stride;
  p.padding = w.h / 2;
  return p;
}

}  // namespace

// --- forward oracles -------------------------------------------------------

TEST(Conv2d, MatchesDirectLoopAcrossShapes) {
  struct Case { Shape x; std::size_t out, k, stride; };
  const Case cases[] = {{{2, 3, 7, 9}, 4, 3, 1}, {{1, 5, 8, 8}, 2, 3, 2}, {{2, 4, 6, 5}, 3, 1, 1},
                        {{1, 3, 12, 11}, 2, 9, 1}, {{1, 2, 5, 5}, 3, 5, 2},
                        // few outputs per input channel; the last one spans several row chunks
                        {{2, 16, 9, 7}, 2, 3, 1}, {{1, 24, 6, 5}, 3, 9, 1}, {{1, 24, 160, 128}, 3, 9, 1}};
  std::uint64_t seed = 1;
  for (const auto& c : cases) {
    const Tensor x = random_tensor(c.x, seed++);
    const ConvParams p = conv_params({c.out, c.x.c, c.k, c.k}, c.stride, seed++);
    expect_close(conv2d(x, p), oracle::conv2d_direct(x, p.weight, &p.bias, c.stride, c.k / 2), 1e-4);
  }
}

TEST(Conv2d, RejectsChannelMismatchAndEmptyOutput) {
  const ConvParams p = conv_params({4, 3, 3, 3}, 1, 1);
  EXPECT_THROW(conv2d(Tensor(Shape{1, 2, 5, 5}), p), ShapeError);
  ConvParams big = conv_params({1, 1, 9, 9}, 1, 2);
  big.padding = 0;
  EXPECT_THROW(conv2d(Tensor(Shape{1, 1, 4, 4}), big), ShapeError);
}

TEST(Conv2d, IdentityKernelIsIdentity) {
  ConvParams p;
  p.weight = Tensor(Shape{1, 1, 3, 3});
  p.weight.at(0, 0, 1, 1) = 1.0f;
  p.padding = 1;
  const Tensor x = random_tensor({2, 1, 6, 7}, 5);
  EXPECT_EQ(conv2d(x, p), x);
}

TEST(DepthwiseConv, EachChannelUsesItsOwnFilter) {
  for (std::size_t stride : {1u, 2u}) {
    const Tensor x = random_tensor({2, 4, 9, 7}, 3 + stride);
    const ConvParams p = conv_params({4, 1, 3, 3}, stride, 9 + stride);
    expect_close(depthwise_conv2d(x, p), oracle::depthwise_direct(x, p.weight, &p.bias, stride, 1), 1e-5);
  }
}

TEST(DepthwiseConv, MatchesDirectLoopOnWideRows) {
  // Rows wide enough for the blocked interior plus scalar edges and tails.
  struct Case { Shape x; std::size_t k, stride, pad; };
  const Case cases[] = {{{1, 3, 5, 40}, 3, 1, 1},  {{2, 2, 11, 53}, 9, 1, 4}, {{1, 2, 7, 37}, 5, 1, 0},
                        {{1, 2, 4, 5}, 9, 1, 4},   {{1, 3, 9, 45}, 3, 2, 1}};
  std::uint64_t seed = 40;
  for (const auto& c : cases) {
    const Tensor x = random_tensor(c.x, seed++);
    ConvParams p = conv_params({c.x.c, 1, c.k, c.k}, c.stride, seed++);
    p.padding = c.pad;
    expect_close(depthwise_conv2d(x, p), oracle::depthwise_direct(x, p.weight, &p.bias, c.stride, c.pad), 1e-5);
  }
}

TEST(DepthwiseConv, BackwardIsTheAdjointOnWideRows) {
  // y is linear in x and in w, so <y, gy> = <x, gx> = <w, gw> exactly.
  auto dot = [](const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
    return s;
  };
  std::uint64_t seed = 70;
  for (std::size_t k : {3u, 9u}) {
    const Tensor x = random_tensor({2, 3, 13, 61}, seed++);
    const ConvParams p = conv_params({3, 1, k, k}, 1, seed++, false);
    const Tensor y = depthwise_conv2d(x, p);
    const Tensor gy = random_tensor(y.shape(), seed++);
    Tensor gw(p.weight.shape());
    const Tensor gx = depthwise_conv2d_backward(x, p, gy, &gw, nullptr);
    const double ref = dot(y, gy);
    EXPECT_NEAR(dot(x, gx), ref, 1e-4 * std::abs(ref) + 1e-3) << "k " << k;
    EXPECT_NEAR(dot(p.weight, gw), ref, 1e-4 * std::abs(ref) + 1e-3) << "k " << k;
  }
}

TEST(DepthwiseConv, SeparableEqualsDepthwiseThenPointwise) {
  const Tensor x = random_tensor({1, 3, 6, 6}, 4);
  const ConvParams dw = conv_params({3, 1, 3, 3}, 1, 5);
  ConvParams pw = conv_params({5, 3, 1, 1}, 1, 6);
  const Tensor mid = oracle::depthwise_direct(x, dw.weight, &dw.bias, 1, 1);
  expect_close(ds_conv2d(x, dw, pw), oracle::conv2d_direct(mid, pw.weight, &pw.bias, 1, 0), 1e-5);
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  BatchNormState st{Tensor(vec_shape(1), 1.0f), Tensor(vec_shape(1), 0.0f), Tensor(vec_shape(1), 2.0f),
                    Tensor(vec_shape(1), 1.0f)};
  const Tensor x(Shape{1, 1, 1, 3}, std::vector<float>{1.0f, 2.0f, 4.0f});
  const Tensor y = batch_norm(x, st, Mode::Eval);
  const double s = std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -1.0 / s, 1e-6);
  EXPECT_NEAR(y[1], 0.0, 1e-7);
  EXPECT_NEAR(y[2], 2.0 / s, 1e-6);
}

TEST(BatchNorm, TrainNormalizesAndUpdatesRunningStats) {
  BatchNormState st{Tensor(vec_shape(2), 1.0f), Tensor(vec_shape(2), 0.0f), Tensor(vec_shape(2), 0.0f),
                    Tensor(vec_shape(2), 1.0f)};
  const Tensor x = random_tensor({4, 2, 3, 3}, 7, -2.0f, 5.0f);
  const Tensor y = batch_norm(x, st, Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, q = 0, xm = 0, xq = 0;
    const double n = 36;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) {
        const double v = y[(b * 2 + c) * 9 + i], u = x[(b * 2 + c) * 9 + i];
        m += v, q += v * v, xm += u, xq += u * u;
      }
    m /= n, xm /= n;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(q / n - m * m, 1.0, 1e-3);
    const double unbiased = (xq / n - xm * xm) * n / (n - 1);
    EXPECT_NEAR(st.running_mean[c], 0.1 * xm, 1e-5);
    EXPECT_NEAR(st.running_var[c], 0.9 + 0.1 * unbiased, 1e-4);
  }
  EXPECT_THROW(batch_norm(Tensor(Shape{1, 2, 1, 1}), st, Mode::Train), ShapeError);
}

TEST(Activations, PointValues) {
  const Tensor x(Shape{1, 2, 1, 2}, std::vector<float>{-2.0f, 3.0f, -1.0f, 7.0f});
  PReluParams p{Tensor(Shape{2, 1, 1, 1}, std::vector<float>{0.25f, 0.5f})};
  const Tensor y = prelu(x, p);
  EXPECT_EQ(y[0], -0.5f);
  EXPECT_EQ(y[1], 3.0f);
  EXPECT_EQ(y[2], -0.5f);
  EXPECT_EQ(y[3], 7.0f);
  EXPECT_EQ(leaky_relu(x, 0.2f)[0], -0.4f);
  const Tensor r = relu6(x);
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 3.0f);
  EXPECT_EQ(r[3], 6.0f);
  const Tensor s = sigmoid(Tensor(Shape{1, 1, 1, 3}, std::vector<float>{0.0f, -200.0f, 200.0f}));
  EXPECT_EQ(s[0], 0.5f);
  EXPECT_EQ(s[1], kSigmoidClamp);
  EXPECT_EQ(s[2], 1.0f - kSigmoidClamp);
}

// --- pixel shuffle ---------------------------------------------------------

TEST(PixelShuffle, DefinitionalMapping) {
  const Tensor x(Shape{1, 4, 1, 1}, std::vector<float>{1, 2, 3, 4});
  const Tensor y = pixel_shuffle(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.at(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(y.at(0, 0, 0, 1), 2.0f);
  EXPECT_EQ(y.at(0, 0, 1, 0), 3.0f);
  EXPECT_EQ(y.at(0, 0, 1, 1), 4.0f);
}

TEST(PixelShuffle, MatchesIndexFormula) {
  const std::size_t r = 3;
  const Tensor x = random_tensor({2, 2 * r * r, 3, 4}, 8);
  const Tensor y = pixel_shuffle(x, r);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t w = 0; w < 4; ++w)
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < r; ++j)
              ASSERT_EQ(y.at(n, c, h * r + i, w * r + j), x.at(n, c * r * r + i * r + j, h, w));
}

TEST(PixelShuffle, IsABijection) {
  for (std::size_t r : {2u, 3u, 4u}) {
    const Tensor x = random_tensor({2, 3 * r * r, 5, 3}, r);
    EXPECT_EQ(pixel_unshuffle(pixel_shuffle(x, r), r), x);
    const Tensor z = random_tensor({1, 2, 4 * r, 2 * r}, r + 10);
    EXPECT_EQ(pixel_shuffle(pixel_unshuffle(z, r), r), z);
  }
  EXPECT_THROW(pixel_shuffle(Tensor(Shape{1, 3, 2, 2}), 2), ShapeError);
}

// --- pooling / linear ------------------------------------------------------

TEST(AdaptivePool, AveragesCoveringBins) {
  const Tensor x = random_tensor({1, 1, 7, 5}, 12);
  const Tensor y = adaptive_avg_pool(x, 3, 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t h0 = i * 7 / 3, h1 = ((i + 1) * 7 + 2) / 3;
      const std::size_t w0 = j * 5 / 2, w1 = ((j + 1) * 5 + 1) / 2;
      double s = 0;
      for (std::size_t a = h0; a < h1; ++a)
        for (std::size_t b = w0; b < w1; ++b) s += x.at(0, 0, a, b);
      EXPECT_NEAR(y.at(0, 0, i, j), s / double((h1 - h0) * (w1 - w0)), 1e-6);
    }
}

TEST(Linear, MatchesDotProducts) {
  const Tensor x = random_tensor({3, 2, 2, 2}, 13);
  const Tensor w = random_tensor({4, 8, 1, 1}, 14), b = random_tensor(vec_shape(4), 15);
  const Tensor y = linear(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{3, 4, 1, 1}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t o = 0; o < 4; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < 8; ++i) s += double(w[o * 8 + i]) * x[n * 8 + i];
      EXPECT_NEAR(y[n * 4 + o], s, 1e-5);
    }
}

// --- adjoints --------------------------------------------------------------

class Adjoint : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(Adjoint, Conv2dStride1) {
  Conv2d l("c", 3, 4, 3, 1);
  oracle::randomize(l, GetParam());
  EXPECT_LT(oracle::check_layer(l, random_tensor({2, 3, 5, 6}, GetParam()), Mode::Train, GetParam()).worst(), kGradTol);
}

TEST_P(Adjoint, Conv2dStride2Kernel5) {
  Conv2d l("c", 2, 3, 5, 2);
  oracle::randomize(l, GetParam());
  EXPECT_LT(oracle::check_layer(l, random_tensor({1, 2, 7, 6}, GetParam()), Mode::Train, GetParam()).worst(), kGradTol);
}

TEST_P(Adjoint, Conv2dPointwise) {
  Conv2d l("c", 4, 3, 1, 1);
  oracle::randomize(l, GetParam());
  EXPECT_LT(oracle::check_layer(l, random_tensor({2, 4, 3, 3}, GetParam()), Mode::Train, GetParam()).worst(), kGradTol);
}

TEST_P(Adjoint, DepthwiseSeparable) {
  for (std::size_t stride : {1u, 2u}) {
    DSConv2d l("ds", 3, 4, 3, stride);
    oracle::randomize(l, GetParam());
    EXPECT_LT(oracle::check_layer(l, random_tensor({2, 3, 6, 5}, GetParam()), Mode::Train, GetParam()).worst(),
              kGradTol);
  }
}

TEST_P(Adjoint, BatchNormTrainAndEval) {
  BatchNorm2d l("bn", 3);
  oracle::randomize(l, GetParam(), 0.5f, 1.5f);
  EXPECT_LT(oracle::check_layer(l, random_tensor({3, 3, 2, 3}, GetParam()), Mode::Train, GetParam()).worst(), kGradTol);
  EXPECT_LT(oracle::check_layer(l, random_tensor({2, 3, 2, 2}, GetParam()), Mode::Eval, GetParam()).worst(), kGradTol);
}

TEST_P(Adjoint, PRelu) {
  PRelu l("p", 3);
  oracle::randomize(l, GetParam(), 0.1f, 0.4f);
  Tensor x = random_tensor({2, 3, 3, 3}, GetParam());
  oracle::avoid_kinks(x, {0.0f}, 0.05f);
  EXPECT_LT(oracle::check_layer(l, x, Mode::Train, GetParam()).worst(), kGradTol);
}

TEST_P(Adjoint, LeakyReluRelu6Sigmoid) {
  Tensor x = random_tensor({2, 2, 3, 3}, GetParam(), -8.0f, 8.0f);
  oracle::avoid_kinks(x, {0.0f, 6.0f}, 0.05f);
  LeakyRelu lr("l", 0.2f);
  Relu6 r6("r");
  EXPECT_LT(oracle::check_layer(lr, x, Mode::Train, GetParam()).worst(), kGradTol);
  EXPECT_LT(oracle::check_layer(r6, x, Mode::Train, GetParam()).worst(), kGradTol);
  Sigmoid sg("s");
  EXPECT_LT(oracle::check_layer(sg, random_tensor({2, 1, 1, 1}, GetParam(), -3.0f, 3.0f), Mode::Train, GetParam())
                .worst(),
            kGradTol);
}

TEST_P(Adjoint, PixelShufflePoolLinear) {
  PixelShuffle ps("ps", 2);
  EXPECT_LT(oracle::check_layer(ps, random_tensor({1, 8, 2, 3}, GetParam()), Mode::Train, GetParam()).worst(), kGradTol);
  AdaptiveAvgPool pool("pool", 3, 2);
  EXPECT_LT(oracle::check_layer(pool, random_tensor({2, 2, 7, 5}, GetParam()), Mode::Train, GetParam()).worst(),
            kGradTol);
  Linear fc("fc", 12, 5);
  oracle::randomize(fc, GetParam());
  EXPECT_LT(oracle::check_layer(fc, random_tensor({3, 3, 2, 2}, GetParam()), Mode::Train, GetParam()).worst(), kGradTol);
}

TEST_P(Adjoint, ResidualBlock) {
  Residual blk("blk");
  blk.add<DSConv2d>("conv1", 3, 3, 3, 1);
  blk.add<BatchNorm2d>("bn1", 3);
  blk.add<DSConv2d>("conv2", 3, 3, 3, 1);
  oracle::randomize(blk, GetParam());
  EXPECT_LT(oracle::check_layer(blk, random_tensor({2, 3, 4, 4}, GetParam()), Mode::Train, GetParam()).worst(),
            kGradTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, Adjoint, ::testing::ValuesIn(kSeeds));

TEST(Adjoint, ParameterGradientsAccumulateAcrossBackwards) {
  Conv2d l("c", 2, 2, 3, 1);
  oracle::randomize(l, 3);
  const Tensor x = random_tensor({1, 2, 4, 4}, 4), r = random_tensor({1, 2, 4, 4}, 5);
  std::vector<ParamRef> ps;
  l.visit("", [&](ParamRef p) { ps.push_back(p); });
  l.forward(x, Pass::train());
  l.backward(r, true);
  const Tensor once = *ps[0].grad;
  l.backward(r, true);
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_FLOAT_EQ((*ps[0].grad)[i], 2.0f * once[i]);
  const Tensor twice = *ps[0].grad;
  l.backward(r, false);
  EXPECT_EQ(*ps[0].grad, twice);
}

TEST(Adjoint, BackwardWithoutForwardThrows) {
  Conv2d l("c", 2, 2, 3, 1);
  EXPECT_THROW(l.backward(Tensor(Shape{1, 2, 4, 4}), true), ShapeError);
  l.forward(Tensor(Shape{1, 2, 4, 4}), Pass::eval());
  EXPECT_THROW(l.backward(Tensor(Shape{1, 2, 4, 4}), true), ShapeError);
}

TEST(Adjoint, HarnessFlagsAPerturbedGradient) {
  Conv2d l("c", 2, 2, 3, 1);
  oracle::randomize(l, 9);
  Tensor x = random_tensor({1, 2, 4, 4}, 10);
  const Tensor r = random_tensor({1, 2, 4, 4}, 11);
  l.forward(x, Pass::train());
  Tensor gx = l.backward(r, false);
  for (float& v : gx.data()) v *= 1.05f;
  const auto res = oracle::finite_difference(x, gx, [&] { return oracle::dot(l.forward(x, Pass::eval()), r); });
  EXPECT_GT(res.max_rel, 0.04);
}
