#include <gtest/gtest.h>

#include "oracles.hpp"
#include "quant_fixture.hpp"

using namespace skynet;

TEST(ChooseFormat, ReluSixRangeAtNineBits) {
  const auto c = choose_format(0, 6, 9, false);
  EXPECT_EQ(c.format.frac_bits, 6);
  EXPECT_FALSE(c.degenerate_range);
  EXPECT_GE(c.format.max_value(), 6.0);
}

TEST(ChooseFormat, UnitRangeAtElevenBits) {
  EXPECT_EQ(choose_format(-1, 1, 11, true).format.frac_bits, 10);
  EXPECT_EQ(choose_format(-0.3, 0.2, 11, true).format.frac_bits, 11);
}

TEST(ChooseFormat, ZeroRangeIsDegenerate) {
  const auto c = choose_format(0, 0, 8, true);
  EXPECT_TRUE(c.degenerate_range);
  EXPECT_EQ(c.format.frac_bits, 7);
  EXPECT_THROW(choose_format(-1, 1, 9, false), DomainError);
  EXPECT_THROW(choose_format(1, 0, 9, true), DomainError);
}

TEST(Quantize, OnGridValuesRoundTripExactly) {
  const FixedPointFormat fmt{9, 6, false};
  for (std::int64_t q = fmt.qmin(); q <= fmt.qmax(); ++q) {
    const double v = std::ldexp(static_cast<double>(q), -6);
    ASSERT_EQ(quantize_scalar(v, fmt), q);
  }
  EXPECT_LE(std::abs(std::ldexp(static_cast<double>(quantize_scalar(6.0, fmt)), -6) - 6.0), 1.0 / 128);
}

TEST(Quantize, SaturatesAndRoundsHalfEven) {
  const FixedPointFormat fmt{8, 0, true};
  EXPECT_EQ(quantize_scalar(1000, fmt), 127);
  EXPECT_EQ(quantize_scalar(-1000, fmt), -128);
  EXPECT_EQ(quantize_scalar(2.5, fmt), 2);
  EXPECT_EQ(quantize_scalar(3.5, fmt), 4);
  EXPECT_EQ(quantize_scalar(-2.5, fmt), -2);
  EXPECT_THROW(quantize(Tensor<double>({1}), FixedPointFormat{17, 0, true}), DomainError);
}

TEST(Quantize, RandomScalarsWithinHalfStep) {
  std::mt19937_64 rng(4);
  for (const FixedPointFormat fmt : {FixedPointFormat{9, 6, false}, FixedPointFormat{11, 10, true}}) {
    std::uniform_real_distribution<double> d(fmt.min_value(), fmt.max_value());
    for (int k = 0; k < 10000; ++k) {
      const double x = d(rng);
      const double back = std::ldexp(static_cast<double>(quantize_scalar(x, fmt)), -fmt.frac_bits);
      ASSERT_LE(std::abs(back - x), fmt.step() / 2) << x;
    }
  }
}

TEST(QuantizedForward, ZeroWeightsGiveZeroOutput) {
  NetSpec net;
  net.input_shape = {3, 8, 8};
  net.bundles = {skynet_bundle(4), skynet_bundle(8)};
  net.pool_after = {0};
  net.head = {LayerSpec::pw(10)};
  const auto ws = init_weights<double>(net, 1, WeightInit::Zero);
  std::mt19937_64 rng(2);
  const auto y = quantized_forward(net, ws, skynet::testing::random_tensor(net.input_shape, rng, 0, 1));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(QuantizedForward, SmallNetworkTracksFloat) {
  NetSpec net;
  net.input_shape = {3, 16, 16};
  net.bundles = {skynet_bundle(8), skynet_bundle(12), skynet_bundle(16)};
  net.pool_after = {0, 1};
  net.bypass = Bypass{1, 3};
  net.head = fused_head(8);
  auto ws = init_weights<double>(net, 3, WeightInit::FanIn);
  std::mt19937_64 rng(3);
  const auto x = skynet::testing::random_tensor(net.input_shape, rng, 0, 1);
  const auto f = forward(net, ws, x);
  const auto q = quantized_forward(net, ws, x);
  ASSERT_EQ(f.shape(), q.shape());
  EXPECT_LT(skynet::testing::quant_mean_abs_deviation(f, q), 0.05);
  EXPECT_THROW(quantized_forward(net, ws, Tensor<double>({3, 8, 8})), ShapeError);
}

TEST(QuantizedForward, PinnedFixtureAndDeterminism) {
  const auto fx = skynet::testing::make_quant_fixture();
  const auto model = quantize_model(fx.net, fx.weights);
  const auto q1 = run_quantized(model, fx.image);
  const auto q2 = run_quantized(model, fx.image);
  EXPECT_EQ(q1, q2);
  const auto f = forward(fx.net, fx.weights, fx.image);
  EXPECT_NEAR(skynet::testing::quant_mean_abs_deviation(f, q1), skynet::testing::kPinnedQuantMeanAbsDeviation,
              skynet::testing::kPinnedQuantTolerance);
}
