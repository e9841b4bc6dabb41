#include <gtest/gtest.h>

#include "skynet/skynet.hpp"

using namespace skynet;

namespace {

HardwareProfile small_profile() {
  HardwareProfile p;
  p.macs_per_cycle = 64;
  p.clock_mhz = 100;
  p.bytes_per_cycle = 8;
  return p;
}

}  // namespace

TEST(EstimateLayer, PwMacs) {
  const auto est = estimate_layer(LayerSpec::pw(8), {4, 2, 2}, small_profile());
  EXPECT_EQ(est.macs, 128u);
  EXPECT_EQ(estimate_layer(LayerSpec::dw(), {4, 2, 2}, small_profile()).macs, 9u * 16);
  EXPECT_EQ(estimate_layer(LayerSpec::pool(), {4, 2, 2}, small_profile()).macs, 0u);
}

TEST(EstimateLayer, RooflineFormula) {
  const auto p = small_profile();
  const auto est = estimate_layer(LayerSpec::pw(8), {4, 2, 2}, p);
  // bytes: weights 32*4 + activations (16+32)*4
  EXPECT_EQ(est.weight_bytes, 128u);
  EXPECT_EQ(est.bytes_moved, 128u + 192u);
  const double expect = std::max(128.0 / 64.0, 320.0 / 8.0) / (100.0 * 1e3);
  EXPECT_DOUBLE_EQ(est.latency_ms, expect);
  EXPECT_EQ(est.resources.at(kComputeUnits), 64.0);
  EXPECT_EQ(est.resources.at(kOnchipMemoryBytes), 128.0 + 2 * 192.0);
}

TEST(EstimateLayer, MinimalConvHasPositiveLatency) {
  for (auto l : {LayerSpec::dw(), LayerSpec::pw(1)})
    EXPECT_GT(estimate_layer(l, {1, 2, 2}, small_profile()).latency_ms, 0.0);
  EXPECT_THROW(estimate_layer(LayerSpec::pool(), {1, 3, 2}, small_profile()), ShapeError);
  EXPECT_THROW(estimate_layer(LayerSpec::concat(0), {1, 2, 2}, small_profile()), DomainError);
}

TEST(EstimateLayer, UnknownKindIsDomainError) {
  LayerTrace t{"x", LayerSpec{static_cast<LayerKind>(99)}, 0, {1, 2, 2}, {1, 2, 2}};
  EXPECT_THROW(estimate_layer(t, small_profile()), DomainError);
}

TEST(EstimateLayer, DoublingHeightDoublesComputeTerm) {
  auto p = small_profile();
  p.bytes_per_cycle = 1e9;  // make compute the binding term
  for (auto l : {LayerSpec::dw(), LayerSpec::pw(32)}) {
    const auto a = estimate_layer(l, {16, 8, 8}, p), b = estimate_layer(l, {16, 16, 8}, p);
    EXPECT_EQ(b.macs, 2 * a.macs);
    EXPECT_DOUBLE_EQ(b.latency_ms, 2 * a.latency_ms);
  }
}

TEST(EstimateLayer, OverheadAddsToMemoryTerm) {
  auto p = small_profile();
  const auto base = estimate_layer(LayerSpec::relu6(), {4, 2, 2}, p);
  p.overhead_cycles[LayerKind::ReLU6] = 1000;
  const auto slow = estimate_layer(LayerSpec::relu6(), {4, 2, 2}, p);
  EXPECT_DOUBLE_EQ(slow.latency_ms - base.latency_ms, 1000.0 / (100.0 * 1e3));
}

TEST(EstimateNet, MacsMatchPerLayerSum) {
  // Hand sum over SkyNet C at 160x320: bundle = 9*Cin*HW + Cin*Cout*HW.
  std::uint64_t macs = 0;
  std::uint64_t cin = 3, h = 160, w = 320;
  const std::uint64_t widths[] = {48, 96, 192, 384, 512};
  for (int s = 0; s < 5; ++s) {
    macs += 9 * cin * h * w + cin * widths[s] * h * w;
    cin = widths[s];
    if (s < 3) h /= 2, w /= 2;
  }
  const std::uint64_t head_in = 512 + 768;
  macs += 9 * head_in * h * w + head_in * 96 * h * w + 96 * 10 * h * w;
  EXPECT_EQ(estimate_net(build_skynet(Variant::C), HardwareProfile{}).macs, macs);
}

TEST(EstimateNet, SumsLatencyAndPeaksActivations) {
  NetSpec net;
  net.input_shape = {3, 8, 8};
  net.bundles = {skynet_bundle(8)};
  net.head = {LayerSpec::pw(10)};
  const auto p = small_profile();
  double lat = 0;
  std::uint64_t peak = 0, weights = 0;
  for (const auto& t : infer_shapes(net)) {
    const auto e = estimate_layer(t, p);
    lat += e.latency_ms;
    peak = std::max(peak, e.activation_bytes);
    weights += e.weight_bytes;
  }
  const auto est = estimate_net(net, p);
  EXPECT_DOUBLE_EQ(est.latency_ms, lat);
  EXPECT_EQ(est.activation_bytes, peak);
  EXPECT_EQ(est.weight_bytes, weights);
  EXPECT_EQ(est.weight_bytes, 4 * count_params(net).total());
}

TEST(EstimateNet, FasterProfileNeverSlower) {
  auto p = small_profile();
  auto fast = p;
  fast.macs_per_cycle *= 2;
  for (auto v : {Variant::A, Variant::B, Variant::C}) {
    const auto net = build_skynet(v, 64, 128);
    EXPECT_LE(estimate_net(net, fast).latency_ms, estimate_net(net, p).latency_ms);
  }
}

TEST(EstimateNet, RejectsInvalidNet) {
  auto net = build_skynet(Variant::A);
  net.bundles[0].layers.clear();
  EXPECT_THROW(estimate_net(net, HardwareProfile{}), ValidationError);
}

TEST(WithinBudget, StrictInequality) {
  CostEstimate est;
  est.resources = {{kComputeUnits, 0.0}, {kOnchipMemoryBytes, 0.0}};
  const std::map<std::string, double> caps{{kComputeUnits, 1.0}, {kOnchipMemoryBytes, 1.0}};
  EXPECT_TRUE(within_budget(est, caps));
  est.resources[kComputeUnits] = 1.0;
  EXPECT_FALSE(within_budget(est, caps));
  est.resources[kComputeUnits] = 1.0 + 1e-9;
  EXPECT_FALSE(within_budget(est, caps));
}

TEST(WithinBudget, MissingComponentIsDomainError) {
  CostEstimate est;
  est.resources = {{kComputeUnits, 0.0}};
  EXPECT_THROW(within_budget(est, {{kComputeUnits, 1.0}, {kOnchipMemoryBytes, 1.0}}), DomainError);
  est.resources[kOnchipMemoryBytes] = 0.0;
  EXPECT_THROW(within_budget(est, {{kComputeUnits, 1.0}}), DomainError);
}

TEST(Profile, JsonRoundTripAndValidation) {
  auto p = small_profile();
  p.overhead_cycles[LayerKind::MaxPool2] = 7;
  EXPECT_EQ(profile_from_json(nlohmann::json::parse(profile_to_json(p).dump())), p);
  auto j = nlohmann::json::parse(profile_to_json(p).dump());
  j["clock_mhz"] = 0;
  EXPECT_THROW(profile_from_json(j), DomainError);
  j = nlohmann::json::parse(profile_to_json(p).dump());
  j["overhead_cycles"]["warp"] = 3;
  EXPECT_THROW(profile_from_json(j), DomainError);
}

TEST(CostModel, PerBundleFixture) {
  const auto model = cost_model_from_json(nlohmann::json{{"model", "per_bundle"}, {"ms_per_bundle", 10.0}});
  EXPECT_EQ(model.profile(), nullptr);
  EXPECT_DOUBLE_EQ(model(build_skynet(Variant::C)).latency_ms, 50.0);
  EXPECT_THROW(cost_model_from_json(nlohmann::json{{"model", "per_bundle"}, {"ms_per_bundle", 0.0}}), DomainError);
}
