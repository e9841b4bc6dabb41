#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace skynet;
using skynet::testing::random_tensor;

TEST(Backward, PwIdentityPassesGradient) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 2, 2}, rng), g = random_tensor({3, 2, 2}, rng);
  Tensor<double> w({3, 3});
  for (std::size_t c = 0; c < 3; ++c) w(c, c) = 1;
  EXPECT_EQ(pw_conv1_backward(x, w, g).input, g);
}

TEST(Backward, Relu6Regions) {
  Tensor<double> x({2}, std::vector<double>{3.0, 7.0}), g({2}, std::vector<double>{2.5, 2.5});
  EXPECT_EQ(relu6_backward(x, g).values(), (std::vector<double>{2.5, 0.0}));
}

TEST(Backward, MaxPoolRoutesToFirstMaximum) {
  Tensor<double> x({1, 2, 2}, std::vector<double>{5, 5, 1, 5}), g({1, 1, 1}, 3.0);
  EXPECT_EQ(maxpool2_backward(x, g).values(), (std::vector<double>{3, 0, 0, 0}));
}

TEST(Backward, RejectsMisshapenGradient) {
  Tensor<double> x({2, 4, 4}), w({2, 3, 3});
  EXPECT_THROW(dw_conv3_backward(x, w, Tensor<double>({2, 4, 2})), ShapeError);
}

TEST(FiniteDiff, SumGivesOnes) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3}, rng);
  auto g = finite_diff_grad<double>(
      [](const Tensor<double>& v) {
        double s = 0;
        for (double e : v.data()) s += e;
        return s;
      },
      x, 1e-5);
  for (double e : g.data()) EXPECT_NEAR(e, 1.0, 1e-9);
}

TEST(FiniteDiff, HalfSquaredNormGivesX) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({4, 2}, rng);
  auto g = finite_diff_grad<double>(
      [](const Tensor<double>& v) {
        double s = 0;
        for (double e : v.data()) s += 0.5 * e * e;
        return s;
      },
      x, 1e-5);
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(g[k], x[k], 1e-9);
}

TEST(FiniteDiff, SumOfRelu6IsZeroOrOneAwayFromKinks) {
  Tensor<double> x({6}, std::vector<double>{-1.0, 0.5, 3.0, 5.9, 6.5, 10.0});
  auto g = finite_diff_grad<double>(
      [](const Tensor<double>& v) {
        const auto y = relu6(v);
        double s = 0;
        for (double e : y.data()) s += e;
        return s;
      },
      x, 1e-5);
  const std::vector<double> expect{0, 1, 1, 1, 0, 0};
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(g[k], expect[k], 1e-8);
  EXPECT_THROW(finite_diff_grad<double>([](const Tensor<double>&) { return 0.0; }, x, 0.0), DomainError);
}

TEST(GradCheck, EveryOpWithinTolerance) {
  for (std::uint64_t seed : {0u, 17u, 99u}) {
    const auto results = run_gradcheck(seed, 5);
    EXPECT_EQ(results.size(), 16u);
    for (const auto& r : results) {
      EXPECT_TRUE(r.passed) << r.op << " seed " << seed << " err " << r.max_rel_error;
      EXPECT_EQ(r.trials, 5u);
    }
  }
}

// Whole-network reverse pass against finite differences through a small
// bypassed network with random batch-norm statistics.
TEST(NetworkBackward, MatchesFiniteDifferences) {
  NetSpec net;
  net.input_shape = {3, 8, 8};
  net.bundles = {skynet_bundle(4), skynet_bundle(6), skynet_bundle(8)};
  net.pool_after = {0, 1};
  net.bypass = Bypass{1, 3};
  net.head = fused_head(5);
  ASSERT_TRUE(validate(net).empty());
  auto ws = init_weights<double>(net, 5, WeightInit::FanIn);
  std::mt19937_64 rng(6);
  for (auto& [name, t] : ws) {
    if (name.ends_with(".beta") || name.ends_with(".mean"))
      for (auto& v : t.data()) v = 0.2 * (2 * unit_uniform(rng) - 1);
    if (name.ends_with(".gamma") || name.ends_with(".var"))
      for (auto& v : t.data()) v = 0.5 + unit_uniform(rng);
  }
  auto x = random_tensor(net.input_shape, rng, 0.0, 1.0);
  auto tape = forward_tape(net, ws, x);
  auto r = random_tensor(tape.output.shape(), rng);
  auto loss = [&](const WeightSet<double>& w, const Tensor<double>& in) {
    auto y = forward(net, w, in);
    double s = 0;
    for (std::size_t k = 0; k < y.size(); ++k) s += y[k] * r[k];
    return s;
  };
  const auto grads = backward_net(ws, tape, r);

  auto gx = finite_diff_grad<double>([&](const Tensor<double>& v) { return loss(ws, v); }, x, 1e-5);
  EXPECT_LE((max_relative_error<double>(grads.input.data(), gx.data())), 1e-4);

  for (const std::string name : {"b0.l0.weight", "b1.l3.weight", "head.l6.weight", "b2.l1.gamma", "head.l4.beta"}) {
    auto g = finite_diff_grad<double>(
        [&](const Tensor<double>& v) {
          auto w = ws;
          w.set(name, v);
          return loss(w, x);
        },
        ws.at(name), 1e-5);
    EXPECT_LE((max_relative_error<double>(grads.weights.at(name).data(), g.data())), 1e-4) << name;
  }
}

TEST(NetworkBackward, SgdStepLeavesRunningStatsAlone) {
  NetSpec net;
  net.input_shape = {3, 4, 4};
  net.bundles = {skynet_bundle(4)};
  net.head = {LayerSpec::pw(10)};
  auto ws = init_weights<double>(net, 1, WeightInit::FanIn);
  std::mt19937_64 rng(2);
  auto tape = forward_tape(net, ws, random_tensor(net.input_shape, rng));
  auto grads = backward_net(ws, tape, random_tensor(tape.output.shape(), rng));
  auto before = ws;
  sgd_step(ws, grads.weights, 0.1);
  EXPECT_EQ(ws.at("b0.l1.mean"), before.at("b0.l1.mean"));
  EXPECT_EQ(ws.at("b0.l1.var"), before.at("b0.l1.var"));
  EXPECT_NE(ws.at("b0.l3.weight"), before.at("b0.l3.weight"));
}
