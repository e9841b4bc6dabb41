#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "skynet/arch.hpp"
#include "skynet/grad.hpp"

// Compares every backward rule against central finite differences of the
// scalar probe L(x) = sum(r * op(x)) for a random cotangent r.

namespace skynet {

struct GradCheckResult {
  std::string op;
  std::size_t trials = 0;
  double max_rel_error = 0;
  bool passed = false;
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;

namespace detail {

inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(s);
  for (auto& v : t.data()) v = lo + (hi - lo) * unit_uniform(rng);
  return t;
}

inline double probe(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t k = 0; k < y.size(); ++k) s += y[k] * r[k];
  return s;
}

/// Keeps every value at least `gap` away from each kink.
inline void avoid_kinks(Tensor<double>& x, std::initializer_list<double> kinks, double gap, std::mt19937_64& rng,
                        double lo, double hi) {
  for (auto& v : x.data()) {
    auto near = [&] {
      for (double k : kinks)
        if (std::abs(v - k) < gap) return true;
      return false;
    };
    while (near()) v = lo + (hi - lo) * unit_uniform(rng);
  }
}

/// Re-draws each 2x2 window until its largest value leads the runner-up by `gap`.
inline void separate_pool_windows(Tensor<double>& x, double gap, std::mt19937_64& rng) {
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t i = 0; i < x.height(); i += 2)
      for (std::size_t j = 0; j < x.width(); j += 2) {
        for (;;) {
          double v[4] = {x(c, i, j), x(c, i, j + 1), x(c, i + 1, j), x(c, i + 1, j + 1)};
          std::sort(v, v + 4);
          if (v[3] - v[2] >= gap) break;
          x(c, i, j) = 2 * unit_uniform(rng) - 1, x(c, i, j + 1) = 2 * unit_uniform(rng) - 1;
          x(c, i + 1, j) = 2 * unit_uniform(rng) - 1, x(c, i + 1, j + 1) = 2 * unit_uniform(rng) - 1;
        }
      }
}

inline double compare(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& at,
                      const Tensor<double>& analytic) {
  const auto numeric = finite_diff_grad<double>(f, at, kGradCheckStep);
  return max_relative_error<double>(analytic.data(), numeric.data());
}

}  // namespace detail

/// One entry per (op, differentiated argument), each over `trials` seeded draws.
inline std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, std::size_t trials = 20) {
  using detail::compare;
  using detail::probe;
  using detail::random_tensor;
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> results;
  auto record = [&](const std::string& name, double err) {
    auto it = std::find_if(results.begin(), results.end(), [&](const auto& r) { return r.op == name; });
    if (it == results.end()) it = results.insert(results.end(), {name});
    ++it->trials;
    it->max_rel_error = std::max(it->max_rel_error, err);
  };
  using T = Tensor<double>;

  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t C = 2 + rng() % 3, H = 2 * (1 + rng() % 3), W = 2 * (1 + rng() % 3);
    const Shape s{C, H, W};

    {  // dw_conv3
      auto x = random_tensor(s, rng), w = random_tensor({C, 3, 3}, rng), r = random_tensor(s, rng);
      auto g = dw_conv3_backward(x, w, r);
      record("dw_conv3.input", compare([&](const T& v) { return probe(dw_conv3(v, w), r); }, x, g.input));
      record("dw_conv3.weights", compare([&](const T& v) { return probe(dw_conv3(x, v), r); }, w, g.weights));
    }
    {  // pw_conv1
      const std::size_t Co = 1 + rng() % 4;
      auto x = random_tensor(s, rng), w = random_tensor({Co, C}, rng), r = random_tensor({Co, H, W}, rng);
      auto g = pw_conv1_backward(x, w, r);
      record("pw_conv1.input", compare([&](const T& v) { return probe(pw_conv1(v, w), r); }, x, g.input));
      record("pw_conv1.weights", compare([&](const T& v) { return probe(pw_conv1(x, v), r); }, w, g.weights));
    }
    {  // batchnorm_infer
      auto x = random_tensor(s, rng), r = random_tensor(s, rng);
      BatchNormParams<double> bn{random_tensor({C}, rng, 0.5, 1.5).values(), random_tensor({C}, rng).values(),
                                 random_tensor({C}, rng).values(), random_tensor({C}, rng, 0.5, 1.5).values(),
                                 kDefaultBatchNormEps};
      auto g = batchnorm_backward(x, bn, r);
      record("batchnorm.input", compare([&](const T& v) { return probe(batchnorm_infer(v, bn), r); }, x, g.input));
      auto param = [&](std::vector<double> BatchNormParams<double>::*field, const std::vector<double>& grad,
                       const std::string& name) {
        const T at({C}, bn.*field);
        auto f = [&](const T& v) {
          auto p = bn;
          p.*field = v.values();
          return probe(batchnorm_infer(x, p), r);
        };
        record(name, compare(f, at, T({C}, grad)));
      };
      param(&BatchNormParams<double>::gamma, g.gamma, "batchnorm.gamma");
      param(&BatchNormParams<double>::beta, g.beta, "batchnorm.beta");
      param(&BatchNormParams<double>::mean, g.mean, "batchnorm.mean");
      param(&BatchNormParams<double>::var, g.var, "batchnorm.var");
    }
    {  // relu6 / relu, away from kinks
      const double gap = 10 * kGradCheckStep;
      auto x = random_tensor(s, rng, -2, 8), r = random_tensor(s, rng);
      detail::avoid_kinks(x, {0.0, 6.0}, gap, rng, -2, 8);
      record("relu6", compare([&](const T& v) { return probe(relu6(v), r); }, x, relu6_backward(x, r)));
      record("relu", compare([&](const T& v) { return probe(relu(v), r); }, x, relu_backward(x, r)));
    }
    {  // maxpool2 with a clear winner per window
      auto x = random_tensor(s, rng), r = random_tensor({C, H / 2, W / 2}, rng);
      detail::separate_pool_windows(x, 10 * kGradCheckStep, rng);
      record("maxpool2", compare([&](const T& v) { return probe(maxpool2(v), r); }, x, maxpool2_backward(x, r)));
    }
    {  // space_to_depth / depth_to_space
      auto x = random_tensor(s, rng), r = random_tensor({4 * C, H / 2, W / 2}, rng);
      record("space_to_depth",
             compare([&](const T& v) { return probe(space_to_depth(v), r); }, x, space_to_depth_backward(x, r)));
      auto y = random_tensor({4 * C, H, W}, rng), ry = random_tensor({C, 2 * H, 2 * W}, rng);
      record("depth_to_space",
             compare([&](const T& v) { return probe(depth_to_space(v), ry); }, y, depth_to_space_backward(y, ry)));
    }
    {  // concat_channels
      const std::size_t C2 = 1 + rng() % 3;
      auto a = random_tensor(s, rng), b = random_tensor({C2, H, W}, rng), r = random_tensor({C + C2, H, W}, rng);
      auto g = concat_channels_backward(a, b, r);
      record("concat.lhs", compare([&](const T& v) { return probe(concat_channels(v, b), r); }, a, g.lhs));
      record("concat.rhs", compare([&](const T& v) { return probe(concat_channels(a, v), r); }, b, g.rhs));
    }
  }
  for (auto& r : results) r.passed = r.max_rel_error <= kGradCheckTolerance;
  return results;
}

}  // namespace skynet
