#pragma once

#include <cmath>
#include <random>

#include "skynet/skynet.hpp"

// Plain nested-loop reference implementations, kept deliberately naive and
// independent of the library kernels.

namespace skynet::testing {

inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline Tensor<double> oracle_dw_conv3(const Tensor<double>& x, const Tensor<double>& w) {
  const long C = static_cast<long>(x.channels()), H = static_cast<long>(x.height()),
             W = static_cast<long>(x.width());
  Tensor<double> y(x.shape());
  for (long c = 0; c < C; ++c)
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        double s = 0;
        for (long di = -1; di <= 1; ++di)
          for (long dj = -1; dj <= 1; ++dj) {
            const long ii = i + di, jj = j + dj;
            if (ii < 0 || jj < 0 || ii >= H || jj >= W) continue;
            s += w(c, di + 1, dj + 1) * x(c, ii, jj);
          }
        y(c, i, j) = s;
      }
  return y;
}

inline Tensor<double> oracle_pw_conv1(const Tensor<double>& x, const Tensor<double>& w) {
  const std::size_t Cout = w.dim(0), Cin = w.dim(1);
  Tensor<double> y({Cout, x.height(), x.width()});
  for (std::size_t i = 0; i < x.height(); ++i)
    for (std::size_t j = 0; j < x.width(); ++j)
      for (std::size_t o = 0; o < Cout; ++o) {
        double s = 0;
        for (std::size_t c = 0; c < Cin; ++c) s += w(o, c) * x(c, i, j);
        y(o, i, j) = s;
      }
  return y;
}

inline Tensor<double> oracle_batchnorm(const Tensor<double>& x, const BatchNormParams<double>& p) {
  Tensor<double> y(x.shape());
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t i = 0; i < x.height(); ++i)
      for (std::size_t j = 0; j < x.width(); ++j)
        y(c, i, j) = p.gamma[c] * (x(c, i, j) - p.mean[c]) / std::sqrt(p.var[c] + p.eps) + p.beta[c];
  return y;
}

inline Tensor<double> oracle_maxpool2(const Tensor<double>& x) {
  Tensor<double> y({x.channels(), x.height() / 2, x.width() / 2});
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t i = 0; i < y.height(); ++i)
      for (std::size_t j = 0; j < y.width(); ++j) {
        double m = -INFINITY;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x(c, 2 * i + a, 2 * j + b));
        y(c, i, j) = m;
      }
  return y;
}

/// Output channel 4c + 2*di + dj holds x[c, 2i+di, 2j+dj].
inline Tensor<double> oracle_space_to_depth(const Tensor<double>& x) {
  Tensor<double> y({4 * x.channels(), x.height() / 2, x.width() / 2});
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t di = 0; di < 2; ++di)
      for (std::size_t dj = 0; dj < 2; ++dj)
        for (std::size_t i = 0; i < y.height(); ++i)
          for (std::size_t j = 0; j < y.width(); ++j) y(4 * c + 2 * di + dj, i, j) = x(c, 2 * i + di, 2 * j + dj);
  return y;
}

inline double rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double err = 0, scale = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    err = std::max(err, std::abs(a[k] - b[k]));
    scale = std::max(scale, std::abs(b[k]));
  }
  return scale == 0 ? err : err / scale;
}

}  // namespace skynet::testing
