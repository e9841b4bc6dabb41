#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "skynet/tensor.hpp"

// Forward evaluation of the operator set used by SkyNet-style networks.
// All feature maps are (C,H,W).

namespace skynet {

inline constexpr double kDefaultBatchNormEps = 1e-5;

template <class T>
struct BatchNormParams {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> mean;
  std::vector<T> var;
  T eps = static_cast<T>(kDefaultBatchNormEps);

  static BatchNormParams identity(std::size_t channels) {
    return {std::vector<T>(channels, T{1}), std::vector<T>(channels, T{0}),
            std::vector<T>(channels, T{0}), std::vector<T>(channels, T{1}),
            static_cast<T>(kDefaultBatchNormEps)};
  }

  void check(std::size_t channels) const {
    if (gamma.size() != channels || beta.size() != channels || mean.size() != channels ||
        var.size() != channels) {
      throw ShapeError("batchnorm: parameter vectors must have length " +
                       std::to_string(channels));
    }
    // eps = 0 is tolerated as long as every denominator stays positive.
    if (eps < T{0}) throw DomainError("batchnorm: eps must be non-negative");
    for (const T& v : var) {
      if (v < T{0}) throw DomainError("batchnorm: negative variance");
      if (!(v + eps > T{0})) throw DomainError("batchnorm: var + eps must be positive");
    }
  }
};

/// 3x3 depthwise convolution, stride 1, zero padding 1, no bias.
template <class T>
Tensor<T> dw_conv3(const Tensor<T>& x, const Tensor<T>& w) {
  require_rank(x.shape(), 3, "dw_conv3 input");
  require_rank(w.shape(), 3, "dw_conv3 weights");
  if (w.dim(0) != x.channels() || w.dim(1) != 3 || w.dim(2) != 3) {
    throw ShapeError("dw_conv3: weights " + to_string(w.shape()) + " do not match input " +
                     to_string(x.shape()));
  }
  const std::size_t C = x.channels(), H = x.height(), W = x.width();
  Tensor<T> out({C, H, W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        T acc{};
        for (int u = -1; u <= 1; ++u) {
          const auto ii = static_cast<std::ptrdiff_t>(i) + u;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
          for (int v = -1; v <= 1; ++v) {
            const auto jj = static_cast<std::ptrdiff_t>(j) + v;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
            acc += x(c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)) *
                   w(c, static_cast<std::size_t>(u + 1), static_cast<std::size_t>(v + 1));
          }
        }
        out(c, i, j) = acc;
      }
    }
  }
  return out;
}

/// 1x1 pointwise convolution with weights (Cout,Cin), no bias.
template <class T>
Tensor<T> pw_conv1(const Tensor<T>& x, const Tensor<T>& w) {
  require_rank(x.shape(), 3, "pw_conv1 input");
  require_rank(w.shape(), 2, "pw_conv1 weights");
  if (w.dim(1) != x.channels()) {
    throw ShapeError("pw_conv1: weights " + to_string(w.shape()) + " do not match input " +
                     to_string(x.shape()));
  }
  const std::size_t Cin = x.channels(), Cout = w.dim(0);
  const std::size_t plane = x.height() * x.width();
  Tensor<T> out({Cout, x.height(), x.width()});
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < Cout; ++o) {
    T* orow = dst.data() + o * plane;
    for (std::size_t c = 0; c < Cin; ++c) {
      const T wc = w(o, c);
      const T* irow = src.data() + c * plane;
      for (std::size_t p = 0; p < plane; ++p) orow[p] += wc * irow[p];
    }
  }
  return out;
}

template <class T>
Tensor<T> batchnorm_infer(const Tensor<T>& x, const BatchNormParams<T>& bn) {
  require_rank(x.shape(), 3, "batchnorm input");
  bn.check(x.channels());
  const std::size_t plane = x.height() * x.width();
  Tensor<T> out(x.shape());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    const T inv = T{1} / std::sqrt(bn.var[c] + bn.eps);
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t k = c * plane + p;
      out[k] = bn.gamma[c] * (x[k] - bn.mean[c]) * inv + bn.beta[c];
    }
  }
  return out;
}

template <class T>
Tensor<T> relu6(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = std::min(std::max(x[k], T{0}), T{6});
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = std::max(x[k], T{0});
  return out;
}

inline void require_even_spatial(const Shape& s, const char* what) {
  require_rank(s, 3, what);
  if (s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw ShapeError(std::string(what) + ": spatial dims must be even, got " + to_string(s));
  }
}

/// 2x2 max pooling, stride 2.
template <class T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  require_even_spatial(x.shape(), "maxpool2");
  const std::size_t C = x.channels(), H = x.height() / 2, W = x.width() / 2;
  Tensor<T> out({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        out(c, i, j) = std::max(std::max(x(c, 2 * i, 2 * j), x(c, 2 * i, 2 * j + 1)),
                                std::max(x(c, 2 * i + 1, 2 * j), x(c, 2 * i + 1, 2 * j + 1)));
  return out;
}

/// Lossless 2x2 reordering: channel 4c+k at (i,j) holds input channel c at
/// (2i + k/2, 2j + k%2).
template <class T>
Tensor<T> space_to_depth(const Tensor<T>& x) {
  require_even_spatial(x.shape(), "space_to_depth");
  const std::size_t C = x.channels(), H = x.height() / 2, W = x.width() / 2;
  Tensor<T> out({4 * C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          out(4 * c + k, i, j) = x(c, 2 * i + k / 2, 2 * j + k % 2);
  return out;
}

template <class T>
Tensor<T> depth_to_space(const Tensor<T>& x) {
  require_rank(x.shape(), 3, "depth_to_space");
  if (x.channels() % 4 != 0) {
    throw ShapeError("depth_to_space: channel count must be divisible by 4, got " +
                     to_string(x.shape()));
  }
  const std::size_t C = x.channels() / 4, H = x.height(), W = x.width();
  Tensor<T> out({C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          out(c, 2 * i + k / 2, 2 * j + k % 2) = x(4 * c + k, i, j);
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 3, "concat_channels lhs");
  require_rank(b.shape(), 3, "concat_channels rhs");
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("concat_channels: spatial mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  std::vector<T> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor<T>({a.channels() + b.channels(), a.height(), a.width()}, std::move(data));
}

}  // namespace skynet
