#pragma once

#include <cmath>
#include <functional>

#include "skynet/ops.hpp"

// Vector-Jacobian products for the operator set, plus a central-difference
// oracle. Each *_backward takes the forward inputs and the output gradient.

namespace skynet {

template <class T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
};

template <class T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> gamma, beta, mean, var;
};

template <class T>
struct ConcatGrads {
  Tensor<T> lhs;
  Tensor<T> rhs;
};

template <class T>
void require_grad_shape(const Tensor<T>& grad_out, const Shape& expected, const char* what) {
  if (grad_out.shape() != expected) {
    throw ShapeError(std::string(what) + ": grad_out shape " + to_string(grad_out.shape()) +
                     " != output shape " + to_string(expected));
  }
}

template <class T>
ConvGrads<T> dw_conv3_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out) {
  require_rank(x.shape(), 3, "dw_conv3_backward input");
  if (w.shape() != Shape{x.channels(), 3, 3}) throw ShapeError("dw_conv3_backward: weight shape");
  require_grad_shape(grad_out, x.shape(), "dw_conv3_backward");
  const auto C = x.channels();
  const auto H = static_cast<std::ptrdiff_t>(x.height());
  const auto W = static_cast<std::ptrdiff_t>(x.width());
  Tensor<T> dx(x.shape());
  Tensor<T> dw(w.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::ptrdiff_t i = 0; i < H; ++i)
      for (std::ptrdiff_t j = 0; j < W; ++j) {
        const T g = grad_out(c, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        for (std::ptrdiff_t u = -1; u <= 1; ++u) {
          const auto ii = i + u;
          if (ii < 0 || ii >= H) continue;
          for (std::ptrdiff_t v = -1; v <= 1; ++v) {
            const auto jj = j + v;
            if (jj < 0 || jj >= W) continue;
            const auto ui = static_cast<std::size_t>(u + 1), vi = static_cast<std::size_t>(v + 1);
            const auto si = static_cast<std::size_t>(ii), sj = static_cast<std::size_t>(jj);
            dx(c, si, sj) += g * w(c, ui, vi);
            dw(c, ui, vi) += g * x(c, si, sj);
          }
        }
      }
  return {std::move(dx), std::move(dw)};
}

template <class T>
ConvGrads<T> pw_conv1_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& grad_out) {
  require_rank(x.shape(), 3, "pw_conv1_backward input");
  require_rank(w.shape(), 2, "pw_conv1_backward weights");
  if (w.dim(1) != x.channels()) throw ShapeError("pw_conv1_backward: weight shape");
  require_grad_shape(grad_out, Shape{w.dim(0), x.height(), x.width()}, "pw_conv1_backward");
  const std::size_t Cin = x.channels(), Cout = w.dim(0);
  const std::size_t plane = x.height() * x.width();
  Tensor<T> dx(x.shape());
  Tensor<T> dw(w.shape());
  for (std::size_t o = 0; o < Cout; ++o) {
    const T* g = grad_out.data().data() + o * plane;
    for (std::size_t c = 0; c < Cin; ++c) {
      const T* xi = x.data().data() + c * plane;
      T* dxi = dx.data().data() + c * plane;
      const T wc = w(o, c);
      T acc{};
      for (std::size_t p = 0; p < plane; ++p) {
        dxi[p] += wc * g[p];
        acc += g[p] * xi[p];
      }
      dw(o, c) = acc;
    }
  }
  return {std::move(dx), std::move(dw)};
}

template <class T>
BatchNormGrads<T> batchnorm_backward(const Tensor<T>& x, const BatchNormParams<T>& bn,
                                     const Tensor<T>& grad_out) {
  require_rank(x.shape(), 3, "batchnorm_backward input");
  bn.check(x.channels());
  require_grad_shape(grad_out, x.shape(), "batchnorm_backward");
  const std::size_t C = x.channels(), plane = x.height() * x.width();
  BatchNormGrads<T> g{Tensor<T>(x.shape()), std::vector<T>(C), std::vector<T>(C),
                      std::vector<T>(C), std::vector<T>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    const T denom = bn.var[c] + bn.eps;
    const T inv = T{1} / std::sqrt(denom);
    T sum_g{}, sum_gxhat{};
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t k = c * plane + p;
      const T centered = x[k] - bn.mean[c];
      g.input[k] = grad_out[k] * bn.gamma[c] * inv;
      sum_g += grad_out[k];
      sum_gxhat += grad_out[k] * centered;
    }
    g.gamma[c] = sum_gxhat * inv;
    g.beta[c] = sum_g;
    g.mean[c] = -bn.gamma[c] * inv * sum_g;
    g.var[c] = -T{0.5} * bn.gamma[c] * sum_gxhat * inv / denom;
  }
  return g;
}

/// Subgradient 0 at the kinks 0 and 6.
template <class T>
Tensor<T> relu6_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_grad_shape(grad_out, x.shape(), "relu6_backward");
  Tensor<T> dx(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k)
    dx[k] = (x[k] > T{0} && x[k] < T{6}) ? grad_out[k] : T{0};
  return dx;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_grad_shape(grad_out, x.shape(), "relu_backward");
  Tensor<T> dx(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) dx[k] = x[k] > T{0} ? grad_out[k] : T{0};
  return dx;
}

/// Routes each gradient to the first maximal element of its 2x2 block.
template <class T>
Tensor<T> maxpool2_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_even_spatial(x.shape(), "maxpool2_backward");
  const std::size_t C = x.channels(), H = x.height() / 2, W = x.width() / 2;
  require_grad_shape(grad_out, Shape{C, H, W}, "maxpool2_backward");
  Tensor<T> dx(x.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        std::size_t bi = 2 * i, bj = 2 * j;
        for (std::size_t k = 1; k < 4; ++k) {
          const std::size_t ii = 2 * i + k / 2, jj = 2 * j + k % 2;
          if (x(c, ii, jj) > x(c, bi, bj)) bi = ii, bj = jj;
        }
        dx(c, bi, bj) += grad_out(c, i, j);
      }
  return dx;
}

template <class T>
Tensor<T> space_to_depth_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_even_spatial(x.shape(), "space_to_depth_backward");
  require_grad_shape(grad_out, Shape{4 * x.channels(), x.height() / 2, x.width() / 2},
                     "space_to_depth_backward");
  return depth_to_space(grad_out);
}

template <class T>
Tensor<T> depth_to_space_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_rank(x.shape(), 3, "depth_to_space_backward");
  require_grad_shape(grad_out, Shape{x.channels() / 4, 2 * x.height(), 2 * x.width()},
                     "depth_to_space_backward");
  return space_to_depth(grad_out);
}

template <class T>
ConcatGrads<T> concat_channels_backward(const Tensor<T>& a, const Tensor<T>& b,
                                        const Tensor<T>& grad_out) {
  require_grad_shape(grad_out, Shape{a.channels() + b.channels(), a.height(), a.width()},
                     "concat_channels_backward");
  auto g = grad_out.data();
  std::vector<T> ga(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(a.size()));
  std::vector<T> gb(g.begin() + static_cast<std::ptrdiff_t>(a.size()), g.end());
  return {Tensor<T>(a.shape(), std::move(ga)), Tensor<T>(b.shape(), std::move(gb))};
}

/// Central-difference gradient of a scalar function: (f(x+h e) - f(x-h e)) / 2h.
template <class T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > T{0})) throw DomainError("finite_diff_grad: step must be positive");
  Tensor<T> probe = x;
  Tensor<T> grad(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const T saved = probe[k];
    probe[k] = saved + h;
    const T fp = f(probe);
    probe[k] = saved - h;
    const T fm = f(probe);
    probe[k] = saved;
    grad[k] = (fp - fm) / (T{2} * h);
  }
  return grad;
}

/// max_k |a_k - b_k| / max_k |b_k|, with a 1e-8 floor on the denominator.
template <class T>
T max_relative_error(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: length mismatch");
  T err{}, scale{};
  for (std::size_t k = 0; k < a.size(); ++k) {
    err = std::max(err, static_cast<T>(std::abs(a[k] - b[k])));
    scale = std::max(scale, static_cast<T>(std::abs(b[k])));
  }
  return err / std::max(scale, static_cast<T>(1e-8));
}

}  // namespace skynet
