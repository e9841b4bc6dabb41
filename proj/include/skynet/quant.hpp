#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "skynet/arch.hpp"

// Pure fixed-point (power-of-two, per-tensor) quantization and an
// integer-arithmetic forward path. Batch norm is folded into the preceding
// convolution before its weights are quantized.

namespace skynet {

struct QuantizationOverflow : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FixedPointFormat {
  int total_bits = 8;
  int frac_bits = 0;
  bool is_signed = true;

  std::int64_t qmin() const { return is_signed ? -(std::int64_t{1} << (total_bits - 1)) : 0; }
  std::int64_t qmax() const {
    return is_signed ? (std::int64_t{1} << (total_bits - 1)) - 1 : (std::int64_t{1} << total_bits) - 1;
  }
  double step() const { return std::ldexp(1.0, -frac_bits); }
  double min_value() const { return static_cast<double>(qmin()) * step(); }
  double max_value() const { return static_cast<double>(qmax()) * step(); }

  void check() const {
    if (total_bits < 2 || total_bits > 16)
      throw DomainError("fixed-point format: total bits must lie in [2,16]");
    if (frac_bits < -32 || frac_bits > 48)
      throw DomainError("fixed-point format: fraction bits out of supported range");
  }

  friend bool operator==(const FixedPointFormat&, const FixedPointFormat&) = default;
};

struct FormatChoice {
  FixedPointFormat format;
  bool degenerate_range = false;  // all-zero input; frac bits are a fallback
};

/// Largest fraction width whose power-of-two range [-2^I, 2^I) covers
/// max(|min|, |max|), with I = ceil(log2 max|v|). [0,6] at 9 unsigned bits
/// gives 6 fraction bits; [-1,1] at 11 signed bits gives 10.
inline FormatChoice choose_format(double min, double max, int total_bits, bool is_signed) {
  if (!(max >= min)) throw DomainError("choose_format: max must be >= min");
  if (total_bits < 2) throw DomainError("choose_format: total bits must be >= 2");
  if (!is_signed && min < 0) throw DomainError("choose_format: unsigned format for negative range");
  const int sign = is_signed ? 1 : 0;
  const double m = std::max(std::abs(min), std::abs(max));
  FormatChoice out;
  out.format.total_bits = total_bits;
  out.format.is_signed = is_signed;
  if (m == 0.0) {
    out.format.frac_bits = total_bits - sign;
    out.degenerate_range = true;
  } else {
    int exp = 0;
    const double mant = std::frexp(m, &exp);  // m = mant * 2^exp, mant in [0.5, 1)
    const int int_bits = mant == 0.5 ? exp - 1 : exp;
    out.format.frac_bits = std::clamp(total_bits - sign - int_bits, -32, 48);
  }
  out.format.check();
  return out;
}

/// Round half to even.
inline double round_half_even(double y) {
  const double f = std::floor(y);
  const double diff = y - f;
  if (diff > 0.5) return f + 1;
  if (diff < 0.5) return f;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1;
}

inline std::int64_t quantize_scalar(double x, const FixedPointFormat& fmt) {
  if (std::isnan(x)) return 0;
  const double y = round_half_even(std::ldexp(x, fmt.frac_bits));
  if (y <= static_cast<double>(fmt.qmin())) return fmt.qmin();
  if (y >= static_cast<double>(fmt.qmax())) return fmt.qmax();
  return static_cast<std::int64_t>(y);
}

struct QuantizedTensor {
  Shape shape;
  std::vector<std::int32_t> values;
  FixedPointFormat format;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

template <class T>
QuantizedTensor quantize(const Tensor<T>& x, const FixedPointFormat& fmt) {
  fmt.check();
  QuantizedTensor q{x.shape(), std::vector<std::int32_t>(x.size()), fmt};
  for (std::size_t k = 0; k < x.size(); ++k)
    q.values[k] = static_cast<std::int32_t>(quantize_scalar(static_cast<double>(x[k]), fmt));
  return q;
}

template <class T = double>
Tensor<T> dequantize(const QuantizedTensor& q) {
  std::vector<T> v(q.values.size());
  for (std::size_t k = 0; k < v.size(); ++k)
    v[k] = static_cast<T>(std::ldexp(static_cast<double>(q.values[k]), -q.format.frac_bits));
  return Tensor<T>(q.shape, std::move(v));
}

template <class T>
std::pair<double, double> value_range(const Tensor<T>& x) {
  auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  return {static_cast<double>(*lo), static_cast<double>(*hi)};
}

// ---------------------------------------------------------------------------
// Integer forward path

struct QuantConfig {
  int weight_bits = 11;
  int activation_bits = 9;
};

namespace detail {

inline std::int64_t checked_mul(std::int64_t a, std::int64_t b) {
  std::int64_t r;
  if (__builtin_mul_overflow(a, b, &r)) throw QuantizationOverflow("accumulator overflow (mul)");
  return r;
}

inline std::int64_t checked_add(std::int64_t a, std::int64_t b) {
  std::int64_t r;
  if (__builtin_add_overflow(a, b, &r)) throw QuantizationOverflow("accumulator overflow (add)");
  return r;
}

/// v * 2^-shift with round-half-even; negative shift multiplies.
inline std::int64_t rounding_shift(std::int64_t v, int shift) {
  if (shift <= 0) {
    if (shift < -62) throw QuantizationOverflow("requantization shift out of range");
    return checked_mul(v, std::int64_t{1} << (-shift));
  }
  if (shift > 62) return 0;
  const std::int64_t q = v >> shift;  // floor
  const std::int64_t rem = v - q * (std::int64_t{1} << shift);
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  if (rem > half || (rem == half && (q & 1) != 0)) return q + 1;
  return q;
}

}  // namespace detail

/// One integer-domain step: a conv (or standalone per-channel affine from an
/// unfused batch norm) with batch norm folded in and the trailing activation
/// fused, or a data-movement step.
struct QuantizedStep {
  enum class Kind { Conv, Affine, Activation, Pool, Reorder, Concat };
  Kind kind = Kind::Conv;
  LayerKind conv = LayerKind::PWConv1;
  std::string name;
  QuantizedTensor weights;            // folded, for Conv/Affine
  std::vector<double> bias;           // folded float bias per output channel
  std::optional<LayerKind> activation;
  Shape out;
};

struct QuantizedModel {
  NetSpec net;
  QuantConfig config;
  std::vector<QuantizedStep> steps;
};

/// Folds batch norm into convolutions and quantizes every weight tensor to a
/// per-tensor signed format of `config.weight_bits`.
inline QuantizedModel quantize_model(const NetSpec& net, const WeightSet<double>& ws,
                                     QuantConfig config = {}) {
  check_weights(net, ws);
  const auto plan = infer_shapes(net);
  QuantizedModel model{net, config, {}};
  auto quantize_weights = [&](const Tensor<double>& w) {
    auto [lo, hi] = value_range(w);
    return quantize(w, choose_format(lo, hi, config.weight_bits, true).format);
  };
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const auto& step = plan[s];
    QuantizedStep q;
    q.name = step.name;
    q.out = step.out;
    const auto kind = step.layer.kind;
    auto next_is = [&](std::size_t k, auto pred) {
      return k < plan.size() && !plan[k].branch && plan[k].stage == step.stage && pred(plan[k].layer.kind);
    };
    if (is_conv(kind) || kind == LayerKind::BatchNorm) {
      std::vector<double> scale, shift;
      std::size_t next = s + 1;
      const std::size_t out_ch = step.out[0];
      std::string bn_name;
      if (kind == LayerKind::BatchNorm) {
        bn_name = step.name;
      } else if (next_is(next, [](LayerKind k) { return k == LayerKind::BatchNorm; })) {
        bn_name = plan[next].name;
        ++next;
      }
      if (!bn_name.empty()) {
        const auto bn = ws.batchnorm(bn_name);
        for (std::size_t c = 0; c < out_ch; ++c) {
          const double inv = 1.0 / std::sqrt(bn.var[c] + bn.eps);
          scale.push_back(bn.gamma[c] * inv);
          shift.push_back(bn.beta[c] - bn.gamma[c] * bn.mean[c] * inv);
        }
      } else {
        scale.assign(out_ch, 1.0);
        shift.assign(out_ch, 0.0);
      }
      if (kind == LayerKind::BatchNorm) {
        q.kind = QuantizedStep::Kind::Affine;
        q.weights = quantize_weights(Tensor<double>({out_ch}, scale));
      } else {
        Tensor<double> w = ws.at(step.name + ".weight");
        const std::size_t per_out = w.size() / out_ch;
        for (std::size_t k = 0; k < w.size(); ++k) w[k] *= scale[k / per_out];
        q.kind = QuantizedStep::Kind::Conv;
        q.conv = kind;
        q.weights = quantize_weights(w);
      }
      q.bias = std::move(shift);
      if (next_is(next, is_activation)) {
        q.activation = plan[next].layer.kind;
        ++next;
      }
      q.out = plan[next - 1].out;
      model.steps.push_back(std::move(q));
      s = next - 1;
      continue;
    }
    switch (kind) {
      case LayerKind::ReLU:
      case LayerKind::ReLU6:
        q.kind = QuantizedStep::Kind::Activation;
        q.activation = kind;
        break;
      case LayerKind::MaxPool2: q.kind = QuantizedStep::Kind::Pool; break;
      case LayerKind::SpaceToDepth: q.kind = QuantizedStep::Kind::Reorder; break;
      case LayerKind::BypassConcat: q.kind = QuantizedStep::Kind::Concat; break;
      default: throw DomainError("quantize_model: unsupported layer " + step.name);
    }
    model.steps.push_back(std::move(q));
  }
  return model;
}

namespace detail {

/// Accumulator tensor with `frac` fraction bits.
struct Accumulator {
  Shape shape;
  std::vector<std::int64_t> values;
  int frac = 0;
};

inline Accumulator conv_accumulate(const QuantizedStep& step, const QuantizedTensor& x) {
  const int frac = x.format.frac_bits + step.weights.format.frac_bits;
  const std::size_t C = x.shape[0], H = x.shape[1], W = x.shape[2], plane = H * W;
  const auto& w = step.weights.values;
  Accumulator acc{step.out, std::vector<std::int64_t>(element_count(step.out), 0), frac};
  if (step.kind == QuantizedStep::Kind::Affine) {
    for (std::size_t k = 0; k < acc.values.size(); ++k)
      acc.values[k] = checked_mul(x.values[k], w[k / plane]);
  } else if (step.conv == LayerKind::DWConv3) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          std::int64_t a = 0;
          for (std::size_t u = 0; u < 3; ++u) {
            if (i + u < 1 || i + u - 1 >= H) continue;
            for (std::size_t v = 0; v < 3; ++v) {
              if (j + v < 1 || j + v - 1 >= W) continue;
              a = checked_add(a, checked_mul(x.values[(c * H + i + u - 1) * W + j + v - 1],
                                             w[c * 9 + u * 3 + v]));
            }
          }
          acc.values[(c * H + i) * W + j] = a;
        }
  } else {
    const std::size_t Cout = step.out[0];
    for (std::size_t o = 0; o < Cout; ++o) {
      std::int64_t* dst = acc.values.data() + o * plane;
      for (std::size_t c = 0; c < C; ++c) {
        const std::int64_t wc = w[o * C + c];
        const std::int32_t* src = x.values.data() + c * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] = checked_add(dst[p], checked_mul(src[p], wc));
      }
    }
  }
  const std::size_t out_plane = step.out[1] * step.out[2];
  for (std::size_t k = 0; k < acc.values.size(); ++k) {
    const double b = std::ldexp(step.bias[k / out_plane], frac);
    if (!std::isfinite(b) || std::abs(b) > 0x1.0p62) throw QuantizationOverflow("bias out of range");
    acc.values[k] = checked_add(acc.values[k], static_cast<std::int64_t>(round_half_even(b)));
  }
  return acc;
}

inline double max_abs_value(const Accumulator& acc) {
  std::int64_t m = 0;
  for (auto v : acc.values) m = std::max(m, v < 0 ? -v : v);
  return std::ldexp(static_cast<double>(m), -acc.frac);
}

/// Rescales `acc` into `fmt` (round half even, saturating), applying a fused
/// activation first.
inline QuantizedTensor requantize(const Accumulator& acc, std::optional<LayerKind> act,
                                  const FixedPointFormat& fmt) {
  QuantizedTensor q{acc.shape, std::vector<std::int32_t>(acc.values.size()), fmt};
  std::int64_t hi = fmt.qmax(), lo = fmt.qmin();
  if (act) lo = std::max<std::int64_t>(lo, 0);
  if (act == LayerKind::ReLU6) {
    const auto six = fmt.frac_bits >= 0 ? std::int64_t{6} << fmt.frac_bits
                                        : rounding_shift(6, -fmt.frac_bits);
    hi = std::min(hi, six);
  }
  for (std::size_t k = 0; k < acc.values.size(); ++k) {
    const auto v = rounding_shift(acc.values[k], acc.frac - fmt.frac_bits);
    q.values[k] = static_cast<std::int32_t>(std::clamp(v, lo, hi));
  }
  return q;
}

inline QuantizedTensor rescale(const QuantizedTensor& x, const FixedPointFormat& fmt) {
  Accumulator acc{x.shape, {x.values.begin(), x.values.end()}, x.format.frac_bits};
  return requantize(acc, std::nullopt, fmt);
}

}  // namespace detail

/// Runs the model in integer arithmetic and returns the dequantized output.
/// Activations after a fused ReLU6 use the unsigned [0,6] format of
/// `activation_bits`; other intermediate activations get a per-tensor format
/// chosen from their observed range. The final conv's accumulator is
/// dequantized directly.
template <class T>
Tensor<double> run_quantized(const QuantizedModel& model, const Tensor<T>& input) {
  if (input.shape() != model.net.input_shape) {
    throw ShapeError("input: tensor " + to_string(input.shape()) + " does not match network input " +
                     to_string(model.net.input_shape));
  }
  const int bits = model.config.activation_bits;
  auto [lo, hi] = value_range(input);
  QuantizedTensor cur = quantize(input, choose_format(lo, hi, bits, lo < 0).format);
  std::optional<QuantizedTensor> held;

  for (std::size_t s = 0; s < model.steps.size(); ++s) {
    const auto& step = model.steps[s];
    const bool last = s + 1 == model.steps.size();
    using K = QuantizedStep::Kind;
    switch (step.kind) {
      case K::Conv:
      case K::Affine: {
        const auto acc = detail::conv_accumulate(step, cur);
        if (last && !step.activation) {
          std::vector<double> out(acc.values.size());
          for (std::size_t k = 0; k < out.size(); ++k)
            out[k] = std::ldexp(static_cast<double>(acc.values[k]), -acc.frac);
          return Tensor<double>(acc.shape, std::move(out));
        }
        FixedPointFormat fmt;
        if (step.activation == LayerKind::ReLU6) {
          fmt = choose_format(0.0, 6.0, bits, false).format;
        } else {
          const double m = detail::max_abs_value(acc);
          fmt = step.activation ? choose_format(0.0, m, bits, false).format
                                : choose_format(-m, m, bits, true).format;
        }
        cur = detail::requantize(acc, step.activation, fmt);
        break;
      }
      case K::Activation: {
        FixedPointFormat fmt = cur.format;
        fmt.is_signed = false;
        if (fmt.total_bits > bits) fmt.total_bits = bits;
        detail::Accumulator acc{cur.shape, {cur.values.begin(), cur.values.end()}, cur.format.frac_bits};
        cur = detail::requantize(acc, step.activation, fmt);
        break;
      }
      case K::Pool: {
        const std::size_t C = cur.shape[0], H = cur.shape[1], W = cur.shape[2];
        QuantizedTensor out{{C, H / 2, W / 2}, std::vector<std::int32_t>(C * (H / 2) * (W / 2)), cur.format};
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < H / 2; ++i)
            for (std::size_t j = 0; j < W / 2; ++j) {
              auto at = [&](std::size_t ii, std::size_t jj) { return cur.values[(c * H + ii) * W + jj]; };
              out.values[(c * (H / 2) + i) * (W / 2) + j] =
                  std::max({at(2 * i, 2 * j), at(2 * i, 2 * j + 1), at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1)});
            }
        cur = std::move(out);
        break;
      }
      case K::Reorder: {
        // Pure permutation; reuse the float kernel on exact integer values.
        Tensor<double> v(cur.shape, std::vector<double>(cur.values.begin(), cur.values.end()));
        const auto r = space_to_depth(v);
        held = QuantizedTensor{r.shape(), std::vector<std::int32_t>(r.data().begin(), r.data().end()),
                               cur.format};
        break;
      }
      case K::Concat: {
        QuantizedTensor a = cur, b = *held;
        if (a.format != b.format) {
          FixedPointFormat common{std::max(a.format.total_bits, b.format.total_bits),
                                  std::min(a.format.frac_bits, b.format.frac_bits),
                                  a.format.is_signed || b.format.is_signed};
          a = detail::rescale(a, common);
          b = detail::rescale(b, common);
        }
        QuantizedTensor out{{a.shape[0] + b.shape[0], a.shape[1], a.shape[2]}, a.values, a.format};
        out.values.insert(out.values.end(), b.values.begin(), b.values.end());
        cur = std::move(out);
        break;
      }
    }
  }
  return dequantize<double>(cur);
}

/// Folds, quantizes weights to `config.weight_bits` and activations to
/// `config.activation_bits`, then evaluates in integer arithmetic.
template <class T>
Tensor<double> quantized_forward(const NetSpec& net, const WeightSet<double>& ws, const Tensor<T>& input,
                                 QuantConfig config = {}) {
  return run_quantized(quantize_model(net, ws, config), input);
}

}  // namespace skynet
