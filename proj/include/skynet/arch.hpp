#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "skynet/ops.hpp"

namespace skynet {

enum class LayerKind {
  DWConv3,
  PWConv1,
  BatchNorm,
  ReLU,
  ReLU6,
  MaxPool2,
  SpaceToDepth,
  BypassConcat,
};

inline constexpr std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::DWConv3: return "dw_conv3";
    case LayerKind::PWConv1: return "pw_conv1";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::ReLU: return "relu";
    case LayerKind::ReLU6: return "relu6";
    case LayerKind::MaxPool2: return "maxpool2";
    case LayerKind::SpaceToDepth: return "space_to_depth";
    case LayerKind::BypassConcat: return "bypass_concat";
  }
  return "unknown";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view s) {
  for (auto k : {LayerKind::DWConv3, LayerKind::PWConv1, LayerKind::BatchNorm, LayerKind::ReLU,
                 LayerKind::ReLU6, LayerKind::MaxPool2, LayerKind::SpaceToDepth,
                 LayerKind::BypassConcat}) {
    if (layer_kind_name(k) == s) return k;
  }
  return std::nullopt;
}

inline constexpr bool is_conv(LayerKind k) {
  return k == LayerKind::DWConv3 || k == LayerKind::PWConv1;
}

inline constexpr bool is_activation(LayerKind k) {
  return k == LayerKind::ReLU || k == LayerKind::ReLU6;
}

struct LayerSpec {
  LayerKind kind = LayerKind::DWConv3;
  std::size_t out_channels = 0;  // PWConv1 only
  std::size_t source = 0;        // BypassConcat only

  static LayerSpec dw() { return {LayerKind::DWConv3}; }
  static LayerSpec pw(std::size_t out) { return {LayerKind::PWConv1, out}; }
  static LayerSpec bn() { return {LayerKind::BatchNorm}; }
  static LayerSpec relu6() { return {LayerKind::ReLU6}; }
  static LayerSpec relu() { return {LayerKind::ReLU}; }
  static LayerSpec pool() { return {LayerKind::MaxPool2}; }
  static LayerSpec reorder() { return {LayerKind::SpaceToDepth}; }
  static LayerSpec concat(std::size_t src) { return {LayerKind::BypassConcat, 0, src}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
  friend auto operator<=>(const LayerSpec&, const LayerSpec&) = default;
};

struct Bundle {
  std::vector<LayerSpec> layers;
  friend bool operator==(const Bundle&, const Bundle&) = default;
  friend auto operator<=>(const Bundle&, const Bundle&) = default;
};

/// Skip connection: the post-activation output of bundle `source` is reordered
/// (space-to-depth) and concatenated onto the input of stage `destination`.
/// A destination equal to the bundle count means the head.
struct Bypass {
  std::size_t source = 0;
  std::size_t destination = 0;
  friend bool operator==(const Bypass&, const Bypass&) = default;
};

struct NetSpec {
  Shape input_shape{3, 160, 320};
  std::vector<Bundle> bundles;
  std::set<std::size_t> pool_after;
  std::optional<Bypass> bypass;
  std::vector<LayerSpec> head;

  std::size_t head_stage() const noexcept { return bundles.size(); }
  friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

inline constexpr std::size_t kHeadChannels = 10;  // 2 anchors x {tx,ty,tw,th,conf}

struct ValidationError : std::runtime_error {
  explicit ValidationError(std::vector<std::string> v)
      : std::runtime_error(join(v)), violations(std::move(v)) {}

  std::vector<std::string> violations;

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid network";
    for (const auto& m : v) s += "; " + m;
    return s;
  }
};

// DW-Conv3 -> BN -> act -> PW-Conv1(out) -> BN -> act
inline Bundle skynet_bundle(std::size_t out_channels, LayerKind act = LayerKind::ReLU6) {
  return Bundle{{LayerSpec::dw(), LayerSpec::bn(), LayerSpec{act}, LayerSpec::pw(out_channels),
                 LayerSpec::bn(), LayerSpec{act}}};
}

/// Head used once a bypass feeds the final stage: DW over the concatenated
/// map, a PW squeeze, then the 10-channel regression layer.
inline std::vector<LayerSpec> fused_head(std::size_t width, LayerKind act = LayerKind::ReLU6) {
  return {LayerSpec::dw(),   LayerSpec::bn(), LayerSpec{act},
          LayerSpec::pw(width), LayerSpec::bn(), LayerSpec{act},
          LayerSpec::pw(kHeadChannels)};
}

enum class Variant { A, B, C };

inline std::optional<Variant> parse_variant(std::string_view s) {
  if (s == "A" || s == "a") return Variant::A;
  if (s == "B" || s == "b") return Variant::B;
  if (s == "C" || s == "c") return Variant::C;
  return std::nullopt;
}

inline NetSpec build_skynet(Variant v, std::size_t height = 160, std::size_t width = 320) {
  NetSpec net;
  net.input_shape = {3, height, width};
  for (std::size_t ch : {48u, 96u, 192u, 384u, 512u}) net.bundles.push_back(skynet_bundle(ch));
  net.pool_after = {0, 1, 2};
  switch (v) {
    case Variant::A:
      net.head = {LayerSpec::pw(kHeadChannels)};
      break;
    case Variant::B:
      net.bypass = Bypass{2, net.head_stage()};
      net.head = fused_head(48);
      break;
    case Variant::C:
      net.bypass = Bypass{2, net.head_stage()};
      net.head = fused_head(96);
      break;
  }
  return net;
}

// ---------------------------------------------------------------------------
// Shape propagation

/// One executed step. Bundle layers are named "b<stage>.l<index>", head layers
/// "head.l<index>"; inserted steps use ".pool", ".reorder" and ".concat".
/// A reorder step is a side branch: it reads the running tensor but its output
/// is held for the later concat instead of replacing it.
struct LayerTrace {
  std::string name;
  LayerSpec layer;
  std::size_t stage = 0;
  Shape in;
  Shape out;
  bool branch = false;
};

inline std::string stage_prefix(const NetSpec& net, std::size_t stage) {
  return stage == net.head_stage() ? std::string("head") : "b" + std::to_string(stage);
}

namespace detail {

inline std::optional<Shape> apply_shape(const LayerSpec& l, const Shape& in, std::string& err) {
  switch (l.kind) {
    case LayerKind::DWConv3:
    case LayerKind::BatchNorm:
    case LayerKind::ReLU:
    case LayerKind::ReLU6:
      return in;
    case LayerKind::PWConv1:
      if (l.out_channels == 0) {
        err = "pw_conv1 needs at least one output channel";
        return std::nullopt;
      }
      return Shape{l.out_channels, in[1], in[2]};
    case LayerKind::MaxPool2:
    case LayerKind::SpaceToDepth:
      if (in[1] % 2 != 0 || in[2] % 2 != 0) {
        err = "spatial dims must be even at " + std::string(layer_kind_name(l.kind)) + ", got " +
              to_string(in);
        return std::nullopt;
      }
      return Shape{l.kind == LayerKind::MaxPool2 ? in[0] : 4 * in[0], in[1] / 2, in[2] / 2};
    case LayerKind::BypassConcat:
      err = "reorder and concat are expressed through the network bypass, not as layers";
      return std::nullopt;
  }
  err = "unknown layer kind";
  return std::nullopt;
}

/// Walks the network, appending steps to `trace` and problems to `violations`.
/// Stops at the first shape failure since later shapes are undefined.
inline void propagate(const NetSpec& net, std::vector<LayerTrace>& trace,
                      std::vector<std::string>& violations) {
  const Shape& in = net.input_shape;
  if (in.size() != 3 || in[0] != 3 || in[1] == 0 || in[2] == 0) {
    violations.push_back("input: shape must be (3,H,W) with H,W >= 1, got " + to_string(in));
    return;
  }
  if (net.bundles.empty()) violations.push_back("network needs at least one bundle");
  for (auto p : net.pool_after) {
    if (p >= net.bundles.size())
      violations.push_back("pool_after: index " + std::to_string(p) + " has no bundle");
  }
  if (net.head.empty()) {
    violations.push_back("head must emit 10 channels (head is empty)");
  } else if (net.head.back().kind != LayerKind::PWConv1 ||
             net.head.back().out_channels != kHeadChannels) {
    violations.push_back("head must emit 10 channels");
  }
  if (net.bypass) {
    const auto& bp = *net.bypass;
    if (bp.destination <= bp.source) violations.push_back("bypass must be forward");
    if (bp.source >= net.bundles.size() || bp.destination > net.head_stage())
      violations.push_back("bypass indices out of range");
  }
  if (!violations.empty()) return;

  Shape cur = in;
  std::optional<Shape> held;
  auto run_layers = [&](const std::vector<LayerSpec>& layers, std::size_t stage) {
    const auto prefix = stage_prefix(net, stage);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      std::string err;
      const auto name = prefix + ".l" + std::to_string(i);
      if (layers[i].kind == LayerKind::SpaceToDepth) err = "reorder is expressed through the network bypass";
      auto out = err.empty() ? apply_shape(layers[i], cur, err) : std::nullopt;
      if (!out) {
        violations.push_back(name + ": " + err);
        return false;
      }
      trace.push_back({name, layers[i], stage, cur, *out});
      cur = *out;
    }
    return true;
  };
  auto concat_here = [&](std::size_t stage) {
    if (!net.bypass || net.bypass->destination != stage) return true;
    const auto name = stage_prefix(net, stage) + ".concat";
    if (!held || (*held)[1] != cur[1] || (*held)[2] != cur[2]) {
      violations.push_back(name + ": bypass spatial mismatch, reordered source " +
                           (held ? to_string(*held) : std::string("(missing)")) +
                           " vs destination " + to_string(cur));
      return false;
    }
    Shape out{cur[0] + (*held)[0], cur[1], cur[2]};
    trace.push_back({name, LayerSpec::concat(net.bypass->source), stage, cur, out});
    cur = out;
    return true;
  };

  for (std::size_t s = 0; s < net.bundles.size(); ++s) {
    const auto prefix = stage_prefix(net, s);
    if (net.bundles[s].layers.empty()) {
      violations.push_back(prefix + ": bundle must not be empty");
      return;
    }
    if (!concat_here(s) || !run_layers(net.bundles[s].layers, s)) return;
    if (net.bypass && net.bypass->source == s) {
      std::string err;
      auto out = apply_shape(LayerSpec::reorder(), cur, err);
      if (!out) {
        violations.push_back(prefix + ".reorder: " + err);
        return;
      }
      trace.push_back({prefix + ".reorder", LayerSpec::reorder(), s, cur, *out, true});
      held = out;
    }
    if (net.pool_after.contains(s)) {
      std::string err;
      auto out = apply_shape(LayerSpec::pool(), cur, err);
      if (!out) {
        violations.push_back(prefix + ".pool: " + err);
        return;
      }
      trace.push_back({prefix + ".pool", LayerSpec::pool(), s, cur, *out});
      cur = *out;
    }
  }
  if (!concat_here(net.head_stage())) return;
  run_layers(net.head, net.head_stage());
}

}  // namespace detail

/// Returns every structural problem; an empty list means the spec is usable.
inline std::vector<std::string> validate(const NetSpec& net) {
  std::vector<LayerTrace> trace;
  std::vector<std::string> violations;
  detail::propagate(net, trace, violations);
  return violations;
}

inline std::vector<LayerTrace> infer_shapes(const NetSpec& net) {
  std::vector<LayerTrace> trace;
  std::vector<std::string> violations;
  detail::propagate(net, trace, violations);
  if (!violations.empty()) throw ValidationError(std::move(violations));
  return trace;
}

inline Shape output_shape(const NetSpec& net) { return infer_shapes(net).back().out; }

// ---------------------------------------------------------------------------
// Parameters

struct ParamCount {
  std::uint64_t conv_weights = 0;
  std::uint64_t bn_params = 0;
  std::uint64_t total() const { return conv_weights + bn_params; }
  std::uint64_t bytes_f32() const { return 4 * total(); }
};

/// Named parameter tensors a layer owns, in storage order.
inline std::vector<std::pair<std::string, Shape>> layer_param_shapes(const LayerTrace& t) {
  switch (t.layer.kind) {
    case LayerKind::DWConv3:
      return {{t.name + ".weight", Shape{t.in[0], 3, 3}}};
    case LayerKind::PWConv1:
      return {{t.name + ".weight", Shape{t.out[0], t.in[0]}}};
    case LayerKind::BatchNorm: {
      const Shape c{t.in[0]};
      return {{t.name + ".gamma", c}, {t.name + ".beta", c}, {t.name + ".mean", c},
              {t.name + ".var", c}};
    }
    default:
      return {};
  }
}

inline std::vector<std::pair<std::string, Shape>> param_shapes(const NetSpec& net) {
  std::vector<std::pair<std::string, Shape>> all;
  for (const auto& t : infer_shapes(net)) {
    auto p = layer_param_shapes(t);
    all.insert(all.end(), p.begin(), p.end());
  }
  return all;
}

inline ParamCount count_params(const NetSpec& net) {
  ParamCount pc;
  for (const auto& t : infer_shapes(net)) {
    for (const auto& [name, shape] : layer_param_shapes(t)) {
      (t.layer.kind == LayerKind::BatchNorm ? pc.bn_params : pc.conv_weights) +=
          element_count(shape);
    }
  }
  return pc;
}

template <class T>
class WeightSet {
 public:
  void set(std::string name, Tensor<T> t) { tensors_.insert_or_assign(std::move(name), std::move(t)); }

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing weights for " + name);
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing weights for " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.contains(name); }
  std::size_t size() const { return tensors_.size(); }

  std::uint64_t total_scalars() const {
    std::uint64_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  BatchNormParams<T> batchnorm(const std::string& layer) const {
    auto vec = [&](const char* s) { return at(layer + s).values(); };
    return {vec(".gamma"), vec(".beta"), vec(".mean"), vec(".var"),
            static_cast<T>(kDefaultBatchNormEps)};
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  template <class U>
  WeightSet<U> cast() const {
    WeightSet<U> out;
    for (const auto& [n, t] : tensors_) out.set(n, t.template cast<U>());
    return out;
  }

  friend bool operator==(const WeightSet&, const WeightSet&) = default;

 private:
  std::map<std::string, Tensor<T>> tensors_;
};

enum class WeightInit {
  Zero,      // conv weights 0
  Uniform,   // conv weights U(-0.05, 0.05)
  FanIn,     // conv weights U(-b, b), b = sqrt(6 / fan_in); keeps activations O(1)
};

/// Deterministic uniform draw in [0,1) with 53 bits from a 64-bit engine.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Batch-norm tensors start as identity (gamma 1, beta 0, mean 0, var 1).
template <class T>
WeightSet<T> init_weights(const NetSpec& net, std::uint64_t seed,
                          WeightInit init = WeightInit::Uniform) {
  std::mt19937_64 rng(seed);
  WeightSet<T> ws;
  for (const auto& [name, shape] : param_shapes(net)) {
    Tensor<T> t(shape);
    const auto suffix = name.substr(name.rfind('.'));
    if (suffix == ".weight") {
      double bound = 0.0;
      if (init == WeightInit::Uniform) bound = 0.05;
      if (init == WeightInit::FanIn) {
        const double fan_in = shape.size() == 2 ? static_cast<double>(shape[1]) : 9.0;
        bound = std::sqrt(6.0 / fan_in);
      }
      if (bound > 0) {
        for (auto& v : t.data()) v = static_cast<T>(bound * (2.0 * unit_uniform(rng) - 1.0));
      }
    } else if (suffix == ".gamma" || suffix == ".var") {
      t = Tensor<T>(shape, T{1});
    }
    ws.set(name, std::move(t));
  }
  return ws;
}

/// Throws ShapeError naming the first layer whose weights are missing or misshapen.
template <class T>
void check_weights(const NetSpec& net, const WeightSet<T>& ws) {
  for (const auto& [name, shape] : param_shapes(net)) {
    if (!ws.contains(name)) throw ShapeError("missing weights for " + name);
    if (ws.at(name).shape() != shape) {
      throw ShapeError("weights " + name + " have shape " + to_string(ws.at(name).shape()) +
                       ", layer expects " + to_string(shape));
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Applies one non-branch, non-concat step.
template <class T>
Tensor<T> apply_layer(const LayerTrace& step, const WeightSet<T>& ws, const Tensor<T>& x) {
  switch (step.layer.kind) {
    case LayerKind::DWConv3: return dw_conv3(x, ws.at(step.name + ".weight"));
    case LayerKind::PWConv1: return pw_conv1(x, ws.at(step.name + ".weight"));
    case LayerKind::BatchNorm: return batchnorm_infer(x, ws.batchnorm(step.name));
    case LayerKind::ReLU: return relu(x);
    case LayerKind::ReLU6: return relu6(x);
    case LayerKind::MaxPool2: return maxpool2(x);
    case LayerKind::SpaceToDepth: return space_to_depth(x);
    case LayerKind::BypassConcat: break;
  }
  throw DomainError("apply_layer: " + step.name + " is not a single-input layer");
}

/// Runs the network; `observe(step, output)` sees every step's result.
template <class T, class Observer>
Tensor<T> forward_observed(const NetSpec& net, const WeightSet<T>& ws, const Tensor<T>& x,
                           Observer&& observe) {
  if (x.shape() != net.input_shape) {
    throw ShapeError("input: tensor " + to_string(x.shape()) + " does not match network input " +
                     to_string(net.input_shape));
  }
  const auto plan = infer_shapes(net);
  check_weights(net, ws);
  Tensor<T> cur = x;
  std::optional<Tensor<T>> held;
  for (const auto& step : plan) {
    if (step.branch) {
      held = apply_layer(step, ws, cur);
      observe(step, *held);
      continue;
    }
    cur = step.layer.kind == LayerKind::BypassConcat ? concat_channels(cur, *held)
                                                     : apply_layer(step, ws, cur);
    if (cur.shape() != step.out) {
      throw ShapeError(step.name + ": produced " + to_string(cur.shape()) + ", expected " +
                       to_string(step.out));
    }
    observe(step, cur);
  }
  return cur;
}

template <class T>
Tensor<T> forward(const NetSpec& net, const WeightSet<T>& ws, const Tensor<T>& x) {
  return forward_observed(net, ws, x, [](const LayerTrace&, const Tensor<T>&) {});
}

// ---------------------------------------------------------------------------
// Feature addition

struct BypassFeature {
  std::size_t source = 2;
  std::optional<std::size_t> destination;  // defaults to the head
  std::size_t head_width = 96;             // middle PW width of the fused head
};

struct Features {
  std::optional<BypassFeature> bypass;
  bool relu6 = false;
};

/// Returns a copy of `net` with a reordered bypass and/or ReLU6 activations.
/// A bypass into the head replaces the head with the fused DW+PW+PW(10) form.
inline NetSpec add_features(const NetSpec& net, const Features& features) {
  NetSpec out = net;
  if (features.bypass) {
    if (out.bypass) throw ValidationError({"single bypass supported"});
    const auto& req = *features.bypass;
    const auto dest = req.destination.value_or(out.head_stage());
    out.bypass = Bypass{req.source, dest};
    if (dest == out.head_stage()) {
      bool plain_relu = false;
      for (const auto& b : out.bundles)
        for (const auto& l : b.layers) plain_relu |= l.kind == LayerKind::ReLU;
      out.head = fused_head(req.head_width, plain_relu ? LayerKind::ReLU : LayerKind::ReLU6);
    }
  }
  if (features.relu6) {
    auto swap = [](std::vector<LayerSpec>& layers) {
      for (auto& l : layers)
        if (l.kind == LayerKind::ReLU) l.kind = LayerKind::ReLU6;
    };
    for (auto& b : out.bundles) swap(b.layers);
    swap(out.head);
  }
  if (auto v = validate(out); !v.empty()) throw ValidationError(std::move(v));
  return out;
}

}  // namespace skynet
