#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <variant>

#include "json.hpp"
#include "skynet/arch.hpp"

// Roofline-style latency/resource estimates for layers and networks.
//
//   cycles  = max(macs / macs_per_cycle, bytes / bytes_per_cycle + overhead)
//   latency = cycles / (clock_mhz * 1e3)   [ms]
//
// Resources: "compute_units" (MAC lanes a conv engine occupies) and
// "onchip_memory_bytes" (weights + double-buffered activations).

namespace skynet {

inline constexpr const char* kComputeUnits = "compute_units";
inline constexpr const char* kOnchipMemoryBytes = "onchip_memory_bytes";

struct HardwareProfile {
  std::uint64_t macs_per_cycle = 512;
  double clock_mhz = 200.0;
  double bytes_per_cycle = 16.0;
  double bytes_per_element = 4.0;
  std::map<std::string, double> resource_capacity{{kComputeUnits, 1024.0},
                                                  {kOnchipMemoryBytes, 64.0 * 1024 * 1024}};
  std::map<LayerKind, std::uint64_t> overhead_cycles;

  std::uint64_t overhead(LayerKind k) const {
    auto it = overhead_cycles.find(k);
    return it == overhead_cycles.end() ? 0 : it->second;
  }

  void check() const {
    if (macs_per_cycle == 0 || !(clock_mhz > 0) || !(bytes_per_cycle > 0) ||
        !(bytes_per_element > 0)) {
      throw DomainError("hardware profile: rates must be positive");
    }
    for (const auto& [name, cap] : resource_capacity) {
      if (!(cap > 0)) throw DomainError("hardware profile: capacity " + name + " must be positive");
    }
  }

  friend bool operator==(const HardwareProfile&, const HardwareProfile&) = default;
};

struct CostEstimate {
  double latency_ms = 0.0;
  std::map<std::string, double> resources;
  std::uint64_t macs = 0;
  std::uint64_t bytes_moved = 0;
  std::uint64_t weight_bytes = 0;
  std::uint64_t activation_bytes = 0;  // double-buffered in + out
};

inline std::uint64_t layer_macs(const LayerTrace& t) {
  switch (t.layer.kind) {
    case LayerKind::DWConv3: return 9ull * element_count(t.in);
    case LayerKind::PWConv1: return static_cast<std::uint64_t>(t.in[0]) * element_count(t.out);
    default: return 0;
  }
}

inline CostEstimate estimate_layer(const LayerTrace& t, const HardwareProfile& profile) {
  switch (t.layer.kind) {
    case LayerKind::DWConv3: case LayerKind::PWConv1: case LayerKind::BatchNorm:
    case LayerKind::ReLU: case LayerKind::ReLU6: case LayerKind::MaxPool2:
    case LayerKind::SpaceToDepth: case LayerKind::BypassConcat:
      break;
    default:
      throw DomainError("estimate_layer: unknown layer kind");
  }
  std::uint64_t weight_elems = 0;
  for (const auto& [_, s] : layer_param_shapes(t)) weight_elems += element_count(s);
  const auto bpe = profile.bytes_per_element;
  const auto in_elems = element_count(t.in), out_elems = element_count(t.out);

  CostEstimate est;
  est.macs = layer_macs(t);
  est.weight_bytes = static_cast<std::uint64_t>(std::ceil(static_cast<double>(weight_elems) * bpe));
  const auto act_bytes = static_cast<std::uint64_t>(
      std::ceil(static_cast<double>(in_elems + out_elems) * bpe));
  est.bytes_moved = act_bytes + est.weight_bytes;
  est.activation_bytes = 2 * act_bytes;

  const double compute_cycles =
      static_cast<double>(est.macs) / static_cast<double>(profile.macs_per_cycle);
  const double memory_cycles = static_cast<double>(est.bytes_moved) / profile.bytes_per_cycle +
                               static_cast<double>(profile.overhead(t.layer.kind));
  est.latency_ms = std::max(compute_cycles, memory_cycles) / (profile.clock_mhz * 1e3);

  est.resources[kComputeUnits] =
      is_conv(t.layer.kind) ? static_cast<double>(profile.macs_per_cycle) : 0.0;
  est.resources[kOnchipMemoryBytes] = static_cast<double>(est.weight_bytes + est.activation_bytes);
  return est;
}

/// Convenience for a single-input layer applied to `in_shape`.
inline CostEstimate estimate_layer(const LayerSpec& layer, const Shape& in_shape,
                                   const HardwareProfile& profile) {
  if (in_shape.size() != 3) throw ShapeError("estimate_layer: input must be (C,H,W)");
  if (layer.kind == LayerKind::BypassConcat)
    throw DomainError("estimate_layer: concat needs both inputs; estimate it from a LayerTrace");
  std::string err;
  auto out = detail::apply_shape(layer, in_shape, err);
  if (!out) throw ShapeError("estimate_layer: " + err);
  return estimate_layer(LayerTrace{"layer", layer, 0, in_shape, *out}, profile);
}

/// Sequential execution: latencies add, weight memory adds, activation
/// memory and compute units peak.
inline CostEstimate estimate_net(const NetSpec& net, const HardwareProfile& profile) {
  profile.check();
  CostEstimate total;
  double peak_units = 0.0;
  for (const auto& step : infer_shapes(net)) {
    const auto est = estimate_layer(step, profile);
    total.latency_ms += est.latency_ms;
    total.macs += est.macs;
    total.bytes_moved += est.bytes_moved;
    total.weight_bytes += est.weight_bytes;
    total.activation_bytes = std::max(total.activation_bytes, est.activation_bytes);
    peak_units = std::max(peak_units, est.resources.at(kComputeUnits));
  }
  total.resources[kComputeUnits] = peak_units;
  total.resources[kOnchipMemoryBytes] =
      static_cast<double>(total.weight_bytes + total.activation_bytes);
  return total;
}

/// Strict: every component must be below its cap.
inline bool within_budget(const CostEstimate& est, const std::map<std::string, double>& res_max) {
  for (const auto& [name, cap] : res_max) {
    auto it = est.resources.find(name);
    if (it == est.resources.end())
      throw DomainError("within_budget: estimate has no resource component " + name);
    if (!(it->second < cap)) return false;
  }
  for (const auto& [name, _] : est.resources) {
    if (!res_max.contains(name))
      throw DomainError("within_budget: no cap given for resource component " + name);
  }
  return true;
}

/// A network-level estimator: the roofline above, or a flat per-bundle
/// latency used for calibration fixtures.
class CostModel {
 public:
  struct PerBundle {
    double ms_per_bundle = 10.0;
  };

  CostModel() = default;
  explicit CostModel(HardwareProfile p) : impl_(std::move(p)) {}
  explicit CostModel(PerBundle p) : impl_(p) {}

  CostEstimate operator()(const NetSpec& net) const {
    if (const auto* hw = std::get_if<HardwareProfile>(&impl_)) return estimate_net(net, *hw);
    const auto& pb = std::get<PerBundle>(impl_);
    CostEstimate est;
    est.latency_ms = pb.ms_per_bundle * static_cast<double>(net.bundles.size());
    est.resources = {{kComputeUnits, 0.0}, {kOnchipMemoryBytes, 0.0}};
    return est;
  }

  const HardwareProfile* profile() const { return std::get_if<HardwareProfile>(&impl_); }

 private:
  std::variant<HardwareProfile, PerBundle> impl_;
};

// ---------------------------------------------------------------------------
// JSON

inline HardwareProfile profile_from_json(const nlohmann::json& j) {
  HardwareProfile p;
  p.macs_per_cycle = j.at("macs_per_cycle").get<std::uint64_t>();
  p.clock_mhz = j.at("clock_mhz").get<double>();
  p.bytes_per_cycle = j.at("bytes_per_cycle").get<double>();
  p.bytes_per_element = j.value("bytes_per_element", 4.0);
  if (j.contains("resource_capacity")) {
    p.resource_capacity.clear();
    for (const auto& [k, v] : j.at("resource_capacity").items()) p.resource_capacity[k] = v.get<double>();
  }
  if (j.contains("overhead_cycles")) {
    for (const auto& [k, v] : j.at("overhead_cycles").items()) {
      auto kind = parse_layer_kind(k);
      if (!kind) throw DomainError("hardware profile: unknown layer kind " + k);
      const auto cycles = v.get<std::int64_t>();
      if (cycles < 0) throw DomainError("hardware profile: overhead cycles must be >= 0");
      p.overhead_cycles[*kind] = static_cast<std::uint64_t>(cycles);
    }
  }
  p.check();
  return p;
}

inline nlohmann::ordered_json profile_to_json(const HardwareProfile& p) {
  nlohmann::ordered_json j;
  j["macs_per_cycle"] = p.macs_per_cycle;
  j["clock_mhz"] = p.clock_mhz;
  j["bytes_per_cycle"] = p.bytes_per_cycle;
  j["bytes_per_element"] = p.bytes_per_element;
  j["resource_capacity"] = p.resource_capacity;
  nlohmann::ordered_json oh = nlohmann::ordered_json::object();
  for (const auto& [k, v] : p.overhead_cycles) oh[std::string(layer_kind_name(k))] = v;
  j["overhead_cycles"] = oh;
  return j;
}

/// Accepts a hardware profile, or {"model": "per_bundle", "ms_per_bundle": x}.
inline CostModel cost_model_from_json(const nlohmann::json& j) {
  if (j.value("model", std::string("roofline")) == "per_bundle") {
    const double ms = j.at("ms_per_bundle").get<double>();
    if (!(ms > 0)) throw DomainError("cost model: ms_per_bundle must be positive");
    return CostModel(CostModel::PerBundle{ms});
  }
  return CostModel(profile_from_json(j));
}

}  // namespace skynet
