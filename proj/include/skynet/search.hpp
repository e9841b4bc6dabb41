#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "skynet/costmodel.hpp"
#include "skynet/dataset.hpp"
#include "skynet/train.hpp"

// Bottom-up flow, steps 1 and 2:
//   1. enumerate candidate bundles, quick-train each inside a fixed sketch
//      network and record its latency and proxy accuracy;
//   2. stochastic coordinate descent on the stacked network toward
//      |lat_targ - lat| < eps with every resource strictly under its cap.

namespace skynet {

// ---------------------------------------------------------------------------
// Step 1: bundle enumeration and scoring

/// Every sequence of 1..max_layers layers drawn from `alphabet` that contains
/// at least one convolution. Duplicate alphabet entries collapse; reorder and
/// concat are network features, not bundle layers, and are ignored.
inline std::vector<Bundle> enumerate_bundles(std::vector<LayerSpec> alphabet,
                                             std::size_t max_layers) {
  std::erase_if(alphabet, [](const LayerSpec& l) {
    return l.kind == LayerKind::SpaceToDepth || l.kind == LayerKind::BypassConcat;
  });
  std::sort(alphabet.begin(), alphabet.end());
  alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
  std::vector<Bundle> out;
  if (alphabet.empty() || max_layers == 0) return out;

  std::vector<LayerSpec> seq;
  std::function<void(std::size_t)> extend = [&](std::size_t remaining) {
    if (!seq.empty() && std::any_of(seq.begin(), seq.end(), [](const LayerSpec& l) {
          return is_conv(l.kind);
        })) {
      out.push_back(Bundle{seq});
    }
    if (remaining == 0) return;
    for (const auto& l : alphabet) {
      seq.push_back(l);
      extend(remaining - 1);
      seq.pop_back();
    }
  };
  extend(max_layers);
  return out;
}

/// Fixed front-end/back-end network that a candidate bundle is dropped into.
struct SketchConfig {
  Shape input_shape{3, 32, 32};
  std::size_t replications = 2;
  bool pool_after_each = true;
  std::vector<LayerSpec> back_end{LayerSpec::pw(kHeadChannels)};
  double learning_rate = 0.02;
  WeightInit init = WeightInit::FanIn;
};

inline NetSpec build_sketch(const Bundle& bundle, const SketchConfig& sketch) {
  NetSpec net;
  net.input_shape = sketch.input_shape;
  for (std::size_t r = 0; r < sketch.replications; ++r) {
    net.bundles.push_back(bundle);
    if (sketch.pool_after_each) net.pool_after.insert(r);
  }
  net.head = sketch.back_end;
  return net;
}

/// Objectness map on the head grid: 1 where a cell overlaps the box.
inline Tensor<double> objectness_target(const BBox& box, std::size_t rows, std::size_t cols) {
  Tensor<double> t({1, rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const BBox cell{static_cast<double>(j) / static_cast<double>(cols),
                      static_cast<double>(i) / static_cast<double>(rows),
                      static_cast<double>(j + 1) / static_cast<double>(cols),
                      static_cast<double>(i + 1) / static_cast<double>(rows)};
      const double iw = std::min(cell.xmax, box.xmax) - std::max(cell.xmin, box.xmin);
      const double ih = std::min(cell.ymax, box.ymax) - std::max(cell.ymin, box.ymin);
      t(0, i, j) = (iw > 0 && ih > 0) ? 1.0 : 0.0;
    }
  return t;
}

/// Mean squared error between anchor 0's confidence logit map and the
/// objectness target. Writes dL/dhead into `grad` when non-null.
inline double objectness_loss(const Tensor<double>& head, const BBox& box, Tensor<double>* grad) {
  const std::size_t rows = head.height(), cols = head.width();
  const auto target = objectness_target(box, rows, cols);
  const double n = static_cast<double>(rows * cols);
  double loss = 0;
  if (grad) *grad = Tensor<double>(head.shape());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = head(4, i, j) - target(0, i, j);
      loss += d * d / n;
      if (grad) (*grad)(4, i, j) = 2.0 * d / n;
    }
  return loss;
}

struct ToyDataset {
  std::vector<Sample<double>> train;
  std::vector<Sample<double>> validation;
};

inline ToyDataset make_toy_dataset(const Shape& image_shape, std::size_t n_train,
                                   std::size_t n_val, std::uint64_t seed) {
  return {synthetic_detection_set<double>(n_train, image_shape, seed),
          synthetic_detection_set<double>(n_val, image_shape, seed ^ 0x9e3779b97f4a7c15ull)};
}

struct BundleCandidate {
  Bundle bundle;
  CostEstimate latency;
  double proxy_accuracy = 0;   // 1 / (1 + validation loss)
  double validation_loss = 0;
  std::vector<double> loss_curve;  // mean training-set loss before epoch 1, then after each epoch
  bool feasible = false;
  std::string reason;
};

inline double mean_loss(const NetSpec& net, const WeightSet<double>& ws,
                        const std::vector<Sample<double>>& data) {
  double sum = 0;
  for (const auto& s : data) sum += objectness_loss(forward(net, ws, s.image), s.box, nullptr);
  return sum / static_cast<double>(data.size());
}

/// Quick-trains `bundle` inside the sketch with per-sample SGD and records the
/// latency estimate of the instantiated sketch plus resource feasibility.
inline BundleCandidate score_bundle(const Bundle& bundle, const SketchConfig& sketch,
                                    const ToyDataset& data, std::size_t epochs,
                                    const CostModel& cost,
                                    const std::map<std::string, double>& res_max,
                                    std::uint64_t seed) {
  if (epochs == 0) throw DomainError("score_bundle: epochs must be >= 1");
  if (data.train.empty() || data.validation.empty())
    throw DomainError("score_bundle: dataset must not be empty");

  BundleCandidate cand;
  cand.bundle = bundle;
  const NetSpec net = build_sketch(bundle, sketch);
  if (auto v = validate(net); !v.empty()) {
    cand.reason = "sketch invalid: " + v.front();
    return cand;
  }
  cand.latency = cost(net);
  const bool budget_ok = within_budget(cand.latency, res_max);

  auto ws = init_weights<double>(net, seed, sketch.init);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  cand.loss_curve.push_back(mean_loss(net, ws, data.train));
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (auto idx : order) {
      const auto& s = data.train[idx];
      auto tape = forward_tape(net, ws, s.image);
      Tensor<double> g;
      objectness_loss(tape.output, s.box, &g);
      auto grads = backward_net(ws, tape, g);
      sgd_step(ws, grads.weights, sketch.learning_rate);
    }
    const double loss = mean_loss(net, ws, data.train);
    cand.loss_curve.push_back(loss);
    if (!std::isfinite(loss)) {
      cand.reason = "training diverged at epoch " + std::to_string(e + 1);
      return cand;
    }
  }
  cand.validation_loss = mean_loss(net, ws, data.validation);
  if (!std::isfinite(cand.validation_loss)) {
    cand.reason = "validation loss is not finite";
    return cand;
  }
  cand.proxy_accuracy = 1.0 / (1.0 + cand.validation_loss);
  cand.feasible = budget_ok;
  if (!budget_ok) cand.reason = "resource budget exceeded";
  return cand;
}

/// Feasible candidates meeting the latency limit, best proxy accuracy first.
inline std::vector<BundleCandidate> select_bundles(std::vector<BundleCandidate> cands,
                                                   double latency_limit_ms, std::size_t keep) {
  std::erase_if(cands, [&](const BundleCandidate& c) {
    return !c.feasible || c.latency.latency_ms > latency_limit_ms;
  });
  std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
    return a.proxy_accuracy > b.proxy_accuracy;
  });
  if (cands.size() > keep) cands.resize(keep);
  return cands;
}

// ---------------------------------------------------------------------------
// Step 2: stochastic coordinate descent

enum class Coordinate { BundleReplications, DownsamplingConfig, ChannelExpansionConfig };
inline constexpr std::size_t kCoordinateCount = 3;

inline constexpr const char* coordinate_name(Coordinate c) {
  switch (c) {
    case Coordinate::BundleReplications: return "bundle_replications";
    case Coordinate::DownsamplingConfig: return "downsampling";
    case Coordinate::ChannelExpansionConfig: return "channel_expansion";
  }
  return "unknown";
}

struct SearchConfig {
  double lat_targ_ms = 0;
  double epsilon_ms = 0;
  std::map<std::string, double> res_max;
  std::size_t max_iters = 100;
  std::uint64_t rng_seed = 0;
  std::size_t channel_step = 2;

  void check() const {
    if (!(lat_targ_ms > 0) || !(epsilon_ms > 0))
      throw DomainError("search config: latency target and tolerance must be positive");
    if (!(epsilon_ms < lat_targ_ms))
      throw DomainError("search config: tolerance must be below the latency target");
    if (res_max.empty()) throw DomainError("search config: res_max must name at least one resource");
    if (channel_step < 2) throw DomainError("search config: channel step must be >= 2");
  }
};

struct TraceRecord {
  std::size_t iter = 0;
  std::string coordinate;
  std::string move;
  double lat_ms = 0;
  std::map<std::string, double> res;
  bool accepted = false;
};

enum class SearchStatus { Satisfied, Stalled, Exhausted };

inline constexpr const char* status_name(SearchStatus s) {
  switch (s) {
    case SearchStatus::Satisfied: return "satisfied";
    case SearchStatus::Stalled: return "stalled";
    case SearchStatus::Exhausted: return "exhausted";
  }
  return "unknown";
}

struct SearchResult {
  NetSpec best;
  CostEstimate best_cost;
  SearchStatus status = SearchStatus::Exhausted;
  std::vector<TraceRecord> trace;
};

struct Move {
  std::string name;
  NetSpec spec;
};

namespace detail {

inline std::set<std::size_t> shift_indices(const std::set<std::size_t>& s, std::size_t from,
                                           std::ptrdiff_t delta) {
  std::set<std::size_t> out;
  for (auto i : s) out.insert(i >= from ? static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + delta) : i);
  return out;
}

inline std::optional<std::size_t> last_pw(const Bundle& b) {
  for (std::size_t k = b.layers.size(); k-- > 0;)
    if (b.layers[k].kind == LayerKind::PWConv1) return k;
  return std::nullopt;
}

}  // namespace detail

/// Single-step moves along one coordinate, in a fixed order.
inline std::vector<Move> coordinate_moves(const NetSpec& net, Coordinate c, std::size_t step) {
  std::vector<Move> moves;
  const std::size_t n = net.bundles.size();
  switch (c) {
    case Coordinate::BundleReplications:
      for (std::size_t i = 0; i < n; ++i) {
        // The copy goes right after bundle i and inherits its down-sampling.
        NetSpec s = net;
        s.bundles.insert(s.bundles.begin() + static_cast<std::ptrdiff_t>(i) + 1, net.bundles[i]);
        s.pool_after = detail::shift_indices(net.pool_after, i, +1);
        if (s.bypass) {
          if (s.bypass->source >= i) ++s.bypass->source;
          if (s.bypass->destination > i) ++s.bypass->destination;
        }
        moves.push_back({"replicate b" + std::to_string(i), std::move(s)});
      }
      for (std::size_t i = 0; n > 1 && i < n; ++i) {
        if (net.bypass && net.bypass->source == i) continue;
        NetSpec s = net;
        s.bundles.erase(s.bundles.begin() + static_cast<std::ptrdiff_t>(i));
        std::set<std::size_t> pools;
        for (auto p : net.pool_after) {
          if (p < i) pools.insert(p);
          else if (p > i) pools.insert(p - 1);
          else if (i > 0) pools.insert(i - 1);  // keep the pool at the same depth
        }
        s.pool_after = std::move(pools);
        if (s.bypass) {
          if (s.bypass->source > i) --s.bypass->source;
          if (s.bypass->destination > i) --s.bypass->destination;
        }
        moves.push_back({"remove b" + std::to_string(i), std::move(s)});
      }
      break;
    case Coordinate::DownsamplingConfig:
      for (auto p : net.pool_after) {
        NetSpec s = net;
        s.pool_after.erase(p);
        moves.push_back({"remove pool b" + std::to_string(p), s});
        for (std::ptrdiff_t d : {-1, +1}) {
          const auto q = static_cast<std::ptrdiff_t>(p) + d;
          if (q < 0 || q >= static_cast<std::ptrdiff_t>(n) || net.pool_after.contains(static_cast<std::size_t>(q)))
            continue;
          NetSpec m = s;
          m.pool_after.insert(static_cast<std::size_t>(q));
          moves.push_back({"move pool b" + std::to_string(p) + "->b" + std::to_string(q), std::move(m)});
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (net.pool_after.contains(i)) continue;
        NetSpec s = net;
        s.pool_after.insert(i);
        moves.push_back({"insert pool b" + std::to_string(i), std::move(s)});
      }
      break;
    case Coordinate::ChannelExpansionConfig:
      for (std::size_t i = 0; i < n; ++i) {
        const auto k = detail::last_pw(net.bundles[i]);
        if (!k) continue;
        const auto width = net.bundles[i].layers[*k].out_channels;
        NetSpec wide = net;
        wide.bundles[i].layers[*k].out_channels = width * step;
        moves.push_back({"widen b" + std::to_string(i) + " " + std::to_string(width) + "->" +
                             std::to_string(width * step),
                         std::move(wide)});
        if (width % step == 0 && width / step >= 1) {
          NetSpec narrow = net;
          narrow.bundles[i].layers[*k].out_channels = width / step;
          moves.push_back({"narrow b" + std::to_string(i) + " " + std::to_string(width) + "->" +
                               std::to_string(width / step),
                           std::move(narrow)});
        }
      }
      break;
  }
  return moves;
}

/// max(0, |lat - target| - eps)
inline double objective_distance(double lat_ms, const SearchConfig& cfg) {
  return std::max(0.0, std::abs(lat_ms - cfg.lat_targ_ms) - cfg.epsilon_ms);
}

inline bool objective_met(const CostEstimate& est, const SearchConfig& cfg) {
  return std::abs(cfg.lat_targ_ms - est.latency_ms) < cfg.epsilon_ms &&
         within_budget(est, cfg.res_max);
}

/// Each iteration draws one coordinate from the seeded engine, evaluates all
/// valid single-step moves along it, and accepts the best resource-feasible
/// move if it strictly lowers the objective distance (any feasible move is an
/// improvement over an infeasible current spec). Stops when the objective is
/// met, after `max_iters` iterations, or after 3 * coordinates consecutive
/// rejections (stalled).
inline SearchResult scd_search(const NetSpec& initial, const SearchConfig& cfg,
                               const CostModel& cost) {
  cfg.check();
  if (auto v = validate(initial); !v.empty()) throw ValidationError(std::move(v));

  SearchResult result;
  result.best = initial;
  result.best_cost = cost(initial);
  bool cur_feasible = within_budget(result.best_cost, cfg.res_max);
  double cur_dist = objective_distance(result.best_cost.latency_ms, cfg);
  result.trace.push_back({0, "initial", "initial", result.best_cost.latency_ms,
                          result.best_cost.resources, true});
  if (objective_met(result.best_cost, cfg)) {
    result.status = SearchStatus::Satisfied;
    return result;
  }

  std::mt19937_64 rng(cfg.rng_seed);
  const std::size_t stall_limit = 3 * std::max<std::size_t>(1, kCoordinateCount);
  std::size_t rejections = 0;
  for (std::size_t iter = 1; iter <= cfg.max_iters; ++iter) {
    const auto coord = static_cast<Coordinate>(rng() % kCoordinateCount);
    TraceRecord rec{iter, coordinate_name(coord), "none", result.best_cost.latency_ms,
                    result.best_cost.resources, false};

    const Move* best_move = nullptr;
    CostEstimate best_est;
    double best_dist = INFINITY;
    const auto moves = coordinate_moves(result.best, coord, cfg.channel_step);
    for (const auto& m : moves) {
      if (!validate(m.spec).empty()) continue;
      auto est = cost(m.spec);
      if (!within_budget(est, cfg.res_max)) continue;
      const double d = objective_distance(est.latency_ms, cfg);
      if (d < best_dist) {
        best_dist = d;
        best_move = &m;
        best_est = std::move(est);
      }
    }
    if (best_move) {
      rec.move = best_move->name;
      rec.lat_ms = best_est.latency_ms;
      rec.res = best_est.resources;
      rec.accepted = !cur_feasible || best_dist < cur_dist;
    }
    result.trace.push_back(rec);

    if (rec.accepted) {
      result.best = best_move->spec;
      result.best_cost = best_est;
      cur_feasible = true;
      cur_dist = best_dist;
      rejections = 0;
      if (objective_met(result.best_cost, cfg)) {
        result.status = SearchStatus::Satisfied;
        return result;
      }
    } else if (++rejections >= stall_limit) {
      result.status = SearchStatus::Stalled;
      return result;
    }
  }
  result.status = cur_feasible ? SearchStatus::Exhausted : SearchStatus::Stalled;
  return result;
}

inline nlohmann::ordered_json trace_record_json(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["iter"] = r.iter;
  j["coordinate"] = r.coordinate;
  j["move"] = r.move;
  j["lat_ms"] = r.lat_ms;
  j["res"] = r.res;
  j["accepted"] = r.accepted;
  return j;
}

/// One JSON object per line.
inline std::string trace_jsonl(const std::vector<TraceRecord>& trace) {
  std::string out;
  for (const auto& r : trace) out += trace_record_json(r).dump() + "\n";
  return out;
}

}  // namespace skynet
