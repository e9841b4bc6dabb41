#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "skynet/tensor.hpp"

namespace skynet {

/// Axis-aligned box in image-normalized coordinates.
struct BBox {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool ordered() const { return xmin <= xmax && ymin <= ymax; }
  bool inside_unit() const {
    return ordered() && xmin >= 0 && ymin >= 0 && xmax <= 1 && ymax <= 1;
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Anchor {
  double w = 0, h = 0;
};

using AnchorPair = std::array<Anchor, 2>;

// Skewed toward small objects; no published values exist for the two anchors.
inline constexpr AnchorPair kDefaultAnchors{{{0.05, 0.08}, {0.15, 0.25}}};

struct Detection {
  BBox box;
  double confidence = 0;
  std::size_t cell_y = 0, cell_x = 0, anchor = 0;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Decodes a (10,Hc,Wc) head: channel 5a+{0..4} holds anchor a's
/// (tx, ty, tw, th, tconf). Returns the single most confident box, scanning
/// rows, then columns, then anchors; the first maximum wins.
template <class T>
Detection decode_boxes(const Tensor<T>& head, const AnchorPair& anchors = kDefaultAnchors) {
  require_rank(head.shape(), 3, "decode_boxes");
  if (head.channels() != 10) {
    throw ShapeError("decode_boxes: head must have 10 channels (2 anchors x 5), got " +
                     to_string(head.shape()));
  }
  for (const auto& a : anchors) {
    if (!(a.w > 0) || !(a.h > 0)) throw DomainError("decode_boxes: anchors must be positive");
  }
  const std::size_t Hc = head.height(), Wc = head.width();
  Detection best;
  double best_logit = static_cast<double>(head(4, 0, 0));
  for (std::size_t cy = 0; cy < Hc; ++cy)
    for (std::size_t cx = 0; cx < Wc; ++cx)
      for (std::size_t a = 0; a < 2; ++a) {
        const double logit = static_cast<double>(head(5 * a + 4, cy, cx));
        if (logit > best_logit) {
          best_logit = logit;
          best.cell_y = cy, best.cell_x = cx, best.anchor = a;
        }
      }
  const std::size_t cy = best.cell_y, cx = best.cell_x, a = best.anchor;
  const double x = (static_cast<double>(cx) + sigmoid(static_cast<double>(head(5 * a, cy, cx)))) /
                   static_cast<double>(Wc);
  const double y = (static_cast<double>(cy) + sigmoid(static_cast<double>(head(5 * a + 1, cy, cx)))) /
                   static_cast<double>(Hc);
  const double w = anchors[a].w * std::exp(static_cast<double>(head(5 * a + 2, cy, cx)));
  const double h = anchors[a].h * std::exp(static_cast<double>(head(5 * a + 3, cy, cx)));
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  best.box = {clamp01(x - w / 2), clamp01(y - h / 2), clamp01(x + w / 2), clamp01(y + h / 2)};
  best.confidence = sigmoid(best_logit);
  return best;
}

/// Intersection over union; 0 when the union is empty.
inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  if (!(uni > 0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double mean_of(std::span<const double> values, const char* what) {
  if (values.empty()) throw DomainError(std::string(what) + ": empty list");
  double sum = 0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

/// Mean per-image IoU over the K test images.
inline double iou_score(std::span<const double> per_image) {
  for (double v : per_image) {
    if (!(v >= 0 && v <= 1)) throw DomainError("iou_score: IoU values must lie in [0,1]");
  }
  return mean_of(per_image, "iou_score");
}

/// Average energy of all I entries.
inline double mean_energy(std::span<const double> energies) {
  for (double e : energies) {
    if (!(e > 0)) throw DomainError("mean_energy: energies must be positive");
  }
  return mean_of(energies, "mean_energy");
}

enum class Track { GPU, FPGA };

inline constexpr double log_base(Track t) { return t == Track::GPU ? 10.0 : 2.0; }
inline constexpr const char* track_name(Track t) { return t == Track::GPU ? "gpu" : "fpga"; }

/// ES = max(0, 1 + 0.2 * log_x(e_mean / e_i)); x = 10 on GPU, 2 on FPGA.
inline double energy_score(double e_i, double e_mean, Track track) {
  if (!(e_i > 0) || !(e_mean > 0)) throw DomainError("energy_score: energies must be positive");
  return std::max(0.0, 1.0 + 0.2 * std::log(e_mean / e_i) / std::log(log_base(track)));
}

/// TS = R_IoU * (1 + ES)
inline double total_score(double r_iou, double es) { return r_iou * (1.0 + es); }

struct ScoreReport {
  double r_iou = 0;
  double energy_j = 0;
  double e_mean = 0;
  double es = 0;
  double ts = 0;
  Track track = Track::GPU;
  std::size_t images = 0;
};

inline ScoreReport score_team(std::span<const double> per_image_iou, double energy_j,
                              std::span<const double> all_energies, Track track) {
  ScoreReport r;
  r.r_iou = iou_score(per_image_iou);
  r.energy_j = energy_j;
  r.e_mean = mean_energy(all_energies);
  r.es = energy_score(energy_j, r.e_mean, track);
  r.ts = total_score(r.r_iou, r.es);
  r.track = track;
  r.images = per_image_iou.size();
  return r;
}

struct GroundTruthRecord {
  std::string image_id;
  int image_w = 1, image_h = 1;
  BBox box;  // normalized
};

/// Relative object size: normalized box area over unit image area.
inline double size_ratio(const GroundTruthRecord& r) { return r.box.area(); }

struct SizeHistogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;  // one per [edges[k], edges[k+1])
  std::vector<double> cdf;          // fraction of records at or below bin k
  std::size_t total = 0;

  /// Cumulative fraction up to `edge`, which must be one of the bin edges.
  double cdf_at_edge(double edge) const {
    if (!edges.empty() && edge == edges.front()) return 0.0;
    for (std::size_t k = 0; k + 1 < edges.size(); ++k)
      if (edges[k + 1] == edge) return cdf[k];
    throw DomainError("cdf_at_edge: not a bin edge");
  }
};

/// Bins are half-open except the last, which is closed. Ratios below the first
/// edge count toward the first bin and ratios above the last edge toward the
/// last bin, so counts always sum to the record count.
inline SizeHistogram analyze_size_distribution(std::span<const GroundTruthRecord> manifest,
                                               std::span<const double> edges) {
  if (manifest.empty()) throw DomainError("analyze_size_distribution: empty manifest");
  if (edges.size() < 2) throw DomainError("analyze_size_distribution: need at least two bin edges");
  for (std::size_t k = 1; k < edges.size(); ++k) {
    if (!(edges[k] > edges[k - 1]))
      throw DomainError("analyze_size_distribution: bin edges must be strictly increasing");
  }
  SizeHistogram h;
  h.edges.assign(edges.begin(), edges.end());
  h.counts.assign(edges.size() - 1, 0);
  h.total = manifest.size();
  for (const auto& rec : manifest) {
    const double r = size_ratio(rec);
    auto it = std::upper_bound(edges.begin(), edges.end(), r);
    auto bin = static_cast<std::ptrdiff_t>(it - edges.begin()) - 1;
    bin = std::clamp<std::ptrdiff_t>(bin, 0, static_cast<std::ptrdiff_t>(h.counts.size()) - 1);
    ++h.counts[static_cast<std::size_t>(bin)];
  }
  std::size_t running = 0;
  for (auto c : h.counts) {
    running += c;
    h.cdf.push_back(static_cast<double>(running) / static_cast<double>(h.total));
  }
  h.cdf.back() = 1.0;
  return h;
}

}  // namespace skynet
