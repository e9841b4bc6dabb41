#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "skynet/arch.hpp"
#include "skynet/detect.hpp"

// Seeded synthetic data: object-size ratios shaped like UAV imagery (mostly
// tiny objects), manifests built from them, and small noise images with one
// bright rectangle for quick bundle training.

namespace skynet {

/// Mixture over box-area / image-area: 31% below 0.01, 60% in [0.01, 0.09),
/// 9% in [0.09, 0.5]. Hence 91% of objects cover less than 9% of the frame.
struct SizeRatioMixture {
  double tiny_mass = 0.31;
  double small_mass = 0.60;

  double sample(std::mt19937_64& rng) const {
    const double pick = unit_uniform(rng);
    const double u = unit_uniform(rng);
    if (pick < tiny_mass) return 1e-4 * std::pow(100.0, u);  // log-uniform [1e-4, 1e-2)
    if (pick < tiny_mass + small_mass) return 0.01 + 0.08 * u;
    return 0.09 + 0.41 * u;
  }
};

/// Normalized box of the given area ratio with aspect w/h in [0.5, 2].
inline BBox box_with_ratio(double ratio, std::mt19937_64& rng) {
  const double aspect = std::pow(2.0, 2.0 * unit_uniform(rng) - 1.0);
  const double w = std::min(1.0, std::sqrt(ratio * aspect));
  const double h = std::min(1.0, ratio / w);
  const double x0 = (1.0 - w) * unit_uniform(rng);
  const double y0 = (1.0 - h) * unit_uniform(rng);
  return {x0, y0, x0 + w, y0 + h};
}

inline std::vector<GroundTruthRecord> synthetic_manifest(std::size_t count, std::uint64_t seed,
                                                         int image_w = 640, int image_h = 360,
                                                         SizeRatioMixture mix = {}) {
  std::mt19937_64 rng(seed);
  std::vector<GroundTruthRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double r = mix.sample(rng);
    out.push_back({"img" + std::to_string(i), image_w, image_h, box_with_ratio(r, rng)});
  }
  return out;
}

template <class T>
struct Sample {
  Tensor<T> image;  // (3,H,W), values in [0,1]
  BBox box;
};

/// Noise background in [0, 0.3] with one rectangle raised by 0.7. Boxes span
/// at least two pixels per side so every object is visible at this scale.
template <class T>
std::vector<Sample<T>> synthetic_detection_set(std::size_t count, const Shape& image_shape,
                                               std::uint64_t seed) {
  require_rank(image_shape, 3, "synthetic_detection_set");
  std::mt19937_64 rng(seed);
  const SizeRatioMixture mix;
  const std::size_t C = image_shape[0], H = image_shape[1], W = image_shape[2];
  const double min_ratio = (2.0 / static_cast<double>(H)) * (2.0 / static_cast<double>(W));
  std::vector<Sample<T>> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const double r = std::max(mix.sample(rng), 2.0 * min_ratio);
    BBox box = box_with_ratio(r, rng);
    Tensor<T> img(image_shape);
    for (auto& v : img.data()) v = static_cast<T>(0.3 * unit_uniform(rng));
    const auto x0 = static_cast<std::size_t>(std::floor(box.xmin * static_cast<double>(W)));
    const auto y0 = static_cast<std::size_t>(std::floor(box.ymin * static_cast<double>(H)));
    const auto x1 = std::min(W, std::max(x0 + 1, static_cast<std::size_t>(std::ceil(box.xmax * static_cast<double>(W)))));
    const auto y1 = std::min(H, std::max(y0 + 1, static_cast<std::size_t>(std::ceil(box.ymax * static_cast<double>(H)))));
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = y0; i < y1; ++i)
        for (std::size_t j = x0; j < x1; ++j) img(c, i, j) += static_cast<T>(0.7);
    // Report the box actually painted, in normalized coordinates.
    box = {static_cast<double>(x0) / static_cast<double>(W), static_cast<double>(y0) / static_cast<double>(H),
           static_cast<double>(x1) / static_cast<double>(W), static_cast<double>(y1) / static_cast<double>(H)};
    out.push_back({std::move(img), box});
  }
  return out;
}

}  // namespace skynet
