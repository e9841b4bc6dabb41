#pragma once

#include <cstdlib>
#include <filesystem>

#include "skynet/skynet.hpp"

// Shared quantization fixture: SkyNet C with fan-in weights, a non-trivial
// batch norm per channel, and one synthetic image, all rounded through f32
// exactly as they would be after a save/load cycle.
//
// tests/oracles/quant_oracle.py recomputes the float-vs-quantized deviation
// from files dumped by this fixture (set SKYNET_DUMP_QUANT_FIXTURE=<dir> and
// run the quant tests); the pinned value below came from that script.

namespace skynet::testing {

inline constexpr double kPinnedQuantMeanAbsDeviation = 0.022176211511896141;
inline constexpr double kPinnedQuantTolerance = 1e-9;

struct QuantFixture {
  NetSpec net;
  WeightSet<double> weights;
  Tensor<double> image;
};

inline QuantFixture make_quant_fixture() {
  QuantFixture f;
  f.net = build_skynet(Variant::C);
  auto ws = init_weights<double>(f.net, 7, WeightInit::FanIn);
  for (auto& [name, t] : ws) {
    const auto dot = name.rfind('.');
    const auto field = name.substr(dot + 1);
    for (std::size_t c = 0; c < t.size(); ++c) {
      if (field == "gamma") t[c] = 0.75 + 0.5 * static_cast<double>(c % 7) / 7.0;
      if (field == "beta") t[c] = 0.1 * (static_cast<double>(c % 5) - 2.0);
      if (field == "mean") t[c] = 0.05 * (static_cast<double>(c % 3) - 1.0);
      if (field == "var") t[c] = 0.5 + 0.25 * static_cast<double>(c % 4);
    }
  }
  f.weights = weights_from_stored(stored_from_weights(ws));
  f.image = synthetic_detection_set<double>(1, f.net.input_shape, 11)[0].image.cast<float>().cast<double>();

  if (const char* dir = std::getenv("SKYNET_DUMP_QUANT_FIXTURE")) {
    std::filesystem::create_directories(dir);
    const std::string stem = std::string(dir) + "/model";
    save_model(stem, f.net, stored_from_weights(f.weights));
    write_file(std::string(dir) + "/input.skyn", encode_tensors({{"input", f.image.cast<float>()}}));
  }
  return f;
}

/// Mean absolute difference between float and quantized head outputs.
inline double quant_mean_abs_deviation(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return s / static_cast<double>(a.size());
}

}  // namespace skynet::testing
