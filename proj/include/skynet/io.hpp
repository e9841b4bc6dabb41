#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "skynet/arch.hpp"
#include "skynet/detect.hpp"
#include "skynet/quant.hpp"
#include "skynet/search.hpp"

// On-disk formats.
//
// Weight blob ("SKYN", little-endian):
//   magic "SKYN" | u16 version | u32 tensor count
//   per tensor: u16 name length | name bytes
//               | u8 dtype (0 = f32, 1 = fixed point: u8 total_bits, u8 frac_bits, u8 signed)
//               | u8 rank | u32 extents[rank]
//               | payload: f32 values, or int16 values for fixed point
//
// A model is a pair of files sharing a stem: <stem>.json (NetSpec) and
// <stem>.skyn (weights).

namespace skynet {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline nlohmann::json parse_json(std::string_view text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// NetSpec JSON

inline nlohmann::ordered_json layer_to_json(const LayerSpec& l) {
  nlohmann::ordered_json j;
  j["kind"] = std::string(layer_kind_name(l.kind));
  if (l.kind == LayerKind::PWConv1) j["out_channels"] = l.out_channels;
  if (l.kind == LayerKind::BypassConcat) j["source"] = l.source;
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  const auto name = j.at("kind").get<std::string>();
  auto kind = parse_layer_kind(name);
  if (!kind) throw FormatError("unknown layer kind \"" + name + "\"");
  LayerSpec l{*kind};
  if (l.kind == LayerKind::PWConv1) l.out_channels = j.at("out_channels").get<std::size_t>();
  if (l.kind == LayerKind::BypassConcat) l.source = j.at("source").get<std::size_t>();
  return l;
}

inline nlohmann::ordered_json netspec_to_json(const NetSpec& net) {
  nlohmann::ordered_json j;
  j["input_shape"] = net.input_shape;
  auto& bundles = j["bundles"] = nlohmann::ordered_json::array();
  for (const auto& b : net.bundles) {
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (const auto& l : b.layers) layers.push_back(layer_to_json(l));
    bundles.push_back({{"layers", layers}});
  }
  j["pool_after"] = std::vector<std::size_t>(net.pool_after.begin(), net.pool_after.end());
  if (net.bypass) {
    j["bypass"] = {{"source", net.bypass->source}, {"destination", net.bypass->destination}};
  } else {
    j["bypass"] = nullptr;
  }
  auto& head = j["head"] = nlohmann::ordered_json::array();
  for (const auto& l : net.head) head.push_back(layer_to_json(l));
  return j;
}

inline NetSpec netspec_from_json(const nlohmann::json& j) {
  try {
    NetSpec net;
    net.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& b : j.at("bundles")) {
      Bundle bundle;
      for (const auto& l : b.at("layers")) bundle.layers.push_back(layer_from_json(l));
      net.bundles.push_back(std::move(bundle));
    }
    for (const auto& p : j.value("pool_after", nlohmann::json::array())) net.pool_after.insert(p.get<std::size_t>());
    if (j.contains("bypass") && !j.at("bypass").is_null()) {
      net.bypass = Bypass{j["bypass"].at("source").get<std::size_t>(),
                          j["bypass"].at("destination").get<std::size_t>()};
    }
    for (const auto& l : j.at("head")) net.head.push_back(layer_from_json(l));
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("network spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Weight blob

inline constexpr std::uint16_t kBlobVersion = 1;

struct StoredTensor {
  std::string name;
  std::variant<Tensor<float>, QuantizedTensor> data;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v), 4); }
  void bytes(std::string_view s) { buf_.append(s); }
  std::string take() { return std::move(buf_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view s) : s_(s) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(le(4))); }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw FormatError("weight blob: truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{static_cast<unsigned char>(s_[pos_ + i])} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensors(const std::vector<StoredTensor>& tensors) {
  detail::ByteWriter w;
  w.bytes("SKYN");
  w.u16(kBlobVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw FormatError("weight blob: tensor name too long");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    const Shape& shape = std::visit([](const auto& d) -> const Shape& {
      if constexpr (std::is_same_v<std::decay_t<decltype(d)>, QuantizedTensor>) return d.shape;
      else return d.shape();
    }, t.data);
    if (const auto* q = std::get_if<QuantizedTensor>(&t.data)) {
      if (q->format.frac_bits < 0 || q->format.frac_bits > 255)
        throw FormatError("weight blob: fraction bits of " + t.name + " not storable as u8");
      w.u8(1);
      w.u8(static_cast<std::uint8_t>(q->format.total_bits));
      w.u8(static_cast<std::uint8_t>(q->format.frac_bits));
      w.u8(q->format.is_signed ? 1 : 0);
    } else {
      w.u8(0);
    }
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) w.u32(static_cast<std::uint32_t>(e));
    if (const auto* q = std::get_if<QuantizedTensor>(&t.data)) {
      for (auto v : q->values) w.u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    } else {
      for (float v : std::get<Tensor<float>>(t.data).data()) w.f32(v);
    }
  }
  return w.take();
}

inline std::vector<StoredTensor> decode_tensors(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4) != "SKYN") throw FormatError("weight blob: bad magic");
  if (const auto v = r.u16(); v != kBlobVersion)
    throw FormatError("weight blob: unsupported version " + std::to_string(v));
  const auto count = r.u32();
  std::vector<StoredTensor> out;
  for (std::uint32_t n = 0; n < count; ++n) {
    StoredTensor t;
    t.name = std::string(r.bytes(r.u16()));
    const auto dtype = r.u8();
    FixedPointFormat fmt;
    if (dtype == 1) {
      fmt.total_bits = r.u8();
      fmt.frac_bits = r.u8();
      fmt.is_signed = r.u8() != 0;
      try {
        fmt.check();
      } catch (const DomainError& e) {
        throw FormatError("weight blob: " + t.name + ": " + e.what());
      }
    } else if (dtype != 0) {
      throw FormatError("weight blob: unknown dtype " + std::to_string(dtype));
    }
    Shape shape(r.u8());
    if (shape.empty()) throw FormatError("weight blob: rank 0 tensor " + t.name);
    for (auto& e : shape) {
      e = r.u32();
      if (e == 0) throw FormatError("weight blob: zero extent in " + t.name);
    }
    const auto count_elems = element_count(shape);
    if (dtype == 1) {
      QuantizedTensor q{shape, std::vector<std::int32_t>(count_elems), fmt};
      for (auto& v : q.values) v = static_cast<std::int16_t>(r.u16());
      t.data = std::move(q);
    } else {
      std::vector<float> v(count_elems);
      for (auto& x : v) x = r.f32();
      t.data = Tensor<float>(shape, std::move(v));
    }
    out.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("weight blob: trailing bytes");
  return out;
}

/// f32 payloads, or 16-bit-or-narrower per-tensor fixed point when `quant_bits` is set.
inline std::vector<StoredTensor> stored_from_weights(const WeightSet<double>& ws,
                                                     std::optional<int> quant_bits = std::nullopt) {
  std::vector<StoredTensor> out;
  for (const auto& [name, t] : ws) {
    if (quant_bits) {
      auto [lo, hi] = value_range(t);
      auto fmt = choose_format(lo, hi, *quant_bits, true).format;
      fmt.frac_bits = std::clamp(fmt.frac_bits, 0, 255);
      out.push_back({name, quantize(t, fmt)});
    } else {
      out.push_back({name, t.cast<float>()});
    }
  }
  return out;
}

inline WeightSet<double> weights_from_stored(const std::vector<StoredTensor>& stored) {
  WeightSet<double> ws;
  for (const auto& t : stored) {
    if (const auto* q = std::get_if<QuantizedTensor>(&t.data)) {
      ws.set(t.name, dequantize<double>(*q));
    } else {
      ws.set(t.name, std::get<Tensor<float>>(t.data).cast<double>());
    }
  }
  return ws;
}

struct ModelFiles {
  std::string spec_path;
  std::string weights_path;
};

/// "out", "out.json" and "out.skyn" all name the pair out.json + out.skyn.
inline ModelFiles model_files(std::string stem) {
  for (std::string_view ext : {".json", ".skyn"}) {
    if (stem.size() > ext.size() && stem.ends_with(ext)) stem.resize(stem.size() - ext.size());
  }
  return {stem + ".json", stem + ".skyn"};
}

inline void save_model(const std::string& stem, const NetSpec& net, const std::vector<StoredTensor>& weights) {
  const auto files = model_files(stem);
  write_file(files.spec_path, netspec_to_json(net).dump(2) + "\n");
  write_file(files.weights_path, encode_tensors(weights));
}

struct LoadedModel {
  NetSpec net;
  WeightSet<double> weights;
};

inline LoadedModel load_model(const std::string& stem) {
  const auto files = model_files(stem);
  LoadedModel m{netspec_from_json(parse_json(read_file(files.spec_path), files.spec_path)),
                weights_from_stored(decode_tensors(read_file(files.weights_path)))};
  if (auto v = validate(m.net); !v.empty()) throw ValidationError(std::move(v));
  check_weights(m.net, m.weights);
  return m;
}

// ---------------------------------------------------------------------------
// Manifests and predictions (one JSON object per line, boxes in pixels)

struct Prediction {
  GroundTruthRecord record;
  double confidence = 0;
};

inline GroundTruthRecord record_from_json(const nlohmann::json& j) {
  try {
    GroundTruthRecord r;
    r.image_id = j.at("image_id").get<std::string>();
    r.image_w = j.at("w").get<int>();
    r.image_h = j.at("h").get<int>();
    if (r.image_w <= 0 || r.image_h <= 0) throw FormatError("record " + r.image_id + ": image size must be positive");
    const auto box = j.at("box").get<std::vector<double>>();
    if (box.size() != 4) throw FormatError("record " + r.image_id + ": box needs 4 values");
    const double w = r.image_w, h = r.image_h;
    r.box = {box[0] / w, box[1] / h, box[2] / w, box[3] / h};
    if (!r.box.inside_unit()) throw FormatError("record " + r.image_id + ": box outside image or unordered");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest record: ") + e.what());
  }
}

inline nlohmann::ordered_json record_to_json(const GroundTruthRecord& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["w"] = r.image_w;
  j["h"] = r.image_h;
  j["box"] = {r.box.xmin * r.image_w, r.box.ymin * r.image_h, r.box.xmax * r.image_w, r.box.ymax * r.image_h};
  return j;
}

inline nlohmann::ordered_json prediction_to_json(const Prediction& p) {
  auto j = record_to_json(p.record);
  j["conf"] = p.confidence;
  return j;
}

template <class F>
void for_each_jsonl(std::string_view text, const std::string& what, F&& f) {
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    f(parse_json(line, what + " line " + std::to_string(line_no)));
  }
}

inline std::vector<GroundTruthRecord> parse_manifest(std::string_view text) {
  std::vector<GroundTruthRecord> out;
  for_each_jsonl(text, "manifest", [&](const nlohmann::json& j) { out.push_back(record_from_json(j)); });
  return out;
}

inline std::vector<Prediction> parse_predictions(std::string_view text) {
  std::vector<Prediction> out;
  for_each_jsonl(text, "predictions", [&](const nlohmann::json& j) {
    try {
      out.push_back({record_from_json(j), j.at("conf").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("prediction: ") + e.what());
    }
  });
  return out;
}

inline std::string manifest_jsonl(const std::vector<GroundTruthRecord>& records) {
  std::string out;
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  return out;
}

/// {"energy_j": team energy, "all_entries_j": [every entry's energy]}
struct EnergyReport {
  double energy_j = 0;
  std::vector<double> all_entries_j;
};

inline EnergyReport energy_report_from_json(const nlohmann::json& j) {
  try {
    return {j.at("energy_j").get<double>(), j.at("all_entries_j").get<std::vector<double>>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("energy report: ") + e.what());
  }
}

inline nlohmann::ordered_json score_report_json(const ScoreReport& r) {
  nlohmann::ordered_json j;
  j["r_iou"] = r.r_iou;
  j["energy_j"] = r.energy_j;
  j["e_mean"] = r.e_mean;
  j["es"] = r.es;
  j["ts"] = r.ts;
  j["track"] = track_name(r.track);
  j["images"] = r.images;
  return j;
}

inline nlohmann::ordered_json histogram_json(const SizeHistogram& h) {
  nlohmann::ordered_json j;
  j["edges"] = h.edges;
  j["counts"] = h.counts;
  j["cdf"] = h.cdf;
  j["total"] = h.total;
  return j;
}

// ---------------------------------------------------------------------------
// Search config

inline SearchConfig search_config_from_json(const nlohmann::json& j) {
  try {
    SearchConfig cfg;
    cfg.lat_targ_ms = j.at("lat_targ_ms").get<double>();
    cfg.epsilon_ms = j.at("epsilon_ms").get<double>();
    cfg.res_max = j.at("res_max").get<std::map<std::string, double>>();
    const auto iters = j.at("max_iters").get<std::int64_t>();
    if (iters < 0) throw FormatError("search config: max_iters must be >= 0");
    cfg.max_iters = static_cast<std::size_t>(iters);
    cfg.rng_seed = j.value("rng_seed", std::uint64_t{0});
    cfg.channel_step = j.value("channel_step", std::size_t{2});
    cfg.check();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("search config: ") + e.what());
  } catch (const DomainError& e) {
    throw FormatError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Images: binary PPM (P6) / PGM (P5) with maxval <= 255, or a weight blob
// holding a single rank-3 tensor.

namespace detail {

inline std::string next_token(std::string_view s, std::size_t& pos) {
  while (pos < s.size()) {
    if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  const auto start = pos;
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
  return std::string(s.substr(start, pos - start));
}

}  // namespace detail

/// Pixels scale to [0,1]; grayscale replicates into three channels.
inline Tensor<double> decode_image(std::string_view bytes) {
  if (bytes.starts_with("SKYN")) {
    auto tensors = decode_tensors(bytes);
    if (tensors.size() != 1) throw FormatError("raw tensor file must hold exactly one tensor");
    auto ws = weights_from_stored(tensors);
    auto t = ws.begin()->second;
    if (t.rank() != 3) throw FormatError("raw tensor file must hold a (C,H,W) tensor");
    return t;
  }
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw FormatError("image: expected binary PPM (P6), PGM (P5) or a raw tensor file");
  const bool color = bytes[1] == '6';
  std::size_t pos = 2;
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::next_token(bytes, pos));
    h = std::stoi(detail::next_token(bytes, pos));
    maxval = std::stoi(detail::next_token(bytes, pos));
  } catch (const std::exception&) {
    throw FormatError("image: malformed header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw FormatError("image: unsupported header values");
  ++pos;  // single whitespace before raster
  const std::size_t ch = color ? 3 : 1;
  const auto W = static_cast<std::size_t>(w), H = static_cast<std::size_t>(h);
  if (bytes.size() < pos + ch * W * H) throw FormatError("image: truncated raster");
  Tensor<double> img({3, H, W});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto px = static_cast<unsigned char>(bytes[pos + (i * W + j) * ch + (color ? c : 0)]);
        img(c, i, j) = static_cast<double>(px) / maxval;
      }
  return img;
}

/// Writes a (3,H,W) tensor with values in [0,1] as binary PPM.
inline std::string encode_ppm(const Tensor<double>& img) {
  require_rank(img.shape(), 3, "encode_ppm");
  if (img.channels() != 3) throw ShapeError("encode_ppm: need 3 channels");
  std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  for (std::size_t i = 0; i < img.height(); ++i)
    for (std::size_t j = 0; j < img.width(); ++j)
      for (std::size_t c = 0; c < 3; ++c)
        out.push_back(static_cast<char>(static_cast<unsigned char>(
            std::lround(std::clamp(img(c, i, j), 0.0, 1.0) * 255.0))));
  return out;
}

}  // namespace skynet
