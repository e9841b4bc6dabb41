#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "skynet/skynet.hpp"

// Command-line front end. Exit codes: 0 success, 1 I/O, 2 usage or
// validation, 3 data mismatch, 4 search did not reach its objective.

namespace skynet::cli {

enum ExitCode : int { kOk = 0, kIo = 1, kUsage = 2, kMismatch = 3, kStalled = 4 };

struct Failure : std::runtime_error {
  Failure(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

inline std::vector<double> parse_number_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Failure(kUsage, std::string(what) + ": cannot parse \"" + item + "\"");
    }
  }
  return out;
}

inline AnchorPair parse_anchors(const std::string& text) {
  const auto v = parse_number_list(text, "--anchors");
  if (v.size() != 4) throw Failure(kUsage, "--anchors expects w0,h0,w1,h1");
  return {{{v[0], v[1]}, {v[2], v[3]}}};
}

inline WeightInit parse_init(const std::string& s) {
  if (s == "uniform") return WeightInit::Uniform;
  if (s == "fanin") return WeightInit::FanIn;
  return WeightInit::Zero;
}

// ---------------------------------------------------------------------------

struct BuildOptions {
  std::string variant;
  std::size_t input_h = 160, input_w = 320;
  std::uint64_t seed = 0;
  std::string out;
  std::string init = "uniform";
  bool export_quantized = false;
};

inline int cmd_build(const BuildOptions& o, std::ostream& out) {
  if (o.input_h == 0 || o.input_w == 0 || o.input_h % 8 != 0 || o.input_w % 8 != 0) {
    throw Failure(kUsage, "input height and width must be positive multiples of 8 "
                          "(three 2x2 max-pools and the 2x2 bypass reorder each halve them)");
  }
  const auto variant = parse_variant(o.variant);
  if (!variant) throw Failure(kUsage, "unknown variant " + o.variant);
  const NetSpec net = build_skynet(*variant, o.input_h, o.input_w);
  const auto ws = init_weights<double>(net, o.seed, parse_init(o.init));
  save_model(o.out, net, stored_from_weights(ws, o.export_quantized ? std::optional<int>(11) : std::nullopt));
  const auto pc = count_params(net);
  const auto files = model_files(o.out);
  nlohmann::ordered_json j;
  j["variant"] = o.variant;
  j["input_shape"] = net.input_shape;
  j["conv_weights"] = pc.conv_weights;
  j["bn_params"] = pc.bn_params;
  j["total"] = pc.total();
  j["bytes_f32"] = pc.bytes_f32();
  j["spec"] = files.spec_path;
  j["weights"] = files.weights_path;
  out << j.dump() << "\n";
  return kOk;
}

struct InferOptions {
  std::string model;
  std::string image;
  std::string anchors = "0.05,0.08,0.15,0.25";
  bool quantized = false;
  std::string image_id;
};

inline int cmd_infer(const InferOptions& o, std::ostream& out) {
  const auto anchors = parse_anchors(o.anchors);
  const auto model = load_model(o.model);
  const auto image = decode_image(read_file(o.image));
  if (image.shape() != model.net.input_shape) {
    throw Failure(kMismatch, "image shape " + to_string(image.shape()) + " does not match model input " +
                                 to_string(model.net.input_shape));
  }
  const auto head = o.quantized ? quantized_forward(model.net, model.weights, image)
                                : forward(model.net, model.weights, image);
  const auto det = decode_boxes(head, anchors);
  Prediction p;
  p.record.image_id = o.image_id.empty() ? std::filesystem::path(o.image).stem().string() : o.image_id;
  p.record.image_w = static_cast<int>(image.width());
  p.record.image_h = static_cast<int>(image.height());
  p.record.box = det.box;
  p.confidence = det.confidence;
  auto j = prediction_to_json(p);
  j["cell"] = {det.cell_y, det.cell_x};
  j["anchor"] = det.anchor;
  out << j.dump() << "\n";
  return kOk;
}

struct SearchOptions {
  std::string config;
  std::string profile;
  std::string initial;
  std::string out = "search_result.json";
  std::string trace = "search_trace.jsonl";
};

inline int cmd_search(const SearchOptions& o, std::ostream& out) {
  SearchConfig cfg;
  try {
    cfg = search_config_from_json(parse_json(read_file(o.config), o.config));
  } catch (const FormatError& e) {
    throw Failure(kUsage, e.what());
  }
  CostModel cost;
  try {
    cost = cost_model_from_json(parse_json(read_file(o.profile), o.profile));
  } catch (const nlohmann::json::exception& e) {
    throw Failure(kUsage, std::string("profile: ") + e.what());
  }
  const NetSpec initial = o.initial.empty() ? build_skynet(Variant::C)
                                            : netspec_from_json(parse_json(read_file(o.initial), o.initial));
  const auto result = scd_search(initial, cfg, cost);
  write_file(o.out, netspec_to_json(result.best).dump(2) + "\n");
  write_file(o.trace, trace_jsonl(result.trace));
  nlohmann::ordered_json j;
  j["status"] = status_name(result.status);
  j["bundles"] = result.best.bundles.size();
  j["lat_ms"] = result.best_cost.latency_ms;
  j["iterations"] = result.trace.size() - 1;
  j["spec"] = o.out;
  j["trace"] = o.trace;
  out << j.dump() << "\n";
  return result.status == SearchStatus::Satisfied ? kOk : kStalled;
}

struct ScoreOptions {
  std::string predictions;
  std::string ground_truth;
  std::string energy_report;
  std::string track = "gpu";
};

inline int cmd_score(const ScoreOptions& o, std::ostream& out) {
  const auto preds = parse_predictions(read_file(o.predictions));
  const auto truth = parse_manifest(read_file(o.ground_truth));
  const auto energy = energy_report_from_json(parse_json(read_file(o.energy_report), o.energy_report));
  if (preds.empty()) throw Failure(kUsage, "predictions file is empty");
  if (truth.empty()) throw Failure(kUsage, "ground truth file is empty");

  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (!index.emplace(truth[k].image_id, k).second)
      throw Failure(kUsage, "duplicate ground-truth image_id " + truth[k].image_id);
  }
  // Highest-confidence prediction per image; ties keep the earliest line.
  std::vector<const Prediction*> chosen(truth.size(), nullptr);
  std::vector<std::string> unknown;
  for (const auto& p : preds) {
    auto it = index.find(p.record.image_id);
    if (it == index.end()) {
      unknown.push_back(p.record.image_id);
      continue;
    }
    auto& slot = chosen[it->second];
    if (!slot || p.confidence > slot->confidence) slot = &p;
  }
  if (!unknown.empty()) {
    std::string ids;
    for (const auto& id : unknown) ids += (ids.empty() ? "" : ", ") + id;
    throw Failure(kMismatch, "predictions reference unknown image_id(s): " + ids);
  }
  // Images without a prediction score IoU 0.
  std::vector<double> per_image(truth.size(), 0.0);
  for (std::size_t k = 0; k < truth.size(); ++k)
    if (chosen[k]) per_image[k] = iou(chosen[k]->record.box, truth[k].box);

  const Track track = o.track == "fpga" ? Track::FPGA : Track::GPU;
  const auto report = score_team(per_image, energy.energy_j, energy.all_entries_j, track);
  out << score_report_json(report).dump() << "\n";
  return kOk;
}

struct AnalyzeOptions {
  std::string ground_truth;
  std::string bins = "0,0.01,0.09,0.25,1";
};

inline int cmd_analyze(const AnalyzeOptions& o, std::ostream& out) {
  const auto edges = parse_number_list(o.bins, "--bins");
  for (std::size_t k = 1; k < edges.size(); ++k)
    if (!(edges[k] > edges[k - 1])) throw Failure(kUsage, "--bins must be strictly increasing");
  if (edges.size() < 2) throw Failure(kUsage, "--bins needs at least two edges");
  const auto records = parse_manifest(read_file(o.ground_truth));
  if (records.empty()) throw Failure(kUsage, "ground truth file is empty");
  out << histogram_json(analyze_size_distribution(records, edges)).dump() << "\n";
  return kOk;
}

inline int cmd_gradcheck(std::uint64_t seed, std::size_t trials, std::ostream& out) {
  bool all = true;
  for (const auto& r : run_gradcheck(seed, trials)) {
    nlohmann::ordered_json j;
    j["op"] = r.op;
    j["trials"] = r.trials;
    j["max_rel_error"] = r.max_rel_error;
    j["pass"] = r.passed;
    out << j.dump() << "\n";
    all = all && r.passed;
  }
  return all ? kOk : kMismatch;
}

struct SynthOptions {
  std::size_t count = 10;
  std::uint64_t seed = 0;
  std::size_t image_h = 160, image_w = 320;
  std::string out_dir;
};

/// Writes images/<id>.ppm, ground_truth.jsonl and energy.json under out_dir.
inline int cmd_synth(const SynthOptions& o, std::ostream& out) {
  namespace fs = std::filesystem;
  if (o.count == 0) throw Failure(kUsage, "--count must be positive");
  const fs::path dir(o.out_dir);
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  const auto samples = synthetic_detection_set<double>(o.count, {3, o.image_h, o.image_w}, o.seed);
  std::vector<GroundTruthRecord> records;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const std::string id = "img" + std::to_string(k);
    write_file((dir / "images" / (id + ".ppm")).string(), encode_ppm(samples[k].image));
    records.push_back({id, static_cast<int>(o.image_w), static_cast<int>(o.image_h), samples[k].box});
  }
  write_file((dir / "ground_truth.jsonl").string(), manifest_jsonl(records));
  nlohmann::ordered_json energy;
  energy["energy_j"] = 1.0;
  energy["all_entries_j"] = {1.0};
  write_file((dir / "energy.json").string(), energy.dump() + "\n");
  out << nlohmann::ordered_json{{"images", o.count}, {"dir", dir.string()}}.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"SkyNet detector toolkit"};
  app.require_subcommand(1);

  BuildOptions build;
  auto* b = app.add_subcommand("build", "build a SkyNet variant with seeded weights");
  b->add_option("--variant", build.variant, "A, B or C")->required()->check(CLI::IsMember({"A", "B", "C"}));
  b->add_option("--input-h", build.input_h, "input height (multiple of 8)");
  b->add_option("--input-w", build.input_w, "input width (multiple of 8)");
  b->add_option("--seed", build.seed);
  b->add_option("--out", build.out, "output stem; writes <stem>.json and <stem>.skyn")->required();
  b->add_option("--init", build.init, "uniform, fanin or zero")->check(CLI::IsMember({"uniform", "fanin", "zero"}));
  b->add_flag("--export-quantized", build.export_quantized, "store 11-bit fixed-point weights");

  InferOptions infer;
  auto* i = app.add_subcommand("infer", "run the detector on one image");
  i->add_option("--model", infer.model, "model stem")->required();
  i->add_option("--image", infer.image, "binary PPM/PGM or single-tensor weight blob")->required();
  i->add_option("--anchors", infer.anchors, "w0,h0,w1,h1 as fractions of the image");
  i->add_flag("--quantized", infer.quantized, "use the fixed-point path");
  i->add_option("--image-id", infer.image_id, "defaults to the image file stem");

  SearchOptions search;
  auto* s = app.add_subcommand("search", "stochastic coordinate descent over the network structure");
  s->add_option("--config", search.config)->required();
  s->add_option("--profile", search.profile, "hardware profile or per-bundle cost model JSON")->required();
  s->add_option("--initial", search.initial, "starting spec JSON (default: variant C)");
  s->add_option("--out", search.out);
  s->add_option("--trace", search.trace);

  ScoreOptions score;
  auto* sc = app.add_subcommand("score", "IoU, energy and total score");
  sc->add_option("--predictions", score.predictions)->required();
  sc->add_option("--ground-truth", score.ground_truth)->required();
  sc->add_option("--energy-report", score.energy_report)->required();
  sc->add_option("--track", score.track)->check(CLI::IsMember({"gpu", "fpga"}));

  AnalyzeOptions analyze;
  auto* an = app.add_subcommand("analyze", "object size histogram and CDF");
  an->add_option("--ground-truth", analyze.ground_truth)->required();
  an->add_option("--bins", analyze.bins, "comma-separated increasing edges");

  std::uint64_t gc_seed = 0;
  std::size_t gc_trials = 20;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
  gc->add_option("--seed", gc_seed);
  gc->add_option("--trials", gc_trials)->check(CLI::PositiveNumber);

  SynthOptions synth;
  auto* sy = app.add_subcommand("synth", "write a synthetic image set with ground truth");
  sy->add_option("--count", synth.count);
  sy->add_option("--seed", synth.seed);
  sy->add_option("--image-h", synth.image_h);
  sy->add_option("--image-w", synth.image_w);
  sy->add_option("--out", synth.out_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*b) return cmd_build(build, out);
    if (*i) return cmd_infer(infer, out);
    if (*s) return cmd_search(search, out);
    if (*sc) return cmd_score(score, out);
    if (*an) return cmd_analyze(analyze, out);
    if (*gc) return cmd_gradcheck(gc_seed, gc_trials, out);
    if (*sy) return cmd_synth(synth, out);
  } catch (const Failure& e) {
    err << "error: " << e.what() << "\n";
    return e.code;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    // Format, validation, shape and domain errors in user-supplied data.
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace skynet::cli
