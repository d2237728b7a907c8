// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsseg/checkpoint.hpp"
#include "rsseg/gradcheck.hpp"
#include "rsseg/image_io.hpp"
#include "rsseg/train.hpp"

using namespace rsseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  fs::path out;
  fs::path checkpoint;
  std::string scales;
  Index window = -1;
  Index stride = -1;
  std::string corrupt;
  bool flip = false;
  // subcommand specific
  Index count = 4;
  Index offset = 0;
  fs::path input;
  Index samples = 0;
};

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  if (o.seed) c.train.seed = *o.seed;
  if (!o.scales.empty()) c.inference.scales = parse_double_list(o.scales);
  if (o.window >= 0) c.inference.window = o.window;
  if (o.stride >= 0) c.inference.stride = o.stride;
  if (o.flip) c.inference.flip = true;
  c.validate();
  return c;
}

std::optional<std::pair<Corruption, int>> parse_corrupt(const std::string& spec) {
  if (spec.empty()) return std::nullopt;
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw std::invalid_argument("--corrupt expects KIND:SEVERITY, got '" + spec + "'");
  const int severity = std::stoi(spec.substr(colon + 1));
  if (severity < 0 || severity > kMaxSeverity)
    throw std::invalid_argument("--corrupt severity must be in [0, " + std::to_string(kMaxSeverity) + "]");
  return std::pair{parse_corruption(spec.substr(0, colon)), severity};
}

template <typename S>
void maybe_load(SegmentationModel<S>& model, const Options& o) {
  if (!o.checkpoint.empty()) load_checkpoint(o.checkpoint, model.parameters());
}

template <typename S>
int train(const Options& o, const RunConfig& c) {
  if (o.out.empty()) throw std::invalid_argument("train requires --out");
  fs::create_directories(o.out);
  std::ofstream(o.out / "config.txt") << format_config(c);
  SegmentationModel<S> model(c.model, c.train.seed);
  maybe_load(model, o);
  const SceneSet data = training_scenes(c);
  const SceneSet eval = evaluation_scenes(c);
  std::ofstream log(o.out / "train_log.jsonl");
  TrainHooks hooks;
  hooks.on_log = [&](const std::string& line) {
    log << line << std::endl;
    std::cout << line << std::endl;
  };
  if (c.train.eval_interval > 0) hooks.on_eval = [&](Index) { return to_json(evaluate(model, eval, c)); };
  const TrainResult r = train_model(model, data, c, hooks);
  save_checkpoint(o.out / "model.ckpt", model.parameters());
  const MetricReport m = evaluate(model, eval, c);
  std::ofstream(o.out / "metrics.json") << to_json(m) << "\n";
  std::cout << to_json(m) << "\n";
  std::cerr << "trained " << r.iterations << " iterations in " << r.seconds << " s; checkpoint "
            << (o.out / "model.ckpt").string() << "\n";
  return 0;
}

template <typename S>
int eval(const Options& o, const RunConfig& c) {
  SegmentationModel<S> model(c.model, c.train.seed);
  maybe_load(model, o);
  const SceneSet scenes = evaluation_scenes(c);
  const auto corruption = parse_corrupt(o.corrupt);
  const MetricReport m = evaluate(model, scenes, c, corruption);
  json j = json::parse(to_json(m));
  if (corruption) {
    j["corruption"] = to_string(corruption->first);
    j["severity"] = corruption->second;
  }
  std::cout << j.dump() << "\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream(o.out / "metrics.json") << j.dump() << "\n";
  }
  return 0;
}

template <typename S>
int infer(const Options& o, const RunConfig& c) {
  if (o.out.empty()) throw std::invalid_argument("infer requires --out");
  fs::create_directories(o.out);
  SegmentationModel<S> model(c.model, c.train.seed);
  maybe_load(model, o);
  const auto corruption = parse_corrupt(o.corrupt);
  std::vector<Tensor<float>> images;
  std::vector<std::string> names;
  std::vector<LabelMap> truth;
  if (!o.input.empty()) {
    images.push_back(read_ppm(o.input));
    names.push_back(o.input.stem().string());
  } else {
    const SceneSet scenes = SceneSet::generate(c.data, static_cast<std::uint64_t>(c.train.train_scenes + o.offset), o.count);
    for (Index i = 0; i < scenes.size(); ++i) {
      images.push_back(scenes.images[static_cast<std::size_t>(i)]);
      truth.push_back(scenes.labels[static_cast<std::size_t>(i)]);
      char name[32];
      std::snprintf(name, sizeof name, "scene_%04lld", static_cast<long long>(c.train.train_scenes + o.offset + i));
      names.emplace_back(name);
    }
  }
  const MultiScaleOptions ms = inference_options(c);
  MetricAccumulator acc(c.model.decoder.num_classes, c.metrics);
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tensor<float> img = images[i];
    if (corruption) img = corrupt_image(img, corruption->first, corruption->second, c.data.seed + i);
    const std::vector<Tensor<float>> one = {img};
    const auto pred = multi_scale_infer(logit_fn(model), stack_images<S>(one), ms).front();
    write_ppm(o.out / (names[i] + "_image.ppm"), img);
    write_pgm(o.out / (names[i] + "_pred.pgm"), pred);
    if (!truth.empty()) {
      write_pgm(o.out / (names[i] + "_gt.pgm"), truth[i]);
      acc.add(pred, truth[i]);
    }
  }
  if (!truth.empty()) std::cout << to_json(acc.report()) << "\n";
  std::cerr << "wrote " << images.size() << " predictions to " << o.out.string() << "\n";
  return 0;
}

int gradcheck_cmd(const Options& o, const RunConfig& c) {
  SegmentationModel<double> model(c.model, c.train.seed);
  maybe_load(model, o);
  const SceneSet scenes = SceneSet::generate(c.data, 0, std::max<Index>(o.count, 1));
  const auto x = stack_images<double>(std::span<const Tensor<float>>(scenes.images));
  std::vector<std::pair<std::string, Tensor<double>>> inputs;
  for (auto& e : model.parameters().entries())
    if (e.trainable) inputs.emplace_back(e.name, e.tensor);
  GradcheckOptions opt;
  opt.max_per_tensor = o.samples;
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckReport r =
      gradcheck([&] { return model.loss(model.forward(x, true), std::span<const LabelMap>(scenes.labels)).total; },
                inputs, opt);
  json j{{"checked", r.checked},
         {"failures", r.failures},
         {"worst", {{"name", r.worst.name},
                    {"index", r.worst.index},
                    {"analytic", r.worst.analytic},
                    {"numeric", r.worst.numeric},
                    {"rel_error", r.worst.rel_error},
                    {"ratio", r.worst.ratio}}},
         {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
  for (const auto& f : r.failed)
    j["failed"].push_back({{"name", f.name}, {"index", f.index}, {"analytic", f.analytic}, {"numeric", f.numeric}});
  std::cout << j.dump() << "\n";
  return r.passed() ? 0 : 1;
}

template <typename S>
int probe(const Options& o, const RunConfig& c) {
  SegmentationModel<S> model(c.model, c.train.seed);
  maybe_load(model, o);
  const SceneSet scenes = SceneSet::generate(c.data, static_cast<std::uint64_t>(c.train.train_scenes + o.offset),
                                             std::max<Index>(o.count, 1));
  const auto x = stack_images<S>(std::span<const Tensor<float>>(scenes.images));
  NoGrad<S> no_grad;
  const auto out = model.forward(x, false);
  const auto& bb = out.backbone;
  std::vector<std::pair<std::string, Tensor<S>>> maps;
  for (std::size_t t = 0; t < bb.taps.size(); ++t)
    maps.emplace_back("backbone.tap" + std::to_string(t), to_map(bb.taps[t], bb.grid_h, bb.grid_w));
  maps.emplace_back("backbone.final", to_map(bb.final, bb.grid_h, bb.grid_w));
  if (c.model.head == HeadKind::kRsseg) {
    for (std::size_t i = 0; i < out.local.blocks.size(); ++i)
      maps.emplace_back("local.block" + std::to_string(i), out.local.blocks[i]);
    for (std::size_t s = 0; s < out.sasm.stages.size(); ++s)
      maps.emplace_back("sasm.stage" + std::to_string(s), out.sasm.stages[s]);
  }
  if (!o.out.empty()) fs::create_directories(o.out);
  json report;
  report["scenes"] = scenes.size();
  for (const auto& [name, map] : maps) {
    const auto field = neighbour_similarity_map(map);
    double mean = 0;
    for (double v : field) mean += v;
    mean /= static_cast<double>(field.size());
    report["neighbour_similarity"][name] = mean;
    if (!o.out.empty())
      write_heatmap(o.out / (name + ".pgm"), std::span<const double>(field).first(static_cast<std::size_t>(map.dim(2) * map.dim(3))),
                    map.dim(2), map.dim(3));
  }
  if (!o.out.empty() && c.model.head == HeadKind::kRsseg && !out.decoder.layers.empty()) {
    // cross-attention of every class query on the first scene, last decoder layer
    const auto& att = out.decoder.layers.back().attention;
    const Index K = att.dim(1), N = att.dim(2);
    for (Index k = 0; k < K; ++k) {
      std::vector<double> field(static_cast<std::size_t>(N));
      for (Index p = 0; p < N; ++p) field[static_cast<std::size_t>(p)] = att[k * N + p];
      write_heatmap(o.out / ("attention.class" + std::to_string(k) + ".pgm"), field, out.memory_h, out.memory_w);
    }
    write_ppm(o.out / "scene.ppm", scenes.images.front());
    write_pgm(o.out / "scene_gt.pgm", scenes.labels.front());
  }
  std::cout << report.dump() << "\n";
  return 0;
}

int gen_data(const Options& o, const RunConfig& c) {
  if (o.out.empty()) throw std::invalid_argument("gen-data requires --out");
  fs::create_directories(o.out);
  SceneSpec spec = c.data;
  if (o.seed) spec.seed = *o.seed;
  const auto corruption = parse_corrupt(o.corrupt);
  for (Index i = 0; i < o.count; ++i) {
    const auto index = static_cast<std::uint64_t>(o.offset + i);
    Scene s = gen_synthetic_scene(spec, index);
    if (corruption) s.image = corrupt_image(s.image, corruption->first, corruption->second, spec.seed ^ index);
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04llu", static_cast<unsigned long long>(index));
    write_ppm(o.out / (std::string(stem) + ".ppm"), s.image);
    write_pgm(o.out / (std::string(stem) + ".pgm"), s.labels);
  }
  std::cerr << "wrote " << o.count << " scenes to " << o.out.string() << "\n";
  return 0;
}

template <typename Fn32, typename Fn64>
int by_dtype(const RunConfig& c, Fn32 f32, Fn64 f64) {
  return c.train.dtype == DType::kF64 ? f64() : f32();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Segmentation toolkit: training, evaluation and probes on synthetic scenes"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Overrides the training seed (data seed for gen-data)");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint to load")->check(CLI::ExistingFile);
  };
  auto inference = [&](CLI::App* sub) {
    sub->add_option("--scales", o.scales, "Comma-separated inference scales, e.g. 1,1.25,1.5,1.75");
    sub->add_option("--window", o.window, "Sliding window size (0: whole image)");
    sub->add_option("--stride", o.stride, "Sliding window stride (0: window)");
    sub->add_flag("--flip", o.flip, "Average horizontally mirrored predictions");
    sub->add_option("--corrupt", o.corrupt, "Corrupt inputs, KIND:SEV (gaussian-noise, gaussian-blur, brightness, contrast)");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model and write log, checkpoint and metrics");
  common(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate on the evaluation split");
  common(eval_cmd);
  inference(eval_cmd);
  auto* infer_cmd = app.add_subcommand("infer", "Predict label maps for an image or evaluation scenes");
  common(infer_cmd);
  inference(infer_cmd);
  infer_cmd->add_option("--input", o.input, "PPM image; evaluation scenes are used when absent")->check(CLI::ExistingFile);
  infer_cmd->add_option("--count", o.count, "Number of evaluation scenes");
  infer_cmd->add_option("--offset", o.offset, "First evaluation scene");
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient (f64)");
  common(grad_cmd);
  grad_cmd->add_option("--samples", o.samples, "Elements checked per tensor (0: all)");
  grad_cmd->add_option("--count", o.count, "Scenes in the batch")->default_val(2);
  auto* probe_cmd = app.add_subcommand("probe", "Feature-smoothness report with PGM heatmaps");
  common(probe_cmd);
  probe_cmd->add_option("--count", o.count, "Evaluation scenes averaged");
  probe_cmd->add_option("--offset", o.offset, "First evaluation scene");
  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic scenes as PPM images and PGM labels");
  common(gen_cmd);
  gen_cmd->add_option("--count", o.count, "Number of scenes");
  gen_cmd->add_option("--offset", o.offset, "First scene index");
  gen_cmd->add_option("--corrupt", o.corrupt, "Corrupt images, KIND:SEV");

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) o.seed = seed;
    if (sub == gen_cmd) {
      Options cfg_opts = o;
      cfg_opts.seed.reset();
      return gen_data(o, resolve_config(cfg_opts));
    }
    const RunConfig c = resolve_config(o);
    if (sub == train_cmd) return by_dtype(c, [&] { return train<float>(o, c); }, [&] { return train<double>(o, c); });
    if (sub == eval_cmd) return by_dtype(c, [&] { return eval<float>(o, c); }, [&] { return eval<double>(o, c); });
    if (sub == infer_cmd) return by_dtype(c, [&] { return infer<float>(o, c); }, [&] { return infer<double>(o, c); });
    if (sub == grad_cmd) return gradcheck_cmd(o, c);
    if (sub == probe_cmd) return by_dtype(c, [&] { return probe<float>(o, c); }, [&] { return probe<double>(o, c); });
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << " (iteration " << e.iteration() << ")\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
