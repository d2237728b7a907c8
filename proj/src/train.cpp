// SPDX-License-Identifier: Apache-2.0
#include "rsseg/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include <json.hpp>

namespace rsseg {

double LrSchedule::at(Index iteration) const {
  if (iteration < warmup) return base_lr * static_cast<double>(iteration + 1) / static_cast<double>(warmup);
  const Index span = std::max<Index>(1, total - warmup);
  const double progress = std::min(1.0, static_cast<double>(iteration - warmup) / static_cast<double>(span));
  return base_lr * std::pow(1.0 - progress, power);
}

template <typename S>
AdamW<S>::AdamW(ParameterStore<S>& store, const AdamWOptions& options) : store_(store), options_(options) {
  for (const auto& e : store_.entries()) {
    m_.emplace_back(static_cast<std::size_t>(e.trainable ? e.tensor.size() : 0), S(0));
    v_.emplace_back(static_cast<std::size_t>(e.trainable ? e.tensor.size() : 0), S(0));
  }
}

template <typename S>
void AdamW<S>::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  const S b1 = static_cast<S>(options_.beta1), b2 = static_cast<S>(options_.beta2);
  auto& entries = store_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.trainable) continue;
    const double group_lr = e.group == ParamGroup::kHead ? lr * options_.head_lr_mult : lr;
    const S step_size = static_cast<S>(group_lr / bc1);
    const S decay = e.decay ? static_cast<S>(group_lr * options_.weight_decay) : S(0);
    const S inv_bc2 = static_cast<S>(1.0 / bc2);
    const S eps = static_cast<S>(options_.eps);
    auto p = e.tensor.mutable_data();
    const auto g = e.tensor.grad_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const S gj = g.empty() ? S(0) : g[j];
      m[j] = b1 * m[j] + (S(1) - b1) * gj;
      v[j] = b2 * v[j] + (S(1) - b2) * gj * gj;
      p[j] -= decay * p[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

SceneSet SceneSet::generate(const SceneSpec& spec, std::uint64_t offset, Index count) {
  SceneSet set;
  for (Index i = 0; i < count; ++i) {
    Scene s = gen_synthetic_scene(spec, offset + static_cast<std::uint64_t>(i));
    set.images.push_back(std::move(s.image));
    set.labels.push_back(std::move(s.labels));
  }
  return set;
}

SceneSet training_scenes(const RunConfig& config) {
  return SceneSet::generate(config.data, 0, config.train.train_scenes);
}

SceneSet evaluation_scenes(const RunConfig& config) {
  return SceneSet::generate(config.data, static_cast<std::uint64_t>(config.train.train_scenes),
                            config.train.eval_scenes);
}

template <typename S>
TrainResult train_model(SegmentationModel<S>& model, const SceneSet& data, const RunConfig& config,
                        const TrainHooks& hooks) {
  const TrainConfig& tc = config.train;
  if (data.size() < 1) throw std::invalid_argument("train: empty training set");
  AdamW<S> optimizer(model.parameters(), {tc.beta1, tc.beta2, 1e-8, tc.weight_decay, tc.head_lr_mult});
  const LrSchedule schedule{tc.lr, tc.warmup_iters, tc.iterations, tc.poly_power};
  SplitMix64 order_rng(tc.seed ^ 0x5EEDDA7AULL);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::size_t cursor = order.size();
  auto next_index = [&]() {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), Index{0});
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
      cursor = 0;
    }
    return order[cursor++];
  };

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  auto emit = [&](std::string line) {
    if (hooks.on_log) hooks.on_log(line);
    result.log.push_back(std::move(line));
  };
  for (Index it = 0; it < tc.iterations; ++it) {
    std::vector<Tensor<float>> images;
    std::vector<LabelMap> labels;
    for (Index b = 0; b < tc.batch_size; ++b) {
      const Index idx = next_index();
      images.push_back(data.images[static_cast<std::size_t>(idx)]);
      labels.push_back(data.labels[static_cast<std::size_t>(idx)]);
    }
    const Tensor<S> batch = stack_images<S>(images);
    const double lr = schedule.at(it);
    model.parameters().zero_grad();
    LossReport<S> report;
    {
      Tape<S> tape;
      const ModelOutput<S> out = model.forward(batch, true);
      report = model.loss(out, labels);
      if (!std::isfinite(static_cast<double>(report.total.item())))
        throw TrainingError("non-finite loss at iteration " + std::to_string(it), it);
      tape.backward(report.total);
    }
    optimizer.step(lr);
    ++result.iterations;
    if (it % tc.log_interval == 0 || it + 1 == tc.iterations) {
      nlohmann::json j;
      j["iter"] = it;
      j["lr"] = lr;
      j["loss"] = static_cast<double>(report.total.item());
      j["seg"] = report.seg;
      j["q2r"] = report.q2r;
      j["p2r"] = report.p2r;
      j["boundary"] = report.boundary;
      emit(j.dump());
    }
    if (tc.eval_interval > 0 && hooks.on_eval && (it + 1) % tc.eval_interval == 0) emit(hooks.on_eval(it + 1));
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

MultiScaleOptions inference_options(const RunConfig& config) {
  MultiScaleOptions o;
  o.scales = config.inference.scales;
  o.flip = config.inference.flip;
  o.window = config.inference.window;
  o.stride = config.inference.stride;
  o.size_multiple = config.model.backbone.patch_size;
  return o;
}

template <typename S>
MetricReport evaluate(const SegmentationModel<S>& model, const SceneSet& data, const RunConfig& config,
                      std::optional<std::pair<Corruption, int>> corruption, Index batch) {
  MetricAccumulator acc(config.model.decoder.num_classes, config.metrics);
  const MultiScaleOptions options = inference_options(config);
  for (Index start = 0; start < data.size(); start += batch) {
    const Index end = std::min(data.size(), start + batch);
    std::vector<Tensor<float>> images;
    for (Index i = start; i < end; ++i) {
      const Tensor<float>& img = data.images[static_cast<std::size_t>(i)];
      images.push_back(corruption ? corrupt_image(img, corruption->first, corruption->second,
                                                  config.data.seed ^ static_cast<std::uint64_t>(i))
                                  : img);
    }
    const auto preds = multi_scale_infer(logit_fn(model), stack_images<S>(images), options);
    for (Index i = start; i < end; ++i)
      acc.add(preds[static_cast<std::size_t>(i - start)], data.labels[static_cast<std::size_t>(i)]);
  }
  return acc.report();
}

#define RSSEG_INSTANTIATE_TRAIN(S)                                                                         \
  template class AdamW<S>;                                                                                 \
  template TrainResult train_model(SegmentationModel<S>&, const SceneSet&, const RunConfig&, const TrainHooks&); \
  template MetricReport evaluate(const SegmentationModel<S>&, const SceneSet&, const RunConfig&,           \
                                 std::optional<std::pair<Corruption, int>>, Index);

RSSEG_INSTANTIATE_TRAIN(float)
RSSEG_INSTANTIATE_TRAIN(double)

#undef RSSEG_INSTANTIATE_TRAIN

}  // namespace rsseg
