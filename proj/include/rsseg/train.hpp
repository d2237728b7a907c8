// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsseg/config.hpp"
#include "rsseg/inference.hpp"
#include "rsseg/metrics.hpp"
#include "rsseg/model.hpp"

namespace rsseg {

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, Index iteration) : std::runtime_error(what), iteration_(iteration) {}
  Index iteration() const { return iteration_; }

 private:
  Index iteration_;
};

/// Linear warmup to the base rate, then polynomial decay to 0 at `total`.
struct LrSchedule {
  double base_lr = 1e-3;
  Index warmup = 0;
  Index total = 1;
  double power = 1.0;

  double at(Index iteration) const;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double head_lr_mult = 10.0;  // applied to ParamGroup::kHead
};

/// Adam with decoupled weight decay on parameters flagged for decay.
template <typename Scalar>
class AdamW {
 public:
  AdamW(ParameterStore<Scalar>& store, const AdamWOptions& options);
  /// One update from the gradients currently held by the parameters.
  void step(double lr);
  Index steps() const { return t_; }

 private:
  ParameterStore<Scalar>& store_;
  AdamWOptions options_;
  std::vector<std::vector<Scalar>> m_, v_;
  Index t_ = 0;
};

/// Scenes [offset, offset + count) of the synthetic distribution, generated once.
struct SceneSet {
  std::vector<Tensor<float>> images;
  std::vector<LabelMap> labels;

  static SceneSet generate(const SceneSpec& spec, std::uint64_t offset, Index count);
  Index size() const { return static_cast<Index>(images.size()); }
};

/// Training scenes use indices [0, train_scenes); evaluation scenes follow them.
SceneSet training_scenes(const RunConfig& config);
SceneSet evaluation_scenes(const RunConfig& config);

struct TrainResult {
  std::vector<std::string> log;  // one JSON object per line
  Index iterations = 0;
  double seconds = 0;
};

struct TrainHooks {
  std::function<void(const std::string&)> on_log;  // every log line as it is produced
  /// Called at eval_interval; returns a JSON object string to log.
  std::function<std::string(Index)> on_eval;
};

/// Runs config.train.iterations steps. Batches are drawn from a per-epoch
/// shuffle seeded by the training seed. A non-finite loss throws
/// TrainingError carrying the iteration.
template <typename Scalar>
TrainResult train_model(SegmentationModel<Scalar>& model, const SceneSet& data, const RunConfig& config,
                        const TrainHooks& hooks = {});

/// Inference options derived from the run configuration (patch-multiple sizes).
MultiScaleOptions inference_options(const RunConfig& config);

/// Metrics over a scene set, optionally corrupting every image first.
template <typename Scalar>
MetricReport evaluate(const SegmentationModel<Scalar>& model, const SceneSet& data, const RunConfig& config,
                      std::optional<std::pair<Corruption, int>> corruption = std::nullopt, Index batch = 16);

template <typename Scalar>
LogitFn<Scalar> logit_fn(const SegmentationModel<Scalar>& model) {
  return [&model](const Tensor<Scalar>& images) { return model.predict_logits(images); };
}

}  // namespace rsseg
