// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rsseg/data.hpp"
#include "rsseg/tensor.hpp"

namespace rsseg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Plain ViT encoder. Tap indices are 0-based layer indices.
struct BackboneConfig {
  Index image_size = 64;
  Index patch_size = 8;
  Index embed_dim = 48;
  Index depth = 4;
  Index heads = 4;
  double mlp_ratio = 2.0;
  std::vector<Index> tap_indices = {1, 3};

  Index grid() const { return image_size / patch_size; }
  Index mlp_hidden() const;
  void validate() const;
};

enum class LocalOperator { kHighPass, kPlainConv };

struct LocalPathConfig {
  Index input_dim = 24;
  Index expand_ratio = 2;
  Index lhf_kernel = 5;
  LocalOperator op = LocalOperator::kHighPass;
  bool boundary_head = false;

  void validate() const;
};

struct SasmConfig {
  Index groups = 4;
  Index group_dim = 12;
  Index filter_size = 3;
  Index up_factor = 2;
  Index num_stages = 2;

  void validate() const;
};

struct DecoderConfig {
  Index num_classes = 4;
  Index depth = 2;
  double scale_init = 10.0;
  bool aux_losses = true;
};

enum class HeadKind {
  kLinear,  // backbone + per-token linear classifier
  kRsseg,   // two-pathway local path, guided upsampling and the discriminative decoder
};

enum class LossMode {
  kMatching,  // seg + query-to-region + patch-to-region
  kBoundary,  // seg + 0.4 boundary
};

struct ModelConfig {
  HeadKind head = HeadKind::kRsseg;
  BackboneConfig backbone;
  LocalPathConfig local;
  SasmConfig sasm;
  DecoderConfig decoder;
  LossMode loss_mode = LossMode::kMatching;
  double boundary_weight = 0.4;

  Index num_blocks() const { return static_cast<Index>(backbone.tap_indices.size()); }
  void validate() const;
};

enum class DType { kF32, kF64 };

struct TrainConfig {
  std::uint64_t seed = 42;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double head_lr_mult = 10.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  Index iterations = 1500;
  Index batch_size = 8;
  Index warmup_iters = 50;
  double poly_power = 1.0;
  Index log_interval = 50;
  Index eval_interval = 0;  // 0 disables metric snapshots
  Index train_scenes = 2000;
  Index eval_scenes = 200;
  DType dtype = DType::kF32;

  void validate() const;
};

struct InferenceConfig {
  Index window = 0;  // 0: image size
  Index stride = 0;  // 0: window
  std::vector<double> scales = {1.0};
  bool flip = false;
};

struct MetricsConfig {
  double small_area_threshold = 0.03;
  Index boundary_tolerance = 1;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SceneSpec data;
  InferenceConfig inference;
  MetricsConfig metrics;

  void validate() const;
};

/// Parses `key = value` lines. '#' starts a comment; unknown keys, duplicate
/// keys and malformed values are rejected with the offending line number.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
/// Serializes every key; parse_config(format_config(c)) reproduces c.
std::string format_config(const RunConfig& config);

std::vector<double> parse_double_list(std::string_view text);
std::vector<Index> parse_index_list(std::string_view text);

}  // namespace rsseg
