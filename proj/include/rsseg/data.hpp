// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rsseg/tensor.hpp"

namespace rsseg {

/// Per-pixel class map. 255 marks pixels excluded from losses and metrics.
struct LabelMap {
  static constexpr std::uint8_t kIgnore = 255;

  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(Index h, Index w, std::uint8_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h * w), fill) {}

  std::uint8_t at(Index y, Index x) const { return labels[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t& at(Index y, Index x) { return labels[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const LabelMap&) const = default;
};

/// Nearest-neighbour resampling (pixel-center convention).
LabelMap resize_nearest(const LabelMap& labels, Index out_h, Index out_w);
LabelMap flip_horizontal(const LabelMap& labels);

/// One-hot expansion [K,H,W]; ignore pixels are all-zero columns.
template <typename Scalar>
Tensor<Scalar> one_hot(const LabelMap& labels, Index num_classes);

/// Batch of targets for cross-entropy: class index or -1 for ignore.
std::vector<std::int32_t> flatten_targets(std::span<const LabelMap> labels);

enum class ShapeKind { kRectangle, kDisk, kThinLine };

std::string to_string(ShapeKind kind);

/// Shape kind drawn for a foreground class (class 0 is background).
ShapeKind shape_kind_for_class(int class_id);

std::array<float, 3> base_color(int class_id);

/// Parameters of the synthetic scene distribution.
struct SceneSpec {
  std::uint64_t seed = 42;
  Index image_size = 64;
  Index num_classes = 4;
  double noise_std = 0.04;
  double color_jitter = 0.08;
  Index min_shapes = 2;
  Index max_shapes = 5;

  void validate() const;
  /// Expected instance count per foreground class per image.
  double expected_instances_per_class() const;
};

struct ShapeInstance {
  int class_id = 0;
  ShapeKind kind = ShapeKind::kRectangle;
  int line_width = 0;  // thin lines only
};

struct Scene {
  Tensor<float> image;  // [3,H,W] in [0,1]
  LabelMap labels;
  std::vector<ShapeInstance> instances;  // back to front
};

/// Deterministic scene: splitmix64 seeded with (spec.seed XOR index).
Scene gen_synthetic_scene(const SceneSpec& spec, std::uint64_t index);

enum class Corruption { kGaussianNoise, kGaussianBlur, kBrightness, kContrast };

inline constexpr std::array<Corruption, 4> kAllCorruptions = {
    Corruption::kGaussianNoise, Corruption::kGaussianBlur, Corruption::kBrightness, Corruption::kContrast};
inline constexpr int kMaxSeverity = 5;

std::string to_string(Corruption kind);
/// Accepts gaussian-noise, gaussian-blur, brightness, contrast.
Corruption parse_corruption(const std::string& name);

/// Severity 0 is the identity; 1-5 index fixed parameter tables. Output is
/// clamped to [0,1]. The noise stream is seeded by `seed`.
Tensor<float> corrupt_image(const Tensor<float>& image, Corruption kind, int severity, std::uint64_t seed = 0);

/// Parameter used by a corruption at a severity (noise std, blur sigma,
/// brightness shift or contrast factor).
double corruption_parameter(Corruption kind, int severity);

/// Stacks [3,H,W] images into [B,3,H,W] of the requested scalar type.
template <typename Scalar>
Tensor<Scalar> stack_images(std::span<const Tensor<float>> images);

}  // namespace rsseg
