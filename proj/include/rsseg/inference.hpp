// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "rsseg/data.hpp"
#include "rsseg/tensor.hpp"

namespace rsseg {

/// Multi-scale ensembles: fine-structure data never shrinks the input.
inline constexpr std::array<double, 4> kFineStructureScales = {1.0, 1.25, 1.5, 1.75};
inline constexpr std::array<double, 6> kGenericScales = {0.5, 0.75, 1.0, 1.25, 1.5, 1.75};

struct WindowPlan {
  Index window_h = 0, window_w = 0;
  std::vector<std::pair<Index, Index>> origins;  // (y, x), row-major order
  bool clipped = false;  // the requested window exceeded the image
};

/// Grid of windows covering an h x w image; the last row/column is aligned to
/// the image end. window 0 means the whole image; stride 0 means window.
WindowPlan plan_windows(Index h, Index w, Index window, Index stride);

/// images [B,3,h,w] -> logits [B,K,h,w].
template <typename Scalar>
using LogitFn = std::function<Tensor<Scalar>(const Tensor<Scalar>&)>;

template <typename Scalar>
struct SlidingWindowResult {
  Tensor<Scalar> logits;      // accumulated / coverage, [B,K,H,W]
  std::vector<int> coverage;  // [H*W] windows per pixel
  bool clipped = false;
};

/// Windows are evaluated and accumulated in plan order.
template <typename Scalar>
SlidingWindowResult<Scalar> sliding_window_infer(const LogitFn<Scalar>& model, const Tensor<Scalar>& images,
                                                 Index window, Index stride);

struct MultiScaleOptions {
  std::vector<double> scales = {1.0};
  bool flip = false;
  Index window = 0;
  Index stride = 0;
  Index size_multiple = 1;  // rescaled sizes are rounded to a multiple of this
};

/// Rescaled extent: round(extent * scale) snapped to the nearest positive
/// multiple of `multiple`.
Index scaled_extent(Index extent, double scale, Index multiple);

/// Mean softmax probability [B,K,H,W] over scales (and mirrored inputs).
template <typename Scalar>
Tensor<Scalar> multi_scale_probabilities(const LogitFn<Scalar>& model, const Tensor<Scalar>& images,
                                         const MultiScaleOptions& options);

template <typename Scalar>
std::vector<LabelMap> multi_scale_infer(const LogitFn<Scalar>& model, const Tensor<Scalar>& images,
                                        const MultiScaleOptions& options);

/// Per-pixel argmax over axis 1 of [B,K,H,W] (first maximum wins).
template <typename Scalar>
std::vector<LabelMap> argmax_labels(const Tensor<Scalar>& scores);

}  // namespace rsseg
