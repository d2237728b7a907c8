// SPDX-License-Identifier: Apache-2.0
#include "rsseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rsseg/ops.hpp"

namespace rsseg {

namespace {

std::vector<Index> starts(Index extent, Index window, Index stride) {
  std::vector<Index> out;
  const Index steps = (std::max<Index>(extent - window, 0) + stride - 1) / stride + 1;
  for (Index i = 0; i < steps; ++i) out.push_back(std::min(i * stride, extent - window));
  return out;
}

}  // namespace

WindowPlan plan_windows(Index h, Index w, Index window, Index stride) {
  if (h < 1 || w < 1) throw std::invalid_argument("sliding_window: empty image");
  if (window < 0 || stride < 0) throw std::invalid_argument("sliding_window: negative window or stride");
  WindowPlan plan;
  const Index win = window == 0 ? std::max(h, w) : window;
  const Index st = stride == 0 ? win : stride;
  if (st > win) throw std::invalid_argument("sliding_window: stride must not exceed the window");
  plan.window_h = std::min(win, h);
  plan.window_w = std::min(win, w);
  plan.clipped = window != 0 && (window > h || window > w);
  const Index sh = std::min(st, plan.window_h), sw = std::min(st, plan.window_w);
  for (Index y : starts(h, plan.window_h, sh))
    for (Index x : starts(w, plan.window_w, sw)) plan.origins.emplace_back(y, x);
  return plan;
}

template <typename S>
SlidingWindowResult<S> sliding_window_infer(const LogitFn<S>& model, const Tensor<S>& images, Index window,
                                            Index stride) {
  if (images.rank() != 4) shape_error("sliding_window_infer", "images must be [B,3,H,W]", images.shape());
  const Index b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const WindowPlan plan = plan_windows(h, w, window, stride);
  SlidingWindowResult<S> result;
  result.clipped = plan.clipped;
  result.coverage.assign(static_cast<std::size_t>(h * w), 0);
  std::vector<S> canvas;
  Index k = 0;
  for (const auto& [oy, ox] : plan.origins) {
    Tensor<S> crop = images;
    if (plan.window_h != h || plan.window_w != w) {
      crop = Tensor<S>({b, c, plan.window_h, plan.window_w});
      auto dst = crop.mutable_data();
      const auto src = images.data();
      for (Index i = 0; i < b * c; ++i)
        for (Index y = 0; y < plan.window_h; ++y)
          std::copy_n(src.begin() + (i * h + oy + y) * w + ox, plan.window_w,
                      dst.begin() + (i * plan.window_h + y) * plan.window_w);
    }
    const Tensor<S> logits = model(crop);
    if (logits.rank() != 4 || logits.dim(0) != b || logits.dim(2) != plan.window_h || logits.dim(3) != plan.window_w)
      shape_error("sliding_window_infer", "model must return [B,K,h,w] at the window size", crop.shape(),
                  logits.shape());
    if (canvas.empty()) {
      k = logits.dim(1);
      canvas.assign(static_cast<std::size_t>(b * k * h * w), S(0));
    }
    const auto src = logits.data();
    for (Index i = 0; i < b * k; ++i)
      for (Index y = 0; y < plan.window_h; ++y)
        for (Index x = 0; x < plan.window_w; ++x)
          canvas[static_cast<std::size_t>((i * h + oy + y) * w + ox + x)] +=
              src[static_cast<std::size_t>((i * plan.window_h + y) * plan.window_w + x)];
    for (Index y = 0; y < plan.window_h; ++y)
      for (Index x = 0; x < plan.window_w; ++x) ++result.coverage[static_cast<std::size_t>((oy + y) * w + ox + x)];
  }
  for (Index i = 0; i < b * k; ++i)
    for (Index p = 0; p < h * w; ++p)
      canvas[static_cast<std::size_t>(i * h * w + p)] /= static_cast<S>(result.coverage[static_cast<std::size_t>(p)]);
  result.logits = Tensor<S>({b, k, h, w}, std::move(canvas));
  return result;
}

Index scaled_extent(Index extent, double scale, Index multiple) {
  const double target = static_cast<double>(extent) * scale / static_cast<double>(multiple);
  return std::max<Index>(1, static_cast<Index>(std::lround(target))) * multiple;
}

template <typename S>
Tensor<S> multi_scale_probabilities(const LogitFn<S>& model, const Tensor<S>& images,
                                    const MultiScaleOptions& options) {
  if (options.scales.empty()) throw std::invalid_argument("multi_scale_infer: empty scale list");
  NoGrad<S> no_grad;
  const Index h = images.dim(2), w = images.dim(3);
  Tensor<S> total;
  Index terms = 0;
  for (double s : options.scales) {
    if (s <= 0) throw std::invalid_argument("multi_scale_infer: scales must be positive");
    const Index sh = scaled_extent(h, s, options.size_multiple), sw = scaled_extent(w, s, options.size_multiple);
    const Tensor<S> scaled = sh == h && sw == w ? images : bilinear_resize(images, sh, sw);
    for (int mirrored = 0; mirrored <= (options.flip ? 1 : 0); ++mirrored) {
      const Tensor<S> input = mirrored ? flip_last(scaled) : scaled;
      Tensor<S> logits = sliding_window_infer(model, input, options.window, options.stride).logits;
      if (mirrored) logits = flip_last(logits);
      if (sh != h || sw != w) logits = bilinear_resize(logits, h, w);
      const Tensor<S> probs = softmax(logits, 1);
      total = total.defined() ? add(total, probs) : probs;
      ++terms;
    }
  }
  return terms == 1 ? total : scale(total, S(1) / static_cast<S>(terms));
}

template <typename S>
std::vector<LabelMap> multi_scale_infer(const LogitFn<S>& model, const Tensor<S>& images,
                                        const MultiScaleOptions& options) {
  return argmax_labels(multi_scale_probabilities(model, images, options));
}

template <typename S>
std::vector<LabelMap> argmax_labels(const Tensor<S>& scores) {
  if (scores.rank() != 4) shape_error("argmax_labels", "scores must be [B,K,H,W]", scores.shape());
  const Index b = scores.dim(0), k = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  if (k > 255) shape_error("argmax_labels", "too many classes for 8-bit labels", scores.shape());
  const auto d = scores.data();
  std::vector<LabelMap> out;
  for (Index i = 0; i < b; ++i) {
    LabelMap lm(h, w);
    for (Index p = 0; p < h * w; ++p) {
      Index best = 0;
      for (Index c = 1; c < k; ++c)
        if (d[static_cast<std::size_t>((i * k + c) * h * w + p)] > d[static_cast<std::size_t>((i * k + best) * h * w + p)])
          best = c;
      lm.labels[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(lm));
  }
  return out;
}

#define RSSEG_INSTANTIATE_INFERENCE(S)                                                                       \
  template SlidingWindowResult<S> sliding_window_infer(const LogitFn<S>&, const Tensor<S>&, Index, Index);   \
  template Tensor<S> multi_scale_probabilities(const LogitFn<S>&, const Tensor<S>&, const MultiScaleOptions&); \
  template std::vector<LabelMap> multi_scale_infer(const LogitFn<S>&, const Tensor<S>&, const MultiScaleOptions&); \
  template std::vector<LabelMap> argmax_labels(const Tensor<S>&);

RSSEG_INSTANTIATE_INFERENCE(float)
RSSEG_INSTANTIATE_INFERENCE(double)

#undef RSSEG_INSTANTIATE_INFERENCE

}  // namespace rsseg
