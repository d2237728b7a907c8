// SPDX-License-Identifier: Apache-2.0
#include "rsseg/losses.hpp"

#include <algorithm>

namespace rsseg {

template <typename S>
Tensor<S> cross_entropy_seg(const Tensor<S>& logits, std::span<const LabelMap> labels) {
  if (logits.rank() != 4 || static_cast<Index>(labels.size()) != logits.dim(0) || labels.empty())
    shape_error("cross_entropy_seg", "logits must be [B,K,h,w] with one label map per item", logits.shape());
  const Index h = labels[0].height, w = labels[0].width;
  for (const LabelMap& lm : labels)
    if (lm.height != h || lm.width != w)
      shape_error("cross_entropy_seg", "label maps differ in size", Shape{h, w}, Shape{lm.height, lm.width});
  const Tensor<S> up = logits.dim(2) == h && logits.dim(3) == w ? logits : bilinear_resize(logits, h, w);
  const std::vector<std::int32_t> targets = flatten_targets(labels);
  return cross_entropy(up, 1, std::span<const std::int32_t>(targets));
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> matching_losses(const Similarity<S>& q2r, const Similarity<S>& p2r) {
  auto term = [](const Similarity<S>& s) {
    return cross_entropy(s.logits, s.logits.rank() - 1, std::span<const std::int32_t>(s.targets),
                         std::span<const std::uint8_t>(s.column_mask));
  };
  return {term(q2r), term(p2r)};
}

template <typename S>
MatchingTerms<S> decoder_matching_losses(const DecoderOutput<S>& decoded, std::span<const LabelMap> labels,
                                         Index num_classes) {
  MatchingTerms<S> out;
  if (decoded.layers.empty()) {
    out.q2r = Tensor<S>::scalar(S(0));
    out.p2r = Tensor<S>::scalar(S(0));
    return out;
  }
  std::vector<Tensor<S>> q_terms, p_terms;
  for (std::size_t i = 0; i < decoded.layers.size(); ++i) {
    const auto& layer = decoded.layers[i];
    const RegionEmbeddings<S> re = region_embeddings(layer.k_norm, labels, num_classes);
    const Similarity<S> q2r = query_to_region_similarity(layer.q_norm, re, decoded.scales[i]);
    const Similarity<S> p2r = patch_to_region_similarity(layer.k_norm, re, decoded.scales[i], labels);
    auto [lq, lp] = matching_losses(q2r, p2r);
    q_terms.push_back(lq);
    p_terms.push_back(lp);
    if (i == 0) {
      out.valid_queries = std::count_if(q2r.targets.begin(), q2r.targets.end(), [](std::int32_t t) { return t >= 0; });
      out.valid_patches = std::count_if(p2r.targets.begin(), p2r.targets.end(), [](std::int32_t t) { return t >= 0; });
    }
  }
  const S inv = S(1) / static_cast<S>(decoded.layers.size());
  auto average = [inv](const std::vector<Tensor<S>>& terms) {
    Tensor<S> acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return scale(acc, inv);
  };
  out.q2r = average(q_terms);
  out.p2r = average(p_terms);
  return out;
}

std::vector<std::int8_t> boundary_targets(std::span<const LabelMap> labels) {
  std::vector<std::int8_t> out;
  for (const LabelMap& lm : labels) {
    for (Index y = 0; y < lm.height; ++y)
      for (Index x = 0; x < lm.width; ++x) {
        const std::uint8_t c = lm.at(y, x);
        if (c == LabelMap::kIgnore) {
          out.push_back(-1);
          continue;
        }
        bool edge = false;
        const Index dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          const Index ny = y + dy[d], nx = x + dx[d];
          if (ny < 0 || ny >= lm.height || nx < 0 || nx >= lm.width) continue;
          const std::uint8_t n = lm.at(ny, nx);
          if (n != LabelMap::kIgnore && n != c) edge = true;
        }
        out.push_back(edge ? 1 : 0);
      }
  }
  return out;
}

template <typename S>
Tensor<S> boundary_loss(const Tensor<S>& logits, std::span<const LabelMap> labels) {
  if (logits.rank() != 4 || logits.dim(1) != 1 || static_cast<Index>(labels.size()) != logits.dim(0) ||
      labels.empty())
    shape_error("boundary_loss", "logits must be [B,1,h,w] with one label map per item", logits.shape());
  const Index h = labels[0].height, w = labels[0].width;
  const std::vector<std::int8_t> targets = boundary_targets(labels);
  const auto pos = std::count(targets.begin(), targets.end(), std::int8_t{1});
  const auto neg = std::count(targets.begin(), targets.end(), std::int8_t{0});
  if (pos == 0) return mul(sum(logits), Tensor<S>::scalar(S(0)));
  const S weight = std::min(S(50), static_cast<S>(neg) / static_cast<S>(pos));
  const Tensor<S> up = logits.dim(2) == h && logits.dim(3) == w ? logits : bilinear_resize(logits, h, w);
  return binary_cross_entropy_with_logits(up, std::span<const std::int8_t>(targets), weight);
}

template <typename S>
LossReport<S> total_loss(const LossComponents<S>& parts, LossMode mode, double boundary_weight) {
  LossReport<S> r;
  auto value = [](const Tensor<S>& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; };
  r.seg = value(parts.seg);
  r.q2r = value(parts.q2r);
  r.p2r = value(parts.p2r);
  r.boundary = value(parts.boundary);
  Tensor<S> total = parts.seg.defined() ? parts.seg : Tensor<S>::scalar(S(0));
  if (mode == LossMode::kMatching) {
    if (parts.q2r.defined()) total = add(total, parts.q2r);
    if (parts.p2r.defined()) total = add(total, parts.p2r);
  } else if (parts.boundary.defined()) {
    total = add(total, scale(parts.boundary, static_cast<S>(boundary_weight)));
  }
  r.total = total;
  return r;
}

#define RSSEG_INSTANTIATE_LOSSES(S)                                                                              \
  template Tensor<S> cross_entropy_seg(const Tensor<S>&, std::span<const LabelMap>);                             \
  template std::pair<Tensor<S>, Tensor<S>> matching_losses(const Similarity<S>&, const Similarity<S>&);         \
  template MatchingTerms<S> decoder_matching_losses(const DecoderOutput<S>&, std::span<const LabelMap>, Index); \
  template Tensor<S> boundary_loss(const Tensor<S>&, std::span<const LabelMap>);                                 \
  template LossReport<S> total_loss(const LossComponents<S>&, LossMode, double);

RSSEG_INSTANTIATE_LOSSES(float)
RSSEG_INSTANTIATE_LOSSES(double)

#undef RSSEG_INSTANTIATE_LOSSES

}  // namespace rsseg
