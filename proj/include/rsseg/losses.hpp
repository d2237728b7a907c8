// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "rsseg/config.hpp"
#include "rsseg/data.hpp"
#include "rsseg/decoder.hpp"

namespace rsseg {

/// Pixel cross-entropy after bilinearly upsampling logits [B,K,h,w] to the
/// label resolution. Mean over non-ignore pixels; 0 when there are none.
template <typename Scalar>
Tensor<Scalar> cross_entropy_seg(const Tensor<Scalar>& logits, std::span<const LabelMap> labels);

/// Cross-entropy of both similarity matrices over their unmasked rows.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> matching_losses(const Similarity<Scalar>& q2r,
                                                          const Similarity<Scalar>& p2r);

template <typename Scalar>
struct MatchingTerms {
  Tensor<Scalar> q2r, p2r;  // averaged over decoder layers
  Index valid_queries = 0;  // per layer
  Index valid_patches = 0;
};

/// Both matching losses for every decoder layer, averaged. `labels` must be
/// at the key grid of the decoder memory.
template <typename Scalar>
MatchingTerms<Scalar> decoder_matching_losses(const DecoderOutput<Scalar>& decoded, std::span<const LabelMap> labels,
                                              Index num_classes);

/// 1 where a 4-neighbour carries a different non-ignore label, 0 elsewhere,
/// -1 on ignore pixels. Concatenated over the batch.
std::vector<std::int8_t> boundary_targets(std::span<const LabelMap> labels);

/// BCE on boundary logits [B,1,h,w] upsampled to the label size, positives
/// weighted by negatives/positives (capped at 50). 0 without boundary pixels.
template <typename Scalar>
Tensor<Scalar> boundary_loss(const Tensor<Scalar>& logits, std::span<const LabelMap> labels);

template <typename Scalar>
struct LossComponents {
  Tensor<Scalar> seg, q2r, p2r, boundary;  // undefined terms count as 0
};

template <typename Scalar>
struct LossReport {
  Tensor<Scalar> total;
  double seg = 0, q2r = 0, p2r = 0, boundary = 0;
  Index valid_pixels = 0, valid_queries = 0, valid_patches = 0;
};

/// kMatching: seg + q2r + p2r. kBoundary: seg + boundary_weight * boundary.
template <typename Scalar>
LossReport<Scalar> total_loss(const LossComponents<Scalar>& parts, LossMode mode, double boundary_weight = 0.4);

}  // namespace rsseg
