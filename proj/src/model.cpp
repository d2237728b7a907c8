// SPDX-License-Identifier: Apache-2.0
#include "rsseg/model.hpp"

#include <cmath>

namespace rsseg {

template <typename S>
SegmentationModel<S>::SegmentationModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  SplitMix64 rng(seed);
  Builder<S> b{store_, rng, ParamGroup::kBackbone};
  const BackboneConfig& bc = config_.backbone;
  backbone_ = VitBackbone<S>(b, bc);
  Builder<S> head = b.with_group(ParamGroup::kHead);
  if (config_.head == HeadKind::kLinear) {
    linear_head_ = Linear<S>(head, "head.linear", bc.embed_dim, config_.decoder.num_classes);
    return;
  }
  local_ = LocalPath<S>(head, config_.local, bc.patch_size, bc.embed_dim, config_.num_blocks());
  sasm_ = SasmStack<S>(head, config_.sasm, config_.local.input_dim);
  mask_log_scale_ = head.constant("head.mask_log_scale", {1}, static_cast<S>(std::log(config_.decoder.scale_init)));
  decoder_ = DcaDecoder<S>(b.with_group(ParamGroup::kDecoder), config_.decoder, bc.embed_dim, bc.heads,
                           bc.mlp_hidden());
}

template <typename S>
ModelOutput<S> SegmentationModel<S>::forward(const Tensor<S>& images, bool training, bool keep_attention) const {
  ModelOutput<S> out;
  out.backbone = backbone_.forward_with_taps(images, keep_attention);
  const Index gh = out.backbone.grid_h, gw = out.backbone.grid_w;
  if (config_.head == HeadKind::kLinear) {
    out.logits = to_map(linear_head_(out.backbone.final), gh, gw);
    return out;
  }
  std::vector<Tensor<S>> taps;
  for (const auto& t : out.backbone.taps) taps.push_back(to_map(t, gh, gw));
  out.local = local_(images, taps, training);
  out.boundary_logits = out.local.boundary_logits;
  out.sasm = sasm_(to_map(out.backbone.final, gh, gw), out.local.blocks);
  const Tensor<S>& memory_map = out.sasm.stages.front();
  out.memory_h = memory_map.dim(2);
  out.memory_w = memory_map.dim(3);
  out.decoder = decoder_(to_tokens(memory_map));
  out.logits = mask_prediction(out.decoder.mask_embeddings, out.sasm.final(), mask_scale());
  return out;
}

template <typename S>
LossReport<S> SegmentationModel<S>::loss(const ModelOutput<S>& out, std::span<const LabelMap> labels) const {
  LossComponents<S> parts;
  parts.seg = cross_entropy_seg(out.logits, labels);
  Index matched_queries = 0, matched_patches = 0;
  if (config_.head == HeadKind::kRsseg && config_.loss_mode == LossMode::kMatching && config_.decoder.aux_losses &&
      !out.decoder.layers.empty()) {
    std::vector<LabelMap> small;
    small.reserve(labels.size());
    for (const LabelMap& lm : labels) small.push_back(resize_nearest(lm, out.memory_h, out.memory_w));
    MatchingTerms<S> m = decoder_matching_losses(out.decoder, std::span<const LabelMap>(small),
                                                 config_.decoder.num_classes);
    parts.q2r = m.q2r;
    parts.p2r = m.p2r;
    matched_queries = m.valid_queries;
    matched_patches = m.valid_patches;
  }
  if (config_.loss_mode == LossMode::kBoundary && out.boundary_logits.defined())
    parts.boundary = boundary_loss(out.boundary_logits, labels);
  LossReport<S> report = total_loss(parts, config_.loss_mode, config_.boundary_weight);
  for (const LabelMap& lm : labels)
    for (std::uint8_t v : lm.labels) report.valid_pixels += v != LabelMap::kIgnore;
  report.valid_queries = matched_queries;
  report.valid_patches = matched_patches;
  return report;
}

template <typename S>
Tensor<S> SegmentationModel<S>::predict_logits(const Tensor<S>& images) const {
  NoGrad<S> no_grad;
  const Tensor<S> logits = forward(images, false).logits;
  return bilinear_resize(logits, images.dim(2), images.dim(3));
}

template class SegmentationModel<float>;
template class SegmentationModel<double>;

}  // namespace rsseg
