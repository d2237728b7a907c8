// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "rsseg/backbone.hpp"
#include "rsseg/config.hpp"
#include "rsseg/decoder.hpp"
#include "rsseg/local_path.hpp"
#include "rsseg/losses.hpp"
#include "rsseg/sasm.hpp"

namespace rsseg {

template <typename Scalar>
struct ModelOutput {
  Tensor<Scalar> logits;  // [B,K,h,w] at head resolution
  Tensor<Scalar> boundary_logits;
  LayerOutputs<Scalar> backbone;
  LocalPathState<Scalar> local;
  SasmOutputs<Scalar> sasm;
  DecoderOutput<Scalar> decoder;
  Index memory_h = 0, memory_w = 0;  // grid of the decoder's patch tokens
};

/// Plain ViT with either a per-token linear classifier or the full head:
/// local path, guided upsampling stack and the cross-attention decoder.
template <typename Scalar>
class SegmentationModel {
 public:
  explicit SegmentationModel(const ModelConfig& config, std::uint64_t seed = 42);
  SegmentationModel(const SegmentationModel&) = delete;
  SegmentationModel& operator=(const SegmentationModel&) = delete;

  /// images [B,3,H,W], H and W multiples of the patch size.
  ModelOutput<Scalar> forward(const Tensor<Scalar>& images, bool training, bool keep_attention = false) const;
  /// Loss against labels at image resolution.
  LossReport<Scalar> loss(const ModelOutput<Scalar>& out, std::span<const LabelMap> labels) const;
  /// Eval-mode logits bilinearly resized to the input size, without recording.
  Tensor<Scalar> predict_logits(const Tensor<Scalar>& images) const;

  const ModelConfig& config() const { return config_; }
  ParameterStore<Scalar>& parameters() { return store_; }
  const ParameterStore<Scalar>& parameters() const { return store_; }

  const VitBackbone<Scalar>& backbone() const { return backbone_; }
  Tensor<Scalar> mask_scale() const { return exp(mask_log_scale_); }

 private:
  ModelConfig config_;
  ParameterStore<Scalar> store_;
  VitBackbone<Scalar> backbone_;
  LocalPath<Scalar> local_;
  SasmStack<Scalar> sasm_;
  DcaDecoder<Scalar> decoder_;
  Tensor<Scalar> mask_log_scale_;
  Linear<Scalar> linear_head_;
};

}  // namespace rsseg
