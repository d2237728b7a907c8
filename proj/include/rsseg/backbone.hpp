// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "rsseg/config.hpp"
#include "rsseg/nn.hpp"

namespace rsseg {

template <typename Scalar>
struct LayerOutputs {
  Tensor<Scalar> final;               // [B,N,C] after the closing LayerNorm
  std::vector<Tensor<Scalar>> taps;   // [B,N,C] raw layer outputs, tap order
  Index grid_h = 0, grid_w = 0;
  std::vector<Tensor<Scalar>> attention;  // [B,heads,N,N] per layer, when requested
};

/// Pre-norm encoder layer: x + MSA(LN(x)), then x + MLP(LN(x)).
template <typename Scalar>
struct TransformerLayer {
  LayerNorm<Scalar> norm1, norm2;
  MultiHeadAttention<Scalar> attn;
  Mlp<Scalar> mlp;

  TransformerLayer() = default;
  TransformerLayer(Builder<Scalar> b, const std::string& name, Index dim, Index heads, Index hidden);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x, Tensor<Scalar>* weights = nullptr) const;
};

/// Plain ViT without a class token.
template <typename Scalar>
class VitBackbone {
 public:
  VitBackbone() = default;
  VitBackbone(Builder<Scalar> b, const BackboneConfig& config);

  /// image [B,3,H,W] with H and W multiples of the patch size -> [B,N,C].
  /// Positional embeddings are bilinearly resized when the grid differs from
  /// the configured one.
  Tensor<Scalar> patch_embed(const Tensor<Scalar>& image) const;
  LayerOutputs<Scalar> forward_with_taps(const Tensor<Scalar>& image, bool keep_attention = false) const;

  const BackboneConfig& config() const { return config_; }

  Conv2d<Scalar> patch_proj;
  Tensor<Scalar> pos_embed;  // [1,N,C] at the configured grid
  std::vector<TransformerLayer<Scalar>> layers;
  LayerNorm<Scalar> norm;

 private:
  BackboneConfig config_;
};

}  // namespace rsseg
