// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rsseg/config.hpp"
#include "rsseg/data.hpp"
#include "rsseg/nn.hpp"

namespace rsseg {

template <typename Scalar>
struct CrossAttentionResult {
  Tensor<Scalar> output;     // [B,K,C]
  Tensor<Scalar> attention;  // [B,K,N]
  Tensor<Scalar> q_norm;     // [B,K,C]
  Tensor<Scalar> k_norm;     // [B,N,C]
};

/// softmax(scale * norm(Q) norm(K)^T) V with rows L2-normalized over
/// channels. `scale` is a one-element tensor.
template <typename Scalar>
CrossAttentionResult<Scalar> l2norm_cross_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                                    const Tensor<Scalar>& v, const Tensor<Scalar>& scale);

template <typename Scalar>
struct RegionEmbeddings {
  Tensor<Scalar> embeddings;           // [B,K,C], zero rows for absent classes
  std::vector<std::uint8_t> presence;  // [B*K]
};

/// Class means of the key rows [B,N,C]; labels are at the key grid (N pixels
/// each). Ignore pixels contribute to no class.
template <typename Scalar>
RegionEmbeddings<Scalar> region_embeddings(const Tensor<Scalar>& k_norm, std::span<const LabelMap> labels,
                                           Index num_classes);

template <typename Scalar>
struct Similarity {
  Tensor<Scalar> probs;               // row-softmax over unmasked columns
  Tensor<Scalar> logits;              // scaled cosines
  std::vector<std::uint8_t> column_mask;  // one entry per logit
  std::vector<std::int32_t> targets;  // one per row, -1 ignored
};

/// Query c against every region: [B,K,K]; target is c for present classes.
template <typename Scalar>
Similarity<Scalar> query_to_region_similarity(const Tensor<Scalar>& q_norm, const RegionEmbeddings<Scalar>& re,
                                              const Tensor<Scalar>& scale);

/// Every key row against every region: [B,N,K]; target is the pixel label.
template <typename Scalar>
Similarity<Scalar> patch_to_region_similarity(const Tensor<Scalar>& k_norm, const RegionEmbeddings<Scalar>& re,
                                              const Tensor<Scalar>& scale, std::span<const LabelMap> labels);

/// Per-pixel class logits scale * <norm(e_k), norm(p_xy)>: mask embeddings
/// [B,K,C] and patches [B,C,H,W] give [B,K,H,W].
template <typename Scalar>
Tensor<Scalar> mask_prediction(const Tensor<Scalar>& mask_embeddings, const Tensor<Scalar>& patches,
                               const Tensor<Scalar>& scale);

/// Pre-norm decoder layer: query self-attention, discriminative
/// cross-attention to the patch tokens, MLP.
template <typename Scalar>
struct DcaLayer {
  LayerNorm<Scalar> norm_self, norm_cross, norm_memory, norm_mlp;
  MultiHeadAttention<Scalar> self_attn;
  Linear<Scalar> wq, wk, wv, wo;
  Tensor<Scalar> log_scale;  // scale = exp(log_scale), shared by the attention and both similarities
  Mlp<Scalar> mlp;

  DcaLayer() = default;
  DcaLayer(Builder<Scalar> b, const std::string& name, Index dim, Index heads, Index hidden, double scale_init);

  Tensor<Scalar> scale() const { return exp(log_scale); }
  /// Returns the updated queries; `cross` receives the cross-attention internals.
  Tensor<Scalar> operator()(const Tensor<Scalar>& queries, const Tensor<Scalar>& memory,
                            CrossAttentionResult<Scalar>* cross = nullptr) const;
};

template <typename Scalar>
struct DecoderOutput {
  Tensor<Scalar> mask_embeddings;  // [B,K,C]
  std::vector<CrossAttentionResult<Scalar>> layers;
  std::vector<Tensor<Scalar>> scales;
};

template <typename Scalar>
class DcaDecoder {
 public:
  DcaDecoder() = default;
  DcaDecoder(Builder<Scalar> b, const DecoderConfig& config, Index dim, Index heads, Index hidden);

  /// memory [B,N,C] patch tokens.
  DecoderOutput<Scalar> operator()(const Tensor<Scalar>& memory) const;

  Tensor<Scalar> queries;  // [K,C]
  std::vector<DcaLayer<Scalar>> layers;
};

}  // namespace rsseg
