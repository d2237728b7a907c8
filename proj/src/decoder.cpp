// SPDX-License-Identifier: Apache-2.0
#include "rsseg/decoder.hpp"

#include <cmath>

namespace rsseg {

template <typename S>
CrossAttentionResult<S> l2norm_cross_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                               const Tensor<S>& scale) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2) ||
      k.dim(1) != v.dim(1) || k.dim(0) != v.dim(0))
    shape_error("l2norm_cross_attention", "expected Q [B,K,C], K [B,N,C], V [B,N,C]", q.shape(), k.shape());
  if (scale.size() != 1) shape_error("l2norm_cross_attention", "scale must hold one element", scale.shape());
  CrossAttentionResult<S> r;
  r.q_norm = l2_normalize(q, 2);
  r.k_norm = l2_normalize(k, 2);
  r.attention = softmax(mul(matmul(r.q_norm, r.k_norm, true), scale), 2);
  r.output = matmul(r.attention, v);
  return r;
}

template <typename S>
RegionEmbeddings<S> region_embeddings(const Tensor<S>& k_norm, std::span<const LabelMap> labels, Index num_classes) {
  if (k_norm.rank() != 3 || static_cast<Index>(labels.size()) != k_norm.dim(0))
    shape_error("region_embeddings", "keys must be [B,N,C] with one label map per batch item", k_norm.shape());
  const Index b = k_norm.dim(0), n = k_norm.dim(1);
  Tensor<S> weights({b, num_classes, n});
  auto w = weights.mutable_data();
  RegionEmbeddings<S> re;
  re.presence.assign(static_cast<std::size_t>(b * num_classes), 0);
  for (Index i = 0; i < b; ++i) {
    const LabelMap& lm = labels[static_cast<std::size_t>(i)];
    if (lm.height * lm.width != n)
      shape_error("region_embeddings", "label map size does not match key count", k_norm.shape(),
                  Shape{lm.height, lm.width});
    std::vector<Index> count(static_cast<std::size_t>(num_classes), 0);
    for (Index p = 0; p < n; ++p) {
      const std::uint8_t c = lm.labels[static_cast<std::size_t>(p)];
      if (c == LabelMap::kIgnore) continue;
      if (c >= num_classes)
        throw std::invalid_argument("region_embeddings: label " + std::to_string(c) + " >= num_classes " +
                                    std::to_string(num_classes));
      ++count[c];
    }
    for (Index p = 0; p < n; ++p) {
      const std::uint8_t c = lm.labels[static_cast<std::size_t>(p)];
      if (c == LabelMap::kIgnore) continue;
      w[static_cast<std::size_t>((i * num_classes + c) * n + p)] = S(1) / static_cast<S>(count[c]);
    }
    for (Index c = 0; c < num_classes; ++c) re.presence[static_cast<std::size_t>(i * num_classes + c)] = count[c] > 0;
  }
  re.embeddings = matmul(weights, k_norm);
  return re;
}

template <typename S>
Similarity<S> query_to_region_similarity(const Tensor<S>& q_norm, const RegionEmbeddings<S>& re,
                                         const Tensor<S>& scale) {
  const Index b = re.embeddings.dim(0), k = re.embeddings.dim(1);
  if (q_norm.rank() != 3 || q_norm.dim(0) != b || q_norm.dim(1) != k)
    shape_error("query_to_region_similarity", "queries must be [B,K,C] matching the regions", q_norm.shape(),
                re.embeddings.shape());
  Similarity<S> s;
  s.logits = mul(matmul(q_norm, l2_normalize(re.embeddings, 2), true), scale);
  s.column_mask.resize(static_cast<std::size_t>(b * k * k));
  s.targets.resize(static_cast<std::size_t>(b * k));
  for (Index i = 0; i < b; ++i)
    for (Index r = 0; r < k; ++r) {
      for (Index c = 0; c < k; ++c)
        s.column_mask[static_cast<std::size_t>((i * k + r) * k + c)] = re.presence[static_cast<std::size_t>(i * k + c)];
      s.targets[static_cast<std::size_t>(i * k + r)] =
          re.presence[static_cast<std::size_t>(i * k + r)] ? static_cast<std::int32_t>(r) : -1;
    }
  s.probs = masked_softmax(s.logits, std::span<const std::uint8_t>(s.column_mask));
  return s;
}

template <typename S>
Similarity<S> patch_to_region_similarity(const Tensor<S>& k_norm, const RegionEmbeddings<S>& re,
                                         const Tensor<S>& scale, std::span<const LabelMap> labels) {
  const Index b = re.embeddings.dim(0), k = re.embeddings.dim(1);
  if (k_norm.rank() != 3 || k_norm.dim(0) != b || static_cast<Index>(labels.size()) != b)
    shape_error("patch_to_region_similarity", "keys must be [B,N,C] matching the regions", k_norm.shape(),
                re.embeddings.shape());
  const Index n = k_norm.dim(1);
  Similarity<S> s;
  s.logits = mul(matmul(k_norm, l2_normalize(re.embeddings, 2), true), scale);
  s.column_mask.resize(static_cast<std::size_t>(b * n * k));
  s.targets.resize(static_cast<std::size_t>(b * n));
  for (Index i = 0; i < b; ++i) {
    const LabelMap& lm = labels[static_cast<std::size_t>(i)];
    if (lm.height * lm.width != n)
      shape_error("patch_to_region_similarity", "label map size does not match key count", k_norm.shape(),
                  Shape{lm.height, lm.width});
    for (Index p = 0; p < n; ++p) {
      for (Index c = 0; c < k; ++c)
        s.column_mask[static_cast<std::size_t>((i * n + p) * k + c)] = re.presence[static_cast<std::size_t>(i * k + c)];
      const std::uint8_t c = lm.labels[static_cast<std::size_t>(p)];
      s.targets[static_cast<std::size_t>(i * n + p)] = c == LabelMap::kIgnore ? -1 : static_cast<std::int32_t>(c);
    }
  }
  s.probs = masked_softmax(s.logits, std::span<const std::uint8_t>(s.column_mask));
  return s;
}

template <typename S>
Tensor<S> mask_prediction(const Tensor<S>& mask_embeddings, const Tensor<S>& patches, const Tensor<S>& scale) {
  if (mask_embeddings.rank() != 3 || patches.rank() != 4 || mask_embeddings.dim(0) != patches.dim(0) ||
      mask_embeddings.dim(2) != patches.dim(1))
    shape_error("mask_prediction", "expected embeddings [B,K,C] and patches [B,C,H,W]", mask_embeddings.shape(),
                patches.shape());
  const Index b = patches.dim(0), h = patches.dim(2), w = patches.dim(3), k = mask_embeddings.dim(1);
  const Tensor<S> e = l2_normalize(mask_embeddings, 2);
  const Tensor<S> p = l2_normalize(to_tokens(patches), 2);
  return reshape(mul(matmul(e, p, true), scale), {b, k, h, w});
}

template <typename S>
DcaLayer<S>::DcaLayer(Builder<S> b, const std::string& name, Index dim, Index heads, Index hidden, double scale_init)
    : norm_self(b, name + ".norm_self", dim),
      norm_cross(b, name + ".norm_cross", dim),
      norm_memory(b, name + ".norm_memory", dim),
      norm_mlp(b, name + ".norm_mlp", dim),
      self_attn(b, name + ".self_attn", dim, heads),
      wq(b, name + ".cross.q", dim, dim),
      wk(b, name + ".cross.k", dim, dim),
      wv(b, name + ".cross.v", dim, dim),
      wo(b, name + ".cross.proj", dim, dim),
      mlp(b, name + ".mlp", dim, hidden) {
  log_scale = b.constant(name + ".log_scale", {1}, static_cast<S>(std::log(scale_init)));
}

template <typename S>
Tensor<S> DcaLayer<S>::operator()(const Tensor<S>& queries, const Tensor<S>& memory,
                                  CrossAttentionResult<S>* cross) const {
  Tensor<S> x = add(queries, self_attn(norm_self(queries)));
  const Tensor<S> mem = norm_memory(memory);
  CrossAttentionResult<S> r = l2norm_cross_attention(wq(norm_cross(x)), wk(mem), wv(mem), scale());
  x = add(x, wo(r.output));
  x = add(x, mlp(norm_mlp(x)));
  if (cross) *cross = std::move(r);
  return x;
}

template <typename S>
DcaDecoder<S>::DcaDecoder(Builder<S> b, const DecoderConfig& config, Index dim, Index heads, Index hidden) {
  queries = b.truncated_normal("decoder.queries", {config.num_classes, dim}, 0.02, false);
  for (Index i = 0; i < config.depth; ++i)
    layers.emplace_back(b, "decoder.layers." + std::to_string(i), dim, heads, hidden, config.scale_init);
}

template <typename S>
DecoderOutput<S> DcaDecoder<S>::operator()(const Tensor<S>& memory) const {
  if (memory.rank() != 3 || memory.dim(2) != queries.dim(1))
    shape_error("decode", "memory must be [B,N,C] with the query width", memory.shape(), queries.shape());
  DecoderOutput<S> out;
  Tensor<S> x = broadcast_to(queries, {memory.dim(0), queries.dim(0), queries.dim(1)});
  for (const auto& layer : layers) {
    CrossAttentionResult<S> r;
    x = layer(x, memory, &r);
    out.layers.push_back(std::move(r));
    out.scales.push_back(layer.scale());
  }
  out.mask_embeddings = x;
  return out;
}

#define RSSEG_INSTANTIATE_DECODER(S)                                                                                 \
  template CrossAttentionResult<S> l2norm_cross_attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,     \
                                                          const Tensor<S>&);                                         \
  template RegionEmbeddings<S> region_embeddings(const Tensor<S>&, std::span<const LabelMap>, Index);               \
  template Similarity<S> query_to_region_similarity(const Tensor<S>&, const RegionEmbeddings<S>&, const Tensor<S>&); \
  template Similarity<S> patch_to_region_similarity(const Tensor<S>&, const RegionEmbeddings<S>&, const Tensor<S>&, \
                                                    std::span<const LabelMap>);                                      \
  template Tensor<S> mask_prediction(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                         \
  template struct DcaLayer<S>;                                                                                       \
  template class DcaDecoder<S>;

RSSEG_INSTANTIATE_DECODER(float)
RSSEG_INSTANTIATE_DECODER(double)

#undef RSSEG_INSTANTIATE_DECODER

}  // namespace rsseg
