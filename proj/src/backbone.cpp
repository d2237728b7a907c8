// SPDX-License-Identifier: Apache-2.0
#include "rsseg/backbone.hpp"

namespace rsseg {

template <typename S>
TransformerLayer<S>::TransformerLayer(Builder<S> b, const std::string& name, Index dim, Index heads, Index hidden)
    : norm1(b, name + ".norm1", dim),
      norm2(b, name + ".norm2", dim),
      attn(b, name + ".attn", dim, heads),
      mlp(b, name + ".mlp", dim, hidden) {}

template <typename S>
Tensor<S> TransformerLayer<S>::operator()(const Tensor<S>& x, Tensor<S>* weights) const {
  const Tensor<S> h = add(x, attn(norm1(x), weights));
  return add(h, mlp(norm2(h)));
}

template <typename S>
VitBackbone<S>::VitBackbone(Builder<S> b, const BackboneConfig& config) : config_(config) {
  config_.validate();
  const Index p = config.patch_size, c = config.embed_dim, g = config.grid();
  patch_proj.options = {p, 0, 1};
  patch_proj.weight = b.truncated_normal("backbone.patch_embed.weight", {c, 3, p, p}, 0.02);
  patch_proj.bias = b.constant("backbone.patch_embed.bias", {c}, S(0));
  pos_embed = b.truncated_normal("backbone.pos_embed", {1, g * g, c}, 0.02, false);
  for (Index i = 0; i < config.depth; ++i)
    layers.emplace_back(b, "backbone.layers." + std::to_string(i), c, config.heads, config.mlp_hidden());
  norm = LayerNorm<S>(b, "backbone.norm", c);
}

template <typename S>
Tensor<S> VitBackbone<S>::patch_embed(const Tensor<S>& image) const {
  const Index p = config_.patch_size;
  if (image.rank() != 4 || image.dim(1) != 3) shape_error("patch_embed", "image must be [B,3,H,W]", image.shape());
  if (image.dim(2) % p != 0 || image.dim(3) % p != 0 || image.dim(2) == 0 || image.dim(3) == 0)
    shape_error("patch_embed", "image extents must be positive multiples of patch size " + std::to_string(p),
                image.shape());
  const Index gh = image.dim(2) / p, gw = image.dim(3) / p, g = config_.grid();
  const Tensor<S> tokens = to_tokens(patch_proj(image));
  Tensor<S> pos = pos_embed;
  if (gh != g || gw != g) pos = to_tokens(bilinear_resize(to_map(pos_embed, g, g), gh, gw));
  return add(tokens, pos);
}

template <typename S>
LayerOutputs<S> VitBackbone<S>::forward_with_taps(const Tensor<S>& image, bool keep_attention) const {
  LayerOutputs<S> out;
  out.grid_h = image.dim(2) / config_.patch_size;
  out.grid_w = image.dim(3) / config_.patch_size;
  Tensor<S> x = patch_embed(image);
  std::size_t next_tap = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Tensor<S> weights;
    x = layers[i](x, keep_attention ? &weights : nullptr);
    if (keep_attention) out.attention.push_back(weights);
    if (next_tap < config_.tap_indices.size() && config_.tap_indices[next_tap] == static_cast<Index>(i)) {
      out.taps.push_back(x);
      ++next_tap;
    }
  }
  out.final = norm(x);
  return out;
}

template struct TransformerLayer<float>;
template struct TransformerLayer<double>;
template class VitBackbone<float>;
template class VitBackbone<double>;

}  // namespace rsseg
