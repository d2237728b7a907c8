// SPDX-License-Identifier: Apache-2.0
#include "rsseg/sasm.hpp"

namespace rsseg {

template <typename S>
Tensor<S> build_spatial_filters(const Tensor<S>& guidance, const Conv2d<S>& generator, const SasmConfig& config) {
  if (guidance.rank() != 4) shape_error("build_spatial_filters", "guidance must be [B,C,H,W]", guidance.shape());
  const Index b = guidance.dim(0), h = guidance.dim(2), w = guidance.dim(3);
  const Index g = config.groups, rr = config.up_factor * config.up_factor, k = config.filter_size;
  const Tensor<S> logits = generator(guidance);
  if (logits.dim(1) != g * rr * k * k)
    shape_error("build_spatial_filters", "generator must emit groups*r*r*k*k channels", logits.shape());
  const Tensor<S> filters = softmax(reshape(logits, {b, g, rr, k * k, h, w}), 3);
  return reshape(filters, {b, g, rr, k, k, h, w});
}

template <typename S>
Tensor<S> sasm_apply(const Tensor<S>& features, const Tensor<S>& filters, const SasmConfig& config) {
  if (features.rank() != 4 || features.dim(1) != config.groups * config.group_dim)
    shape_error("sasm_apply", "features must be [B, groups*group_dim, H, W]", features.shape(), filters.shape());
  if (filters.rank() != 7 || filters.dim(1) != config.groups ||
      filters.dim(2) != config.up_factor * config.up_factor)
    shape_error("sasm_apply", "filters must be [B, groups, r*r, k, k, H, W]", features.shape(), filters.shape());
  return adaptive_filter_upsample(features, filters);
}

template <typename S>
SasmStack<S>::SasmStack(Builder<S> b, const SasmConfig& config, Index local_dim) : config_(config) {
  config.validate();
  downsample = Conv2d<S>(b, "sasm.downsample", local_dim, local_dim, 2, {2, 0, 1});
  const Index out = config.groups * config.up_factor * config.up_factor * config.filter_size * config.filter_size;
  for (Index s = 0; s < config.num_stages; ++s)
    generators.emplace_back(b, "sasm.stages." + std::to_string(s) + ".filter_gen", local_dim, out, 1);
}

template <typename S>
Tensor<S> SasmStack<S>::downsample_guidance(const Tensor<S>& local) const {
  if (local.rank() != 4 || local.dim(2) % 2 != 0 || local.dim(3) % 2 != 0)
    shape_error("downsample_guidance", "needs even spatial extents", local.shape());
  return downsample(local);
}

template <typename S>
SasmOutputs<S> SasmStack<S>::operator()(const Tensor<S>& global, const std::vector<Tensor<S>>& local_blocks) const {
  if (local_blocks.empty()) throw std::invalid_argument("sasm_stack: no local-path outputs");
  SasmOutputs<S> out;
  Tensor<S> x = global;
  for (Index s = 0; s < config_.num_stages; ++s) {
    Tensor<S> guide;
    if (s == 0) {
      guide = downsample_guidance(local_blocks.back());
    } else {
      guide = local_blocks.size() >= 2 ? local_blocks[local_blocks.size() - 2] : local_blocks.back();
    }
    if (guide.dim(2) != x.dim(2) || guide.dim(3) != x.dim(3))
      shape_error("sasm_stack", "guidance resolution must match the guided features", guide.shape(), x.shape());
    const Tensor<S> filters = build_spatial_filters(guide, generators[static_cast<std::size_t>(s)], config_);
    x = sasm_apply(x, filters, config_);
    out.filters.push_back(filters);
    out.stages.push_back(x);
  }
  return out;
}

#define RSSEG_INSTANTIATE_SASM(S)                                                                  \
  template Tensor<S> build_spatial_filters(const Tensor<S>&, const Conv2d<S>&, const SasmConfig&); \
  template Tensor<S> sasm_apply(const Tensor<S>&, const Tensor<S>&, const SasmConfig&);            \
  template class SasmStack<S>;

RSSEG_INSTANTIATE_SASM(float)
RSSEG_INSTANTIATE_SASM(double)

#undef RSSEG_INSTANTIATE_SASM

}  // namespace rsseg
