// SPDX-License-Identifier: Apache-2.0
#include "rsseg/local_path.hpp"

namespace rsseg {

template <typename S>
Tensor<S> high_pass_kernel(const Tensor<S>& raw) {
  if (raw.rank() != 4 || raw.dim(1) != 1 || raw.dim(2) != raw.dim(3))
    shape_error("high_pass_kernel", "raw logits must be [C,1,k,k]", raw.shape());
  const Index c = raw.dim(0), kk = raw.dim(2) * raw.dim(3);
  const Tensor<S> probs = softmax(reshape(raw, {c, kk}), 1);
  return reshape(add(probs, Tensor<S>::scalar(S(-1) / static_cast<S>(kk))), raw.shape());
}

template <typename S>
LocalSeparationBlock<S>::LocalSeparationBlock(Builder<S> b, const std::string& name, const LocalPathConfig& config)
    : op(config.op) {
  const Index c = config.input_dim, hidden = config.input_dim * config.expand_ratio, k = config.lhf_kernel;
  expand = Conv2d<S>(b, name + ".expand", c, hidden, 1);
  if (op == LocalOperator::kHighPass)
    depthwise = b.truncated_normal(name + ".lhf_logits", {hidden, 1, k, k}, 1.0, false);
  else
    depthwise = b.truncated_normal(name + ".dw_kernel", {hidden, 1, k, k}, std::sqrt(2.0 / static_cast<double>(k * k)));
  norm = BatchNorm2d<S>(b, name + ".norm", hidden);
  project = Conv2d<S>(b, name + ".project", hidden, c, 1);
}

template <typename S>
Tensor<S> LocalSeparationBlock<S>::kernel() const {
  return op == LocalOperator::kHighPass ? high_pass_kernel(depthwise) : depthwise;
}

template <typename S>
Tensor<S> LocalSeparationBlock<S>::operator()(const Tensor<S>& x, bool training) const {
  const Index hidden = depthwise.dim(0), k = depthwise.dim(2);
  const Tensor<S> local = conv2d(expand(x), kernel(), {}, {1, k / 2, hidden});
  return add(x, project(gelu(norm(local, training))));
}

template <typename S>
AttentionFusion<S>::AttentionFusion(Builder<S> b, const std::string& name, Index local_dim, Index global_dim) {
  if (global_dim != local_dim) adapter = Conv2d<S>(b, name + ".adapter", global_dim, local_dim, 1);
  pool_norm = BatchNorm2d<S>(b, name + ".pool_norm", 2 * local_dim);
  gate_conv = Conv2d<S>(b, name + ".gate_conv", 2 * local_dim, local_dim, 1);
  gate_norm = BatchNorm2d<S>(b, name + ".gate_norm", local_dim);
}

template <typename S>
Tensor<S> AttentionFusion<S>::adapt(const Tensor<S>& xg) const {
  return adapter.weight.defined() ? adapter(xg) : xg;
}

template <typename S>
Tensor<S> AttentionFusion<S>::gate(const Tensor<S>& xl, const Tensor<S>& xg, bool training) const {
  const Tensor<S> pooled = concat<S>({global_avg_pool(xl), global_avg_pool(xg)}, 1);
  return sigmoid(gate_norm(gate_conv(relu(pool_norm(pooled, training))), training));
}

template <typename S>
Tensor<S> AttentionFusion<S>::operator()(const Tensor<S>& xl, const Tensor<S>& xg_raw, bool training) const {
  if (xl.rank() != 4 || xg_raw.rank() != 4 || xl.dim(0) != xg_raw.dim(0))
    shape_error("attention_guided_fuse", "local and global maps must be [B,C,H,W] with equal batch", xl.shape(),
                xg_raw.shape());
  const Tensor<S> xg = adapt(xg_raw);
  if (xg.dim(1) != xl.dim(1))
    shape_error("attention_guided_fuse", "channel mismatch after adapter", xl.shape(), xg.shape());
  return add(mul(gate(xl, xg, training), xl), bilinear_resize(xg, xl.dim(2), xl.dim(3)));
}

template <typename S>
LocalPath<S>::LocalPath(Builder<S> b, const LocalPathConfig& config, Index patch_size, Index global_dim,
                        Index num_blocks)
    : config_(config), patch_size_(patch_size) {
  config.validate();
  if (patch_size % 2 != 0 || patch_size < 4)
    throw std::invalid_argument("overlap_patch_embed: patch size must be even and >= 4, got " +
                                std::to_string(patch_size));
  if (num_blocks < 1) throw std::invalid_argument("local path needs at least one block");
  const Index c = config.input_dim;
  overlap_embed.options = {patch_size / 2, (patch_size + 3) / 4, 1};
  overlap_embed.weight = b.truncated_normal("local.overlap_embed.weight", {c, 3, patch_size, patch_size}, 0.02);
  overlap_embed.bias = b.constant("local.overlap_embed.bias", {c}, S(0));
  for (Index i = 0; i < num_blocks; ++i) {
    blocks.emplace_back(b, "local.blocks." + std::to_string(i), config);
    if (i > 0) fusions.emplace_back(b, "local.fusions." + std::to_string(i - 1), c, global_dim);
  }
  if (config.boundary_head) boundary_head = Conv2d<S>(b, "local.boundary_head", c, 1, 1);
}

template <typename S>
Tensor<S> LocalPath<S>::embed(const Tensor<S>& image) const {
  if (image.rank() != 4 || image.dim(2) % patch_size_ != 0 || image.dim(3) % patch_size_ != 0)
    shape_error("overlap_patch_embed", "image extents must be multiples of patch size " + std::to_string(patch_size_),
                image.shape());
  return overlap_embed(image);
}

template <typename S>
LocalPathState<S> LocalPath<S>::operator()(const Tensor<S>& image, const std::vector<Tensor<S>>& taps,
                                           bool training) const {
  if (static_cast<Index>(taps.size()) != static_cast<Index>(blocks.size()))
    throw std::invalid_argument("local_path_forward: expected " + std::to_string(blocks.size()) + " taps, got " +
                                std::to_string(taps.size()));
  LocalPathState<S> state;
  Tensor<S> x = embed(image);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i > 0) x = fusions[i - 1](x, taps[i - 1], training);
    x = blocks[i](x, training);
    state.blocks.push_back(x);
  }
  state.final = x;
  if (boundary_head.weight.defined()) state.boundary_logits = boundary_head(x);
  return state;
}

#define RSSEG_INSTANTIATE_LOCAL(S)                                  \
  template Tensor<S> high_pass_kernel(const Tensor<S>&);            \
  template struct LocalSeparationBlock<S>;                          \
  template struct AttentionFusion<S>;                               \
  template class LocalPath<S>;

RSSEG_INSTANTIATE_LOCAL(float)
RSSEG_INSTANTIATE_LOCAL(double)

#undef RSSEG_INSTANTIATE_LOCAL

}  // namespace rsseg
