// SPDX-License-Identifier: Apache-2.0
#include "rsseg/nn.hpp"

#include <cmath>

namespace rsseg {

template <typename S>
Tensor<S> ParameterStore<S>::add(std::string name, Tensor<S> tensor, ParamGroup group, bool decay) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  entries_.push_back({std::move(name), tensor, group, true, decay});
  return tensor;
}

template <typename S>
Tensor<S> ParameterStore<S>::add_buffer(std::string name, Tensor<S> tensor) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  entries_.push_back({std::move(name), tensor, ParamGroup::kBackbone, false, false});
  return tensor;
}

template <typename S>
const ParamEntry<S>* ParameterStore<S>::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename S>
Index ParameterStore<S>::parameter_count() const {
  Index n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.size();
  return n;
}

template <typename S>
void ParameterStore<S>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename S>
Tensor<S> Builder<S>::truncated_normal(const std::string& name, Shape shape, double stddev, bool decay) {
  Tensor<S> t(std::move(shape));
  for (S& v : t.mutable_data()) v = static_cast<S>(rng.truncated_normal(stddev));
  return store.add(name, t, group, decay);
}

template <typename S>
Tensor<S> Builder<S>::constant(const std::string& name, Shape shape, S value, bool decay) {
  return store.add(name, Tensor<S>::full(std::move(shape), value), group, decay);
}

template <typename S>
Linear<S>::Linear(Builder<S> b, const std::string& name, Index in, Index out, bool with_bias) {
  weight = b.truncated_normal(name + ".weight", {out, in}, 0.02);
  if (with_bias) bias = b.constant(name + ".bias", {out}, S(0));
}

template <typename S>
Conv2d<S>::Conv2d(Builder<S> b, const std::string& name, Index in, Index out, Index kernel,
                  Conv2dOptions opt, bool with_bias)
    : options(opt) {
  const Index fan_in = (in / opt.groups) * kernel * kernel;
  weight = b.truncated_normal(name + ".weight", {out, in / opt.groups, kernel, kernel},
                              std::sqrt(2.0 / static_cast<double>(fan_in)));
  if (with_bias) bias = b.constant(name + ".bias", {out}, S(0));
}

template <typename S>
LayerNorm<S>::LayerNorm(Builder<S> b, const std::string& name, Index channels) {
  gamma = b.constant(name + ".gamma", {channels}, S(1));
  beta = b.constant(name + ".beta", {channels}, S(0));
}

template <typename S>
BatchNorm2d<S>::BatchNorm2d(Builder<S> b, const std::string& name, Index channels) {
  gamma = b.constant(name + ".gamma", {channels}, S(1));
  beta = b.constant(name + ".beta", {channels}, S(0));
  running_mean = b.store.add_buffer(name + ".running_mean", Tensor<S>::zeros({channels}));
  running_var = b.store.add_buffer(name + ".running_var", Tensor<S>::full({channels}, S(1)));
}

template <typename S>
Mlp<S>::Mlp(Builder<S> b, const std::string& name, Index dim, Index hidden)
    : fc1(b, name + ".fc1", dim, hidden), fc2(b, name + ".fc2", hidden, dim) {}

template <typename S>
MultiHeadAttention<S>::MultiHeadAttention(Builder<S> b, const std::string& name, Index dim, Index h)
    : q(b, name + ".q", dim, dim),
      k(b, name + ".k", dim, dim),
      v(b, name + ".v", dim, dim),
      proj(b, name + ".proj", dim, dim),
      heads(h) {
  if (h < 1 || dim % h != 0)
    throw std::invalid_argument(name + ": embed dim " + std::to_string(dim) + " not divisible by heads " +
                                std::to_string(h));
}

template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, Index heads) {
  if (x.rank() != 3 || x.dim(2) % heads != 0) shape_error("split_heads", "expected [B,N,C] with C % heads == 0", x.shape());
  return permute(reshape(x, {x.dim(0), x.dim(1), heads, x.dim(2) / heads}), {0, 2, 1, 3});
}

template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x) {
  if (x.rank() != 4) shape_error("merge_heads", "expected [B,heads,N,d]", x.shape());
  return reshape(permute(x, {0, 2, 1, 3}), {x.dim(0), x.dim(2), x.dim(1) * x.dim(3)});
}

template <typename S>
Tensor<S> MultiHeadAttention<S>::operator()(const Tensor<S>& x, Tensor<S>* weights) const {
  if (x.rank() != 3) shape_error("msa", "input must be [B,N,C]", x.shape());
  const Index d = x.dim(2) / heads;
  const Tensor<S> qh = split_heads(q(x), heads);
  const Tensor<S> kh = split_heads(k(x), heads);
  const Tensor<S> vh = split_heads(v(x), heads);
  const Tensor<S> logits = scale(matmul(qh, kh, true), S(1) / std::sqrt(static_cast<S>(d)));
  const Tensor<S> attn = softmax(logits, -1);
  if (weights) *weights = attn;
  return proj(merge_heads(matmul(attn, vh)));
}

template <typename S>
Tensor<S> to_tokens(const Tensor<S>& x) {
  if (x.rank() != 4) shape_error("to_tokens", "expected [B,C,H,W]", x.shape());
  return permute(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), {0, 2, 1});
}

template <typename S>
Tensor<S> to_map(const Tensor<S>& x, Index h, Index w) {
  if (x.rank() != 3 || x.dim(1) != h * w) shape_error("to_map", "expected [B,H*W,C]", x.shape());
  return reshape(permute(x, {0, 2, 1}), {x.dim(0), x.dim(2), h, w});
}

#define RSSEG_INSTANTIATE_NN(S)                                      \
  template class ParameterStore<S>;                                  \
  template struct Builder<S>;                                        \
  template struct Linear<S>;                                         \
  template struct Conv2d<S>;                                         \
  template struct LayerNorm<S>;                                      \
  template struct BatchNorm2d<S>;                                    \
  template struct Mlp<S>;                                            \
  template struct MultiHeadAttention<S>;                             \
  template Tensor<S> split_heads(const Tensor<S>&, Index);           \
  template Tensor<S> merge_heads(const Tensor<S>&);                  \
  template Tensor<S> to_tokens(const Tensor<S>&);                    \
  template Tensor<S> to_map(const Tensor<S>&, Index, Index);

RSSEG_INSTANTIATE_NN(float)
RSSEG_INSTANTIATE_NN(double)

#undef RSSEG_INSTANTIATE_NN

}  // namespace rsseg
