// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "rsseg/ops.hpp"
#include "rsseg/random.hpp"
#include "rsseg/tensor.hpp"

namespace rsseg {

/// Learning-rate group a parameter belongs to.
enum class ParamGroup {
  kBackbone,  // base learning rate
  kHead,      // newly added modules; receive the head multiplier
  kDecoder,   // transformer decoder and learnable queries; base learning rate
};

template <typename Scalar>
struct ParamEntry {
  std::string name;
  Tensor<Scalar> tensor;
  ParamGroup group = ParamGroup::kBackbone;
  bool trainable = true;  // false for running statistics
  bool decay = true;      // decoupled weight decay applies
};

/// Ordered registry of every named tensor in a model. Modules keep handles to
/// the same nodes, so loading into the store updates the modules in place.
template <typename Scalar>
class ParameterStore {
 public:
  Tensor<Scalar> add(std::string name, Tensor<Scalar> tensor, ParamGroup group, bool decay);
  Tensor<Scalar> add_buffer(std::string name, Tensor<Scalar> tensor);

  std::vector<ParamEntry<Scalar>>& entries() { return entries_; }
  const std::vector<ParamEntry<Scalar>>& entries() const { return entries_; }
  const ParamEntry<Scalar>* find(const std::string& name) const;

  /// Number of trainable scalars.
  Index parameter_count() const;
  void zero_grad();

 private:
  std::vector<ParamEntry<Scalar>> entries_;
};

/// Context threaded through module constructors: where to register and how to
/// draw initial values.
template <typename Scalar>
struct Builder {
  ParameterStore<Scalar>& store;
  SplitMix64& rng;
  ParamGroup group;

  Builder with_group(ParamGroup g) const { return {store, rng, g}; }

  Tensor<Scalar> truncated_normal(const std::string& name, Shape shape, double stddev, bool decay = true);
  Tensor<Scalar> constant(const std::string& name, Shape shape, Scalar value, bool decay = false);
};

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight, bias;

  Linear() = default;
  /// Truncated-normal(0.02) weights, zero bias.
  Linear(Builder<Scalar> b, const std::string& name, Index in, Index out, bool with_bias = true);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return linear(x, weight, bias); }
};

template <typename Scalar>
struct Conv2d {
  Tensor<Scalar> weight, bias;
  Conv2dOptions options;

  Conv2d() = default;
  /// He-normal (fan-in) weights, zero bias.
  Conv2d(Builder<Scalar> b, const std::string& name, Index in, Index out, Index kernel,
         Conv2dOptions options = {}, bool with_bias = true);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv2d(x, weight, bias, options); }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gamma, beta;
  Scalar eps = Scalar(1e-6);

  LayerNorm() = default;
  LayerNorm(Builder<Scalar> b, const std::string& name, Index channels);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layer_norm(x, gamma, beta, eps); }
};

/// Batch normalization with momentum 0.9 and eps 1e-5.
template <typename Scalar>
struct BatchNorm2d {
  Tensor<Scalar> gamma, beta;
  mutable Tensor<Scalar> running_mean, running_var;
  Scalar momentum = Scalar(0.9);
  Scalar eps = Scalar(1e-5);

  BatchNorm2d() = default;
  BatchNorm2d(Builder<Scalar> b, const std::string& name, Index channels);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) const {
    return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }
};

/// Linear -> GELU -> Linear.
template <typename Scalar>
struct Mlp {
  Linear<Scalar> fc1, fc2;

  Mlp() = default;
  Mlp(Builder<Scalar> b, const std::string& name, Index dim, Index hidden);
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return fc2(gelu(fc1(x))); }
};

/// Multi-head scaled dot-product self-attention.
template <typename Scalar>
struct MultiHeadAttention {
  Linear<Scalar> q, k, v, proj;
  Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(Builder<Scalar> b, const std::string& name, Index dim, Index heads);

  /// x [B,N,C] -> [B,N,C]. When `weights` is given it receives the attention
  /// matrices [B,heads,N,N].
  Tensor<Scalar> operator()(const Tensor<Scalar>& x, Tensor<Scalar>* weights = nullptr) const;
};

/// [B,N,C] -> [B,heads,N,C/heads].
template <typename Scalar>
Tensor<Scalar> split_heads(const Tensor<Scalar>& x, Index heads);
/// [B,heads,N,d] -> [B,N,heads*d].
template <typename Scalar>
Tensor<Scalar> merge_heads(const Tensor<Scalar>& x);

/// [B,C,H,W] -> [B,H*W,C].
template <typename Scalar>
Tensor<Scalar> to_tokens(const Tensor<Scalar>& x);
/// [B,H*W,C] -> [B,C,H,W].
template <typename Scalar>
Tensor<Scalar> to_map(const Tensor<Scalar>& x, Index h, Index w);

}  // namespace rsseg
