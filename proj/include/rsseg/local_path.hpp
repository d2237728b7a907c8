// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "rsseg/config.hpp"
#include "rsseg/nn.hpp"

namespace rsseg {

/// Zero-sum depthwise kernel from raw logits [C,1,k,k]: softmax over the k*k
/// taps of each channel minus 1/(k*k).
template <typename Scalar>
Tensor<Scalar> high_pass_kernel(const Tensor<Scalar>& raw);

/// Inverted residual block: x + P(GELU(BN(DW(E(x))))) with 1x1 expand E,
/// depthwise k x k operator DW at the expanded width and 1x1 project P.
template <typename Scalar>
struct LocalSeparationBlock {
  Conv2d<Scalar> expand, project;
  Tensor<Scalar> depthwise;  // raw logits (high-pass) or plain kernel, [C*e,1,k,k]
  BatchNorm2d<Scalar> norm;
  LocalOperator op = LocalOperator::kHighPass;

  LocalSeparationBlock() = default;
  LocalSeparationBlock(Builder<Scalar> b, const std::string& name, const LocalPathConfig& config);

  Tensor<Scalar> kernel() const;
  Tensor<Scalar> operator()(const Tensor<Scalar>& x, bool training) const;
};

/// Gated fusion of a local map Xl [B,C,H',W'] with a backbone tap Xg
/// [B,Cg,h,w]: Xg goes through a 1x1 adapter when Cg != C, the gate is
/// Sigmoid(BN(Conv1x1(ReLU(BN([GAP(Xl), GAP(Xg)]))))) and the result is
/// gate * Xl + bilinear(Xg) at H' x W'.
template <typename Scalar>
struct AttentionFusion {
  Conv2d<Scalar> adapter;  // undefined weight when widths already match
  BatchNorm2d<Scalar> pool_norm;
  Conv2d<Scalar> gate_conv;
  BatchNorm2d<Scalar> gate_norm;

  AttentionFusion() = default;
  AttentionFusion(Builder<Scalar> b, const std::string& name, Index local_dim, Index global_dim);

  Tensor<Scalar> gate(const Tensor<Scalar>& xl, const Tensor<Scalar>& xg, bool training) const;
  Tensor<Scalar> operator()(const Tensor<Scalar>& xl, const Tensor<Scalar>& xg, bool training) const;

 private:
  Tensor<Scalar> adapt(const Tensor<Scalar>& xg) const;
};

template <typename Scalar>
struct LocalPathState {
  std::vector<Tensor<Scalar>> blocks;  // every LSB output, [B,Cl,2h,2w]
  Tensor<Scalar> final;
  Tensor<Scalar> boundary_logits;  // [B,1,2h,2w] when the boundary head is on
};

/// Overlapping patch embedding followed by cascaded LSBs; block i > 0 consumes
/// the fusion of block i-1's output with backbone tap i-1.
template <typename Scalar>
class LocalPath {
 public:
  LocalPath() = default;
  LocalPath(Builder<Scalar> b, const LocalPathConfig& config, Index patch_size, Index global_dim, Index num_blocks);

  /// image [B,3,H,W] -> [B,Cl,2H/p,2W/p].
  Tensor<Scalar> embed(const Tensor<Scalar>& image) const;
  /// taps are maps [B,Cg,H/p,W/p]; only the first num_blocks-1 are fused.
  LocalPathState<Scalar> operator()(const Tensor<Scalar>& image, const std::vector<Tensor<Scalar>>& taps,
                                    bool training) const;

  Conv2d<Scalar> overlap_embed;
  std::vector<LocalSeparationBlock<Scalar>> blocks;
  std::vector<AttentionFusion<Scalar>> fusions;
  Conv2d<Scalar> boundary_head;

 private:
  LocalPathConfig config_;
  Index patch_size_ = 0;
};

}  // namespace rsseg
