// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "rsseg/config.hpp"
#include "rsseg/nn.hpp"

namespace rsseg {

/// One linear map per site (1x1 conv) from guidance [B,Cl,H,W] to
/// groups*r*r*k*k logits, softmaxed over the k*k taps of every filter.
/// Returns [B,groups,r*r,k,k,H,W].
template <typename Scalar>
Tensor<Scalar> build_spatial_filters(const Tensor<Scalar>& guidance, const Conv2d<Scalar>& generator,
                                     const SasmConfig& config);

/// Applies the per-site filters to features [B,C,H,W] (one filter shared by
/// the channels of a group, zero padding) and pixel-shuffles the r*r results:
/// [B,C,rH,rW].
template <typename Scalar>
Tensor<Scalar> sasm_apply(const Tensor<Scalar>& features, const Tensor<Scalar>& filters, const SasmConfig& config);

template <typename Scalar>
struct SasmOutputs {
  std::vector<Tensor<Scalar>> stages;  // stage s at (2^(s+1)) x the backbone grid
  std::vector<Tensor<Scalar>> filters;
  const Tensor<Scalar>& final() const { return stages.back(); }
};

/// Chained guided 2x upsamplings of the final backbone map. Stage 1 is guided
/// by a learned 2x2 stride-2 downsampling of the last LSB output, stage 2 by
/// the penultimate LSB output (the last one when only one block exists).
template <typename Scalar>
class SasmStack {
 public:
  SasmStack() = default;
  SasmStack(Builder<Scalar> b, const SasmConfig& config, Index local_dim);

  Tensor<Scalar> downsample_guidance(const Tensor<Scalar>& local) const;
  SasmOutputs<Scalar> operator()(const Tensor<Scalar>& global, const std::vector<Tensor<Scalar>>& local_blocks) const;

  const SasmConfig& config() const { return config_; }

  Conv2d<Scalar> downsample;
  std::vector<Conv2d<Scalar>> generators;

 private:
  SasmConfig config_;
};

}  // namespace rsseg
