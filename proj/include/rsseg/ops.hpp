// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "rsseg/tensor.hpp"

// Differentiable tensor operations. Every function records a backward rule on
// the active tape when at least one input requires a gradient.
namespace rsseg {

// Elementwise arithmetic with right-aligned (NumPy) broadcasting.
template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> broadcast_to(const Tensor<Scalar>& x, const Shape& shape);

template <typename Scalar> Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);
template <typename Scalar> Tensor<Scalar> exp(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> relu(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename Scalar> Tensor<Scalar> gelu(const Tensor<Scalar>& x);

template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& x);

// Layout.
template <typename Scalar> Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);
template <typename Scalar> Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<Index>& perm);
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis);
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, Index axis, Index start, Index length);
/// Mirrors the last axis.
template <typename Scalar> Tensor<Scalar> flip_last(const Tensor<Scalar>& x);

/// Batched matrix product over the last two axes. `b` is either 2-D (shared
/// across the batch) or carries the same leading axes as `a`.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b = false);

/// y = x W^T + bias over the last axis; W is [out, in].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias = {});

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

/// Zero-padded 2-D convolution, [B,Cin,H,W] x [Cout,Cin/groups,kh,kw].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias = {}, Conv2dOptions options = {});

/// Numerically stable softmax along `axis` (max-subtracted).
template <typename Scalar> Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis);
template <typename Scalar> Tensor<Scalar> log_softmax(const Tensor<Scalar>& x, Index axis);

/// Softmax over the last axis restricted to entries with mask != 0. Masked
/// entries come out exactly 0; a fully masked row is all zeros.
template <typename Scalar>
Tensor<Scalar> masked_softmax(const Tensor<Scalar>& x, std::span<const std::uint8_t> mask);

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps);

/// Per-channel normalization of [B,C,H,W]. In training mode batch statistics
/// are used and the running buffers are updated in place as
/// running = momentum * running + (1 - momentum) * batch.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Tensor<Scalar>& running_mean,
                          Tensor<Scalar>& running_var, bool training, Scalar momentum,
                          Scalar eps);

/// Bilinear resampling of [B,C,H,W] with half-pixel centers and edge clamping.
template <typename Scalar>
Tensor<Scalar> bilinear_resize(const Tensor<Scalar>& x, Index out_h, Index out_w);

/// [B, C*r*r, H, W] -> [B, C, r*H, r*W]; channel c*r*r + i*r + j lands at (r*h + i, r*w + j).
template <typename Scalar> Tensor<Scalar> pixel_shuffle(const Tensor<Scalar>& x, Index r);
template <typename Scalar> Tensor<Scalar> pixel_unshuffle(const Tensor<Scalar>& x, Index r);

/// [B,C,H,W] -> [B,C,1,1].
template <typename Scalar> Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);

/// Unit L2 norm along `axis`; zero slices stay zero.
template <typename Scalar> Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x, Index axis);

/// Mean negative log-likelihood of softmax(logits) along `axis`.
/// `targets` holds one class per non-class position (row-major over the
/// remaining axes), with -1 marking positions to ignore. An optional `mask`
/// with one entry per logit removes classes from the softmax. Returns 0 when
/// nothing is valid.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, Index axis,
                             std::span<const std::int32_t> targets,
                             std::span<const std::uint8_t> mask = {});

/// Mean weighted binary cross-entropy on logits; targets are 0, 1 or -1 (ignored).
template <typename Scalar>
Tensor<Scalar> binary_cross_entropy_with_logits(const Tensor<Scalar>& logits,
                                                std::span<const std::int8_t> targets,
                                                Scalar positive_weight);

/// Guided upsampling core. features [B,C,H,W], filters [B,G,r*r,k,k,H,W].
/// Every filter f of group g is applied to the zero-padded k x k neighbourhood
/// of each channel in that group; the r*r results are pixel-shuffled into an
/// r x r block, giving [B,C,r*H,r*W].
template <typename Scalar>
Tensor<Scalar> adaptive_filter_upsample(const Tensor<Scalar>& features,
                                        const Tensor<Scalar>& filters);

}  // namespace rsseg
