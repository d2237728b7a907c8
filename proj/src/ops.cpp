// SPDX-License-Identifier: Apache-2.0
#include "rsseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace rsseg {
namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ConstMap = Eigen::Map<const Mat<S>>;
template <typename S>
using MutMap = Eigen::Map<Mat<S>>;

template <typename S>
using NodePtr = typename Tensor<S>::NodePtr;

// Registers `body(grad_out)` to run during backward when the output has a
// gradient. The closure keeps input nodes alive until the tape is cleared.
template <typename S, typename Body>
void attach(Tape<S>* tape, const Tensor<S>& out, Body body) {
  if (!tape) return;
  out.node()->requires_grad = true;
  tape->record([on = out.node(), body = std::move(body)]() mutable {
    if (on->grad.empty()) return;
    body(static_cast<const std::vector<S>&>(on->grad));
  });
}

Index normalize_axis(const std::string& op, Index axis, Index rank, const Shape& shape) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_error(op, "axis out of range", shape);
  return axis;
}

// [outer, extent, inner] view of a shape around one axis.
struct AxisView {
  Index outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, Index axis) {
  AxisView v;
  for (Index i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) v.inner *= shape[i];
  return v;
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, "shapes do not broadcast", a, b);
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `in` when indexed by `out` coordinates (0 on broadcast axes).
std::vector<Index> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa,
                        const std::vector<Index>& sb, F&& f) {
  const Index n = numel(out);
  if (n == 0) return;
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(Index(0), Index(0), Index(0));
    return;
  }
  std::vector<Index> counter(rank, 0);
  const Index last = out[rank - 1];
  const Index la = sa[rank - 1], lb = sb[rank - 1];
  Index ia = 0, ib = 0;
  for (Index i = 0; i < n; i += last) {
    for (Index j = 0; j < last; ++j) f(i + j, ia + j * la, ib + j * lb);
    // advance all but the last axis
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      counter[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename S>
Tensor<S> binary(const char* op, BinaryKind kind, const Tensor<S>& a, const Tensor<S>& b) {
  const Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  Tensor<S> out(out_shape);
  S* po = out.mutable_data().data();
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  const bool same = a.shape() == b.shape();
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  if (same) {
    const Index n = out.size();
    switch (kind) {
      case BinaryKind::kAdd: for (Index i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinaryKind::kSub: for (Index i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinaryKind::kMul: for (Index i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
    }
  } else {
    for_each_broadcast(out_shape, sa, sb, [&](Index i, Index ia, Index ib) {
      switch (kind) {
        case BinaryKind::kAdd: po[i] = pa[ia] + pb[ib]; break;
        case BinaryKind::kSub: po[i] = pa[ia] - pb[ib]; break;
        case BinaryKind::kMul: po[i] = pa[ia] * pb[ib]; break;
      }
    });
  }
  attach(detail::recording_tape<S>({&a, &b}), out,
         [an = a.node(), bn = b.node(), out_shape, sa, sb, same, kind](const std::vector<S>& g) {
           const bool ga_on = an->requires_grad, gb_on = bn->requires_grad;
           S* ga = ga_on ? an->grad_buffer() : nullptr;
           S* gb = gb_on ? bn->grad_buffer() : nullptr;
           const S* va = an->data.data();
           const S* vb = bn->data.data();
           auto step = [&](Index i, Index ia, Index ib) {
             switch (kind) {
               case BinaryKind::kAdd:
                 if (ga) ga[ia] += g[i];
                 if (gb) gb[ib] += g[i];
                 break;
               case BinaryKind::kSub:
                 if (ga) ga[ia] += g[i];
                 if (gb) gb[ib] -= g[i];
                 break;
               case BinaryKind::kMul:
                 if (ga) ga[ia] += g[i] * vb[ib];
                 if (gb) gb[ib] += g[i] * va[ia];
                 break;
             }
           };
           if (same) {
             const Index n = static_cast<Index>(g.size());
             for (Index i = 0; i < n; ++i) step(i, i, i);
           } else {
             for_each_broadcast(out_shape, sa, sb, step);
           }
         });
  return out;
}

// Elementwise unary op; `df(x, y)` returns dy/dx.
template <typename S, typename F, typename DF>
Tensor<S> unary(const Tensor<S>& x, F f, DF df) {
  Tensor<S> out(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  const Index n = x.size();
  for (Index i = 0; i < n; ++i) po[i] = f(px[i]);
  attach(detail::recording_tape<S>({&x}), out,
         [xn = x.node(), on = out.node(), df](const std::vector<S>& g) {
           if (!xn->requires_grad) return;
           S* gx = xn->grad_buffer();
           const Index n = static_cast<Index>(g.size());
           for (Index i = 0; i < n; ++i) gx[i] += g[i] * df(xn->data[i], on->data[i]);
         });
  return out;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary("add", BinaryKind::kAdd, a, b);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary("sub", BinaryKind::kSub, a, b);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary("mul", BinaryKind::kMul, a, b);
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& x, const Shape& shape) {
  if (broadcast_shape("broadcast_to", x.shape(), shape) != shape)
    shape_error("broadcast_to", "cannot broadcast", x.shape(), shape);
  Tensor<S> out(shape);
  const auto sx = broadcast_strides(x.shape(), shape);
  const std::vector<Index> none(shape.size(), 0);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for_each_broadcast(shape, sx, none, [&](Index i, Index ix, Index) { po[i] = px[ix]; });
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), shape, sx, none](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    for_each_broadcast(shape, sx, none, [&](Index i, Index ix, Index) { gx[ix] += g[i]; });
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return unary(x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return unary(x, [](S v) { return v > S(0) ? v : S(0); },
               [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary(
      x,
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr S kAlpha = S(0.7978845608028654);  // sqrt(2/pi)
  constexpr S kBeta = S(0.044715);
  return unary(
      x,
      [](S v) { return S(0.5) * v * (S(1) + std::tanh(kAlpha * (v + kBeta * v * v * v))); },
      [](S v, S) {
        const S inner = kAlpha * (v + kBeta * v * v * v);
        const S t = std::tanh(inner);
        const S dinner = kAlpha * (S(1) + S(3) * kBeta * v * v);
        return S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * dinner;
      });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.data()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node()](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[0];
  });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  if (x.size() == 0) shape_error("mean", "empty tensor", x.shape());
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  Index infer = -1, known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) shape_error("reshape", "more than one inferred extent", shape);
      infer = static_cast<Index>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.size() / known;
  if (numel(shape) != x.size()) shape_error("reshape", "element count differs", x.shape(), shape);
  Tensor<S> out(shape, std::vector<S>(x.data().begin(), x.data().end()));
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node()](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<Index>& perm) {
  const Index rank = x.rank();
  if (static_cast<Index>(perm.size()) != rank) shape_error("permute", "permutation rank mismatch", x.shape());
  std::vector<bool> seen(rank, false);
  for (Index p : perm) {
    if (p < 0 || p >= rank || seen[p]) shape_error("permute", "invalid permutation", x.shape());
    seen[p] = true;
  }
  std::vector<Index> in_strides(rank, 1);
  for (Index i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
  Shape out_shape(rank);
  std::vector<Index> gather(rank);
  for (Index i = 0; i < rank; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    gather[i] = in_strides[perm[i]];
  }
  const std::vector<Index> none(rank, 0);
  // Map out index -> in index once; reused by backward.
  std::vector<Index> source(static_cast<std::size_t>(x.size()));
  if (rank == 0) {
    source.assign(1, 0);
  } else {
    for_each_broadcast(out_shape, gather, none, [&](Index i, Index ix, Index) { source[i] = ix; });
  }
  Tensor<S> out(out_shape);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (std::size_t i = 0; i < source.size(); ++i) po[i] = px[source[i]];
  attach(detail::recording_tape<S>({&x}), out,
         [xn = x.node(), source = std::move(source)](const std::vector<S>& g) {
           S* gx = xn->grad_buffer();
           for (std::size_t i = 0; i < source.size(); ++i) gx[source[i]] += g[i];
         });
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts.front().shape();
  axis = normalize_axis("concat", axis, static_cast<Index>(first.size()), first);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(first.size())) shape_error("concat", "rank mismatch", first, p.shape());
    for (Index d = 0; d < p.rank(); ++d)
      if (d != axis && p.shape()[d] != first[d]) shape_error("concat", "extent mismatch off the concat axis", first, p.shape());
    out_shape[axis] += p.shape()[axis];
  }
  const AxisView ov = axis_view(out_shape, axis);
  Tensor<S> out(out_shape);
  S* po = out.mutable_data().data();
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const Index ext = p.shape()[axis];
    const S* pp = p.data().data();
    for (Index o = 0; o < ov.outer; ++o)
      std::copy_n(pp + o * ext * ov.inner, ext * ov.inner, po + (o * ov.extent + offset) * ov.inner);
    offset += ext;
  }
  std::vector<const Tensor<S>*> ptrs;
  Tape<S>* tape = nullptr;
  for (const auto& p : parts)
    if (auto* t = detail::recording_tape<S>({&p})) tape = t;
  std::vector<NodePtr<S>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  attach(tape, out, [nodes, offsets, ov, axis](const std::vector<S>& g) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      const Index ext = nodes[k]->shape[axis];
      S* gp = nodes[k]->grad_buffer();
      for (Index o = 0; o < ov.outer; ++o) {
        const S* src = g.data() + (o * ov.extent + offsets[k]) * ov.inner;
        S* dst = gp + o * ext * ov.inner;
        for (Index i = 0; i < ext * ov.inner; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, Index axis, Index start, Index length) {
  axis = normalize_axis("slice", axis, x.rank(), x.shape());
  if (start < 0 || length < 0 || start + length > x.shape()[axis])
    shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") outside axis " + std::to_string(axis), x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<S> out(out_shape);
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index o = 0; o < v.outer; ++o)
    std::copy_n(px + (o * v.extent + start) * v.inner, length * v.inner, po + o * length * v.inner);
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), v, start, length](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    for (Index o = 0; o < v.outer; ++o) {
      S* dst = gx + (o * v.extent + start) * v.inner;
      const S* src = g.data() + o * length * v.inner;
      for (Index i = 0; i < length * v.inner; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename S>
Tensor<S> flip_last(const Tensor<S>& x) {
  if (x.rank() == 0) return x;
  const Index w = x.shape().back();
  const Index rows = w == 0 ? 0 : x.size() / w;
  Tensor<S> out(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < w; ++j) po[r * w + j] = px[r * w + (w - 1 - j)];
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), rows, w](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < w; ++j) gx[r * w + (w - 1 - j)] += g[r * w + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) shape_error("matmul", "operands need rank >= 2", a.shape(), b.shape());
  const Index m = a.dim(-2), k = a.dim(-1);
  const Index bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const Index n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) shape_error("matmul", "inner dimensions differ", a.shape(), b.shape());
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      shape_error("matmul", "batch dimensions differ", a.shape(), b.shape());
  }
  const Index batch = a.size() / std::max<Index>(m * k, 1);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<S> out(out_shape);
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  const Index b_rows = transpose_b ? n : k, b_cols = transpose_b ? k : n;
  for (Index i = 0; i < batch; ++i) {
    ConstMap<S> A(pa + i * m * k, m, k);
    ConstMap<S> B(pb + (shared_b ? 0 : i * k * n), b_rows, b_cols);
    MutMap<S> C(po + i * m * n, m, n);
    if (transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A * B;
  }
  attach(detail::recording_tape<S>({&a, &b}), out,
         [an = a.node(), bn = b.node(), m, k, n, batch, shared_b, transpose_b, b_rows, b_cols](const std::vector<S>& g) {
           S* ga = an->requires_grad ? an->grad_buffer() : nullptr;
           S* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
           for (Index i = 0; i < batch; ++i) {
             ConstMap<S> G(g.data() + i * m * n, m, n);
             ConstMap<S> A(an->data.data() + i * m * k, m, k);
             const Index boff = shared_b ? 0 : i * k * n;
             ConstMap<S> B(bn->data.data() + boff, b_rows, b_cols);
             if (ga) {
               MutMap<S> GA(ga + i * m * k, m, k);
               if (transpose_b) GA.noalias() += G * B;
               else GA.noalias() += G * B.transpose();
             }
             if (gb) {
               MutMap<S> GB(gb + boff, b_rows, b_cols);
               if (transpose_b) GB.noalias() += G.transpose() * A;
               else GB.noalias() += A.transpose() * G;
             }
           }
         });
  return out;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1))
    shape_error("linear", "input features do not match weight", x.shape(), weight.shape());
  const Index in = weight.dim(1), outf = weight.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != outf))
    shape_error("linear", "bias does not match weight", bias.shape(), weight.shape());
  const Index rows = x.size() / std::max<Index>(in, 1);
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  Tensor<S> out(out_shape);
  {
    ConstMap<S> X(x.data().data(), rows, in);
    ConstMap<S> W(weight.data().data(), outf, in);
    MutMap<S> Y(out.mutable_data().data(), rows, outf);
    Y.noalias() = X * W.transpose();
    if (has_bias) {
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> bvec(bias.data().data(), outf);
      Y.rowwise() += bvec;
    }
  }
  attach(detail::recording_tape<S>({&x, &weight, &bias}), out,
         [xn = x.node(), wn = weight.node(), bn = has_bias ? bias.node() : NodePtr<S>{}, rows, in,
          outf](const std::vector<S>& g) {
           ConstMap<S> G(g.data(), rows, outf);
           if (xn->requires_grad) {
             MutMap<S> GX(xn->grad_buffer(), rows, in);
             GX.noalias() += G * ConstMap<S>(wn->data.data(), outf, in);
           }
           if (wn->requires_grad) {
             MutMap<S> GW(wn->grad_buffer(), outf, in);
             GW.noalias() += G.transpose() * ConstMap<S>(xn->data.data(), rows, in);
           }
           if (bn && bn->requires_grad) {
             S* gb = bn->grad_buffer();
             for (Index r = 0; r < rows; ++r)
               for (Index o = 0; o < outf; ++o) gb[o] += g[static_cast<std::size_t>(r * outf + o)];
           }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  Index batch, cin, h, w, cout, kh, kw, hout, wout, stride, pad, groups, cin_g, cout_g;
};

// Valid output range [lo, hi) along one axis for kernel tap `k`.
inline void tap_range(Index k, Index stride, Index pad, Index in, Index out, Index& lo, Index& hi) {
  // need 0 <= o*stride - pad + k < in
  const Index num = pad - k;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  const Index top = in - 1 + pad - k;  // o*stride <= top
  hi = top < 0 ? 0 : std::min(out, top / stride + 1);
  if (lo > hi) lo = hi;
}

template <typename S>
void im2col(const S* x, const ConvGeometry& g, S* cols) {
  const Index hw = g.hout * g.wout;
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        S* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        std::fill(row, row + hw, S(0));
        Index oh0, oh1, ow0, ow1;
        tap_range(ki, g.stride, g.pad, g.h, g.hout, oh0, oh1);
        tap_range(kj, g.stride, g.pad, g.w, g.wout, ow0, ow1);
        const S* plane = x + c * g.h * g.w;
        for (Index oh = oh0; oh < oh1; ++oh) {
          const S* src = plane + (oh * g.stride - g.pad + ki) * g.w;
          S* dst = row + oh * g.wout;
          for (Index ow = ow0; ow < ow1; ++ow) dst[ow] = src[ow * g.stride - g.pad + kj];
        }
      }
}

template <typename S>
void col2im_add(const S* cols, const ConvGeometry& g, S* gx) {
  const Index hw = g.hout * g.wout;
  for (Index c = 0; c < g.cin_g; ++c)
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const S* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        Index oh0, oh1, ow0, ow1;
        tap_range(ki, g.stride, g.pad, g.h, g.hout, oh0, oh1);
        tap_range(kj, g.stride, g.pad, g.w, g.wout, ow0, ow1);
        S* plane = gx + c * g.h * g.w;
        for (Index oh = oh0; oh < oh1; ++oh) {
          S* dst = plane + (oh * g.stride - g.pad + ki) * g.w;
          const S* src = row + oh * g.wout;
          for (Index ow = ow0; ow < ow1; ++ow) dst[ow * g.stride - g.pad + kj] += src[ow];
        }
      }
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, const Tensor<S>& bias,
                 Conv2dOptions opt) {
  if (input.rank() != 4) shape_error("conv2d", "input must be [B,Cin,H,W]", input.shape());
  if (kernel.rank() != 4) shape_error("conv2d", "kernel must be [Cout,Cin/groups,kh,kw]", kernel.shape());
  if (opt.stride < 1) shape_error("conv2d", "stride must be >= 1");
  if (opt.padding < 0) shape_error("conv2d", "padding must be >= 0");
  if (opt.groups < 1) shape_error("conv2d", "groups must be >= 1");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.groups = opt.groups;
  if (g.cin % g.groups != 0)
    shape_error("conv2d", "input channels " + std::to_string(g.cin) + " not divisible by groups " +
                              std::to_string(g.groups), input.shape(), kernel.shape());
  if (g.cout % g.groups != 0)
    shape_error("conv2d", "output channels not divisible by groups", input.shape(), kernel.shape());
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (kernel.dim(1) != g.cin_g)
    shape_error("conv2d", "kernel input-channel dimension " + std::to_string(kernel.dim(1)) +
                              " != Cin/groups " + std::to_string(g.cin_g), input.shape(), kernel.shape());
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw)
    shape_error("conv2d", "kernel larger than padded input", input.shape(), kernel.shape());
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.cout))
    shape_error("conv2d", "bias must be [Cout]", bias.shape(), kernel.shape());
  g.hout = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wout = (g.w + 2 * g.pad - g.kw) / g.stride + 1;

  Tensor<S> out({g.batch, g.cout, g.hout, g.wout});
  const S* px = input.data().data();
  const S* pk = kernel.data().data();
  S* po = out.mutable_data().data();
  const Index hw_in = g.h * g.w, hw_out = g.hout * g.wout;
  const bool depthwise = g.cin_g == 1 && g.cout_g == 1;
  const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;

  for (Index b = 0; b < g.batch; ++b) {
    if (depthwise) {
      for (Index c = 0; c < g.cout; ++c) {
        S* oplane = po + (b * g.cout + c) * hw_out;
        const S* iplane = px + (b * g.cin + c) * hw_in;
        const S* kc = pk + c * g.kh * g.kw;
        std::fill(oplane, oplane + hw_out, has_bias ? bias.data()[c] : S(0));
        for (Index ki = 0; ki < g.kh; ++ki)
          for (Index kj = 0; kj < g.kw; ++kj) {
            const S wv = kc[ki * g.kw + kj];
            Index oh0, oh1, ow0, ow1;
            tap_range(ki, g.stride, g.pad, g.h, g.hout, oh0, oh1);
            tap_range(kj, g.stride, g.pad, g.w, g.wout, ow0, ow1);
            for (Index oh = oh0; oh < oh1; ++oh) {
              const S* src = iplane + (oh * g.stride - g.pad + ki) * g.w - g.pad + kj;
              S* dst = oplane + oh * g.wout;
              if (g.stride == 1) {
                for (Index ow = ow0; ow < ow1; ++ow) dst[ow] += wv * src[ow];
              } else {
                for (Index ow = ow0; ow < ow1; ++ow) dst[ow] += wv * src[ow * g.stride];
              }
            }
          }
      }
      continue;
    }
    std::vector<S> cols;
    if (!pointwise) cols.resize(static_cast<std::size_t>(g.cin_g * g.kh * g.kw * hw_out));
    for (Index gr = 0; gr < g.groups; ++gr) {
      const S* xg = px + (b * g.cin + gr * g.cin_g) * hw_in;
      const S* colp = xg;
      if (!pointwise) {
        im2col(xg, g, cols.data());
        colp = cols.data();
      }
      ConstMap<S> Wm(pk + gr * g.cout_g * g.cin_g * g.kh * g.kw, g.cout_g, g.cin_g * g.kh * g.kw);
      ConstMap<S> Cm(colp, g.cin_g * g.kh * g.kw, hw_out);
      MutMap<S> Om(po + (b * g.cout + gr * g.cout_g) * hw_out, g.cout_g, hw_out);
      Om.noalias() = Wm * Cm;
      if (has_bias)
        for (Index c = 0; c < g.cout_g; ++c) Om.row(c).array() += bias.data()[gr * g.cout_g + c];
    }
  }

  attach(detail::recording_tape<S>({&input, &kernel, &bias}), out,
         [xn = input.node(), kn = kernel.node(), bn = has_bias ? bias.node() : NodePtr<S>{}, g, depthwise,
          pointwise](const std::vector<S>& gout) {
           const Index hw_in = g.h * g.w, hw_out = g.hout * g.wout;
           const S* px = xn->data.data();
           const S* pk = kn->data.data();
           S* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
           S* gk = kn->requires_grad ? kn->grad_buffer() : nullptr;
           if (bn && bn->requires_grad) {
             S* gbias = bn->grad_buffer();
             for (Index b = 0; b < g.batch; ++b)
               for (Index c = 0; c < g.cout; ++c) {
                 const S* gp = gout.data() + (b * g.cout + c) * hw_out;
                 S acc = 0;
                 for (Index i = 0; i < hw_out; ++i) acc += gp[i];
                 gbias[c] += acc;
               }
           }
           std::vector<S> cols, gcols;
           if (!depthwise && !pointwise) {
             cols.resize(static_cast<std::size_t>(g.cin_g * g.kh * g.kw * hw_out));
             gcols.resize(cols.size());
           }
           for (Index b = 0; b < g.batch; ++b) {
             if (depthwise) {
               for (Index c = 0; c < g.cout; ++c) {
                 const S* gplane = gout.data() + (b * g.cout + c) * hw_out;
                 const S* iplane = px + (b * g.cin + c) * hw_in;
                 for (Index ki = 0; ki < g.kh; ++ki)
                   for (Index kj = 0; kj < g.kw; ++kj) {
                     const Index tap = c * g.kh * g.kw + ki * g.kw + kj;
                     const S wv = pk[tap];
                     Index oh0, oh1, ow0, ow1;
                     tap_range(ki, g.stride, g.pad, g.h, g.hout, oh0, oh1);
                     tap_range(kj, g.stride, g.pad, g.w, g.wout, ow0, ow1);
                     S acc = 0;
                     for (Index oh = oh0; oh < oh1; ++oh) {
                       const Index row = (oh * g.stride - g.pad + ki) * g.w - g.pad + kj;
                       const S* src = iplane + row;
                       const S* gr = gplane + oh * g.wout;
                       if (gx) {
                         S* dst = gx + (b * g.cin + c) * hw_in + row;
                         for (Index ow = ow0; ow < ow1; ++ow) dst[ow * g.stride] += wv * gr[ow];
                       }
                       for (Index ow = ow0; ow < ow1; ++ow) acc += gr[ow] * src[ow * g.stride];
                     }
                     if (gk) gk[tap] += acc;
                   }
               }
               continue;
             }
             for (Index gr = 0; gr < g.groups; ++gr) {
               const S* xg = px + (b * g.cin + gr * g.cin_g) * hw_in;
               const S* colp = xg;
               if (!pointwise) {
                 im2col(xg, g, cols.data());
                 colp = cols.data();
               }
               const Index krows = g.cin_g * g.kh * g.kw;
               ConstMap<S> G(gout.data() + (b * g.cout + gr * g.cout_g) * hw_out, g.cout_g, hw_out);
               ConstMap<S> Wm(pk + gr * g.cout_g * krows, g.cout_g, krows);
               if (gk) {
                 MutMap<S> GW(gk + gr * g.cout_g * krows, g.cout_g, krows);
                 GW.noalias() += G * ConstMap<S>(colp, krows, hw_out).transpose();
               }
               if (gx) {
                 S* gxg = gx + (b * g.cin + gr * g.cin_g) * hw_in;
                 if (pointwise) {
                   MutMap<S> GX(gxg, krows, hw_out);
                   GX.noalias() += Wm.transpose() * G;
                 } else {
                   MutMap<S> GC(gcols.data(), krows, hw_out);
                   GC.noalias() = Wm.transpose() * G;
                   col2im_add(gcols.data(), g, gxg);
                 }
               }
             }
           }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, Index axis) {
  axis = normalize_axis("softmax", axis, x.rank(), x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  if (v.extent == 0) shape_error("softmax", "empty softmax axis", x.shape());
  Tensor<S> out(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const Index base = o * v.extent * v.inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < v.extent; ++k) mx = std::max(mx, px[base + k * v.inner]);
      S total = 0;
      for (Index k = 0; k < v.extent; ++k) {
        const S e = std::exp(px[base + k * v.inner] - mx);
        po[base + k * v.inner] = e;
        total += e;
      }
      const S inv = S(1) / total;
      for (Index k = 0; k < v.extent; ++k) po[base + k * v.inner] *= inv;
    }
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), on = out.node(), v](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    const S* y = on->data.data();
    for (Index o = 0; o < v.outer; ++o)
      for (Index i = 0; i < v.inner; ++i) {
        const Index base = o * v.extent * v.inner + i;
        S dot = 0;
        for (Index k = 0; k < v.extent; ++k) dot += y[base + k * v.inner] * g[base + k * v.inner];
        for (Index k = 0; k < v.extent; ++k) {
          const Index idx = base + k * v.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
  return out;
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x, Index axis) {
  axis = normalize_axis("log_softmax", axis, x.rank(), x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  if (v.extent == 0) shape_error("log_softmax", "empty softmax axis", x.shape());
  Tensor<S> out(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const Index base = o * v.extent * v.inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < v.extent; ++k) mx = std::max(mx, px[base + k * v.inner]);
      S total = 0;
      for (Index k = 0; k < v.extent; ++k) total += std::exp(px[base + k * v.inner] - mx);
      const S lse = mx + std::log(total);
      for (Index k = 0; k < v.extent; ++k) po[base + k * v.inner] = px[base + k * v.inner] - lse;
    }
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), on = out.node(), v](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    const S* y = on->data.data();
    for (Index o = 0; o < v.outer; ++o)
      for (Index i = 0; i < v.inner; ++i) {
        const Index base = o * v.extent * v.inner + i;
        S total = 0;
        for (Index k = 0; k < v.extent; ++k) total += g[base + k * v.inner];
        for (Index k = 0; k < v.extent; ++k) {
          const Index idx = base + k * v.inner;
          gx[idx] += g[idx] - std::exp(y[idx]) * total;
        }
      }
  });
  return out;
}

template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& x, std::span<const std::uint8_t> mask) {
  if (x.rank() < 1) shape_error("masked_softmax", "need rank >= 1", x.shape());
  if (static_cast<Index>(mask.size()) != x.size())
    shape_error("masked_softmax", "mask length " + std::to_string(mask.size()) + " != element count", x.shape());
  const Index k = x.dim(-1);
  if (k == 0) shape_error("masked_softmax", "empty softmax axis", x.shape());
  const Index rows = x.size() / k;
  Tensor<S> out(x.shape());
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index r = 0; r < rows; ++r) {
    const S* xr = px + r * k;
    const std::uint8_t* mr = mask.data() + r * k;
    S* yr = po + r * k;
    S mx = -std::numeric_limits<S>::infinity();
    for (Index j = 0; j < k; ++j)
      if (mr[j]) mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<S>::infinity()) continue;  // fully masked row stays zero
    S total = 0;
    for (Index j = 0; j < k; ++j) {
      yr[j] = mr[j] ? std::exp(xr[j] - mx) : S(0);
      total += yr[j];
    }
    for (Index j = 0; j < k; ++j) yr[j] /= total;
  }
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), on = out.node(), rows, k](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    const S* y = on->data.data();
    for (Index r = 0; r < rows; ++r) {
      S dot = 0;
      for (Index j = 0; j < k; ++j) dot += y[r * k + j] * g[r * k + j];
      for (Index j = 0; j < k; ++j) gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
    }
  });
  return out;
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  if (x.rank() < 1) shape_error("layer_norm", "need rank >= 1", x.shape());
  const Index c = x.dim(-1);
  if (gamma.rank() != 1 || gamma.dim(0) != c) shape_error("layer_norm", "gamma must be [C]", x.shape(), gamma.shape());
  if (beta.rank() != 1 || beta.dim(0) != c) shape_error("layer_norm", "beta must be [C]", x.shape(), beta.shape());
  const Index rows = c == 0 ? 0 : x.size() / c;
  Tensor<S> out(x.shape());
  std::vector<S> xhat(static_cast<std::size_t>(x.size()));
  std::vector<S> rstd(static_cast<std::size_t>(rows));
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
  S* po = out.mutable_data().data();
  for (Index r = 0; r < rows; ++r) {
    const S* xr = px + r * c;
    S mu = 0;
    for (Index j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<S>(c);
    S var = 0;
    for (Index j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(c);
    const S rs = S(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (Index j = 0; j < c; ++j) {
      const S h = (xr[j] - mu) * rs;
      xhat[r * c + j] = h;
      po[r * c + j] = h * pg[j] + pb[j];
    }
  }
  attach(detail::recording_tape<S>({&x, &gamma, &beta}), out,
         [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat), rstd = std::move(rstd), rows,
          c](const std::vector<S>& g) {
           S* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
           S* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
           S* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
           const S* pg = gn->data.data();
           for (Index r = 0; r < rows; ++r) {
             const S* gr = g.data() + r * c;
             const S* hr = xhat.data() + r * c;
             if (gg)
               for (Index j = 0; j < c; ++j) gg[j] += gr[j] * hr[j];
             if (gb)
               for (Index j = 0; j < c; ++j) gb[j] += gr[j];
             if (gx) {
               S m1 = 0, m2 = 0;
               for (Index j = 0; j < c; ++j) {
                 const S d = gr[j] * pg[j];
                 m1 += d;
                 m2 += d * hr[j];
               }
               m1 /= static_cast<S>(c);
               m2 /= static_cast<S>(c);
               for (Index j = 0; j < c; ++j) gx[r * c + j] += rstd[r] * (gr[j] * pg[j] - m1 - hr[j] * m2);
             }
           }
         });
  return out;
}

template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, bool training, S momentum, S eps) {
  if (x.rank() != 4) shape_error("batch_norm", "input must be [B,C,H,W]", x.shape());
  const Index b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor<S>* t : std::initializer_list<const Tensor<S>*>{&gamma, &beta, &running_mean, &running_var})
    if (t->rank() != 1 || t->dim(0) != c) shape_error("batch_norm", "per-channel parameter must be [C]", x.shape(), t->shape());
  const Index n = b * hw;
  if (n == 0) shape_error("batch_norm", "empty input", x.shape());
  std::vector<S> mu(c), rstd(c);
  const S* px = x.data().data();
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (Index ch = 0; ch < c; ++ch) {
      S m = 0;
      for (Index i = 0; i < b; ++i) {
        const S* p = px + (i * c + ch) * hw;
        for (Index j = 0; j < hw; ++j) m += p[j];
      }
      m /= static_cast<S>(n);
      S var = 0;
      for (Index i = 0; i < b; ++i) {
        const S* p = px + (i * c + ch) * hw;
        for (Index j = 0; j < hw; ++j) var += (p[j] - m) * (p[j] - m);
      }
      var /= static_cast<S>(n);
      mu[ch] = m;
      rstd[ch] = S(1) / std::sqrt(var + eps);
      const S unbiased = n > 1 ? var * static_cast<S>(n) / static_cast<S>(n - 1) : var;
      rm[ch] = momentum * rm[ch] + (S(1) - momentum) * m;
      rv[ch] = momentum * rv[ch] + (S(1) - momentum) * unbiased;
    }
  } else {
    for (Index ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      rstd[ch] = S(1) / std::sqrt(running_var.data()[ch] + eps);
    }
  }
  Tensor<S> out(x.shape());
  std::vector<S> xhat(static_cast<std::size_t>(x.size()));
  S* po = out.mutable_data().data();
  for (Index i = 0; i < b; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * hw;
      const S ga = gamma.data()[ch], be = beta.data()[ch];
      for (Index j = 0; j < hw; ++j) {
        const S h = (px[off + j] - mu[ch]) * rstd[ch];
        xhat[off + j] = h;
        po[off + j] = h * ga + be;
      }
    }
  attach(detail::recording_tape<S>({&x, &gamma, &beta}), out,
         [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat), rstd = std::move(rstd), b, c, hw,
          n, training](const std::vector<S>& g) {
           S* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
           S* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
           S* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
           for (Index ch = 0; ch < c; ++ch) {
             S sum_g = 0, sum_gh = 0;
             for (Index i = 0; i < b; ++i) {
               const Index off = (i * c + ch) * hw;
               for (Index j = 0; j < hw; ++j) {
                 sum_g += g[off + j];
                 sum_gh += g[off + j] * xhat[off + j];
               }
             }
             if (gg) gg[ch] += sum_gh;
             if (gb) gb[ch] += sum_g;
             if (!gx) continue;
             const S ga = gn->data[ch];
             const S k = ga * rstd[ch];
             for (Index i = 0; i < b; ++i) {
               const Index off = (i * c + ch) * hw;
               if (training) {
                 const S inv_n = S(1) / static_cast<S>(n);
                 for (Index j = 0; j < hw; ++j)
                   gx[off + j] += k * (g[off + j] - inv_n * sum_g - xhat[off + j] * inv_n * sum_gh);
               } else {
                 for (Index j = 0; j < hw; ++j) gx[off + j] += k * g[off + j];
               }
             }
           }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

namespace {

struct Tap1d {
  Index i0, i1;
  double w;  // weight of i1
};

std::vector<Tap1d> bilinear_taps(Index in, Index out) {
  std::vector<Tap1d> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index i0 = static_cast<Index>(std::floor(src));
    const Index i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, Index out_h, Index out_w) {
  if (x.rank() != 4) shape_error("bilinear_resize", "input must be [B,C,H,W]", x.shape());
  if (out_h < 1 || out_w < 1) shape_error("bilinear_resize", "output size must be >= 1", x.shape());
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 1 || w < 1) shape_error("bilinear_resize", "empty spatial extent", x.shape());
  if (h == out_h && w == out_w) return reshape(x, x.shape());
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Tensor<S> out({x.dim(0), x.dim(1), out_h, out_w});
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index p = 0; p < planes; ++p) {
    const S* src = px + p * h * w;
    S* dst = po + p * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const Tap1d& a = ty[oy];
      const S wy = static_cast<S>(a.w);
      const S* r0 = src + a.i0 * w;
      const S* r1 = src + a.i1 * w;
      for (Index ox = 0; ox < out_w; ++ox) {
        const Tap1d& b = tx[ox];
        const S wx = static_cast<S>(b.w);
        const S top = r0[b.i0] * (S(1) - wx) + r0[b.i1] * wx;
        const S bot = r1[b.i0] * (S(1) - wx) + r1[b.i1] * wx;
        dst[oy * out_w + ox] = top * (S(1) - wy) + bot * wy;
      }
    }
  }
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), ty, tx, planes, h, w, out_h, out_w](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    for (Index p = 0; p < planes; ++p) {
      S* dst = gx + p * h * w;
      const S* src = g.data() + p * out_h * out_w;
      for (Index oy = 0; oy < out_h; ++oy) {
        const Tap1d& a = ty[oy];
        const S wy = static_cast<S>(a.w);
        for (Index ox = 0; ox < out_w; ++ox) {
          const Tap1d& b = tx[ox];
          const S wx = static_cast<S>(b.w);
          const S v = src[oy * out_w + ox];
          dst[a.i0 * w + b.i0] += v * (S(1) - wy) * (S(1) - wx);
          dst[a.i0 * w + b.i1] += v * (S(1) - wy) * wx;
          dst[a.i1 * w + b.i0] += v * wy * (S(1) - wx);
          dst[a.i1 * w + b.i1] += v * wy * wx;
        }
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> pixel_shuffle(const Tensor<S>& x, Index r) {
  if (x.rank() != 4) shape_error("pixel_shuffle", "input must be [B,C*r*r,H,W]", x.shape());
  if (r < 1) shape_error("pixel_shuffle", "factor must be >= 1", x.shape());
  if (x.dim(1) % (r * r) != 0)
    shape_error("pixel_shuffle", "channels " + std::to_string(x.dim(1)) + " not divisible by r^2 = " +
                                     std::to_string(r * r), x.shape());
  const Index b = x.dim(0), c = x.dim(1) / (r * r), h = x.dim(2), w = x.dim(3);
  return reshape(permute(reshape(x, {b, c, r, r, h, w}), {0, 1, 4, 2, 5, 3}), {b, c, h * r, w * r});
}

template <typename S>
Tensor<S> pixel_unshuffle(const Tensor<S>& x, Index r) {
  if (x.rank() != 4) shape_error("pixel_unshuffle", "input must be [B,C,r*H,r*W]", x.shape());
  if (r < 1 || x.dim(2) % r != 0 || x.dim(3) % r != 0)
    shape_error("pixel_unshuffle", "spatial extents not divisible by factor", x.shape());
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2) / r, w = x.dim(3) / r;
  return reshape(permute(reshape(x, {b, c, h, r, w, r}), {0, 1, 3, 5, 2, 4}), {b, c * r * r, h, w});
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) shape_error("global_avg_pool", "input must be [B,C,H,W]", x.shape());
  const Index planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) shape_error("global_avg_pool", "empty spatial extent", x.shape());
  Tensor<S> out({x.dim(0), x.dim(1), 1, 1});
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index p = 0; p < planes; ++p) {
    S acc = 0;
    for (Index i = 0; i < hw; ++i) acc += px[p * hw + i];
    po[p] = acc / static_cast<S>(hw);
  }
  attach(detail::recording_tape<S>({&x}), out, [xn = x.node(), planes, hw](const std::vector<S>& g) {
    S* gx = xn->grad_buffer();
    for (Index p = 0; p < planes; ++p) {
      const S v = g[p] / static_cast<S>(hw);
      for (Index i = 0; i < hw; ++i) gx[p * hw + i] += v;
    }
  });
  return out;
}

template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x, Index axis) {
  axis = normalize_axis("l2_normalize", axis, x.rank(), x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  Tensor<S> out(x.shape());
  std::vector<S> norms(static_cast<std::size_t>(v.outer * v.inner));
  const S* px = x.data().data();
  S* po = out.mutable_data().data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const Index base = o * v.extent * v.inner + i;
      S ss = 0;
      for (Index k = 0; k < v.extent; ++k) ss += px[base + k * v.inner] * px[base + k * v.inner];
      const S nrm = std::sqrt(ss);
      norms[o * v.inner + i] = nrm;
      const S inv = nrm > S(0) ? S(1) / nrm : S(0);
      for (Index k = 0; k < v.extent; ++k) po[base + k * v.inner] = px[base + k * v.inner] * inv;
    }
  attach(detail::recording_tape<S>({&x}), out,
         [xn = x.node(), on = out.node(), norms = std::move(norms), v](const std::vector<S>& g) {
           S* gx = xn->grad_buffer();
           const S* y = on->data.data();
           for (Index o = 0; o < v.outer; ++o)
             for (Index i = 0; i < v.inner; ++i) {
               const S nrm = norms[o * v.inner + i];
               if (nrm == S(0)) continue;
               const Index base = o * v.extent * v.inner + i;
               S dot = 0;
               for (Index k = 0; k < v.extent; ++k) dot += y[base + k * v.inner] * g[base + k * v.inner];
               for (Index k = 0; k < v.extent; ++k) {
                 const Index idx = base + k * v.inner;
                 gx[idx] += (g[idx] - y[idx] * dot) / nrm;
               }
             }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, Index axis, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  axis = normalize_axis("cross_entropy", axis, logits.rank(), logits.shape());
  const AxisView v = axis_view(logits.shape(), axis);
  if (static_cast<Index>(targets.size()) != v.outer * v.inner)
    shape_error("cross_entropy", "expected " + std::to_string(v.outer * v.inner) + " targets, got " +
                                     std::to_string(targets.size()), logits.shape());
  if (!mask.empty() && static_cast<Index>(mask.size()) != logits.size())
    shape_error("cross_entropy", "mask length does not match logits", logits.shape());
  const S* px = logits.data().data();
  // Softmax probabilities for valid positions are cached for backward.
  std::vector<S> probs(static_cast<std::size_t>(logits.size()), S(0));
  Index count = 0;
  S total = 0;
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const std::int32_t t = targets[o * v.inner + i];
      if (t < 0) continue;
      if (t >= v.extent)
        shape_error("cross_entropy", "label " + std::to_string(t) + " >= class count " + std::to_string(v.extent),
                    logits.shape());
      const Index base = o * v.extent * v.inner + i;
      auto on = [&](Index k) { return mask.empty() || mask[base + k * v.inner] != 0; };
      if (!on(t)) shape_error("cross_entropy", "target class " + std::to_string(t) + " is masked", logits.shape());
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < v.extent; ++k)
        if (on(k)) mx = std::max(mx, px[base + k * v.inner]);
      S z = 0;
      for (Index k = 0; k < v.extent; ++k)
        if (on(k)) {
          const S e = std::exp(px[base + k * v.inner] - mx);
          probs[base + k * v.inner] = e;
          z += e;
        }
      for (Index k = 0; k < v.extent; ++k) probs[base + k * v.inner] /= z;
      total += -(px[base + t * v.inner] - mx - std::log(z));
      ++count;
    }
  Tensor<S> out = Tensor<S>::scalar(count > 0 ? total / static_cast<S>(count) : S(0));
  if (count == 0) return out;
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  attach(detail::recording_tape<S>({&logits}), out,
         [xn = logits.node(), probs = std::move(probs), tgt = std::move(tgt), v, count](const std::vector<S>& g) {
           S* gx = xn->grad_buffer();
           const S scale = g[0] / static_cast<S>(count);
           for (Index o = 0; o < v.outer; ++o)
             for (Index i = 0; i < v.inner; ++i) {
               const std::int32_t t = tgt[o * v.inner + i];
               if (t < 0) continue;
               const Index base = o * v.extent * v.inner + i;
               for (Index k = 0; k < v.extent; ++k) gx[base + k * v.inner] += scale * probs[base + k * v.inner];
               gx[base + t * v.inner] -= scale;
             }
         });
  return out;
}

template <typename S>
Tensor<S> binary_cross_entropy_with_logits(const Tensor<S>& logits, std::span<const std::int8_t> targets,
                                           S positive_weight) {
  if (static_cast<Index>(targets.size()) != logits.size())
    shape_error("binary_cross_entropy_with_logits", "target count does not match logits", logits.shape());
  auto softplus = [](S z) { return z > S(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); };
  const S* px = logits.data().data();
  Index count = 0;
  S total = 0;
  for (Index i = 0; i < logits.size(); ++i) {
    const std::int8_t t = targets[i];
    if (t < 0) continue;
    total += t ? positive_weight * softplus(-px[i]) : softplus(px[i]);
    ++count;
  }
  Tensor<S> out = Tensor<S>::scalar(count > 0 ? total / static_cast<S>(count) : S(0));
  if (count == 0) return out;
  std::vector<std::int8_t> tgt(targets.begin(), targets.end());
  attach(detail::recording_tape<S>({&logits}), out,
         [xn = logits.node(), tgt = std::move(tgt), positive_weight, count](const std::vector<S>& g) {
           S* gx = xn->grad_buffer();
           const S scale = g[0] / static_cast<S>(count);
           for (std::size_t i = 0; i < tgt.size(); ++i) {
             if (tgt[i] < 0) continue;
             const S z = xn->data[i];
             const S s = z >= S(0) ? S(1) / (S(1) + std::exp(-z)) : std::exp(z) / (S(1) + std::exp(z));
             gx[i] += scale * (tgt[i] ? -positive_weight * (S(1) - s) : s);
           }
         });
  return out;
}

// ---------------------------------------------------------------------------
// Spatially adaptive upsampling
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> adaptive_filter_upsample(const Tensor<S>& features, const Tensor<S>& filters) {
  const std::string op = "adaptive_filter_upsample";
  if (features.rank() != 4) shape_error(op, "features must be [B,C,H,W]", features.shape());
  if (filters.rank() != 7) shape_error(op, "filters must be [B,G,r*r,k,k,H,W]", filters.shape());
  const Index b = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const Index groups = filters.dim(1), r2 = filters.dim(2), k = filters.dim(3);
  if (filters.dim(0) != b || filters.dim(5) != h || filters.dim(6) != w)
    shape_error(op, "filter batch/spatial extents differ from features", features.shape(), filters.shape());
  if (filters.dim(4) != k || k % 2 == 0) shape_error(op, "filters must be square with odd size", filters.shape());
  const Index r = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(r2))));
  if (r * r != r2) shape_error(op, "filter count per site is not a square", filters.shape());
  if (groups < 1 || c % groups != 0)
    shape_error(op, "channels " + std::to_string(c) + " not divisible by groups " + std::to_string(groups),
                features.shape(), filters.shape());
  const Index cg = c / groups, half = k / 2, hw = h * w, taps = k * k;

  // pre[b, c, f, h, w] then shuffle into [b, c, r*h, r*w]
  std::vector<S> pre(static_cast<std::size_t>(b * c * r2 * hw), S(0));
  const S* pf = features.data().data();
  const S* pk = filters.data().data();
  auto filter_plane = [&](const S* base, Index bi, Index g, Index f, Index tap) {
    return base + ((((bi * groups + g) * r2 + f) * taps + tap) * hw);
  };
  for (Index bi = 0; bi < b; ++bi)
    for (Index g = 0; g < groups; ++g)
      for (Index f = 0; f < r2; ++f)
        for (Index ki = 0; ki < k; ++ki)
          for (Index kj = 0; kj < k; ++kj) {
            const S* fp = filter_plane(pk, bi, g, f, ki * k + kj);
            const Index dy = ki - half, dx = kj - half;
            const Index y0 = std::max<Index>(0, -dy), y1 = std::min(h, h - dy);
            const Index x0 = std::max<Index>(0, -dx), x1 = std::min(w, w - dx);
            for (Index cc = 0; cc < cg; ++cc) {
              const Index ch = g * cg + cc;
              const S* src = pf + (bi * c + ch) * hw;
              S* dst = pre.data() + ((bi * c + ch) * r2 + f) * hw;
              for (Index y = y0; y < y1; ++y) {
                const S* srow = src + (y + dy) * w + dx;
                const S* frow = fp + y * w;
                S* drow = dst + y * w;
                for (Index x = x0; x < x1; ++x) drow[x] += frow[x] * srow[x];
              }
            }
          }
  Tensor<S> out({b, c, h * r, w * r});
  S* po = out.mutable_data().data();
  for (Index bc = 0; bc < b * c; ++bc)
    for (Index f = 0; f < r2; ++f) {
      const Index fi = f / r, fj = f % r;
      const S* src = pre.data() + (bc * r2 + f) * hw;
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) po[bc * hw * r2 + (y * r + fi) * (w * r) + x * r + fj] = src[y * w + x];
    }

  attach(detail::recording_tape<S>({&features, &filters}), out,
         [fn = features.node(), kn = filters.node(), b, c, h, w, groups, r, r2, k, cg, half, hw,
          taps](const std::vector<S>& gout) {
           S* gf = fn->requires_grad ? fn->grad_buffer() : nullptr;
           S* gk = kn->requires_grad ? kn->grad_buffer() : nullptr;
           std::vector<S> gpre(static_cast<std::size_t>(b * c * r2 * hw));
           for (Index bc = 0; bc < b * c; ++bc)
             for (Index f = 0; f < r2; ++f) {
               const Index fi = f / r, fj = f % r;
               S* dst = gpre.data() + (bc * r2 + f) * hw;
               for (Index y = 0; y < h; ++y)
                 for (Index x = 0; x < w; ++x)
                   dst[y * w + x] = gout[bc * hw * r2 + (y * r + fi) * (w * r) + x * r + fj];
             }
           const S* pf = fn->data.data();
           const S* pk = kn->data.data();
           for (Index bi = 0; bi < b; ++bi)
             for (Index g = 0; g < groups; ++g)
               for (Index f = 0; f < r2; ++f)
                 for (Index ki = 0; ki < k; ++ki)
                   for (Index kj = 0; kj < k; ++kj) {
                     const Index plane = (((bi * groups + g) * r2 + f) * taps + ki * k + kj) * hw;
                     const S* fp = pk + plane;
                     S* gfp = gk ? gk + plane : nullptr;
                     const Index dy = ki - half, dx = kj - half;
                     const Index y0 = std::max<Index>(0, -dy), y1 = std::min(h, h - dy);
                     const Index x0 = std::max<Index>(0, -dx), x1 = std::min(w, w - dx);
                     for (Index cc = 0; cc < cg; ++cc) {
                       const Index ch = g * cg + cc;
                       const Index src_off = (bi * c + ch) * hw;
                       const S* gp = gpre.data() + ((bi * c + ch) * r2 + f) * hw;
                       for (Index y = y0; y < y1; ++y) {
                         const Index srow = src_off + (y + dy) * w + dx;
                         for (Index x = x0; x < x1; ++x) {
                           const S gv = gp[y * w + x];
                           if (gfp) gfp[y * w + x] += gv * pf[srow + x];
                           if (gf) gf[srow + x] += gv * fp[y * w + x];
                         }
                       }
                     }
                   }
         });
  return out;
}

#define RSSEG_INSTANTIATE_OPS(S)                                                                         \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> broadcast_to(const Tensor<S>&, const Shape&);                                       \
  template Tensor<S> scale(const Tensor<S>&, S);                                                         \
  template Tensor<S> exp(const Tensor<S>&);                                                              \
  template Tensor<S> relu(const Tensor<S>&);                                                             \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                          \
  template Tensor<S> gelu(const Tensor<S>&);                                                             \
  template Tensor<S> sum(const Tensor<S>&);                                                              \
  template Tensor<S> mean(const Tensor<S>&);                                                             \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                   \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<Index>&);                               \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, Index);                                       \
  template Tensor<S> slice(const Tensor<S>&, Index, Index, Index);                                       \
  template Tensor<S> flip_last(const Tensor<S>&);                                                        \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&, bool);                                   \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                       \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Conv2dOptions);        \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                                   \
  template Tensor<S> log_softmax(const Tensor<S>&, Index);                                               \
  template Tensor<S> masked_softmax(const Tensor<S>&, std::span<const std::uint8_t>);                    \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Tensor<S>&,        \
                                Tensor<S>&, bool, S, S);                                                 \
  template Tensor<S> bilinear_resize(const Tensor<S>&, Index, Index);                                    \
  template Tensor<S> pixel_shuffle(const Tensor<S>&, Index);                                             \
  template Tensor<S> pixel_unshuffle(const Tensor<S>&, Index);                                           \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                                  \
  template Tensor<S> l2_normalize(const Tensor<S>&, Index);                                              \
  template Tensor<S> cross_entropy(const Tensor<S>&, Index, std::span<const std::int32_t>,               \
                                   std::span<const std::uint8_t>);                                       \
  template Tensor<S> binary_cross_entropy_with_logits(const Tensor<S>&, std::span<const std::int8_t>, S); \
  template Tensor<S> adaptive_filter_upsample(const Tensor<S>&, const Tensor<S>&);

RSSEG_INSTANTIATE_OPS(float)
RSSEG_INSTANTIATE_OPS(double)

#undef RSSEG_INSTANTIATE_OPS

}  // namespace rsseg
