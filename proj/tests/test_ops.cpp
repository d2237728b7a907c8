// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "rsseg/gradcheck.hpp"
#include "rsseg/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace rsseg;
using rsseg::testing::expect_all_near;
using rsseg::testing::param;
using rsseg::testing::random_tensor;

namespace {

using Inputs = std::vector<std::pair<std::string, Tensor<double>>>;

// Weighted sum with fixed random weights so every output element matters.
Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  SplitMix64 rng(seed);
  return sum(mul(y, random_tensor(rng, y.shape())));
}

void expect_gradients(const std::function<Tensor<double>()>& f, const Inputs& inputs) {
  const GradcheckReport r = gradcheck(f, inputs);
  EXPECT_TRUE(r.passed()) << r.failures << " of " << r.checked << " failed; worst " << r.worst.name << "["
                          << r.worst.index << "] analytic " << r.worst.analytic << " numeric " << r.worst.numeric;
  EXPECT_GT(r.checked, 0);
}

}  // namespace

TEST(Elementwise, BroadcastAddMatchesLoop) {
  SplitMix64 rng(1);
  const auto a = random_tensor(rng, {2, 3, 4});
  const auto b = random_tensor(rng, {3, 1});
  const auto y = add(a, b);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 4}));
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      for (Index k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(y[(i * 3 + j) * 4 + k], a[(i * 3 + j) * 4 + k] + b[j]);
  EXPECT_THROW(add(a, random_tensor(rng, {5})), ShapeError);
}

TEST(Elementwise, Gradients) {
  SplitMix64 rng(2);
  auto a = param(rng, {2, 3, 4});
  auto b = param(rng, {3, 1});
  expect_gradients([&] { return probe(add(a, b)); }, {{"a", a}, {"b", b}});
  expect_gradients([&] { return probe(sub(a, b)); }, {{"a", a}, {"b", b}});
  expect_gradients([&] { return probe(mul(a, b)); }, {{"a", a}, {"b", b}});
  expect_gradients([&] { return probe(broadcast_to(b, {2, 3, 4})); }, {{"b", b}});
  expect_gradients([&] { return probe(scale(a, 1.7)); }, {{"a", a}});
  expect_gradients([&] { return probe(exp(a)); }, {{"a", a}});
  expect_gradients([&] { return probe(sigmoid(a)); }, {{"a", a}});
  expect_gradients([&] { return probe(gelu(a)); }, {{"a", a}});
  expect_gradients([&] { return mean(mul(a, a)); }, {{"a", a}});
}

TEST(Elementwise, ReluGradientAwayFromKink) {
  SplitMix64 rng(3);
  auto a = param(rng, {20});
  for (double& v : a.mutable_data())
    if (std::abs(v) < 0.05) v = 0.5;
  expect_gradients([&] { return probe(relu(a)); }, {{"a", a}});
}

TEST(Elementwise, GeluTanhApproximation) {
  const Tensor<double> x({3}, {-1.0, 0.0, 2.0});
  const auto y = gelu(x);
  for (Index i = 0; i < 3; ++i) {
    const double v = x[i];
    EXPECT_NEAR(y[i], 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v))), 1e-15);
  }
}

TEST(Layout, ReshapePermuteConcatSliceFlip) {
  SplitMix64 rng(4);
  auto a = param(rng, {2, 3, 4});
  auto b = param(rng, {2, 2, 4});
  EXPECT_EQ(reshape(a, {6, -1}).shape(), (Shape{6, 4}));
  EXPECT_THROW(reshape(a, {5, -1}), ShapeError);
  const auto p = permute(a, {2, 0, 1});
  ASSERT_EQ(p.shape(), (Shape{4, 2, 3}));
  EXPECT_DOUBLE_EQ(p[(3 * 2 + 1) * 3 + 2], a[(1 * 3 + 2) * 4 + 3]);
  const auto c = concat<double>({a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 5, 4}));
  EXPECT_DOUBLE_EQ(c[(1 * 5 + 4) * 4 + 2], b[(1 * 2 + 1) * 4 + 2]);
  const auto s = slice(a, 2, 1, 2);
  ASSERT_EQ(s.shape(), (Shape{2, 3, 2}));
  EXPECT_DOUBLE_EQ(s[0], a[1]);
  const auto f = flip_last(a);
  EXPECT_DOUBLE_EQ(f[0], a[3]);

  expect_gradients([&] { return probe(reshape(a, {4, 6})); }, {{"a", a}});
  expect_gradients([&] { return probe(permute(a, {2, 0, 1})); }, {{"a", a}});
  expect_gradients([&] { return probe(concat<double>({a, b}, 1)); }, {{"a", a}, {"b", b}});
  expect_gradients([&] { return probe(slice(a, 1, 1, 2)); }, {{"a", a}});
  expect_gradients([&] { return probe(flip_last(a)); }, {{"a", a}});
}

TEST(Matmul, MatchesLoopAndGradients) {
  SplitMix64 rng(5);
  auto a = param(rng, {2, 3, 4});
  auto b = param(rng, {2, 4, 5});
  auto shared = param(rng, {4, 5});
  auto bt = param(rng, {2, 5, 4});
  const auto y = matmul(a, b);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 5}));
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 5; ++j) {
        double acc = 0;
        for (Index k = 0; k < 4; ++k) acc += a[(n * 3 + i) * 4 + k] * b[(n * 4 + k) * 5 + j];
        EXPECT_NEAR(y[(n * 3 + i) * 5 + j], acc, 1e-12);
      }
  expect_gradients([&] { return probe(matmul(a, b)); }, {{"a", a}, {"b", b}});
  expect_gradients([&] { return probe(matmul(a, shared)); }, {{"a", a}, {"shared", shared}});
  expect_gradients([&] { return probe(matmul(a, bt, true)); }, {{"a", a}, {"bt", bt}});
  EXPECT_THROW(matmul(a, bt), ShapeError);
}

TEST(Linear, Gradients) {
  SplitMix64 rng(6);
  auto x = param(rng, {2, 3, 4});
  auto w = param(rng, {5, 4});
  auto bias = param(rng, {5});
  expect_gradients([&] { return probe(linear(x, w, bias)); }, {{"x", x}, {"w", w}, {"bias", bias}});
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  SplitMix64 rng(7);
  const std::vector<std::tuple<Index, Index, Index, Index, Conv2dOptions>> cases = {
      {3, 4, 3, 5, {1, 1, 1}}, {4, 4, 3, 6, {1, 1, 4}}, {4, 8, 1, 5, {1, 0, 1}},
      {3, 6, 8, 16, {4, 2, 1}}, {6, 6, 5, 7, {1, 2, 6}}, {4, 6, 2, 6, {2, 0, 2}},
  };
  for (const auto& [cin, cout, k, hw, opt] : cases) {
    const auto x = random_tensor(rng, {2, cin, hw, hw + 1});
    const auto w = random_tensor(rng, {cout, cin / opt.groups, k, k});
    const auto bias = random_tensor(rng, {cout});
    const auto y = conv2d(x, w, bias, opt);
    expect_all_near(y.data(), oracle::conv2d(x, w, bias, opt.stride, opt.padding, opt.groups), 1e-12);
  }
}

TEST(Conv2d, DepthwiseDeltaKernelIsIdentity) {
  SplitMix64 rng(8);
  const auto x = random_tensor(rng, {2, 3, 5, 5});
  Tensor<double> w({3, 1, 3, 3});
  for (Index c = 0; c < 3; ++c) w.mutable_data()[c * 9 + 4] = 1.0;
  const auto y = conv2d(x, w, {}, {1, 1, 3});
  expect_all_near(y.data(), x.data(), 0.0);
}

TEST(Conv2d, Gradients) {
  SplitMix64 rng(9);
  for (const Conv2dOptions opt : {Conv2dOptions{1, 1, 1}, Conv2dOptions{1, 2, 4}, Conv2dOptions{2, 1, 2},
                                  Conv2dOptions{1, 0, 1}}) {
    const Index k = opt.padding == 0 ? 1 : 3;
    auto x = param(rng, {2, 4, 5, 6});
    auto w = param(rng, {4, 4 / opt.groups, k + (opt.padding == 2 ? 2 : 0), k + (opt.padding == 2 ? 2 : 0)});
    auto bias = param(rng, {4});
    expect_gradients([&] { return probe(conv2d(x, w, bias, opt)); }, {{"x", x}, {"w", w}, {"bias", bias}});
  }
}

TEST(Conv2d, RejectsMismatchedChannels) {
  EXPECT_THROW(conv2d(Tensor<double>({1, 3, 4, 4}), Tensor<double>({2, 2, 3, 3})), ShapeError);
  EXPECT_THROW(conv2d(Tensor<double>({1, 3, 4, 4}), Tensor<double>({3, 1, 3, 3}), {}, {1, 1, 2}), ShapeError);
}

TEST(Softmax, RowsSumToOneForAllAxesAndExtents) {
  SplitMix64 rng(10);
  for (Index n = 1; n <= 64; n = n < 8 ? n + 1 : n * 2) {
    const auto x = random_tensor<float>(rng, {3, n, 2}, -20, 20);
    for (Index axis = 0; axis < 3; ++axis) {
      const auto y = softmax(x, axis);
      const Index extent = x.dim(axis);
      const Index inner = axis == 2 ? 1 : (axis == 1 ? 2 : 2 * n);
      const Index outer = x.size() / (extent * inner);
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < inner; ++i) {
          double s = 0;
          for (Index e = 0; e < extent; ++e) s += y[(o * extent + e) * inner + i];
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  const auto y = softmax(Tensor<float>({2}, {1000.f, 0.f}), 0);
  EXPECT_FLOAT_EQ(y[0], 1.f);
  EXPECT_NEAR(y[1], 0.f, 1e-30);
}

TEST(Softmax, Gradients) {
  SplitMix64 rng(11);
  auto x = param(rng, {2, 3, 4}, -2, 2);
  expect_gradients([&] { return probe(softmax(x, 1)); }, {{"x", x}});
  expect_gradients([&] { return probe(softmax(x, -1)); }, {{"x", x}});
  expect_gradients([&] { return probe(log_softmax(x, 0)); }, {{"x", x}});
}

TEST(MaskedSoftmax, MaskedEntriesAreZeroAndRowsSumToOne) {
  SplitMix64 rng(12);
  auto x = param(rng, {3, 4});
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1};
  const auto y = masked_softmax(x, std::span<const std::uint8_t>(mask));
  EXPECT_EQ(y[1], 0.0);
  for (Index j = 4; j < 8; ++j) EXPECT_EQ(y[j], 0.0);
  EXPECT_NEAR(y[0] + y[2] + y[3], 1.0, 1e-12);
  EXPECT_NEAR(y[8] + y[9] + y[10] + y[11], 1.0, 1e-12);
  expect_gradients([&] { return probe(masked_softmax(x, std::span<const std::uint8_t>(mask))); }, {{"x", x}});
}

TEST(LayerNorm, NormalizesAndGradients) {
  SplitMix64 rng(13);
  auto x = param(rng, {2, 3, 6}, -2, 2);
  auto g = param(rng, {6});
  auto b = param(rng, {6});
  const auto y = layer_norm(x, Tensor<double>::full({6}, 1.0), Tensor<double>::zeros({6}), 1e-6);
  for (Index r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (Index j = 0; j < 6; ++j) m += y[r * 6 + j];
    for (Index j = 0; j < 6; ++j) v += y[r * 6 + j] * y[r * 6 + j];
    EXPECT_NEAR(m / 6, 0.0, 1e-12);
    EXPECT_NEAR(v / 6, 1.0, 1e-4);
  }
  expect_gradients([&] { return probe(layer_norm(x, g, b, 1e-6)); }, {{"x", x}, {"g", g}, {"b", b}});
}

TEST(BatchNorm, TrainingStatisticsAndRunningUpdate) {
  SplitMix64 rng(14);
  const auto x = random_tensor(rng, {3, 2, 2, 2}, 0, 4);
  auto rm = Tensor<double>::zeros({2});
  auto rv = Tensor<double>::full({2}, 1.0);
  const auto y = batch_norm(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), rm, rv, true, 0.9, 1e-5);
  for (Index c = 0; c < 2; ++c) {
    double m = 0, v = 0, ym = 0;
    std::vector<double> vals;
    for (Index b = 0; b < 3; ++b)
      for (Index j = 0; j < 4; ++j) {
        vals.push_back(x[(b * 2 + c) * 4 + j]);
        ym += y[(b * 2 + c) * 4 + j];
      }
    for (double v0 : vals) m += v0;
    m /= 12;
    for (double v0 : vals) v += (v0 - m) * (v0 - m);
    EXPECT_NEAR(ym / 12, 0.0, 1e-12);
    EXPECT_NEAR(rm[c], 0.1 * m, 1e-12);
    EXPECT_NEAR(rv[c], 0.9 + 0.1 * v / 11, 1e-12);
  }
  // eval mode uses the running buffers
  const auto e = batch_norm(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), rm, rv, false, 0.9, 1e-5);
  EXPECT_NEAR(e[0], (x[0] - rm[0]) / std::sqrt(rv[0] + 1e-5), 1e-12);
}

TEST(BatchNorm, Gradients) {
  SplitMix64 rng(15);
  auto x = param(rng, {2, 3, 2, 3});
  auto g = param(rng, {3});
  auto b = param(rng, {3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  expect_gradients([&] { return probe(batch_norm(x, g, b, rm, rv, true, 0.9, 1e-5)); },
                   {{"x", x}, {"g", g}, {"b", b}});
  expect_gradients([&] { return probe(batch_norm(x, g, b, rm, rv, false, 0.9, 1e-5)); },
                   {{"x", x}, {"g", g}, {"b", b}});
}

TEST(Bilinear, HalfPixelClampOracle) {
  SplitMix64 rng(16);
  const auto x = random_tensor(rng, {1, 2, 3, 5});
  for (const auto& [oh, ow] : std::vector<std::pair<Index, Index>>{{6, 10}, {2, 3}, {7, 4}, {3, 5}}) {
    const auto y = bilinear_resize(x, oh, ow);
    ASSERT_EQ(y.shape(), (Shape{1, 2, oh, ow}));
    for (Index c = 0; c < 2; ++c)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          const double sy = std::clamp((i + 0.5) * 3.0 / oh - 0.5, 0.0, 2.0);
          const double sx = std::clamp((j + 0.5) * 5.0 / ow - 0.5, 0.0, 4.0);
          const Index y0 = static_cast<Index>(std::floor(sy)), x0 = static_cast<Index>(std::floor(sx));
          const Index y1 = std::min<Index>(y0 + 1, 2), x1 = std::min<Index>(x0 + 1, 4);
          const double fy = sy - y0, fx = sx - x0;
          auto at = [&](Index yy, Index xx) { return x[(c * 3 + yy) * 5 + xx]; };
          const double want = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                              fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
          EXPECT_NEAR(y[(c * oh + i) * ow + j], want, 1e-12);
        }
  }
}

TEST(Bilinear, Gradients) {
  SplitMix64 rng(17);
  auto x = param(rng, {2, 2, 3, 4});
  expect_gradients([&] { return probe(bilinear_resize(x, 7, 5)); }, {{"x", x}});
  expect_gradients([&] { return probe(bilinear_resize(x, 2, 2)); }, {{"x", x}});
}

TEST(PixelShuffle, IndexOracleAndInverse) {
  SplitMix64 rng(18);
  const auto x = random_tensor(rng, {2, 8, 3, 3});
  const auto y = pixel_shuffle(x, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 6, 6}));
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 2; ++c)
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 2; ++j)
          for (Index h = 0; h < 3; ++h)
            for (Index w = 0; w < 3; ++w)
              EXPECT_EQ(y[((b * 2 + c) * 6 + 2 * h + i) * 6 + 2 * w + j],
                        x[((b * 8 + c * 4 + i * 2 + j) * 3 + h) * 3 + w]);
  const auto back = pixel_unshuffle(y, 2);
  ASSERT_EQ(back.shape(), x.shape());
  for (Index i = 0; i < x.size(); ++i) EXPECT_EQ(back[i], x[i]);
  EXPECT_THROW(pixel_shuffle(Tensor<double>({1, 6, 2, 2}), 2), ShapeError);
}

TEST(Pooling, GlobalAverage) {
  const Tensor<double> x({1, 1, 2, 2}, {1, 3, 5, 7});
  EXPECT_DOUBLE_EQ(global_avg_pool(x)[0], 4.0);
  SplitMix64 rng(19);
  auto p = param(rng, {2, 3, 4, 5});
  const auto y = global_avg_pool(p);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 1, 1}));
  double s = 0;
  for (Index i = 0; i < 20; ++i) s += p[i];
  EXPECT_NEAR(y[0], s / 20, 1e-12);
  expect_gradients([&] { return probe(global_avg_pool(p)); }, {{"p", p}});
}

TEST(L2Normalize, UnitNormZeroSafeAndGradients) {
  SplitMix64 rng(20);
  auto x = param(rng, {3, 4});
  const auto y = l2_normalize(x, 1);
  for (Index r = 0; r < 3; ++r) {
    double n = 0;
    for (Index j = 0; j < 4; ++j) n += y[r * 4 + j] * y[r * 4 + j];
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  const auto z = l2_normalize(Tensor<double>::zeros({2, 3}), 1);
  for (Index i = 0; i < 6; ++i) EXPECT_EQ(z[i], 0.0);
  expect_gradients([&] { return probe(l2_normalize(x, 1)); }, {{"x", x}});
  expect_gradients([&] { return probe(l2_normalize(x, 0)); }, {{"x", x}});
}

TEST(CrossEntropy, MatchesPerPixelOracle) {
  SplitMix64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Index B = 2, K = 3 + trial % 3, H = 3, W = 4;
    const auto logits = random_tensor(rng, {B, K, H, W}, -4, 4);
    std::vector<std::int32_t> t(static_cast<std::size_t>(B * H * W));
    for (auto& v : t) v = static_cast<std::int32_t>(rng.uniform_int(-1, K - 1));
    double total = 0;
    Index valid = 0;
    for (Index b = 0; b < B; ++b)
      for (Index p = 0; p < H * W; ++p) {
        const std::int32_t c = t[static_cast<std::size_t>(b * H * W + p)];
        if (c < 0) continue;
        double z = 0;
        for (Index k = 0; k < K; ++k) z += std::exp(logits[(b * K + k) * H * W + p]);
        total += std::log(z) - logits[(b * K + c) * H * W + p];
        ++valid;
      }
    EXPECT_NEAR(cross_entropy(logits, 1, std::span<const std::int32_t>(t)).item(), total / valid, 1e-12);
  }
}

TEST(CrossEntropy, IgnoreMaskAndErrors) {
  SplitMix64 rng(22);
  auto logits = param(rng, {4, 3});
  const std::vector<std::int32_t> none = {-1, -1, -1, -1};
  EXPECT_EQ(cross_entropy(logits, 1, std::span<const std::int32_t>(none)).item(), 0.0);
  const std::vector<std::int32_t> bad = {0, 3, 0, 0};
  EXPECT_THROW(cross_entropy(logits, 1, std::span<const std::int32_t>(bad)), std::invalid_argument);
  const std::vector<std::int32_t> t = {0, 2, -1, 1};
  const std::vector<std::uint8_t> mask = {1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1};
  expect_gradients([&] { return cross_entropy(logits, 1, std::span<const std::int32_t>(t)); }, {{"logits", logits}});
  expect_gradients(
      [&] {
        return cross_entropy(logits, 1, std::span<const std::int32_t>(t), std::span<const std::uint8_t>(mask));
      },
      {{"logits", logits}});
}

TEST(BinaryCrossEntropy, WeightedOracleAndGradients) {
  SplitMix64 rng(23);
  auto logits = param(rng, {6}, -3, 3);
  const std::vector<std::int8_t> t = {1, 0, -1, 0, 1, 0};
  const double w = 2.5;
  double total = 0;
  for (Index i = 0; i < 6; ++i) {
    if (t[static_cast<std::size_t>(i)] < 0) continue;
    const double p = 1 / (1 + std::exp(-logits[i]));
    total += t[static_cast<std::size_t>(i)] == 1 ? -w * std::log(p) : -std::log(1 - p);
  }
  EXPECT_NEAR(binary_cross_entropy_with_logits(logits, std::span<const std::int8_t>(t), w).item(), total / 5, 1e-12);
  expect_gradients([&] { return binary_cross_entropy_with_logits(logits, std::span<const std::int8_t>(t), w); },
                   {{"logits", logits}});
}

TEST(AdaptiveFilterUpsample, Gradients) {
  SplitMix64 rng(24);
  auto f = param(rng, {2, 4, 3, 3});
  auto k = param(rng, {2, 2, 4, 3, 3, 3, 3});
  const auto y = adaptive_filter_upsample(f, k);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 6, 6}));
  expect_gradients([&] { return probe(adaptive_filter_upsample(f, k)); }, {{"f", f}, {"k", k}});
}
