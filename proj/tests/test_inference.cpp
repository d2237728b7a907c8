// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rsseg/inference.hpp"
#include "test_util.hpp"

using namespace rsseg;
using rsseg::testing::expect_all_near;
using rsseg::testing::random_tensor;

namespace {

// Logits that depend on the whole window: 2 * x + mean(window) per channel.
Tensor<double> window_dependent(const Tensor<double>& x) {
  Tensor<double> out(x.shape());
  const Index plane = x.dim(2) * x.dim(3);
  for (Index bc = 0; bc < x.dim(0) * x.dim(1); ++bc) {
    double m = 0;
    for (Index i = 0; i < plane; ++i) m += x[bc * plane + i];
    m /= static_cast<double>(plane);
    for (Index i = 0; i < plane; ++i) out.mutable_data()[bc * plane + i] = 2 * x[bc * plane + i] + m;
  }
  return out;
}

// Logits that depend on the column index, so flipping changes them.
Tensor<double> column_biased(const Tensor<double>& x) {
  Tensor<double> out = x.detach();
  const Index w = x.dim(3);
  for (Index i = 0; i < out.size(); ++i) out.mutable_data()[i] += 0.3 * static_cast<double>(i % w);
  return out;
}

}  // namespace

TEST(Windows, PlanCoversImageWithLastWindowAligned) {
  const auto p = plan_windows(10, 23, 8, 5);
  EXPECT_FALSE(p.clipped);
  std::vector<Index> xs, ys;
  for (auto [y, x] : p.origins) {
    if (y == 0) xs.push_back(x);
    if (x == 0) ys.push_back(y);
  }
  EXPECT_EQ(xs, (std::vector<Index>{0, 5, 10, 15}));
  EXPECT_EQ(ys, (std::vector<Index>{0, 2}));
  EXPECT_TRUE(plan_windows(6, 6, 8, 4).clipped);
  EXPECT_THROW(plan_windows(8, 8, 4, 5), std::invalid_argument);
}

TEST(Windows, CoverageIsPositiveEverywhere) {
  SplitMix64 rng(1);
  LogitFn<double> identity = [](const Tensor<double>& x) { return x.detach(); };
  for (int trial = 0; trial < 40; ++trial) {
    const Index h = 4 + rng.uniform_int(0, 20), w = 4 + rng.uniform_int(0, 20);
    const Index win = 2 + rng.uniform_int(0, 10), stride = 1 + rng.uniform_int(0, win - 1);
    const auto img = random_tensor(rng, {1, 2, h, w});
    const auto r = sliding_window_infer(identity, img, win, stride);
    for (int c : r.coverage) EXPECT_GE(c, 1);
    expect_all_near(r.logits.data(), img.data(), 1e-14);
  }
}

TEST(Windows, FullWindowEqualsDirectCall) {
  SplitMix64 rng(2);
  const auto img = random_tensor(rng, {2, 3, 5, 7});
  LogitFn<double> f = window_dependent;
  const auto r = sliding_window_infer(f, img, 7, 7);
  expect_all_near(r.logits.data(), window_dependent(img).data(), 0.0);
  for (int c : r.coverage) EXPECT_EQ(c, 1);
}

TEST(Windows, TwoWindowOracle) {
  // width 6, window 4, stride 2: windows start at x = 0 and x = 2
  SplitMix64 rng(3);
  const auto img = random_tensor(rng, {1, 1, 4, 6});
  const auto r = sliding_window_infer(LogitFn<double>(window_dependent), img, 4, 2);
  auto mean_cols = [&](Index x0) {
    double m = 0;
    for (Index y = 0; y < 4; ++y)
      for (Index x = x0; x < x0 + 4; ++x) m += img[y * 6 + x];
    return m / 16;
  };
  const double m0 = mean_cols(0), m2 = mean_cols(2);
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 6; ++x) {
      const double v = 2 * img[y * 6 + x];
      double expected;
      if (x < 2) expected = v + m0;
      else if (x < 4) expected = v + 0.5 * (m0 + m2);
      else expected = v + m2;
      EXPECT_NEAR(r.logits[y * 6 + x], expected, 1e-14);
      EXPECT_EQ(r.coverage[static_cast<std::size_t>(y * 6 + x)], (x >= 2 && x < 4) ? 2 : 1);
    }
}

TEST(MultiScale, RepeatedScaleEqualsSingle) {
  SplitMix64 rng(4);
  const auto img = random_tensor(rng, {1, 3, 8, 8});
  LogitFn<double> f = column_biased;
  MultiScaleOptions one{{1.0}, false, 0, 0, 1}, two{{1.0, 1.0}, false, 0, 0, 1};
  const auto a = multi_scale_probabilities(f, img, one), b = multi_scale_probabilities(f, img, two);
  expect_all_near(a.data(), b.data(), 1e-15);
  expect_all_near(a.data(), softmax(column_biased(img), 1).data(), 1e-15);
}

TEST(MultiScale, FlipAveragesMirroredPrediction) {
  SplitMix64 rng(5);
  const auto img = random_tensor(rng, {1, 3, 4, 6});
  const auto probs = multi_scale_probabilities(LogitFn<double>(column_biased), img, {{1.0}, true, 0, 0, 1});
  const auto direct = softmax(column_biased(img), 1);
  const auto mirrored = flip_last(softmax(column_biased(flip_last(img)), 1));
  expect_all_near(probs.data(), scale(add(direct, mirrored), 0.5).data(), 1e-15);
}

TEST(MultiScale, ScaledExtentsAndDefaults) {
  EXPECT_EQ(scaled_extent(64, 1.25, 8), 80);
  EXPECT_EQ(scaled_extent(64, 1.75, 8), 112);
  EXPECT_EQ(scaled_extent(64, 0.5, 8), 32);
  EXPECT_EQ(scaled_extent(10, 1.0, 8), 8);
  EXPECT_GE(scaled_extent(4, 0.1, 8), 8);
  EXPECT_EQ(kFineStructureScales, (std::array<double, 4>{1.0, 1.25, 1.5, 1.75}));
  EXPECT_EQ(kGenericScales.front(), 0.5);
}

TEST(MultiScale, OutputsAtInputResolution) {
  SplitMix64 rng(6);
  const auto img = random_tensor(rng, {2, 3, 16, 16});
  MultiScaleOptions opts{{1.0, 1.25, 1.5, 1.75}, true, 16, 8, 8};
  const auto probs = multi_scale_probabilities(LogitFn<double>(column_biased), img, opts);
  ASSERT_EQ(probs.shape(), img.shape());
  for (Index p = 0; p < 2 * 256; ++p) {
    const Index b = p / 256, s = p % 256;
    double sum = 0;
    for (Index c = 0; c < 3; ++c) sum += probs[(b * 3 + c) * 256 + s];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  const auto labels = multi_scale_infer(LogitFn<double>(column_biased), img, opts);
  ASSERT_EQ(labels.size(), 2u);
  EXPECT_EQ(labels[0].height, 16);
}

TEST(MultiScale, ArgmaxPrefersLowestIndexOnTies) {
  Tensor<double> s({1, 3, 1, 2}, {0.2, 0.5, 0.7, 0.5, 0.7, 0.1});
  const auto l = argmax_labels(s);
  EXPECT_EQ(l[0].labels, (std::vector<std::uint8_t>{1, 0}));
}
