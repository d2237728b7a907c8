// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rsseg/gradcheck.hpp"
#include "rsseg/losses.hpp"
#include "test_util.hpp"

using namespace rsseg;
using rsseg::testing::expect_all_near;
using rsseg::testing::random_tensor;

namespace {

LabelMap random_labels(SplitMix64& rng, Index h, Index w, Index k, double ignore = 0.1) {
  LabelMap lm(h, w);
  for (auto& v : lm.labels) {
    v = static_cast<std::uint8_t>(rng.uniform_int(0, k - 1));
    if (rng.uniform() < ignore) v = LabelMap::kIgnore;
  }
  return lm;
}

}  // namespace

TEST(SegLoss, UniformLogitsGiveLogK) {
  SplitMix64 rng(1);
  for (Index k : {2, 4, 7}) {
    std::vector<LabelMap> labels = {random_labels(rng, 8, 8, k), random_labels(rng, 8, 8, k)};
    Tensor<double> logits({2, k, 4, 4});
    for (double& v : logits.mutable_data()) v = 0.25;
    EXPECT_NEAR(cross_entropy_seg(logits, std::span<const LabelMap>(labels)).item(), std::log(static_cast<double>(k)),
                1e-12);
  }
}

TEST(SegLoss, AllIgnoredIsZeroAndSizesMustAgree) {
  std::vector<LabelMap> labels = {LabelMap(4, 4, LabelMap::kIgnore)};
  SplitMix64 rng(2);
  EXPECT_EQ(cross_entropy_seg(random_tensor(rng, {1, 3, 2, 2}), std::span<const LabelMap>(labels)).item(), 0.0);
  std::vector<LabelMap> mixed = {LabelMap(4, 4), LabelMap(4, 2)};
  EXPECT_THROW(cross_entropy_seg(Tensor<double>({2, 3, 2, 2}), std::span<const LabelMap>(mixed)), ShapeError);
}

TEST(SegLoss, PerPixelOracleAtLabelResolution) {
  SplitMix64 rng(3);
  const auto logits = random_tensor(rng, {1, 3, 3, 3}, -2, 2);
  std::vector<LabelMap> labels = {random_labels(rng, 3, 3, 3, 0.3)};
  double total = 0;
  int n = 0;
  for (Index p = 0; p < 9; ++p) {
    const auto t = labels[0].labels[static_cast<std::size_t>(p)];
    if (t == LabelMap::kIgnore) continue;
    double z = 0;
    for (Index c = 0; c < 3; ++c) z += std::exp(logits[c * 9 + p]);
    total += std::log(z) - logits[t * 9 + p];
    ++n;
  }
  EXPECT_NEAR(cross_entropy_seg(logits, std::span<const LabelMap>(labels)).item(), total / n, 1e-13);
}

TEST(TotalLoss, Combinations) {
  LossComponents<double> parts{Tensor<double>::scalar(1.0), Tensor<double>::scalar(0.5),
                               Tensor<double>::scalar(0.25), Tensor<double>::scalar(1.0)};
  EXPECT_DOUBLE_EQ(total_loss(parts, LossMode::kMatching).total.item(), 1.75);
  EXPECT_DOUBLE_EQ(total_loss(parts, LossMode::kBoundary).total.item(), 1.4);
  EXPECT_DOUBLE_EQ(total_loss(parts, LossMode::kBoundary, 0.1).total.item(), 1.1);
  LossComponents<double> seg_only{Tensor<double>::scalar(2.0), {}, {}, {}};
  EXPECT_DOUBLE_EQ(total_loss(seg_only, LossMode::kMatching).total.item(), 2.0);
  const auto r = total_loss(parts, LossMode::kMatching);
  EXPECT_EQ(r.q2r, 0.5);
  EXPECT_EQ(r.p2r, 0.25);
}

TEST(BoundaryTargets, MatchNeighbourScan) {
  SplitMix64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<LabelMap> labels = {random_labels(rng, 5, 7, 3, 0.15), random_labels(rng, 5, 7, 2, 0.15)};
    const auto t = boundary_targets(std::span<const LabelMap>(labels));
    ASSERT_EQ(t.size(), 70u);
    std::size_t i = 0;
    for (const auto& lm : labels)
      for (Index y = 0; y < 5; ++y)
        for (Index x = 0; x < 7; ++x, ++i) {
          const auto c = lm.at(y, x);
          if (c == LabelMap::kIgnore) {
            EXPECT_EQ(t[i], -1);
            continue;
          }
          int expect = 0;
          for (auto [ny, nx] : {std::pair{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}) {
            if (ny < 0 || nx < 0 || ny >= 5 || nx >= 7) continue;
            const auto n = lm.at(ny, nx);
            if (n != LabelMap::kIgnore && n != c) expect = 1;
          }
          EXPECT_EQ(t[i], expect);
        }
  }
}

TEST(BoundaryLoss, WeightedBceOracle) {
  SplitMix64 rng(5);
  std::vector<LabelMap> labels = {LabelMap(6, 6)};
  for (Index y = 0; y < 6; ++y)
    for (Index x = 3; x < 6; ++x) labels[0].at(y, x) = 1;
  labels[0].at(0, 0) = LabelMap::kIgnore;
  const auto logits = random_tensor(rng, {1, 1, 6, 6}, -2, 2);
  // columns 2 and 3 are boundary: 12 positives, 23 negatives
  const double w = 23.0 / 12.0;
  double total = 0;
  for (Index y = 0; y < 6; ++y)
    for (Index x = 0; x < 6; ++x) {
      if (y == 0 && x == 0) continue;
      const double p = 1 / (1 + std::exp(-logits[y * 6 + x]));
      total += (x == 2 || x == 3) ? -w * std::log(p) : -std::log(1 - p);
    }
  EXPECT_NEAR(boundary_loss(logits, std::span<const LabelMap>(labels)).item(), total / 35, 1e-13);
}

TEST(BoundaryLoss, WeightCapAndNoPositives) {
  std::vector<LabelMap> labels = {LabelMap(40, 40)};
  labels[0].at(0, 0) = 1;  // 3 positives among 1600 pixels
  const Tensor<double> logits({1, 1, 40, 40});
  const double p = 0.5;
  const double expected = (3 * 50 * -std::log(p) + 1597 * -std::log(1 - p)) / 1600;
  EXPECT_NEAR(boundary_loss(logits, std::span<const LabelMap>(labels)).item(), expected, 1e-12);
  std::vector<LabelMap> flat = {LabelMap(4, 4, 2)};
  EXPECT_EQ(boundary_loss(Tensor<double>({1, 1, 2, 2}), std::span<const LabelMap>(flat)).item(), 0.0);
}

TEST(MatchingLosses, AveragedOverLayers) {
  SplitMix64 rng(6);
  std::vector<LabelMap> labels = {random_labels(rng, 2, 3, 3, 0.0)};
  DecoderOutput<double> decoded;
  std::vector<double> q_expected, p_expected;
  for (int l = 0; l < 3; ++l) {
    CrossAttentionResult<double> r;
    r.q_norm = l2_normalize(random_tensor(rng, {1, 3, 4}), 2);
    r.k_norm = l2_normalize(random_tensor(rng, {1, 6, 4}), 2);
    const Tensor<double> s({1}, {rng.uniform(1, 10)});
    const auto re = region_embeddings(r.k_norm, std::span<const LabelMap>(labels), 3);
    auto [lq, lp] = matching_losses(query_to_region_similarity(r.q_norm, re, s),
                                    patch_to_region_similarity(r.k_norm, re, s, std::span<const LabelMap>(labels)));
    q_expected.push_back(lq.item());
    p_expected.push_back(lp.item());
    decoded.layers.push_back(r);
    decoded.scales.push_back(s);
  }
  const auto terms = decoder_matching_losses(decoded, std::span<const LabelMap>(labels), 3);
  EXPECT_NEAR(terms.q2r.item(), (q_expected[0] + q_expected[1] + q_expected[2]) / 3, 1e-13);
  EXPECT_NEAR(terms.p2r.item(), (p_expected[0] + p_expected[1] + p_expected[2]) / 3, 1e-13);
  EXPECT_EQ(terms.valid_patches, 6);
}

TEST(BoundaryLoss, Gradients) {
  SplitMix64 rng(7);
  std::vector<LabelMap> labels = {random_labels(rng, 8, 8, 3), random_labels(rng, 8, 8, 3)};
  const auto logits = random_tensor(rng, {2, 1, 4, 4});
  const auto seg = random_tensor(rng, {2, 3, 4, 4});
  const auto r = gradcheck(
      [&] {
        LossComponents<double> parts{cross_entropy_seg(seg, std::span<const LabelMap>(labels)), {}, {},
                                     boundary_loss(logits, std::span<const LabelMap>(labels))};
        return total_loss(parts, LossMode::kBoundary).total;
      },
      {{"boundary_logits", logits}, {"seg_logits", seg}});
  EXPECT_TRUE(r.passed()) << r.worst.name << "[" << r.worst.index << "] " << r.worst.analytic << " vs "
                          << r.worst.numeric;
}
