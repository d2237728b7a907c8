// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rsseg/data.hpp"
#include "test_util.hpp"

using namespace rsseg;

TEST(SyntheticScenes, DeterministicPerIndex) {
  SceneSpec spec;
  const Scene a = gen_synthetic_scene(spec, 17), b = gen_synthetic_scene(spec, 17), c = gen_synthetic_scene(spec, 18);
  EXPECT_EQ(a.labels, b.labels);
  ASSERT_EQ(a.image.shape(), (Shape{3, 64, 64}));
  for (Index i = 0; i < a.image.size(); ++i) ASSERT_EQ(a.image[i], b.image[i]);
  EXPECT_NE(a.labels, c.labels);
  spec.seed = 43;
  EXPECT_NE(gen_synthetic_scene(spec, 17).labels, a.labels);
}

TEST(SyntheticScenes, ValuesAndLabelsInRange) {
  SceneSpec spec;
  spec.num_classes = 6;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const Scene s = gen_synthetic_scene(spec, i);
    for (float v : s.image.data()) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
    for (auto l : s.labels.labels) EXPECT_LT(l, 6);
    EXPECT_GE(static_cast<Index>(s.instances.size()), spec.min_shapes);
    EXPECT_LE(static_cast<Index>(s.instances.size()), spec.max_shapes);
    for (const auto& inst : s.instances) {
      EXPECT_EQ(inst.kind, shape_kind_for_class(inst.class_id));
      if (inst.kind == ShapeKind::kThinLine) {
        EXPECT_GE(inst.line_width, 1);
        EXPECT_LE(inst.line_width, 2);
      }
    }
  }
}

TEST(SyntheticScenes, InstanceFrequencyMatchesExpectation) {
  SceneSpec spec;
  const int n = 3000;
  std::vector<double> counts(static_cast<std::size_t>(spec.num_classes), 0.0);
  for (int i = 0; i < n; ++i)
    for (const auto& inst : gen_synthetic_scene(spec, static_cast<std::uint64_t>(i)).instances)
      counts[static_cast<std::size_t>(inst.class_id)] += 1;
  // uniform shape count in [2,5] spread over 3 foreground classes
  EXPECT_NEAR(spec.expected_instances_per_class(), 3.5 / 3, 1e-15);
  EXPECT_EQ(counts[0], 0);
  for (Index c = 1; c < spec.num_classes; ++c)
    EXPECT_NEAR(counts[static_cast<std::size_t>(c)] / n, spec.expected_instances_per_class(),
                0.1 * spec.expected_instances_per_class());
}

TEST(SyntheticScenes, ThinLinesAreSmall) {
  SceneSpec spec;
  Index line = 0, total = 0;
  for (std::uint64_t i = 0; i < 200; ++i) {
    const Scene s = gen_synthetic_scene(spec, i);
    for (auto l : s.labels.labels) line += l == 3;
    total += static_cast<Index>(s.labels.labels.size());
  }
  EXPECT_GT(line, 0);
  EXPECT_LT(static_cast<double>(line) / static_cast<double>(total), 0.03);
}

TEST(SyntheticScenes, RejectsBadSpecs) {
  SceneSpec spec;
  spec.min_shapes = 6;
  EXPECT_ANY_THROW(gen_synthetic_scene(spec, 0));
  EXPECT_THROW(shape_kind_for_class(0), std::invalid_argument);
}

TEST(Corruption, SeverityZeroIsIdentity) {
  const Scene s = gen_synthetic_scene(SceneSpec{}, 3);
  for (Corruption kind : kAllCorruptions) {
    const auto out = corrupt_image(s.image, kind, 0, 9);
    for (Index i = 0; i < out.size(); ++i) ASSERT_EQ(out[i], s.image[i]) << to_string(kind);
  }
}

TEST(Corruption, DeviationGrowsWithSeverity) {
  const Scene s = gen_synthetic_scene(SceneSpec{}, 4);
  for (Corruption kind : kAllCorruptions) {
    double previous = 0;
    for (int sev = 1; sev <= kMaxSeverity; ++sev) {
      const auto out = corrupt_image(s.image, kind, sev, 7);
      double dev = 0;
      for (Index i = 0; i < out.size(); ++i) {
        EXPECT_GE(out[i], 0.f);
        EXPECT_LE(out[i], 1.f);
        dev += std::abs(out[i] - s.image[i]);
      }
      EXPECT_GT(dev, previous) << to_string(kind) << " severity " << sev;
      previous = dev;
    }
  }
}

TEST(Corruption, BlurOfConstantIsConstantAndParametersMatchTables) {
  Tensor<float> flat({3, 9, 9});
  for (float& v : flat.mutable_data()) v = 0.4f;
  for (int sev = 1; sev <= kMaxSeverity; ++sev) {
    const auto blurred = corrupt_image(flat, Corruption::kGaussianBlur, sev);
    for (float v : blurred.data()) EXPECT_NEAR(v, 0.4f, 1e-6);
  }
  EXPECT_DOUBLE_EQ(corruption_parameter(Corruption::kGaussianNoise, 5), 0.26);
  EXPECT_DOUBLE_EQ(corruption_parameter(Corruption::kContrast, 1), 0.75);
  EXPECT_EQ(parse_corruption("gaussian-blur"), Corruption::kGaussianBlur);
  EXPECT_EQ(to_string(Corruption::kBrightness), "brightness");
  EXPECT_ANY_THROW(parse_corruption("fog"));
  EXPECT_ANY_THROW(corrupt_image(flat, Corruption::kContrast, 6));
}

TEST(Corruption, BrightnessAndContrastClosedForms) {
  Tensor<float> img({1, 1, 2}, {0.2f, 0.6f});
  const auto bright = corrupt_image(img, Corruption::kBrightness, 2);
  EXPECT_NEAR(bright[0], 0.2 + corruption_parameter(Corruption::kBrightness, 2), 1e-6);
  const auto low = corrupt_image(img, Corruption::kContrast, 2);
  EXPECT_NEAR(low[0], 0.4 - 0.2 * 0.5, 1e-6);
  EXPECT_NEAR(low[1], 0.4 + 0.2 * 0.5, 1e-6);
}

TEST(LabelOps, ResizeFlipOneHotTargets) {
  LabelMap lm(2, 2);
  lm.labels = {0, 1, 2, LabelMap::kIgnore};
  const auto up = resize_nearest(lm, 4, 4);
  EXPECT_EQ(up.at(0, 0), 0);
  EXPECT_EQ(up.at(1, 3), 1);
  EXPECT_EQ(up.at(3, 0), 2);
  EXPECT_EQ(up.at(3, 3), LabelMap::kIgnore);
  EXPECT_EQ(resize_nearest(up, 2, 2), lm);
  EXPECT_EQ(flip_horizontal(lm).labels, (std::vector<std::uint8_t>{1, 0, LabelMap::kIgnore, 2}));
  const auto oh = one_hot<double>(lm, 3);
  EXPECT_EQ(oh.shape(), (Shape{3, 2, 2}));
  EXPECT_EQ(oh[0], 1.0);
  EXPECT_EQ(oh[4 + 1], 1.0);
  EXPECT_EQ(oh[8 + 2], 1.0);
  EXPECT_EQ(oh[3] + oh[4 + 3] + oh[8 + 3], 0.0);
  std::vector<LabelMap> batch = {lm, lm};
  const auto t = flatten_targets(std::span<const LabelMap>(batch));
  EXPECT_EQ(t, (std::vector<std::int32_t>{0, 1, 2, -1, 0, 1, 2, -1}));
}
