// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsseg/config.hpp"
#include "rsseg/data.hpp"

namespace rsseg {

struct MetricReport {
  std::vector<double> class_iou;     // NaN for classes with empty union
  double miou = 0;                   // mean over classes with nonzero union
  double small_miou = 0;             // mean over small classes with nonzero union
  std::vector<int> small_classes;
  double boundary_f = 0;
  double boundary_precision = 0;
  double boundary_recall = 0;
  double pixel_accuracy = 0;
};

/// Pixels whose 4-neighbourhood holds a different (non-ignore) label.
std::vector<std::uint8_t> boundary_mask(const LabelMap& labels);

/// Confusion counts, boundary matches and area statistics over many images.
class MetricAccumulator {
 public:
  MetricAccumulator(Index num_classes, const MetricsConfig& config = {});

  void add(const LabelMap& pred, const LabelMap& gt);
  MetricReport report() const;

  /// confusion()[gt * K + pred]
  const std::vector<std::int64_t>& confusion() const { return confusion_; }
  Index num_classes() const { return k_; }

 private:
  Index k_;
  MetricsConfig config_;
  std::vector<std::int64_t> confusion_;
  std::int64_t pred_boundary_ = 0, pred_boundary_hit_ = 0;
  std::int64_t gt_boundary_ = 0, gt_boundary_hit_ = 0;
};

/// Metrics of a single prediction. Small classes are those whose share of
/// the valid GT pixels is below the threshold; when none qualify the small
/// mIoU is reported over no classes as 0.
MetricReport compute_metrics(const LabelMap& pred, const LabelMap& gt, Index num_classes,
                             const MetricsConfig& config = {});

std::string to_json(const MetricReport& report);

/// Per-site mean cosine similarity between the feature vector of each site of
/// maps [B,C,H,W] and its 4-neighbours, [B*H*W]. High values mean smooth maps.
template <typename Scalar>
std::vector<double> neighbour_similarity_map(const Tensor<Scalar>& maps);

/// Mean of neighbour_similarity_map.
template <typename Scalar>
double neighbour_similarity(const Tensor<Scalar>& maps);

}  // namespace rsseg
