// SPDX-License-Identifier: Apache-2.0
#include "rsseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace rsseg {

std::vector<std::uint8_t> boundary_mask(const LabelMap& labels) {
  std::vector<std::uint8_t> mask(labels.labels.size(), 0);
  for (Index y = 0; y < labels.height; ++y)
    for (Index x = 0; x < labels.width; ++x) {
      const std::uint8_t c = labels.at(y, x);
      if (c == LabelMap::kIgnore) continue;
      const bool edge = (y > 0 && labels.at(y - 1, x) != c && labels.at(y - 1, x) != LabelMap::kIgnore) ||
                        (y + 1 < labels.height && labels.at(y + 1, x) != c && labels.at(y + 1, x) != LabelMap::kIgnore) ||
                        (x > 0 && labels.at(y, x - 1) != c && labels.at(y, x - 1) != LabelMap::kIgnore) ||
                        (x + 1 < labels.width && labels.at(y, x + 1) != c && labels.at(y, x + 1) != LabelMap::kIgnore);
      mask[static_cast<std::size_t>(y * labels.width + x)] = edge;
    }
  return mask;
}

namespace {

// Pixels of `from` that have a pixel of `to` within Chebyshev distance d.
std::int64_t matched(const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to, Index h, Index w,
                     Index d) {
  std::int64_t hits = 0;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      if (!from[static_cast<std::size_t>(y * w + x)]) continue;
      bool found = false;
      for (Index yy = std::max<Index>(0, y - d); yy <= std::min(h - 1, y + d) && !found; ++yy)
        for (Index xx = std::max<Index>(0, x - d); xx <= std::min(w - 1, x + d); ++xx)
          if (to[static_cast<std::size_t>(yy * w + xx)]) {
            found = true;
            break;
          }
      hits += found;
    }
  return hits;
}

}  // namespace

MetricAccumulator::MetricAccumulator(Index num_classes, const MetricsConfig& config)
    : k_(num_classes), config_(config), confusion_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw std::invalid_argument("metrics: num_classes must be positive");
}

void MetricAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("compute_metrics: prediction " + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs ground truth " + std::to_string(gt.height) + "x" +
                                std::to_string(gt.width));
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::uint8_t g = gt.labels[i], p = pred.labels[i];
    if (g == LabelMap::kIgnore) continue;
    if (g >= k_ || p >= k_) throw std::invalid_argument("compute_metrics: label outside [0, num_classes)");
    ++confusion_[static_cast<std::size_t>(g * k_ + p)];
  }
  // ignore pixels of the GT are excluded from the prediction's boundary too
  LabelMap masked = pred;
  for (std::size_t i = 0; i < gt.labels.size(); ++i)
    if (gt.labels[i] == LabelMap::kIgnore) masked.labels[i] = LabelMap::kIgnore;
  const auto pb = boundary_mask(masked);
  const auto gb = boundary_mask(gt);
  const Index d = config_.boundary_tolerance;
  for (auto v : pb) pred_boundary_ += v;
  for (auto v : gb) gt_boundary_ += v;
  pred_boundary_hit_ += matched(pb, gb, gt.height, gt.width, d);
  gt_boundary_hit_ += matched(gb, pb, gt.height, gt.width, d);
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  std::int64_t valid = 0, correct = 0;
  std::vector<std::int64_t> gt_count(static_cast<std::size_t>(k_), 0), pred_count(static_cast<std::size_t>(k_), 0);
  for (Index g = 0; g < k_; ++g)
    for (Index p = 0; p < k_; ++p) {
      const std::int64_t n = confusion_[static_cast<std::size_t>(g * k_ + p)];
      valid += n;
      gt_count[static_cast<std::size_t>(g)] += n;
      pred_count[static_cast<std::size_t>(p)] += n;
      if (g == p) correct += n;
    }
  r.pixel_accuracy = valid ? static_cast<double>(correct) / static_cast<double>(valid) : 0.0;
  double sum = 0, small_sum = 0;
  int used = 0, small_used = 0;
  for (Index c = 0; c < k_; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const std::int64_t inter = confusion_[static_cast<std::size_t>(c * k_ + c)];
    const std::int64_t uni = gt_count[ci] + pred_count[ci] - inter;
    const double iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni)
                               : std::numeric_limits<double>::quiet_NaN();
    r.class_iou.push_back(iou);
    const bool small = valid > 0 && gt_count[ci] > 0 &&
                       static_cast<double>(gt_count[ci]) / static_cast<double>(valid) < config_.small_area_threshold;
    if (small) r.small_classes.push_back(static_cast<int>(c));
    if (uni == 0) continue;
    sum += iou;
    ++used;
    if (small) {
      small_sum += iou;
      ++small_used;
    }
  }
  r.miou = used ? sum / used : 0.0;
  r.small_miou = small_used ? small_sum / small_used : 0.0;
  r.boundary_precision =
      pred_boundary_ ? static_cast<double>(pred_boundary_hit_) / static_cast<double>(pred_boundary_) : 1.0;
  r.boundary_recall = gt_boundary_ ? static_cast<double>(gt_boundary_hit_) / static_cast<double>(gt_boundary_) : 1.0;
  const double ps = r.boundary_precision + r.boundary_recall;
  r.boundary_f = ps > 0 ? 2 * r.boundary_precision * r.boundary_recall / ps : 0.0;
  return r;
}

MetricReport compute_metrics(const LabelMap& pred, const LabelMap& gt, Index num_classes,
                             const MetricsConfig& config) {
  MetricAccumulator acc(num_classes, config);
  acc.add(pred, gt);
  return acc.report();
}

std::string to_json(const MetricReport& report) {
  nlohmann::json j;
  j["miou"] = report.miou;
  j["small_miou"] = report.small_miou;
  j["small_classes"] = report.small_classes;
  j["boundary_f"] = report.boundary_f;
  j["boundary_precision"] = report.boundary_precision;
  j["boundary_recall"] = report.boundary_recall;
  j["pixel_accuracy"] = report.pixel_accuracy;
  nlohmann::json ious = nlohmann::json::array();
  for (double v : report.class_iou) ious.push_back(std::isnan(v) ? nlohmann::json() : nlohmann::json(v));
  j["class_iou"] = ious;
  return j.dump();
}

template <typename S>
std::vector<double> neighbour_similarity_map(const Tensor<S>& maps) {
  if (maps.rank() != 4) throw std::invalid_argument("neighbour_similarity_map: expected [B,C,H,W]");
  const Index B = maps.dim(0), C = maps.dim(1), H = maps.dim(2), W = maps.dim(3), HW = H * W;
  const auto v = maps.data();
  std::vector<double> norms(static_cast<std::size_t>(B * HW), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index s = 0; s < HW; ++s) {
        const double x = v[static_cast<std::size_t>((b * C + c) * HW + s)];
        norms[static_cast<std::size_t>(b * HW + s)] += x * x;
      }
  for (double& n : norms) n = std::max(std::sqrt(n), 1e-12);
  auto cosine = [&](Index b, Index s, Index t) {
    double dot = 0;
    for (Index c = 0; c < C; ++c)
      dot += static_cast<double>(v[static_cast<std::size_t>((b * C + c) * HW + s)]) *
             static_cast<double>(v[static_cast<std::size_t>((b * C + c) * HW + t)]);
    return dot / (norms[static_cast<std::size_t>(b * HW + s)] * norms[static_cast<std::size_t>(b * HW + t)]);
  };
  std::vector<double> out(static_cast<std::size_t>(B * HW), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const Index s = y * W + x;
        double total = 0;
        int n = 0;
        if (y > 0) total += cosine(b, s, s - W), ++n;
        if (y + 1 < H) total += cosine(b, s, s + W), ++n;
        if (x > 0) total += cosine(b, s, s - 1), ++n;
        if (x + 1 < W) total += cosine(b, s, s + 1), ++n;
        out[static_cast<std::size_t>(b * HW + s)] = n ? total / n : 1.0;
      }
  return out;
}

template <typename S>
double neighbour_similarity(const Tensor<S>& maps) {
  const auto m = neighbour_similarity_map(maps);
  double total = 0;
  for (double v : m) total += v;
  return m.empty() ? 0.0 : total / static_cast<double>(m.size());
}

template std::vector<double> neighbour_similarity_map(const Tensor<float>&);
template std::vector<double> neighbour_similarity_map(const Tensor<double>&);
template double neighbour_similarity(const Tensor<float>&);
template double neighbour_similarity(const Tensor<double>&);

}  // namespace rsseg
