// SPDX-License-Identifier: Apache-2.0
#include "rsseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rsseg/random.hpp"

namespace rsseg {

LabelMap resize_nearest(const LabelMap& labels, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_nearest: output size must be >= 1");
  LabelMap out(out_h, out_w);
  for (Index y = 0; y < out_h; ++y) {
    const Index sy = std::min(labels.height - 1, (2 * y + 1) * labels.height / (2 * out_h));
    for (Index x = 0; x < out_w; ++x) {
      const Index sx = std::min(labels.width - 1, (2 * x + 1) * labels.width / (2 * out_w));
      out.at(y, x) = labels.at(sy, sx);
    }
  }
  return out;
}

LabelMap flip_horizontal(const LabelMap& labels) {
  LabelMap out(labels.height, labels.width);
  for (Index y = 0; y < labels.height; ++y)
    for (Index x = 0; x < labels.width; ++x) out.at(y, x) = labels.at(y, labels.width - 1 - x);
  return out;
}

template <typename S>
Tensor<S> one_hot(const LabelMap& labels, Index num_classes) {
  Tensor<S> out({num_classes, labels.height, labels.width});
  auto d = out.mutable_data();
  const Index hw = labels.height * labels.width;
  for (Index i = 0; i < hw; ++i) {
    const auto c = labels.labels[static_cast<std::size_t>(i)];
    if (c == LabelMap::kIgnore) continue;
    if (c >= num_classes) throw std::invalid_argument("one_hot: label " + std::to_string(c) + " >= class count");
    d[c * hw + i] = S(1);
  }
  return out;
}

template Tensor<float> one_hot<float>(const LabelMap&, Index);
template Tensor<double> one_hot<double>(const LabelMap&, Index);

std::vector<std::int32_t> flatten_targets(std::span<const LabelMap> labels) {
  std::vector<std::int32_t> out;
  for (const auto& m : labels)
    for (auto v : m.labels) out.push_back(v == LabelMap::kIgnore ? -1 : static_cast<std::int32_t>(v));
  return out;
}

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kRectangle: return "rectangle";
    case ShapeKind::kDisk: return "disk";
    case ShapeKind::kThinLine: return "thin-line";
  }
  return "?";
}

ShapeKind shape_kind_for_class(int class_id) {
  if (class_id < 1) throw std::invalid_argument("shape_kind_for_class: class 0 is background");
  return static_cast<ShapeKind>((class_id - 1) % 3);
}

std::array<float, 3> base_color(int class_id) {
  static constexpr std::array<std::array<float, 3>, 4> kPalette = {{
      {0.25f, 0.30f, 0.55f},  // background
      {0.85f, 0.30f, 0.25f},  // rectangle
      {0.30f, 0.80f, 0.35f},  // disk
      {0.95f, 0.90f, 0.30f},  // thin line
  }};
  if (class_id < static_cast<int>(kPalette.size())) return kPalette[static_cast<std::size_t>(class_id)];
  SplitMix64 rng(0xC0102ULL + static_cast<std::uint64_t>(class_id));
  return {static_cast<float>(rng.uniform(0.1, 0.9)), static_cast<float>(rng.uniform(0.1, 0.9)),
          static_cast<float>(rng.uniform(0.1, 0.9))};
}

void SceneSpec::validate() const {
  if (image_size < 8) throw std::invalid_argument("scene: image_size must be >= 8");
  if (num_classes < 2 || num_classes > 255) throw std::invalid_argument("scene: num_classes must be in [2, 255]");
  if (min_shapes < 0 || max_shapes < min_shapes) throw std::invalid_argument("scene: invalid shapes-per-image range");
  if (noise_std < 0 || color_jitter < 0) throw std::invalid_argument("scene: negative noise");
}

double SceneSpec::expected_instances_per_class() const {
  return 0.5 * static_cast<double>(min_shapes + max_shapes) / static_cast<double>(num_classes - 1);
}

namespace {

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Scene gen_synthetic_scene(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  SplitMix64 rng(spec.seed ^ index);
  const Index s = spec.image_size;
  const double sd = static_cast<double>(s);
  Scene scene;
  scene.labels = LabelMap(s, s, 0);
  // per-pixel colour before noise
  std::vector<std::array<float, 3>> colour(static_cast<std::size_t>(s * s));
  auto jittered = [&](int c) {
    auto col = base_color(c);
    for (float& v : col) v = static_cast<float>(std::clamp(v + rng.uniform(-spec.color_jitter, spec.color_jitter), 0.0, 1.0));
    return col;
  };
  const auto bg = jittered(0);
  std::fill(colour.begin(), colour.end(), bg);

  const Index n = spec.num_classes > 1 ? rng.uniform_int(spec.min_shapes, spec.max_shapes) : 0;
  for (Index i = 0; i < n; ++i) {
    ShapeInstance inst;
    inst.class_id = static_cast<int>(rng.uniform_int(1, spec.num_classes - 1));
    inst.kind = shape_kind_for_class(inst.class_id);
    const auto col = jittered(inst.class_id);
    auto paint = [&](auto inside) {
      for (Index y = 0; y < s; ++y)
        for (Index x = 0; x < s; ++x)
          if (inside(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) {
            scene.labels.at(y, x) = static_cast<std::uint8_t>(inst.class_id);
            colour[static_cast<std::size_t>(y * s + x)] = col;
          }
    };
    switch (inst.kind) {
      case ShapeKind::kRectangle: {
        const double w = rng.uniform(sd / 8.0, sd / 2.5), h = rng.uniform(sd / 8.0, sd / 2.5);
        const double x0 = rng.uniform(0.0, sd - w), y0 = rng.uniform(0.0, sd - h);
        paint([=](double px, double py) { return px >= x0 && px < x0 + w && py >= y0 && py < y0 + h; });
        break;
      }
      case ShapeKind::kDisk: {
        const double r = rng.uniform(sd / 16.0, sd / 5.0);
        const double cx = rng.uniform(r, sd - r), cy = rng.uniform(r, sd - r);
        paint([=](double px, double py) { return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r; });
        break;
      }
      case ShapeKind::kThinLine: {
        inst.line_width = static_cast<int>(rng.uniform_int(1, 2));
        double ax, ay, bx, by;
        do {
          ax = rng.uniform(0.0, sd);
          ay = rng.uniform(0.0, sd);
          bx = rng.uniform(0.0, sd);
          by = rng.uniform(0.0, sd);
        } while (std::hypot(bx - ax, by - ay) < sd / 3.0);
        const double half = 0.5 * inst.line_width;
        paint([=](double px, double py) { return segment_distance(px, py, ax, ay, bx, by) <= half; });
        break;
      }
    }
    scene.instances.push_back(inst);
  }

  scene.image = Tensor<float>({3, s, s});
  auto img = scene.image.mutable_data();
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < s * s; ++p) {
      const double v = colour[static_cast<std::size_t>(p)][static_cast<std::size_t>(c)] + spec.noise_std * rng.normal();
      img[c * s * s + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return scene;
}

std::string to_string(Corruption kind) {
  switch (kind) {
    case Corruption::kGaussianNoise: return "gaussian-noise";
    case Corruption::kGaussianBlur: return "gaussian-blur";
    case Corruption::kBrightness: return "brightness";
    case Corruption::kContrast: return "contrast";
  }
  return "?";
}

Corruption parse_corruption(const std::string& name) {
  for (Corruption c : kAllCorruptions)
    if (to_string(c) == name) return c;
  throw std::invalid_argument("unknown corruption kind: " + name);
}

double corruption_parameter(Corruption kind, int severity) {
  if (severity < 0 || severity > kMaxSeverity)
    throw std::invalid_argument("corruption severity must be in [0, 5], got " + std::to_string(severity));
  static constexpr std::array<double, 6> kNoiseStd = {0.0, 0.04, 0.08, 0.12, 0.18, 0.26};
  static constexpr std::array<double, 6> kBlurSigma = {0.0, 0.5, 0.75, 1.0, 1.5, 2.0};
  static constexpr std::array<double, 6> kBrightness = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  static constexpr std::array<double, 6> kContrast = {1.0, 0.75, 0.5, 0.4, 0.3, 0.2};
  const auto i = static_cast<std::size_t>(severity);
  switch (kind) {
    case Corruption::kGaussianNoise: return kNoiseStd[i];
    case Corruption::kGaussianBlur: return kBlurSigma[i];
    case Corruption::kBrightness: return kBrightness[i];
    case Corruption::kContrast: return kContrast[i];
  }
  return 0.0;
}

Tensor<float> corrupt_image(const Tensor<float>& image, Corruption kind, int severity, std::uint64_t seed) {
  if (image.rank() != 3) shape_error("corrupt_image", "image must be [C,H,W]", image.shape());
  const double p = corruption_parameter(kind, severity);
  if (severity == 0) return image.detach();
  const Index channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> px(image.data().begin(), image.data().end());
  switch (kind) {
    case Corruption::kGaussianNoise: {
      SplitMix64 rng(seed);
      for (double& v : px) v += p * rng.normal();
      break;
    }
    case Corruption::kGaussianBlur: {
      const Index radius = static_cast<Index>(std::ceil(3.0 * p));
      std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
      double total = 0;
      for (Index i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (p * p));
        total += kernel[static_cast<std::size_t>(i + radius)];
      }
      for (double& k : kernel) k /= total;
      std::vector<double> tmp(px.size());
      // separable, clamp-to-edge
      for (Index c = 0; c < channels; ++c)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            double acc = 0;
            for (Index i = -radius; i <= radius; ++i)
              acc += kernel[static_cast<std::size_t>(i + radius)] * px[static_cast<std::size_t>((c * h + y) * w + std::clamp<Index>(x + i, 0, w - 1))];
            tmp[static_cast<std::size_t>((c * h + y) * w + x)] = acc;
          }
      for (Index c = 0; c < channels; ++c)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            double acc = 0;
            for (Index i = -radius; i <= radius; ++i)
              acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>((c * h + std::clamp<Index>(y + i, 0, h - 1)) * w + x)];
            px[static_cast<std::size_t>((c * h + y) * w + x)] = acc;
          }
      break;
    }
    case Corruption::kBrightness:
      for (double& v : px) v += p;
      break;
    case Corruption::kContrast:
      for (Index c = 0; c < channels; ++c) {
        double m = 0;
        for (Index i = 0; i < h * w; ++i) m += px[static_cast<std::size_t>(c * h * w + i)];
        m /= static_cast<double>(h * w);
        for (Index i = 0; i < h * w; ++i) {
          double& v = px[static_cast<std::size_t>(c * h * w + i)];
          v = (v - m) * p + m;
        }
      }
      break;
  }
  Tensor<float> out(image.shape());
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < px.size(); ++i) d[i] = static_cast<float>(std::clamp(px[i], 0.0, 1.0));
  return out;
}

template <typename S>
Tensor<S> stack_images(std::span<const Tensor<float>> images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Shape& s0 = images.front().shape();
  Shape shape = {static_cast<Index>(images.size())};
  shape.insert(shape.end(), s0.begin(), s0.end());
  Tensor<S> out(shape);
  auto d = out.mutable_data();
  std::size_t k = 0;
  for (const auto& img : images) {
    if (img.shape() != s0) shape_error("stack_images", "images differ in shape", s0, img.shape());
    for (float v : img.data()) d[k++] = static_cast<S>(v);
  }
  return out;
}

template Tensor<float> stack_images<float>(std::span<const Tensor<float>>);
template Tensor<double> stack_images<double>(std::span<const Tensor<float>>);

}  // namespace rsseg
