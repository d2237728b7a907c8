// SPDX-License-Identifier: Apache-2.0
#include "rsseg/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace rsseg {

namespace {

void write_netpbm(const std::filesystem::path& path, const char* magic, Index w, Index h,
                  const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageIoError("cannot open " + path.string() + " for writing");
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError("failed writing " + path.string());
}

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.get();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      if (!tok.empty()) return tok;
    } else if (c != EOF) {
      tok.push_back(static_cast<char>(c));
    }
  }
  return tok;
}

std::vector<std::uint8_t> read_netpbm(const std::filesystem::path& path, const std::string& magic, Index channels,
                                      Index& w, Index& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  if (next_token(in) != magic) throw ImageIoError(path.string() + ": expected " + magic);
  try {
    w = std::stol(next_token(in));
    h = std::stol(next_token(in));
    if (std::stol(next_token(in)) != 255) throw ImageIoError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw ImageIoError(path.string() + ": malformed header");
  }
  if (w <= 0 || h <= 0) throw ImageIoError(path.string() + ": bad dimensions");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w * h * channels));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw ImageIoError(path.string() + ": truncated");
  return bytes;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) shape_error("write_ppm", "image must be [3,H,W]", image.shape());
  const Index h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> bytes;
  bytes.reserve(static_cast<std::size_t>(3 * h * w));
  for (Index p = 0; p < h * w; ++p)
    for (Index c = 0; c < 3; ++c) bytes.push_back(to_byte(image[c * h * w + p]));
  write_netpbm(path, "P6", w, h, bytes);
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  Index w = 0, h = 0;
  const auto bytes = read_netpbm(path, "P6", 3, w, h);
  Tensor<float> image({3, h, w});
  auto d = image.mutable_data();
  for (Index p = 0; p < h * w; ++p)
    for (Index c = 0; c < 3; ++c) d[static_cast<std::size_t>(c * h * w + p)] = bytes[static_cast<std::size_t>(p * 3 + c)] / 255.0f;
  return image;
}

void write_pgm(const std::filesystem::path& path, const LabelMap& labels) {
  write_netpbm(path, "P5", labels.width, labels.height, labels.labels);
}

LabelMap read_pgm(const std::filesystem::path& path) {
  Index w = 0, h = 0;
  LabelMap lm;
  lm.labels = read_netpbm(path, "P5", 1, w, h);
  lm.height = h;
  lm.width = w;
  return lm;
}

void write_heatmap(const std::filesystem::path& path, std::span<const double> values, Index height, Index width) {
  if (static_cast<Index>(values.size()) != height * width) throw ImageIoError("write_heatmap: size mismatch");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = values.empty() ? 0.0 : *hi - *lo;
  std::vector<std::uint8_t> bytes;
  for (double v : values) bytes.push_back(range > 0 ? to_byte((v - *lo) / range) : 0);
  write_netpbm(path, "P5", width, height, bytes);
}

}  // namespace rsseg
