// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>

#include "rsseg/data.hpp"

namespace rsseg {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary P6, 8 bits per channel; values in [0,1] are rounded to 0..255.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);

/// Binary P5 label map; 255 is the ignore value.
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_pgm(const std::filesystem::path& path);

/// Min-max normalized 8-bit heatmap of an h x w field (constant fields map to 0).
void write_heatmap(const std::filesystem::path& path, std::span<const double> values, Index height, Index width);

}  // namespace rsseg
