// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsseg/nn.hpp"

namespace rsseg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// "RSSG", u32 version, u32 count, then per tensor: u16 name length, name
/// bytes, u8 rank, rank x u32 extents, f32 payload. All little-endian.
std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Every entry of the store, buffers included, in registration order.
template <typename Scalar>
std::vector<NamedTensor> export_parameters(const ParameterStore<Scalar>& store);
/// Copies values into the store by name; names and shapes must match exactly.
template <typename Scalar>
void import_parameters(ParameterStore<Scalar>& store, const std::vector<NamedTensor>& tensors);

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<Scalar>& store) {
  write_bytes(path, encode_checkpoint(export_parameters(store)));
}

template <typename Scalar>
void load_checkpoint(const std::filesystem::path& path, ParameterStore<Scalar>& store) {
  import_parameters(store, decode_checkpoint(read_bytes(path)));
}

}  // namespace rsseg
