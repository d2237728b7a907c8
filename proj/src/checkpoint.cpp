// SPDX-License-Identifier: Apache-2.0
#include "rsseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace rsseg {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'S', 'G'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return value;
  }

  std::string string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated stream at byte " + std::to_string(pos_));
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max())
      throw CheckpointError("checkpoint: tensor name too long: " + t.name.substr(0, 32));
    if (t.shape.size() > std::numeric_limits<std::uint8_t>::max())
      throw CheckpointError("checkpoint: rank too large for " + t.name);
    if (static_cast<Index>(t.values.size()) != numel(t.shape))
      throw CheckpointError("checkpoint: payload size does not match shape for " + t.name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (Index d : t.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.values) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (in.string(4) != std::string(kMagic, 4)) throw CheckpointError("checkpoint: bad magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = in.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = in.string(in.get<std::uint16_t>());
    const auto rank = in.get<std::uint8_t>();
    for (std::uint8_t r = 0; r < rank; ++r) t.shape.push_back(static_cast<Index>(in.get<std::uint32_t>()));
    const Index n = numel(t.shape);
    t.values.reserve(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) t.values.push_back(std::bit_cast<float>(in.get<std::uint32_t>()));
    out.push_back(std::move(t));
  }
  if (!in.done()) throw CheckpointError("checkpoint: trailing bytes after tensor " + std::to_string(count));
  return out;
}

template <typename S>
std::vector<NamedTensor> export_parameters(const ParameterStore<S>& store) {
  std::vector<NamedTensor> out;
  for (const auto& e : store.entries()) {
    NamedTensor t{e.name, e.tensor.shape(), {}};
    for (S v : e.tensor.data()) t.values.push_back(static_cast<float>(v));
    out.push_back(std::move(t));
  }
  return out;
}

template <typename S>
void import_parameters(ParameterStore<S>& store, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != store.entries().size())
    throw CheckpointError("checkpoint: expected " + std::to_string(store.entries().size()) + " tensors, found " +
                          std::to_string(tensors.size()));
  for (const NamedTensor& t : tensors) {
    const ParamEntry<S>* e = store.find(t.name);
    if (!e) throw CheckpointError("checkpoint: unknown tensor " + t.name);
    if (e->tensor.shape() != t.shape)
      throw CheckpointError("checkpoint: shape mismatch for " + t.name + ": " + to_string(t.shape) + " vs " +
                            to_string(e->tensor.shape()));
  }
  for (const NamedTensor& t : tensors) {
    Tensor<S> dst = store.find(t.name)->tensor;
    auto d = dst.mutable_data();
    for (std::size_t i = 0; i < t.values.size(); ++i) d[i] = static_cast<S>(t.values[i]);
  }
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template std::vector<NamedTensor> export_parameters(const ParameterStore<float>&);
template std::vector<NamedTensor> export_parameters(const ParameterStore<double>&);
template void import_parameters(ParameterStore<float>&, const std::vector<NamedTensor>&);
template void import_parameters(ParameterStore<double>&, const std::vector<NamedTensor>&);

}  // namespace rsseg
