// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsseg {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Thrown for any shape or argument mismatch. The message names the operation
/// and the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] void shape_error(const std::string& op, const std::string& what);
[[noreturn]] void shape_error(const std::string& op, const std::string& what, const Shape& a);
[[noreturn]] void shape_error(const std::string& op, const std::string& what, const Shape& a,
                              const Shape& b);

namespace detail {

template <typename Scalar>
struct TensorNode {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until materialized
  bool requires_grad = false;

  Scalar* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major tensor. Copies share the underlying node, so a Tensor is a
/// cheap handle; operations never modify their inputs.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::TensorNode<Scalar>;
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<Scalar> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar value);
  static Tensor scalar(Scalar value) { return full({}, value); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const;
  Index size() const { return static_cast<Index>(node_->data.size()); }

  std::span<const Scalar> data() const { return node_->data; }
  /// Writable view; only for leaves (parameters, buffers, freshly built inputs).
  std::span<Scalar> mutable_data() { return node_->data; }
  Scalar item() const;
  Scalar operator[](Index i) const { return node_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; zeros when none has been materialized.
  Tensor grad() const;
  std::span<const Scalar> grad_data() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy without gradient tracking.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Ordered record of differentiable operations for reverse-mode replay.
/// Constructing a tape activates it on the current thread; destruction
/// restores whatever tape was active before.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(BackwardFn fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1, replays the tape in reverse and clears it.
  void backward(const Tensor<Scalar>& loss);

 private:
  std::vector<BackwardFn> entries_;
  Tape* previous_ = nullptr;
};

/// Suspends recording on the current thread for its lifetime.
template <typename Scalar>
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Runs backward on the active tape.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

namespace detail {

template <typename Scalar>
Tape<Scalar>*& active_tape();

/// Returns the active tape when any input requires a gradient.
template <typename Scalar>
Tape<Scalar>* recording_tape(std::initializer_list<const Tensor<Scalar>*> inputs) {
  Tape<Scalar>* tape = active_tape<Scalar>();
  if (!tape) return nullptr;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

}  // namespace detail

}  // namespace rsseg
