// SPDX-License-Identifier: Apache-2.0
#include "rsseg/tensor.hpp"

#include <sstream>

namespace rsseg {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void shape_error(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

void shape_error(const std::string& op, const std::string& what, const Shape& a) {
  throw ShapeError(op + ": " + what + " (shape " + to_string(a) + ")");
}

void shape_error(const std::string& op, const std::string& what, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": " + what + " (shapes " + to_string(a) + " and " + to_string(b) + ")");
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : node_(std::make_shared<Node>()) {
  for (Index d : shape)
    if (d < 0) shape_error("Tensor", "negative extent", shape);
  node_->data.assign(static_cast<std::size_t>(numel(shape)), Scalar(0));
  node_->shape = std::move(shape);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::vector<Scalar> data) : node_(std::make_shared<Node>()) {
  if (static_cast<Index>(data.size()) != numel(shape))
    shape_error("Tensor", "data length " + std::to_string(data.size()) + " does not match", shape);
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value) {
  Tensor t(std::move(shape));
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_error("dim", "axis " + std::to_string(axis) + " out of range", shape());
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) shape_error("item", "tensor is not a single element", shape());
  return node_->data[0];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::grad() const {
  if (node_->grad.empty()) return Tensor(node_->shape);
  return Tensor(node_->shape, node_->grad);
}

namespace detail {

template <typename Scalar>
Tape<Scalar>*& active_tape() {
  thread_local Tape<Scalar>* tape = nullptr;
  return tape;
}

template Tape<float>*& active_tape<float>();
template Tape<double>*& active_tape<double>();

}  // namespace detail

template <typename Scalar>
Tape<Scalar>::Tape() : previous_(detail::active_tape<Scalar>()) {
  detail::active_tape<Scalar>() = this;
}

template <typename Scalar>
Tape<Scalar>::~Tape() {
  if (detail::active_tape<Scalar>() == this) detail::active_tape<Scalar>() = previous_;
}

template <typename Scalar>
Tape<Scalar>* Tape<Scalar>::active() {
  return detail::active_tape<Scalar>();
}

template <typename Scalar>
void Tape<Scalar>::backward(const Tensor<Scalar>& loss) {
  if (!loss.defined() || loss.size() != 1)
    shape_error("backward", "loss must be a scalar", loss.defined() ? loss.shape() : Shape{});
  if (!loss.requires_grad()) {
    clear();
    return;
  }
  loss.node()->grad_buffer()[0] += Scalar(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  clear();
}

template <typename Scalar>
NoGrad<Scalar>::NoGrad() : previous_(detail::active_tape<Scalar>()) {
  detail::active_tape<Scalar>() = nullptr;
}

template <typename Scalar>
NoGrad<Scalar>::~NoGrad() {
  detail::active_tape<Scalar>() = previous_;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Tape<Scalar>* tape = Tape<Scalar>::active();
  if (!tape) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class NoGrad<float>;
template class NoGrad<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace rsseg
