#include "brainage/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "brainage/error.hpp"

namespace brainage {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), values_(numel(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  if (numel(shape_) != values_.size()) {
    throw DimensionError("array shape " + to_string(shape_) + " does not hold " +
                         std::to_string(values_.size()) + " values");
  }
}

Array Array::scalar(double value) { return Array(Shape{1}, std::vector<double>{value}); }

Array Array::vector(std::vector<double> values) {
  Shape shape{values.size()};
  return Array(std::move(shape), std::move(values));
}

std::size_t Array::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape_));
  }
  return shape_[axis];
}

void Array::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

Array Array::reshaped(Shape shape) const {
  if (numel(shape) != values_.size()) {
    throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  Array out;
  out.shape_ = std::move(shape);
  out.values_ = values_;
  return out;
}

bool Array::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Array take_rows(const Array& a, std::span<const std::size_t> rows) {
  if (a.rank() == 0) throw DimensionError("take_rows: scalar input");
  Shape shape = a.shape();
  const std::size_t n = shape[0];
  const std::size_t stride = n == 0 ? 0 : a.size() / n;
  shape[0] = rows.size();
  Array out(shape);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= n) throw DimensionError("take_rows: row index out of range");
    std::copy_n(a.data() + rows[k] * stride, stride, out.data() + k * stride);
  }
  return out;
}

const Array& Tensor::value() const { return tape().node(*this).value; }

bool Tensor::requires_grad() const { return tape().node(*this).requires_grad; }

Tape& Tensor::tape() const {
  if (!tape_) throw PreconditionError("use of an unbound tensor handle");
  return *tape_;
}

double Tensor::item() const {
  const Array& v = value();
  if (v.size() != 1) {
    throw DimensionError("item() on tensor of shape " + to_string(v.shape()));
  }
  return v[0];
}

const Tape::Node& Tape::node(const Tensor& tensor) const {
  if (tensor.tape_ != this || tensor.id_ >= nodes_.size()) {
    throw PreconditionError("tensor does not belong to this tape");
  }
  return nodes_[tensor.id_];
}

Tensor Tape::leaf(Array value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::record(Array value, std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Tensor Tape::record(Array value, std::span<const Tensor> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.is_leaf = false;
  bool any = false;
  for (const Tensor& in : inputs) {
    any = any || node(in).requires_grad;
  }
  if (recording_ && any) {
    n.requires_grad = true;
    n.inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) n.inputs.push_back(in.id_);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

void Tape::backward(const Tensor& loss) {
  if (node(loss).value.size() != 1) {
    throw PreconditionError("backward requires a scalar loss, got shape " +
                            to_string(node(loss).value.shape()));
  }
  backward(loss, Array(node(loss).value.shape(), 1.0));
}

void Tape::backward(const Tensor& output, const Array& seed) {
  const Node& out = node(output);
  if (seed.shape() != out.value.shape()) {
    throw DimensionError("backward seed shape " + to_string(seed.shape()) +
                         " differs from output " + to_string(out.value.shape()));
  }
  if (backward_done_) {
    throw PreconditionError("backward already ran on this tape");
  }
  backward_done_ = true;
  nodes_[output.id_].grad = seed;

  std::vector<const Array*> in_values;
  std::vector<Array*> in_grads;
  for (std::size_t id = output.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t input : n.inputs) {
      Node& src = nodes_[input];
      in_values.push_back(&src.value);
      if (src.requires_grad) {
        if (src.grad.empty()) src.grad = Array(src.value.shape(), 0.0);
        in_grads.push_back(&src.grad);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    n.backward(GradContext{n.value, n.grad, in_values, in_grads});
    if (!n.is_leaf) n.grad = Array();
  }
  for (Node& n : nodes_) {
    if (n.is_leaf && n.requires_grad && n.grad.empty()) n.grad = Array(n.value.shape(), 0.0);
  }
}

const Array& Tape::grad(const Tensor& tensor) const {
  const Node& n = node(tensor);
  if (!n.is_leaf || !n.requires_grad) {
    throw PreconditionError("gradients are retained only for requires_grad leaves");
  }
  if (!backward_done_) throw PreconditionError("grad() called before backward()");
  return n.grad;
}

}  // namespace brainage
