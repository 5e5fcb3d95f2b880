#pragma once

#include <deque>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <new>
#include <vector>

namespace brainage {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Cache-line aligned allocation. Vectorized kernels choose their summation
/// order from pointer alignment, so a fixed alignment keeps results
/// independent of heap layout.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using AlignedVector = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major array of 64-bit floats. Plain value type; owns its storage.
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);

  static Array scalar(double value);
  static Array vector(std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double> storage() const { return {values_.begin(), values_.end()}; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  void fill(double value);
  Array reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Array&, const Array&) = default;

 private:
  Shape shape_;
  AlignedVector values_;
};

/// Rows of `a` (along axis 0) in the given order.
Array take_rows(const Array& a, std::span<const std::size_t> rows);

class Tape;

/// Arguments handed to a node's backward function. `input_grads[i]` is null
/// when input i does not need a gradient.
struct GradContext {
  const Array& out_value;
  const Array& out_grad;
  std::span<const Array* const> inputs;
  std::span<Array* const> input_grads;
};

using BackwardFn = std::function<void(const GradContext&)>;

/// Handle to one node of a Tape. Cheap to copy; valid while the tape lives.
class Tensor {
 public:
  Tensor() = default;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  std::size_t node_id() const noexcept { return id_; }
  Tape& tape() const;
  bool valid() const noexcept { return tape_ != nullptr; }
  /// Value of a single-element tensor.
  double item() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only computation record for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is also a topological order,
/// so backward is a single reverse sweep. Gradients of interior nodes are
/// released once propagated; leaf gradients stay available through grad().
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Array value, bool requires_grad = false);
  Tensor constant(Array value) { return leaf(std::move(value), false); }

  /// Appends the result of an operation. The backward function is kept only
  /// when recording is enabled and some input requires a gradient.
  Tensor record(Array value, std::initializer_list<Tensor> inputs, BackwardFn backward);
  Tensor record(Array value, std::span<const Tensor> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every reachable node.
  void backward(const Tensor& loss);
  /// Vector-Jacobian product: seeds `output` with `seed` (same shape).
  void backward(const Tensor& output, const Array& seed);

  /// Gradient of a requires_grad leaf after backward (zeros when unreachable).
  const Array& grad(const Tensor& tensor) const;

  void set_recording(bool enabled) noexcept { recording_ = enabled; }
  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  friend class Tensor;

  struct Node {
    Array value;
    Array grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  const Node& node(const Tensor& tensor) const;

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  bool recording_ = true;
  bool backward_done_ = false;
};

/// RAII switch that disables recording on a tape for its lifetime.
class NoGradScope {
 public:
  explicit NoGradScope(Tape& tape) : tape_(tape), previous_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradScope() { tape_.set_recording(previous_); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

}  // namespace brainage
