#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "brainage/ops.hpp"
#include "brainage/tensor.hpp"

namespace brainage {

/// Role of a named tensor; decides initialization and weight decay.
enum class ParamKind {
  Weight,     // convolution / FC / recurrent weight: He init, L2 decay
  Bias,       // zero init, no decay
  NormScale,  // batch-norm gamma: one init, no decay
  NormShift,  // batch-norm beta: zero init, no decay
  Buffer,     // running statistics: not trained
};

struct Parameter {
  Array value;
  ParamKind kind = ParamKind::Weight;
  std::size_t fan_in = 0;
};

/// Named collection of model tensors (ModelWeights). Iteration is in name
/// order so every traversal is deterministic.
class ParameterStore {
 public:
  Array& add(const std::string& name, Shape shape, ParamKind kind, std::size_t fan_in = 0);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Array& value(const std::string& name) { return at(name).value; }
  const Array& value(const std::string& name) const { return at(name).value; }

  std::map<std::string, Parameter>& entries() { return entries_; }
  const std::map<std::string, Parameter>& entries() const { return entries_; }
  std::vector<std::string> names() const;
  std::size_t trainable_count() const;

 private:
  std::map<std::string, Parameter> entries_;
};

/// Exposes store tensors as leaves of one tape. Leaves are created on first
/// use, so only parameters a forward pass touches appear on the tape.
class ParamBinding {
 public:
  ParamBinding(Tape& tape, ParameterStore& store, bool trainable, NormMode mode)
      : tape_(tape), store_(store), trainable_(trainable), mode_(mode) {}
  /// Frozen, eval-mode view; nothing is written back to the store.
  ParamBinding(Tape& tape, const ParameterStore& store)
      : tape_(tape), store_(const_cast<ParameterStore&>(store)), trainable_(false),
        mode_(NormMode::Eval) {}

  Tensor operator()(const std::string& name);

  Tape& tape() { return tape_; }
  ParameterStore& store() { return store_; }
  NormMode mode() const { return mode_; }

  /// Gradients of every bound trainable parameter, after tape.backward().
  std::map<std::string, Array> gradients() const;

 private:
  Tape& tape_;
  ParameterStore& store_;
  bool trainable_;
  NormMode mode_;
  std::map<std::string, Tensor> bound_;
};

/// Registers conv weights [out,in,kd,kh,kw] and bias [out] under prefix.
void add_conv(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
              std::array<std::size_t, 3> kernel);
/// Registers FC weight [in,out] and bias [out] under prefix.
void add_fc(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out);
/// Registers batch-norm gamma/beta and running statistics under prefix.
void add_batch_norm(ParameterStore& store, const std::string& prefix, std::size_t channels);

Tensor apply_fc(ParamBinding& params, const std::string& prefix, const Tensor& x);
/// Batch norm reading and updating the running statistics held in the store.
Tensor apply_batch_norm(ParamBinding& params, const std::string& prefix, const Tensor& x);

}  // namespace brainage
