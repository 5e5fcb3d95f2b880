#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <random>
#include <span>
#include <vector>

#include "brainage/gradcheck.hpp"
#include "brainage/parameters.hpp"
#include "brainage/tensor.hpp"

namespace brainage::testing {

inline Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Array a(std::move(shape));
  for (double& v : a.values()) v = dist(rng);
  return a;
}

using GraphBuilder = std::function<Tensor(Tape&, std::span<const Tensor>)>;

/// Largest relative error, over all inputs, between the backward pass and
/// central differences of the scalar sum(projection * output).
inline double max_gradient_error(const GraphBuilder& build, const std::vector<Array>& inputs,
                                 std::mt19937_64& rng, double eps = 1e-5) {
  Array projection;
  {
    Tape tape;
    std::vector<Tensor> leaves;
    for (const Array& a : inputs) leaves.push_back(tape.constant(a));
    projection = random_array(build(tape, leaves).shape(), rng, 0.5, 1.5);
  }
  auto evaluate = [&](std::size_t which, const Array& replacement) {
    Tape tape;
    std::vector<Tensor> leaves;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      leaves.push_back(tape.constant(k == which ? replacement : inputs[k]));
    }
    const Array& out = build(tape, leaves).value();
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += projection[i] * out[i];
    return s;
  };
  Tape tape;
  std::vector<Tensor> leaves;
  for (const Array& a : inputs) leaves.push_back(tape.leaf(a, true));
  tape.backward(build(tape, leaves), projection);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Array numeric = finite_difference_gradient(
        [&](const Array& x) { return evaluate(k, x); }, inputs[k], eps);
    worst = std::max(worst, relative_error(tape.grad(leaves[k]), numeric));
  }
  return worst;
}

/// Fills every trainable tensor of the store with uniform noise; batch-norm
/// scales stay near one.
inline void randomize(ParameterStore& store, std::mt19937_64& rng, double scale = 0.5) {
  for (auto& [name, p] : store.entries()) {
    if (p.kind == ParamKind::Buffer) continue;
    const double centre = p.kind == ParamKind::NormScale ? 1.0 : 0.0;
    p.value = random_array(p.value.shape(), rng, centre - scale, centre + scale);
  }
}

using ParamForward = std::function<Tensor(ParamBinding&)>;

/// Largest relative error between backward-pass parameter gradients and
/// central differences of sum(projection * output), checking at most
/// `samples` coordinates per tensor. Forward runs in eval mode unless `mode`
/// says otherwise; buffers are restored between evaluations.
inline double max_parameter_gradient_error(ParameterStore& store, const ParamForward& forward,
                                           std::mt19937_64& rng, NormMode mode = NormMode::Eval,
                                           std::size_t samples = 6, double eps = 1e-5) {
  const ParameterStore pristine = store;
  Array projection;
  std::map<std::string, Array> analytic;
  {
    Tape tape;
    ParamBinding params(tape, store, true, mode);
    const Tensor out = forward(params);
    projection = random_array(out.shape(), rng, 0.5, 1.5);
    tape.backward(out, projection);
    analytic = params.gradients();
  }
  auto evaluate = [&]() {
    const ParameterStore saved = store;
    Tape tape;
    ParamBinding params(tape, store, false, mode);
    const Array& out = forward(params).value();
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += projection[i] * out[i];
    for (auto& [name, p] : store.entries())
      if (p.kind == ParamKind::Buffer) p.value = saved.value(name);
    return s;
  };
  store = pristine;
  double worst = 0.0;
  for (const auto& [name, grad] : analytic) {
    Array& value = store.value(name);
    const std::size_t n = value.size();
    std::vector<double> a, b;
    for (std::size_t k = 0; k < std::min(n, samples); ++k) {
      const std::size_t i = samples >= n ? k : (k * 7919 + 13) % n;
      const double original = value[i];
      value[i] = original + eps;
      const double up = evaluate();
      value[i] = original - eps;
      const double down = evaluate();
      value[i] = original;
      a.push_back(grad[i]);
      b.push_back((up - down) / (2.0 * eps));
    }
    Array av(Shape{a.size()}), bv(Shape{b.size()});
    std::copy(a.begin(), a.end(), av.values().begin());
    std::copy(b.begin(), b.end(), bv.values().begin());
    // Conv biases feeding batch norm in train mode have zero gradient, so
    // compare against an absolute floor.
    worst = std::max(worst, relative_error(av, bv, 1e-3));
  }
  store = pristine;
  return worst;
}

}  // namespace brainage::testing
