#include "brainage/parameters.hpp"

#include "brainage/error.hpp"

namespace brainage {

Array& ParameterStore::add(const std::string& name, Shape shape, ParamKind kind,
                           std::size_t fan_in) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  Parameter p;
  p.value = Array(std::move(shape), 0.0);
  p.kind = kind;
  p.fan_in = fan_in;
  return entries_.emplace(name, std::move(p)).first->second.value;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, p] : entries_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : entries_)
    if (p.kind != ParamKind::Buffer) n += p.value.size();
  return n;
}

Tensor ParamBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Parameter& p = store_.at(name);
  Tensor t = tape_.leaf(p.value, trainable_ && p.kind != ParamKind::Buffer);
  bound_.emplace(name, t);
  return t;
}

std::map<std::string, Array> ParamBinding::gradients() const {
  std::map<std::string, Array> out;
  for (const auto& [name, t] : bound_) {
    if (t.requires_grad()) out.emplace(name, tape_.grad(t));
  }
  return out;
}

void add_conv(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
              std::array<std::size_t, 3> kernel) {
  const std::size_t fan_in = in * kernel[0] * kernel[1] * kernel[2];
  store.add(prefix + ".weight", Shape{out, in, kernel[0], kernel[1], kernel[2]}, ParamKind::Weight,
            fan_in);
  store.add(prefix + ".bias", Shape{out}, ParamKind::Bias);
}

void add_fc(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out) {
  store.add(prefix + ".weight", Shape{in, out}, ParamKind::Weight, in);
  store.add(prefix + ".bias", Shape{out}, ParamKind::Bias);
}

void add_batch_norm(ParameterStore& store, const std::string& prefix, std::size_t channels) {
  store.add(prefix + ".gamma", Shape{channels}, ParamKind::NormScale).fill(1.0);
  store.add(prefix + ".beta", Shape{channels}, ParamKind::NormShift);
  store.add(prefix + ".running_mean", Shape{channels}, ParamKind::Buffer);
  store.add(prefix + ".running_var", Shape{channels}, ParamKind::Buffer).fill(1.0);
}

Tensor apply_fc(ParamBinding& params, const std::string& prefix, const Tensor& x) {
  return fully_connected(x, params(prefix + ".weight"), params(prefix + ".bias"));
}

Tensor apply_batch_norm(ParamBinding& params, const std::string& prefix, const Tensor& x) {
  ParameterStore& store = params.store();
  Array& mean = store.value(prefix + ".running_mean");
  Array& var = store.value(prefix + ".running_var");
  RunningStats stats{mean, var};
  BatchNormOptions options;
  options.mode = params.mode();
  Tensor y = batch_norm(x, params(prefix + ".gamma"), params(prefix + ".beta"), stats, options);
  if (options.mode == NormMode::Train) {
    mean = std::move(stats.mean);
    var = std::move(stats.var);
  }
  return y;
}

}  // namespace brainage
