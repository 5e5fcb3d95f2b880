#include "brainage/optim.hpp"

#include <cmath>
#include <random>

#include "brainage/error.hpp"

namespace brainage {

void he_init(ParameterStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : store.entries()) {
    switch (p.kind) {
      case ParamKind::Weight: {
        if (p.fan_in == 0) throw ConfigError("parameter " + name + " has no fan-in");
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
        for (double& v : p.value.values()) v = dist(rng);
        break;
      }
      case ParamKind::NormScale:
        p.value.fill(1.0);
        break;
      case ParamKind::Buffer:
        p.value.fill(name.ends_with("running_var") ? 1.0 : 0.0);
        break;
      case ParamKind::Bias:
      case ParamKind::NormShift:
        p.value.fill(0.0);
        break;
    }
  }
}

Adam::Adam(AdamConfig config) : config_(config) {
  if (!(config_.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0 && config_.beta2 >= 0.0 &&
        config_.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0,1)");
  }
  if (!(config_.decay >= 0.0) || !(config_.weight_decay >= 0.0)) {
    throw ConfigError("decay terms must be >= 0");
  }
}

double Adam::effective_lr() const {
  return config_.lr / (1.0 + config_.decay * static_cast<double>(t_));
}

void Adam::step(ParameterStore& store, const std::map<std::string, Array>& grads) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter " + name);
    if (g.shape() != store.value(name).shape()) {
      throw DimensionError("gradient shape mismatch for " + name);
    }
  }
  const double lr = effective_lr();
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Parameter& p = store.at(name);
    Array& m = m_.try_emplace(name, g.shape()).first->second;
    Array& v = v_.try_emplace(name, g.shape()).first->second;
    const double wd = p.kind == ParamKind::Weight ? config_.weight_decay : 0.0;
    double* x = p.value.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] + wd * x[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

void Adam::export_state(const std::string& prefix, TensorRecords& records) const {
  put_scalar(records, prefix + "t", static_cast<double>(t_));
  put_scalar(records, prefix + "lr", config_.lr);
  for (const auto& [name, m] : m_) records[prefix + "m." + name] = m;
  for (const auto& [name, v] : v_) records[prefix + "v." + name] = v;
}

void Adam::import_state(const TensorRecords& records, const std::string& prefix) {
  t_ = static_cast<std::uint64_t>(get_scalar(records, prefix + "t"));
  config_.lr = get_scalar(records, prefix + "lr");
  m_.clear();
  v_.clear();
  for (const auto& [key, a] : records) {
    if (key.starts_with(prefix + "m.")) m_[key.substr(prefix.size() + 2)] = a;
    if (key.starts_with(prefix + "v.")) v_[key.substr(prefix.size() + 2)] = a;
  }
}

double PlateauSchedule::update(double epoch_loss, double lr) {
  if (epoch_loss < best_) {
    best_ = epoch_loss;
    stale_ = 0;
    return lr;
  }
  if (++stale_ >= patience_) {
    stale_ = 0;
    return lr * factor_;
  }
  return lr;
}

bool EarlyStopping::update(double val_mae) {
  improved_ = val_mae < best_;
  if (improved_) {
    best_ = val_mae;
    stale_ = 0;
    return false;
  }
  return ++stale_ >= patience_;
}

}  // namespace brainage
