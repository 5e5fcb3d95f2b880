#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>

#include "brainage/parameters.hpp"
#include "brainage/weights_io.hpp"

namespace brainage {

/// Weights ~ N(0, 2/fan_in), biases and BN shifts 0, BN scales 1. Buffers
/// are reset to their neutral values. Tensors are visited in name order.
void he_init(ParameterStore& store, std::uint64_t seed);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 1e-6;         // lr_t = lr / (1 + decay * t)
  double weight_decay = 0.0;   // L2 on ParamKind::Weight tensors, added to the gradient
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {});

  /// One update of every tensor in `grads`. Throws NumericError naming the
  /// first non-finite gradient before touching any parameter.
  void step(ParameterStore& store, const std::map<std::string, Array>& grads);

  /// Base rate (before the per-step decay); changed by the plateau schedule.
  double lr() const { return config_.lr; }
  void set_lr(double lr) { config_.lr = lr; }
  /// Rate the next step will use.
  double effective_lr() const;
  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

  void export_state(const std::string& prefix, TensorRecords& records) const;
  void import_state(const TensorRecords& records, const std::string& prefix);

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::map<std::string, Array> m_, v_;
};

/// Multiplies the learning rate by `factor` once the training loss has not
/// improved on its best for `patience` consecutive epochs.
class PlateauSchedule {
 public:
  PlateauSchedule(double factor = 0.5, std::size_t patience = 5)
      : factor_(factor), patience_(patience) {}

  /// Returns the rate to use from the next epoch on.
  double update(double epoch_loss, double lr);

  double best() const { return best_; }
  std::size_t stale_epochs() const { return stale_; }
  void restore(double best, std::size_t stale) {
    best_ = best;
    stale_ = stale;
  }

 private:
  double factor_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
};

/// Stops after `patience` consecutive epochs without a new best validation
/// MAE.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience = 20) : patience_(patience) {}

  /// Returns true when training should stop.
  bool update(double val_mae);
  /// True when the last update produced a new best.
  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t stale_epochs() const { return stale_; }
  void restore(double best, std::size_t stale) {
    best_ = best;
    stale_ = stale;
  }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  bool improved_ = false;
};

}  // namespace brainage
