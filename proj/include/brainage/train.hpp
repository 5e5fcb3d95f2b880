#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "brainage/data.hpp"
#include "brainage/losses.hpp"
#include "brainage/model.hpp"
#include "brainage/optim.hpp"

namespace brainage {

struct TrainConfig {
  double lr_stage1 = 1e-3;
  double lr_stage2 = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_decay = 1e-6;
  std::size_t batch_size = 32;
  double weight_decay = 5e-4;
  double lr_factor = 0.5;
  std::size_t lr_patience = 5;
  std::size_t early_stop_patience = 20;
  std::size_t max_epochs = 200;
  double augment_prob = 0.5;
  double max_translate = 10.0;  // voxels
  double max_rotate = 20.0;     // degrees
  double delta_d = 5.0;
  double lambda1 = 10.0;
  double lambda2 = 10.0;
  // Architecture.
  std::size_t n_layer = 5;
  std::size_t n_ini = 8;
  std::size_t kernel_size = 3;
  std::size_t se_reduction = 2;
  std::size_t head_hidden = 32;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  LossWeights loss_weights() const { return {lambda1, lambda2}; }
  /// Model configuration for volumes of extent (D, H, W).
  CascadeConfig cascade(std::array<std::size_t, 3> input_extent) const;
};

/// Plain key=value lines; blank lines and lines starting with '#' are
/// ignored. Unknown keys and malformed values throw ConfigError with the
/// line number.
TrainConfig parse_train_config(const std::string& text, const TrainConfig& defaults = {});
TrainConfig load_train_config(const std::filesystem::path& path, const TrainConfig& defaults = {});
/// Every field, one per line, in a form parse_train_config reads back
/// exactly.
std::string format_train_config(const TrainConfig& config);

/// One random spatial transform. Rotation is about the volume centre in the
/// x-y plane; the flip mirrors x.
struct AugmentParams {
  std::array<double, 3> translate{};  // x, y, z voxels
  double rotate_deg = 0.0;
  bool flip = false;
};

/// Draws whether to transform (probability augment_prob) and, if so, the
/// transform. Draw order: gate, translations x/y/z, angle, flip.
std::optional<AugmentParams> draw_augmentation(std::mt19937_64& rng, const TrainConfig& config);
/// Applies flip(rotate(p - c) + c + t) with nearest-neighbour sampling and
/// zero fill.
Volume apply_augmentation(const Volume& volume, const AugmentParams& params);
Volume augment(const Volume& volume, std::mt19937_64& rng, const TrainConfig& config);
/// Augments each sample of [N,1,D,H,W] in place, in sample order.
void augment_batch(Array& volumes, std::mt19937_64& rng, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_mae = 0.0;
  double lr = 0.0;  // base rate used during the epoch
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
};

/// Columns epoch,train_loss,val_mae,lr; one row per completed epoch.
void write_history_csv(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory read_history_csv(const std::filesystem::path& path);

struct TrainHooks {
  /// When set, the full training state is written here after every epoch.
  std::optional<std::filesystem::path> checkpoint;
  /// Continue from `checkpoint` when it exists.
  bool resume = false;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// He-initializes `net`, then zeroes the output weights and sets the output
/// bias so every prediction starts at the mean training age. It then
/// minimizes the total loss (plain MSE when both lambdas are 0) over
/// shuffled, augmented, drop-last batches with the plateau schedule and
/// early stopping. On return `net` holds the weights of
/// the epoch with the lowest validation MAE.
TrainHistory train_stage1(StageNetwork& net, const Dataset& train, const Dataset& val,
                          const TrainConfig& config, const Sorter* sorter,
                          const TrainHooks& hooks = {});

/// Trains the residual stage against the frozen first stage, which runs in
/// eval mode without gradients to produce D(y_hat_1). The second stage is
/// He-initialized except for its output layer, which starts at zero so the
/// untrained cascade predicts D(y_hat_1).
TrainHistory train_stage2(StageNetwork& net, const StageNetwork& stage1, const Dataset& train,
                          const Dataset& val, const TrainConfig& config, const Sorter* sorter,
                          const TrainHooks& hooks = {});

/// Validation MAE of each stage's prediction.
double stage1_mae(const StageNetwork& net, const Dataset& data);
double cascade_mae(const TsanModel& model, const Dataset& data);

}  // namespace brainage
