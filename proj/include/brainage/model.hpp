#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "brainage/blocks.hpp"
#include "brainage/data.hpp"
#include "brainage/parameters.hpp"
#include "brainage/weights_io.hpp"

namespace brainage {

/// One-hot rows [N,2]: male = [1,0], female = [0,1].
Array sex_one_hot(std::span<const Sex> sexes);

/// Round(y/delta)*delta with halves rounded away from zero; identity for
/// delta = 0.
double discretize(double y_hat, double delta_d);

struct Theorem1Report {
  bool applicable = false;        // delta_d >= |y - y_hat|
  double discretized_gap = 0.0;   // |D(y) - D(y_hat)|
  double estimate_error = 0.0;    // |D(y_hat) - y|
  bool gap_holds = true;          // gap is 0 or delta_d
  bool bound_holds = true;        // error <= delta/2 + |y_hat - y| <= 3 delta / 2
  bool holds() const { return gap_holds && bound_holds; }
};
Theorem1Report theorem1_check(double y, double y_hat, double delta_d);

struct CascadeConfig {
  double delta_d = 5.0;
  ScaledDenseConfig backbone;
  std::size_t head_hidden = 32;
  double age_scale = 100.0;
  /// The first-stage head emits relu(output_scale * FC(h)) and the second
  /// output_scale * FC(h), so both output units are output_scale years.
  double output_scale = 100.0;
  /// Volume extent in tensor order (D, H, W) = (dz, dy, dx).
  std::array<std::size_t, 3> input_extent{32, 40, 32};

  void validate() const;
};

enum class Stage { First, Second };

/// One cascade stage: ScaledDense backbone, global pooling, and a two-layer
/// head over [features, sex, (d1 / age_scale)].
class StageNetwork {
 public:
  StageNetwork(Stage stage, const CascadeConfig& config);

  /// volume [N,1,D,H,W], sex [N,2], d1 [N,1] (second stage only).
  /// First stage returns y_hat [N,1]; second stage returns the residual.
  Tensor forward(ParamBinding& params, const Tensor& volume, const Tensor& sex,
                 const std::optional<Tensor>& d1 = std::nullopt) const;

  Stage stage() const { return stage_; }
  const CascadeConfig& config() const { return config_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const ScaledDenseBlock& backbone() const { return backbone_; }

 private:
  CascadeConfig config_;
  Stage stage_;
  ParameterStore store_;
  ScaledDenseBlock backbone_;
};

struct BrainAgeEstimate {
  double y_hat_stage1 = 0.0;
  double d_stage1 = 0.0;
  double residual = 0.0;
  double y_hat = 0.0;
  std::optional<double> y;
  std::optional<double> gap() const {
    if (!y) return std::nullopt;
    return y_hat - *y;
  }
};

/// A full two-stage model.
struct TsanModel {
  explicit TsanModel(const CascadeConfig& config)
      : stage1(Stage::First, config), stage2(Stage::Second, config) {}

  StageNetwork stage1;
  StageNetwork stage2;
  const CascadeConfig& config() const { return stage1.config(); }
};

/// First-stage estimates in eval mode, batched.
std::vector<double> first_stage_predict(const StageNetwork& net, const Array& volumes,
                                        std::span<const Sex> sexes, std::size_t batch_size = 16);

/// Both stages in eval mode. volumes is [N,1,D,H,W].
std::vector<BrainAgeEstimate> tsan_predict(const TsanModel& model, const Array& volumes,
                                           std::span<const Sex> sexes,
                                           std::size_t batch_size = 16);

/// Mean of member estimates, field by field.
std::vector<BrainAgeEstimate> ensemble_predict(std::span<const TsanModel* const> models,
                                               const Array& volumes, std::span<const Sex> sexes,
                                               std::size_t batch_size = 16);

/// Stores config under "config." and the two stages under "stage1."/"stage2.".
void save_model(const std::filesystem::path& path, const TsanModel& model);
TsanModel load_model(const std::filesystem::path& path);

void export_config(const CascadeConfig& config, TensorRecords& records);
CascadeConfig import_config(const TensorRecords& records);

}  // namespace brainage
