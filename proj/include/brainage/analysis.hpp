#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace brainage {

/// Estimation metrics; a correlation is empty when one of its inputs has
/// zero variance.
struct EstimationReport {
  double mae = 0.0;
  std::optional<double> pcc_age, srcc_age;  // y_hat vs y
  std::optional<double> pcc_gap, srcc_gap;  // (y_hat - y) vs y
};

/// Throws PreconditionError for fewer than 2 samples and DimensionError for
/// a length mismatch.
EstimationReport estimation_report(std::span<const double> y_hat, std::span<const double> y);

/// Linear age bias of the gap: y_hat - y = alpha * y + beta.
struct BiasModel {
  double alpha = 0.0;
  double beta = 0.0;
};

/// Ordinary least squares on training predictions. Throws
/// PreconditionError when y has zero variance or fewer than 2 samples.
BiasModel bias_fit(std::span<const double> y_hat, std::span<const double> y);
/// y_hat - (alpha * y + beta); needs the chronological age.
double bias_apply(double y_hat, double y, const BiasModel& model);

/// "alpha=...\nbeta=...\n" with round-trip precision.
void save_bias_model(const BiasModel& model, const std::filesystem::path& path);
BiasModel load_bias_model(const std::filesystem::path& path);

/// Soft-margin RBF SVM on a scalar feature. Labels are +1 (patients) and -1
/// (controls); per-class penalties are C * N / (2 * N_class).
struct SvmModel {
  std::vector<double> support;  // feature values with alpha > 0
  std::vector<double> coef;     // alpha_i * label_i for each support value
  double bias = 0.0;
  double gamma = 1.0;
  double c = 1.0;
  double weight_negative = 1.0, weight_positive = 1.0;
  double dual_objective = 0.0;  // sum(alpha) - 1/2 sum alpha alpha y y K
  std::size_t iterations = 0;
  double kkt_gap = 0.0;  // maximal violation at termination
};

struct SvmOptions {
  double tol = 1e-3;
  std::size_t max_passes = 100;  // iteration cap = max_passes * N
};

/// Sequential minimal optimization with maximal-violating-pair working sets.
/// Throws PreconditionError for single-class input or non-positive C/gamma.
SvmModel svm_train(std::span<const double> x, std::span<const int> labels, double c, double gamma,
                   const SvmOptions& options = {});
/// Same solver with a caller-supplied kernel matrix K[i*n + j] of the
/// training samples (used to share kernels across folds).
SvmModel svm_train_kernel(std::span<const double> x, std::span<const int> labels,
                          std::span<const double> kernel, double c, double gamma,
                          const SvmOptions& options = {});

/// sum coef_i K(support_i, x) + bias.
double svm_decision(const SvmModel& model, double x);

/// Mann-Whitney: P(score+ > score-) + 0.5 P(tie) over all pairs.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

struct BinaryMetrics {
  double acc = 0.0, sen = 0.0, spe = 0.0;
};

/// Predicted positive when score > threshold; sensitivity on the +1 class,
/// specificity on the -1 class.
BinaryMetrics classification_metrics(std::span<const double> scores, std::span<const int> labels,
                                     double threshold = 0.0);

struct SvmGrid {
  std::vector<double> c;
  std::vector<double> gamma;
  /// C in {1,5} x {1e-2..1e2}, gamma in {1,5} x {1e-4..1}.
  static SvmGrid standard();
};

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

struct ClassificationReport {
  MeanStd auc, acc, sen, spe;
  std::size_t evaluations = 0;  // outer folds x repeats
};

/// Fold index per sample; each class is shuffled and dealt round-robin.
std::vector<std::size_t> stratified_folds(std::span<const int> labels, std::size_t k,
                                          std::uint64_t seed);

struct NestedCvOptions {
  std::size_t outer_k = 5;
  std::size_t inner_k = 5;
  std::size_t repeats = 100;
  std::uint64_t seed = 0;
  SvmOptions svm;
};

/// Repeated nested stratified CV: the inner folds pick (C, gamma) by mean
/// AUC (ties to the smallest C, then gamma), the outer fold scores the
/// refit model. Statistics are over all outer folds of all repeats.
ClassificationReport nested_cv(std::span<const double> x, std::span<const int> labels,
                               const SvmGrid& grid, const NestedCvOptions& options = {});

}  // namespace brainage
