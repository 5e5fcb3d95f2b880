#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "brainage/parameters.hpp"
#include "brainage/weights_io.hpp"

namespace brainage {

// Losses take predictions and targets of equal size (any shape, treated as
// flat vectors) and return a scalar tensor.

Tensor mae_loss(const Tensor& y_hat, const Tensor& y);
Tensor mse_loss(const Tensor& y_hat, const Tensor& y);
/// Mean over all i<j pairs of ((y_hat_i - y_hat_j) - (y_i - y_j))^2.
Tensor age_difference_loss(const Tensor& y_hat, const Tensor& y);

/// Ascending 1-based ranks; ties share the mean of their positions.
std::vector<double> fractional_rank(std::span<const double> values);
/// Pearson correlation with sample moments. Throws NumericError when either
/// input has zero variance.
double pcc(std::span<const double> a, std::span<const double> b);
/// Pearson correlation of fractional ranks.
double srcc(std::span<const double> a, std::span<const double> b);
/// 1 - 6 sum d^2 / (N (N^2 - 1)); valid only without ties.
double srcc_tie_free(std::span<const double> a, std::span<const double> b);
/// Sum of squared differences of exact fractional ranks.
double rank_loss_exact(std::span<const double> y_hat, std::span<const double> y);

/// Synthetic sequences for sorter training: equal parts uniform, clipped
/// Gaussian, sorted-plus-noise, and sequences with duplicated values.
/// Returns [count, length] raw values and [count, length] normalized ranks
/// (rank - 1) / (length - 1).
struct SortingData {
  Array values;
  Array targets;
};
SortingData make_sorting_data(std::size_t count, std::size_t length, std::uint64_t seed);

struct SorterTrainConfig {
  std::size_t n_sequences = 50000;  // training set size
  std::size_t epochs = 30;          // passes over the training set
  std::size_t batch_size = 64;
  std::size_t hidden = 32;
  std::size_t heldout = 2000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct SorterTrainReport;

/// Recurrent rank proxy: min-max normalization, one bidirectional LSTM
/// layer, and a linear projection to one normalized rank per position.

class Sorter {
 public:
  Sorter(std::size_t length, std::size_t hidden, std::uint64_t seed = 0);

  /// scores [B,N] -> approximate normalized ranks [B,N]; differentiable in
  /// the scores, parameters frozen.
  Tensor apply(const Tensor& scores) const;
  /// Same network on already normalized inputs, with parameters bound
  /// through `params` (used for training).
  Tensor forward_normalized(ParamBinding& params, const Tensor& normalized) const;

  /// Held-out mean |R(z) - Rank(z)| in rank units (1..N scale).
  double mean_rank_error(const SortingData& data) const;

  std::size_t length() const { return length_; }
  std::size_t hidden() const { return hidden_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  void save(const std::filesystem::path& path) const;
  static Sorter load(const std::filesystem::path& path);

 private:
  friend Sorter sorter_train(std::size_t, const SorterTrainConfig&, SorterTrainReport*,
                             const std::function<void(std::size_t, double)>&);

  std::size_t length_, hidden_;
  bool trained_ = false;
  ParameterStore store_;
};

struct SorterTrainReport {
  std::vector<double> epoch_loss;       // mean per-sequence squared error
  std::vector<double> heldout_error;    // mean rank error after each epoch
  double seconds = 0.0;
};

/// Trains a sorter for sequences of `length`. `progress` (optional) is
/// called after every epoch with (epoch, heldout rank error).
Sorter sorter_train(std::size_t length, const SorterTrainConfig& config,
                    SorterTrainReport* report = nullptr,
                    const std::function<void(std::size_t, double)>& progress = {});

/// Sum over positions of (R(y_hat) - R(y))^2 with R the sorter; the target
/// side is a constant.
Tensor rank_loss(const Tensor& y_hat, const Tensor& y, const Sorter& sorter);

struct LossWeights {
  double lambda1 = 10.0;
  double lambda2 = 10.0;
  void validate() const;
};

/// MSE + lambda1 * age difference + lambda2 * rank loss. The sorter may be
/// null only when lambda2 is 0.
Tensor total_loss(const Tensor& y_hat, const Tensor& y, const Sorter* sorter,
                  const LossWeights& weights);

}  // namespace brainage
