#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>

#include "brainage/tensor.hpp"

namespace brainage {

// ---------------------------------------------------------------------------
// Volumetric primitives. Feature maps are laid out [N, C, D, H, W], W fastest.
// ---------------------------------------------------------------------------

struct Conv3dOptions {
  std::size_t stride = 1;
  std::array<std::size_t, 3> padding{0, 0, 0};  // D, H, W
};

/// Cross-correlation of input [N,Cin,D,H,W] with kernel [Cout,Cin,kd,kh,kw]
/// plus bias [Cout]. Zero padding, equal stride on all axes.
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv3dOptions& options = {});

/// Max pooling with floor semantics. Ties route the gradient to the first
/// maximal element in scan order (W fastest).
Tensor maxpool3d(const Tensor& input, std::array<std::size_t, 3> window,
                 std::array<std::size_t, 3> stride);
Tensor maxpool3d(const Tensor& input, std::size_t window, std::size_t stride);

/// [N,C,D,H,W] -> [N,C], mean over all voxels of each channel.
Tensor global_avg_pool(const Tensor& input);

/// Zero-pads the three spatial axes of [N,C,D,H,W] to `extent`. The extra
/// voxels are split evenly, the odd one going after.
Tensor pad_spatial(const Tensor& input, std::array<std::size_t, 3> extent);

enum class NormMode { Train, Eval };

struct RunningStats {
  Array mean;
  Array var;
};

struct BatchNormOptions {
  NormMode mode = NormMode::Train;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel batch normalization of [N,C,...]. Train mode normalizes with
/// batch statistics (biased variance) and folds them into `stats` with the
/// given momentum (unbiased variance); eval mode uses `stats`.
Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  RunningStats& stats, const BatchNormOptions& options);

enum class Activation { Identity, Relu, Elu, Sigmoid, Tanh };

/// Elementwise activation; elu uses alpha = 1.
Tensor activation(const Tensor& input, Activation kind);

/// Concatenates along axis 1. All other extents must agree.
Tensor concat_channels(std::span<const Tensor> inputs);
Tensor concat_channels(std::initializer_list<Tensor> inputs);

/// Scales every voxel of channel c in sample n by gate[n,c].
Tensor channel_scale(const Tensor& input, const Tensor& gate);

/// x [N,F] * weight [F,G] + bias [G].
Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Parameters of one LSTM direction, gate order (input, forget, cell, output).
struct LstmDirection {
  Tensor w_input;   // [F, 4H]
  Tensor w_hidden;  // [H, 4H]
  Tensor bias;      // [4H]
};

/// Runs an LSTM over inputs [T,N,F] from zero initial state. With a reverse
/// direction the result is [T,N,2H], forward states first.
Tensor lstm_sequence(const Tensor& inputs, const LstmDirection& forward,
                     const std::optional<LstmDirection>& reverse = std::nullopt);

// ---------------------------------------------------------------------------
// Elementwise and reduction helpers used by heads and losses.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor square(const Tensor& a);
/// |a| with subgradient 0 at 0.
Tensor abs(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Swaps the first two axes: [A,B,...] -> [B,A,...].
Tensor transpose01(const Tensor& a);

/// For a vector v of length N returns the N(N-1)/2 differences v_i - v_j,
/// i < j, in row-major pair order.
Tensor pairwise_differences(const Tensor& v);

/// Row-wise min-max scaling of [B,N] to [0,1]; constant rows map to 0.5.
Tensor minmax_normalize(const Tensor& rows);

}  // namespace brainage
