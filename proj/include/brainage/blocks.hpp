#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "brainage/parameters.hpp"

namespace brainage {

/// Depth/width of the multi-scale dense encoder.
struct ScaledDenseConfig {
  std::size_t n_layer = 5;       // number of layers (each halves the extent)
  std::size_t n_ini = 8;         // channels of the first layer
  std::size_t kernel_size = 3;   // d of the asymmetric convolutions, odd
  std::size_t se_reduction = 2;  // squeeze-and-excitation bottleneck ratio

  /// Output channels of layer i (0-based): 2^i * n_ini.
  std::size_t layer_channels(std::size_t i) const { return n_ini << i; }
  void validate() const;
};

/// Asymmetric convolution: d^3, d x 1 x 1, 1 x d x 1 and 1 x 1 x d kernels
/// with "same" padding, summed.
class AcBlock {
 public:
  enum class Branch { Cube, Depth, Height, Width };

  AcBlock(ParameterStore& store, std::string prefix, std::size_t in_channels,
          std::size_t out_channels, std::size_t kernel_size = 3);

  /// Evaluated as a single convolution with the branch kernels folded into
  /// one d^3 kernel; mathematically the sum of the four branches.
  Tensor forward(ParamBinding& params, const Tensor& x) const;
  /// One branch on its own, for verification.
  Tensor branch(ParamBinding& params, const Tensor& x, Branch which) const;

  std::string param_prefix(Branch which) const;

 private:
  std::string prefix_;
  std::size_t in_, out_, d_;
};

/// Squeeze-and-excitation channel gating.
class SeBlock {
 public:
  SeBlock(ParameterStore& store, std::string prefix, std::size_t channels, std::size_t reduction);
  Tensor forward(ParamBinding& params, const Tensor& x) const;
  std::size_t reduced_channels() const { return reduced_; }

 private:
  std::string prefix_;
  std::size_t channels_, reduced_;
};

/// One layer of the multi-scale dense encoder: pools every preceding map to
/// the scale of the newest one, concatenates them, and applies
/// [AC, BN, Elu, AC, BN, Elu, SE, maxpool 2].
class ScaledDenseLayer {
 public:
  ScaledDenseLayer(ParameterStore& store, const std::string& prefix,
                   std::size_t in_channels, std::size_t out_channels,
                   const ScaledDenseConfig& config);

  Tensor forward(ParamBinding& params, std::span<const Tensor> preceding) const;
  std::size_t out_channels() const { return out_; }

 private:
  std::string prefix_;
  std::size_t in_, out_;
  AcBlock ac1_, ac2_;
  SeBlock se_;
};

/// Stack of n_layer ScaledDense layers with full dense connectivity. Input
/// volumes are zero-padded up to a multiple of 2^n_layer per axis first.
class ScaledDenseBlock {
 public:
  ScaledDenseBlock(ParameterStore& store, const std::string& prefix,
                   const ScaledDenseConfig& config, std::size_t in_channels,
                   std::array<std::size_t, 3> input_extent);

  /// Returns the last feature map.
  Tensor forward(ParamBinding& params, const Tensor& input) const;
  /// Returns [padded input, x_1, ..., x_n].
  std::vector<Tensor> forward_all(ParamBinding& params, const Tensor& input) const;

  std::size_t out_channels() const;
  std::array<std::size_t, 3> padded_extent() const { return padded_; }
  std::array<std::size_t, 3> output_extent() const;
  const ScaledDenseConfig& config() const { return config_; }
  const std::vector<ScaledDenseLayer>& layers() const { return layers_; }

 private:
  ScaledDenseConfig config_;
  std::size_t in_channels_;
  std::array<std::size_t, 3> input_extent_, padded_;
  std::vector<ScaledDenseLayer> layers_;
};

}  // namespace brainage
