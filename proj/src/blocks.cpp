#include "brainage/blocks.hpp"

#include <algorithm>
#include <string>

#include "brainage/error.hpp"

namespace brainage {
namespace {

// Folds the four AC branch kernels into one d^3 kernel. The 1-D branches
// sit on the centre lines of the cube, which is what "same" padding of the
// smaller kernels amounts to.
Tensor fold_ac_kernels(const Tensor& cube, const Tensor& depth, const Tensor& height,
                       const Tensor& width) {
  const Array& k = cube.value();
  const std::size_t pairs = k.dim(0) * k.dim(1);
  const std::size_t d = k.dim(2);
  const std::size_t c = d / 2;
  const std::size_t taps = d * d * d;
  Array out = k;
  for (std::size_t p = 0; p < pairs; ++p) {
    double* o = out.data() + p * taps;
    for (std::size_t t = 0; t < d; ++t) {
      o[(t * d + c) * d + c] += depth.value()[p * d + t];
      o[(c * d + t) * d + c] += height.value()[p * d + t];
      o[(c * d + c) * d + t] += width.value()[p * d + t];
    }
  }
  return cube.tape().record(
      std::move(out), {cube, depth, height, width}, [pairs, d, c, taps](const GradContext& ctx) {
        const Array& g = ctx.out_grad;
        if (Array* gc = ctx.input_grads[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gc)[i] += g[i];
        }
        for (std::size_t p = 0; p < pairs; ++p) {
          const double* gp = g.data() + p * taps;
          for (std::size_t t = 0; t < d; ++t) {
            if (Array* gd = ctx.input_grads[1]) (*gd)[p * d + t] += gp[(t * d + c) * d + c];
            if (Array* gh = ctx.input_grads[2]) (*gh)[p * d + t] += gp[(c * d + t) * d + c];
            if (Array* gw = ctx.input_grads[3]) (*gw)[p * d + t] += gp[(c * d + c) * d + t];
          }
        }
      });
}

}  // namespace

void ScaledDenseConfig::validate() const {
  if (n_layer < 2) throw ConfigError("ScaledDense needs n_layer >= 2");
  if (n_ini < 1) throw ConfigError("ScaledDense needs n_ini >= 1");
  if (kernel_size % 2 == 0) throw ConfigError("AC kernel size must be odd");
  if (se_reduction < 1) throw ConfigError("SE reduction must be >= 1");
}

AcBlock::AcBlock(ParameterStore& store, std::string prefix, std::size_t in_channels,
                 std::size_t out_channels, std::size_t kernel_size)
    : prefix_(std::move(prefix)), in_(in_channels), out_(out_channels), d_(kernel_size) {
  if (d_ % 2 == 0) throw ConfigError("AC kernel size must be odd");
  add_conv(store, param_prefix(Branch::Cube), in_, out_, {d_, d_, d_});
  add_conv(store, param_prefix(Branch::Depth), in_, out_, {d_, 1, 1});
  add_conv(store, param_prefix(Branch::Height), in_, out_, {1, d_, 1});
  add_conv(store, param_prefix(Branch::Width), in_, out_, {1, 1, d_});
}

std::string AcBlock::param_prefix(Branch which) const {
  switch (which) {
    case Branch::Cube: return prefix_ + ".cube";
    case Branch::Depth: return prefix_ + ".depth";
    case Branch::Height: return prefix_ + ".height";
    case Branch::Width: return prefix_ + ".width";
  }
  return prefix_;
}

Tensor AcBlock::forward(ParamBinding& params, const Tensor& x) const {
  const Tensor kernel =
      fold_ac_kernels(params(param_prefix(Branch::Cube) + ".weight"),
                      params(param_prefix(Branch::Depth) + ".weight"),
                      params(param_prefix(Branch::Height) + ".weight"),
                      params(param_prefix(Branch::Width) + ".weight"));
  const Tensor bias = add(add(params(param_prefix(Branch::Cube) + ".bias"),
                              params(param_prefix(Branch::Depth) + ".bias")),
                          add(params(param_prefix(Branch::Height) + ".bias"),
                              params(param_prefix(Branch::Width) + ".bias")));
  const std::size_t p = d_ / 2;
  return conv3d(x, kernel, bias, Conv3dOptions{1, {p, p, p}});
}

Tensor AcBlock::branch(ParamBinding& params, const Tensor& x, Branch which) const {
  const std::size_t p = d_ / 2;
  std::array<std::size_t, 3> pad{0, 0, 0};
  switch (which) {
    case Branch::Cube: pad = {p, p, p}; break;
    case Branch::Depth: pad = {p, 0, 0}; break;
    case Branch::Height: pad = {0, p, 0}; break;
    case Branch::Width: pad = {0, 0, p}; break;
  }
  const std::string name = param_prefix(which);
  return conv3d(x, params(name + ".weight"), params(name + ".bias"), Conv3dOptions{1, pad});
}

SeBlock::SeBlock(ParameterStore& store, std::string prefix, std::size_t channels,
                 std::size_t reduction)
    : prefix_(std::move(prefix)),
      channels_(channels),
      reduced_(std::max<std::size_t>(1, channels / reduction)) {
  add_fc(store, prefix_ + ".squeeze", channels_, reduced_);
  add_fc(store, prefix_ + ".excite", reduced_, channels_);
}

Tensor SeBlock::forward(ParamBinding& params, const Tensor& x) const {
  Tensor s = global_avg_pool(x);
  s = activation(apply_fc(params, prefix_ + ".squeeze", s), Activation::Elu);
  s = activation(apply_fc(params, prefix_ + ".excite", s), Activation::Sigmoid);
  return channel_scale(x, s);
}

ScaledDenseLayer::ScaledDenseLayer(ParameterStore& store, const std::string& prefix,
                                   std::size_t in_channels, std::size_t out_channels,
                                   const ScaledDenseConfig& config)
    : prefix_(prefix),
      in_(in_channels),
      out_(out_channels),
      ac1_(store, prefix + ".ac1", in_channels, out_channels, config.kernel_size),
      ac2_(store, prefix + ".ac2", out_channels, out_channels, config.kernel_size),
      se_(store, prefix + ".se", out_channels, config.se_reduction) {
  add_batch_norm(store, prefix + ".bn1", out_channels);
  add_batch_norm(store, prefix + ".bn2", out_channels);
}

Tensor ScaledDenseLayer::forward(ParamBinding& params, std::span<const Tensor> preceding) const {
  if (preceding.empty()) throw PreconditionError("ScaledDense layer needs at least one input");
  const Shape& newest = preceding.back().shape();
  std::vector<Tensor> resized;
  resized.reserve(preceding.size());
  for (std::size_t i = 0; i < preceding.size(); ++i) {
    const std::size_t factor = std::size_t{1} << (preceding.size() - 1 - i);
    const Shape& s = preceding[i].shape();
    for (int a = 2; a < 5; ++a) {
      if (s[a] != newest[a] * factor) {
        throw ConfigError("ScaledDense resize: extent " + to_string(s) + " is not " +
                          std::to_string(factor) + "x " + to_string(newest));
      }
    }
    resized.push_back(factor == 1 ? preceding[i] : maxpool3d(preceding[i], factor, factor));
  }
  Tensor x = concat_channels(resized);
  if (x.shape()[1] != in_) {
    throw DimensionError("ScaledDense layer " + prefix_ + " expects " + std::to_string(in_) +
                         " channels, got " + std::to_string(x.shape()[1]));
  }
  x = activation(apply_batch_norm(params, prefix_ + ".bn1", ac1_.forward(params, x)),
                 Activation::Elu);
  x = activation(apply_batch_norm(params, prefix_ + ".bn2", ac2_.forward(params, x)),
                 Activation::Elu);
  x = se_.forward(params, x);
  return maxpool3d(x, 2, 2);
}

ScaledDenseBlock::ScaledDenseBlock(ParameterStore& store, const std::string& prefix,
                                   const ScaledDenseConfig& config, std::size_t in_channels,
                                   std::array<std::size_t, 3> input_extent)
    : config_(config), in_channels_(in_channels), input_extent_(input_extent) {
  config_.validate();
  const std::size_t unit = std::size_t{1} << config_.n_layer;
  for (int a = 0; a < 3; ++a) {
    if (input_extent[a] < unit) {
      throw ConfigError("input extent " + std::to_string(input_extent[a]) +
                        " cannot support " + std::to_string(config_.n_layer) + " halvings");
    }
    padded_[a] = (input_extent[a] + unit - 1) / unit * unit;
  }
  std::size_t channels = in_channels;
  for (std::size_t i = 0; i < config_.n_layer; ++i) {
    const std::size_t out = config_.layer_channels(i);
    layers_.emplace_back(store, prefix + ".layer" + std::to_string(i + 1), channels, out, config_);
    channels += out;
  }
}

std::size_t ScaledDenseBlock::out_channels() const { return layers_.back().out_channels(); }

std::array<std::size_t, 3> ScaledDenseBlock::output_extent() const {
  const std::size_t unit = std::size_t{1} << config_.n_layer;
  return {padded_[0] / unit, padded_[1] / unit, padded_[2] / unit};
}

std::vector<Tensor> ScaledDenseBlock::forward_all(ParamBinding& params, const Tensor& input) const {
  const Shape& s = input.shape();
  if (s.size() != 5 || s[1] != in_channels_ || s[2] != input_extent_[0] ||
      s[3] != input_extent_[1] || s[4] != input_extent_[2]) {
    throw DimensionError("ScaledDense block expects [N," + std::to_string(in_channels_) + "," +
                         std::to_string(input_extent_[0]) + "," +
                         std::to_string(input_extent_[1]) + "," +
                         std::to_string(input_extent_[2]) + "], got " + to_string(s));
  }
  std::vector<Tensor> maps{pad_spatial(input, padded_)};
  for (const ScaledDenseLayer& layer : layers_) maps.push_back(layer.forward(params, maps));
  return maps;
}

Tensor ScaledDenseBlock::forward(ParamBinding& params, const Tensor& input) const {
  return forward_all(params, input).back();
}

}  // namespace brainage
