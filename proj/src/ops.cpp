#include "brainage/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "brainage/error.hpp"

namespace brainage {
namespace {

void require_rank(const Array& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(a.shape()));
  }
}

void require_same_shape(const Array& a, const Array& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

// Four independent accumulators keep the reduction vectorizable without
// reassociation flags, and the summation order fixed.
inline double dot(const double* __restrict a, const double* __restrict b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* __restrict x, double* __restrict y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Extent3 {
  std::size_t d, h, w;
  std::size_t voxels() const { return d * h * w; }
};

Extent3 spatial(const Array& a) { return {a.dim(2), a.dim(3), a.dim(4)}; }

// Range of output positions o with 0 <= o*stride + k - pad < in.
struct Span1 {
  std::size_t lo, hi;
};

Span1 valid_outputs(std::size_t in, std::size_t out, std::size_t k, std::size_t pad,
                    std::size_t stride) {
  // o*stride >= pad - k  and  o*stride <= in - 1 + pad - k
  const long long lo_num = static_cast<long long>(pad) - static_cast<long long>(k);
  const long long hi_num =
      static_cast<long long>(in) - 1 + static_cast<long long>(pad) - static_cast<long long>(k);
  const long long s = static_cast<long long>(stride);
  long long lo = lo_num <= 0 ? 0 : (lo_num + s - 1) / s;
  long long hi = hi_num < 0 ? -1 : hi_num / s;
  hi = std::min<long long>(hi, static_cast<long long>(out) - 1);
  if (hi < lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi + 1)};
}

struct ConvGeometry {
  std::size_t n, cin, cout;
  Extent3 in, out, k;
  std::array<std::size_t, 3> pad;
  std::size_t stride;
  std::vector<Span1> ranges_d, ranges_h, ranges_w;  // per kernel offset
};

ConvGeometry conv_geometry(const Array& input, const Array& kernel, const Array& bias,
                           const Conv3dOptions& opt) {
  require_rank(input, 5, "conv3d input");
  require_rank(kernel, 5, "conv3d kernel");
  require_rank(bias, 1, "conv3d bias");
  if (opt.stride < 1) throw PreconditionError("conv3d: stride must be >= 1");
  ConvGeometry g;
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.cout = kernel.dim(0);
  if (kernel.dim(1) != g.cin) {
    throw DimensionError("conv3d: input has " + std::to_string(g.cin) +
                         " channels but kernel expects " + std::to_string(kernel.dim(1)));
  }
  if (bias.dim(0) != g.cout) throw DimensionError("conv3d: bias length differs from Cout");
  g.in = spatial(input);
  g.k = {kernel.dim(2), kernel.dim(3), kernel.dim(4)};
  g.pad = opt.padding;
  g.stride = opt.stride;
  auto out_extent = [&](std::size_t in, std::size_t k, std::size_t pad) {
    if (k > in + 2 * pad) {
      throw DimensionError("conv3d: kernel extent " + std::to_string(k) +
                           " exceeds padded input extent " + std::to_string(in + 2 * pad));
    }
    return (in + 2 * pad - k) / opt.stride + 1;
  };
  g.out = {out_extent(g.in.d, g.k.d, g.pad[0]), out_extent(g.in.h, g.k.h, g.pad[1]),
           out_extent(g.in.w, g.k.w, g.pad[2])};
  for (std::size_t k = 0; k < g.k.d; ++k)
    g.ranges_d.push_back(valid_outputs(g.in.d, g.out.d, k, g.pad[0], g.stride));
  for (std::size_t k = 0; k < g.k.h; ++k)
    g.ranges_h.push_back(valid_outputs(g.in.h, g.out.h, k, g.pad[1], g.stride));
  for (std::size_t k = 0; k < g.k.w; ++k)
    g.ranges_w.push_back(valid_outputs(g.in.w, g.out.w, k, g.pad[2], g.stride));
  return g;
}

inline std::size_t in_index(std::size_t o, std::size_t k, std::size_t pad, std::size_t stride) {
  return o * stride + k - pad;
}

// Visits every (kernel tap, output row) pair of one sample; fn receives the
// column-matrix row, the output row offset, the input row offset (or npos
// when the row falls in the padding) and the kernel x offset.
template <typename Fn>
void for_each_tap_row(const ConvGeometry& g, Fn&& fn) {
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t r = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci)
    for (std::size_t kz = 0; kz < g.k.d; ++kz)
      for (std::size_t ky = 0; ky < g.k.h; ++ky)
        for (std::size_t kx = 0; kx < g.k.w; ++kx, ++r) {
          const Span1 rz = g.ranges_d[kz], ry = g.ranges_h[ky];
          for (std::size_t oz = 0; oz < g.out.d; ++oz)
            for (std::size_t oy = 0; oy < g.out.h; ++oy) {
              const std::size_t orow = (oz * g.out.h + oy) * g.out.w;
              if (oz < rz.lo || oz >= rz.hi || oy < ry.lo || oy >= ry.hi) {
                fn(r, orow, npos, kx);
                continue;
              }
              const std::size_t iz = in_index(oz, kz, g.pad[0], g.stride);
              const std::size_t iy = in_index(oy, ky, g.pad[1], g.stride);
              fn(r, orow, (ci * g.in.d + iz) * g.in.h * g.in.w + iy * g.in.w, kx);
            }
        }
}

// cols[K, P] with K = Cin*kd*kh*kw taps and P output voxels.
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t p = g.out.voxels();
  for_each_tap_row(g, [&](std::size_t r, std::size_t orow, std::size_t irow, std::size_t kx) {
    double* dst = cols + r * p + orow;
    if (irow == static_cast<std::size_t>(-1)) {
      std::fill_n(dst, g.out.w, 0.0);
      return;
    }
    const Span1 rx = g.ranges_w[kx];
    std::fill_n(dst, rx.lo, 0.0);
    const double* src = x + irow + kx - g.pad[2];
    if (g.stride == 1) {
      std::copy(src + rx.lo, src + rx.hi, dst + rx.lo);
    } else {
      for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) dst[ox] = src[ox * g.stride];
    }
    std::fill(dst + std::max(rx.lo, rx.hi), dst + g.out.w, 0.0);
  });
}

// Adjoint of im2col: scatters column gradients back onto the input.
void col2im(const ConvGeometry& g, const double* cols, double* gx) {
  const std::size_t p = g.out.voxels();
  for_each_tap_row(g, [&](std::size_t r, std::size_t orow, std::size_t irow, std::size_t kx) {
    if (irow == static_cast<std::size_t>(-1)) return;
    const Span1 rx = g.ranges_w[kx];
    const double* src = cols + r * p + orow;
    double* dst = gx + irow + kx - g.pad[2];
    if (g.stride == 1) {
      for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) dst[ox] += src[ox];
    } else {
      for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) dst[ox * g.stride] += src[ox];
    }
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

// Per sample: Y[Cout, P] = W[Cout, K] * cols[K, P] + b.
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv3dOptions& options) {
  const ConvGeometry g = conv_geometry(input.value(), kernel.value(), bias.value(), options);
  Array out(Shape{g.n, g.cout, g.out.d, g.out.h, g.out.w});
  const std::size_t taps = g.cin * g.k.voxels();
  const std::size_t p = g.out.voxels();
  const std::size_t in_sample = g.cin * g.in.voxels();
  {
    const ConstMatMap w(kernel.value().data(), g.cout, taps);
    const Eigen::Map<const Eigen::VectorXd> b(bias.value().data(), g.cout);
    RowMat cols(taps, p);
    for (std::size_t n = 0; n < g.n; ++n) {
      im2col(g, input.value().data() + n * in_sample, cols.data());
      MatMap y(out.data() + n * g.cout * p, g.cout, p);
      y.noalias() = w * cols;
      y.colwise() += b;
    }
  }
  return input.tape().record(
      std::move(out), {input, kernel, bias}, [g, taps, p, in_sample](const GradContext& ctx) {
        const ConstMatMap w(ctx.inputs[1]->data(), g.cout, taps);
        Array* gx = ctx.input_grads[0];
        Array* gw = ctx.input_grads[1];
        Array* gb = ctx.input_grads[2];
        RowMat cols, dcols;
        if (gw) cols.resize(taps, p);
        if (gx) dcols.resize(taps, p);
        for (std::size_t n = 0; n < g.n; ++n) {
          const ConstMatMap gy(ctx.out_grad.data() + n * g.cout * p, g.cout, p);
          if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), g.cout) += gy.rowwise().sum();
          if (gw) {
            im2col(g, ctx.inputs[0]->data() + n * in_sample, cols.data());
            MatMap(gw->data(), g.cout, taps).noalias() += gy * cols.transpose();
          }
          if (gx) {
            dcols.noalias() = w.transpose() * gy;
            col2im(g, dcols.data(), gx->data() + n * in_sample);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

Tensor maxpool3d(const Tensor& input, std::array<std::size_t, 3> window,
                 std::array<std::size_t, 3> stride) {
  const Array& x = input.value();
  require_rank(x, 5, "maxpool3d");
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1 || stride[a] < 1) {
      throw PreconditionError("maxpool3d: window and stride must be >= 1");
    }
    if (window[a] > x.dim(2 + a)) {
      throw DimensionError("maxpool3d: window " + std::to_string(window[a]) +
                           " larger than extent " + std::to_string(x.dim(2 + a)));
    }
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  const Extent3 in = spatial(x);
  const Extent3 out{(in.d - window[0]) / stride[0] + 1, (in.h - window[1]) / stride[1] + 1,
                    (in.w - window[2]) / stride[2] + 1};
  Array y(Shape{n, c, out.d, out.h, out.w});
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const std::size_t base = nc * in.voxels();
    for (std::size_t oz = 0; oz < out.d; ++oz)
      for (std::size_t oy = 0; oy < out.h; ++oy)
        for (std::size_t ox = 0; ox < out.w; ++ox, ++o) {
          std::size_t best = base + ((oz * stride[0]) * in.h + oy * stride[1]) * in.w +
                             ox * stride[2];
          double best_v = x[best];
          for (std::size_t kz = 0; kz < window[0]; ++kz)
            for (std::size_t ky = 0; ky < window[1]; ++ky) {
              const std::size_t row =
                  base + ((oz * stride[0] + kz) * in.h + oy * stride[1] + ky) * in.w +
                  ox * stride[2];
              for (std::size_t kx = 0; kx < window[2]; ++kx) {
                if (x[row + kx] > best_v) {
                  best_v = x[row + kx];
                  best = row + kx;
                }
              }
            }
          y[o] = best_v;
          (*argmax)[o] = best;
        }
  }
  return input.tape().record(std::move(y), {input}, [argmax](const GradContext& ctx) {
    Array& gx = *ctx.input_grads[0];
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += ctx.out_grad[i];
  });
}

Tensor maxpool3d(const Tensor& input, std::size_t window, std::size_t stride) {
  return maxpool3d(input, {window, window, window}, {stride, stride, stride});
}

Tensor global_avg_pool(const Tensor& input) {
  const Array& x = input.value();
  require_rank(x, 5, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t m = spatial(x).voxels();
  if (m == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  Array y(Shape{n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* p = x.data() + i * m;
    for (std::size_t v = 0; v < m; ++v) acc += p[v];
    y[i] = acc / static_cast<double>(m);
  }
  return input.tape().record(std::move(y), {input}, [m](const GradContext& ctx) {
    Array& gx = *ctx.input_grads[0];
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < ctx.out_grad.size(); ++i) {
      const double g = ctx.out_grad[i] * inv;
      double* p = gx.data() + i * m;
      for (std::size_t v = 0; v < m; ++v) p[v] += g;
    }
  });
}

Tensor pad_spatial(const Tensor& input, std::array<std::size_t, 3> extent) {
  const Array& x = input.value();
  require_rank(x, 5, "pad_spatial");
  const Extent3 in = spatial(x);
  if (extent[0] < in.d || extent[1] < in.h || extent[2] < in.w) {
    throw DimensionError("pad_spatial: target extent smaller than input");
  }
  if (extent[0] == in.d && extent[1] == in.h && extent[2] == in.w) return input;
  const std::array<std::size_t, 3> before{(extent[0] - in.d) / 2, (extent[1] - in.h) / 2,
                                          (extent[2] - in.w) / 2};
  const std::size_t nc = x.dim(0) * x.dim(1);
  Array y(Shape{x.dim(0), x.dim(1), extent[0], extent[1], extent[2]});
  const std::size_t out_plane = extent[0] * extent[1] * extent[2];
  auto map = [=](std::size_t p, std::size_t z, std::size_t yy) {
    return p * out_plane + ((z + before[0]) * extent[1] + yy + before[1]) * extent[2] + before[2];
  };
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t z = 0; z < in.d; ++z)
      for (std::size_t yy = 0; yy < in.h; ++yy)
        std::copy_n(x.data() + (p * in.d * in.h + z * in.h + yy) * in.w, in.w,
                    y.data() + map(p, z, yy));
  return input.tape().record(std::move(y), {input}, [=](const GradContext& ctx) {
    Array& gx = *ctx.input_grads[0];
    for (std::size_t p = 0; p < nc; ++p)
      for (std::size_t z = 0; z < in.d; ++z)
        for (std::size_t yy = 0; yy < in.h; ++yy) {
          const double* src = ctx.out_grad.data() + map(p, z, yy);
          double* dst = gx.data() + (p * in.d * in.h + z * in.h + yy) * in.w;
          for (std::size_t xx = 0; xx < in.w; ++xx) dst[xx] += src[xx];
        }
  });
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  RunningStats& stats, const BatchNormOptions& options) {
  const Array& x = input.value();
  if (x.rank() < 2) throw DimensionError("batch_norm: input must be [N,C,...]");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (n * c);
  require_rank(gamma.value(), 1, "batch_norm gamma");
  require_rank(beta.value(), 1, "batch_norm beta");
  if (gamma.value().dim(0) != c || beta.value().dim(0) != c) {
    throw DimensionError("batch_norm: gamma/beta length differs from channel count");
  }
  if (stats.mean.size() != c || stats.var.size() != c) {
    throw DimensionError("batch_norm: running statistics have wrong length");
  }
  const bool train = options.mode == NormMode::Train;
  if (train && n < 2) {
    throw PreconditionError("batch_norm: train mode needs a batch of at least 2");
  }
  const double count = static_cast<double>(n * inner);
  std::vector<double> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (train) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * c + ch) * inner;
        for (std::size_t v = 0; v < inner; ++v) s += p[v];
      }
      const double m = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = x.data() + (b * c + ch) * inner;
        for (std::size_t v = 0; v < inner; ++v) ss += (p[v] - m) * (p[v] - m);
      }
      const double var = ss / count;
      mu[ch] = m;
      inv_std[ch] = 1.0 / std::sqrt(var + options.eps);
      const double unbiased = count > 1.0 ? ss / (count - 1.0) : var;
      stats.mean[ch] = (1.0 - options.momentum) * stats.mean[ch] + options.momentum * m;
      stats.var[ch] = (1.0 - options.momentum) * stats.var[ch] + options.momentum * unbiased;
    } else {
      mu[ch] = stats.mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.var[ch] + options.eps);
    }
  }
  Array xhat(x.shape());
  Array y(x.shape());
  const double* gm = gamma.value().data();
  const double* bt = beta.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * inner;
      for (std::size_t v = 0; v < inner; ++v) {
        const double h = (x[off + v] - mu[ch]) * inv_std[ch];
        xhat[off + v] = h;
        y[off + v] = gm[ch] * h + bt[ch];
      }
    }
  auto saved = std::make_shared<Array>(std::move(xhat));
  return input.tape().record(
      std::move(y), {input, gamma, beta},
      [saved, inv_std, n, c, inner, train, count](const GradContext& ctx) {
        const Array& xh = *saved;
        const Array& gy = ctx.out_grad;
        const double* gm = ctx.inputs[1]->data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t v = 0; v < inner; ++v) {
              sum_g += gy[off + v];
              sum_gx += gy[off + v] * xh[off + v];
            }
          }
          if (ctx.input_grads[1]) (*ctx.input_grads[1])[ch] += sum_gx;
          if (ctx.input_grads[2]) (*ctx.input_grads[2])[ch] += sum_g;
          if (!ctx.input_grads[0]) continue;
          Array& gx = *ctx.input_grads[0];
          const double k = gm[ch] * inv_std[ch];
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * inner;
            for (std::size_t v = 0; v < inner; ++v) {
              if (train) {
                gx[off + v] += k * (gy[off + v] - sum_g / count - xh[off + v] * sum_gx / count);
              } else {
                gx[off + v] += k * gy[off + v];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// activations and joins
// ---------------------------------------------------------------------------

Tensor activation(const Tensor& input, Activation kind) {
  if (kind == Activation::Identity) return input;
  const Array& x = input.value();
  Array y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case Activation::Relu: y[i] = v > 0.0 ? v : 0.0; break;
      case Activation::Elu: y[i] = v > 0.0 ? v : std::expm1(v); break;
      case Activation::Sigmoid: y[i] = sigmoid(v); break;
      case Activation::Tanh: y[i] = std::tanh(v); break;
      case Activation::Identity: y[i] = v; break;
    }
  }
  return input.tape().record(std::move(y), {input}, [kind](const GradContext& ctx) {
    Array& gx = *ctx.input_grads[0];
    const Array& x = *ctx.inputs[0];
    const Array& y = ctx.out_value;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      double d = 1.0;
      switch (kind) {
        case Activation::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
        case Activation::Elu: d = x[i] > 0.0 ? 1.0 : y[i] + 1.0; break;
        case Activation::Sigmoid: d = y[i] * (1.0 - y[i]); break;
        case Activation::Tanh: d = 1.0 - y[i] * y[i]; break;
        case Activation::Identity: break;
      }
      gx[i] += d * ctx.out_grad[i];
    }
  });
}

Tensor concat_channels(std::initializer_list<Tensor> inputs) {
  return concat_channels(std::span<const Tensor>(inputs.begin(), inputs.size()));
}

Tensor concat_channels(std::span<const Tensor> inputs) {
  if (inputs.empty()) throw PreconditionError("concat_channels: no inputs");
  if (inputs.size() == 1) return inputs[0];
  const Array& first = inputs[0].value();
  if (first.rank() < 2) throw DimensionError("concat_channels: inputs must be [N,C,...]");
  const std::size_t n = first.dim(0);
  const std::size_t inner = first.size() / (n * first.dim(1));
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (const Tensor& t : inputs) {
    const Array& a = t.value();
    if (a.rank() != first.rank() || a.dim(0) != n ||
        !std::equal(a.shape().begin() + 2, a.shape().end(), first.shape().begin() + 2)) {
      throw DimensionError("concat_channels: " + to_string(a.shape()) + " incompatible with " +
                           to_string(first.shape()));
    }
    channels.push_back(a.dim(1));
    total += a.dim(1);
  }
  Shape shape = first.shape();
  shape[1] = total;
  Array y(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Array& a = inputs[k].value();
    const std::size_t block = channels[k] * inner;
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(a.data() + b * block, block, y.data() + (b * total + offset) * inner);
    }
    offset += channels[k];
  }
  return inputs[0].tape().record(
      std::move(y), inputs, [channels, total, inner, n](const GradContext& ctx) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < channels.size(); ++k) {
          const std::size_t block = channels[k] * inner;
          if (Array* g = ctx.input_grads[k]) {
            for (std::size_t b = 0; b < n; ++b) {
              const double* src = ctx.out_grad.data() + (b * total + offset) * inner;
              double* dst = g->data() + b * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          offset += channels[k];
        }
      });
}

Tensor channel_scale(const Tensor& input, const Tensor& gate) {
  const Array& x = input.value();
  const Array& g = gate.value();
  if (x.rank() < 2) throw DimensionError("channel_scale: input must be [N,C,...]");
  require_rank(g, 2, "channel_scale gate");
  if (g.dim(0) != x.dim(0) || g.dim(1) != x.dim(1)) {
    throw DimensionError("channel_scale: gate " + to_string(g.shape()) + " vs input " +
                         to_string(x.shape()));
  }
  const std::size_t nc = g.size();
  const std::size_t inner = x.size() / nc;
  Array y(x.shape());
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t v = 0; v < inner; ++v) y[i * inner + v] = x[i * inner + v] * g[i];
  return input.tape().record(std::move(y), {input, gate}, [nc, inner](const GradContext& ctx) {
    const Array& x = *ctx.inputs[0];
    const Array& g = *ctx.inputs[1];
    for (std::size_t i = 0; i < nc; ++i) {
      const double* gy = ctx.out_grad.data() + i * inner;
      if (ctx.input_grads[0]) axpy(g[i], gy, ctx.input_grads[0]->data() + i * inner, inner);
      if (ctx.input_grads[1]) (*ctx.input_grads[1])[i] += dot(gy, x.data() + i * inner, inner);
    }
  });
}

Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const Array& x = input.value();
  const Array& w = weight.value();
  require_rank(x, 2, "fully_connected input");
  require_rank(w, 2, "fully_connected weight");
  require_rank(bias.value(), 1, "fully_connected bias");
  const std::size_t n = x.dim(0), f = x.dim(1), g = w.dim(1);
  if (w.dim(0) != f || bias.value().dim(0) != g) {
    throw DimensionError("fully_connected: " + to_string(x.shape()) + " x " +
                         to_string(w.shape()) + " + " + to_string(bias.value().shape()));
  }
  Array y(Shape{n, g});
  for (std::size_t r = 0; r < n; ++r) {
    double* yr = y.data() + r * g;
    std::copy_n(bias.value().data(), g, yr);
    for (std::size_t k = 0; k < f; ++k) axpy(x[r * f + k], w.data() + k * g, yr, g);
  }
  return input.tape().record(
      std::move(y), {input, weight, bias}, [n, f, g](const GradContext& ctx) {
        const Array& x = *ctx.inputs[0];
        const Array& w = *ctx.inputs[1];
        const double* gy = ctx.out_grad.data();
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = gy + r * g;
          if (ctx.input_grads[2]) axpy(1.0, gr, ctx.input_grads[2]->data(), g);
          for (std::size_t k = 0; k < f; ++k) {
            if (ctx.input_grads[1]) axpy(x[r * f + k], gr, ctx.input_grads[1]->data() + k * g, g);
            if (ctx.input_grads[0]) (*ctx.input_grads[0])[r * f + k] += dot(gr, w.data() + k * g, g);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

namespace {

struct LstmTrace {
  // Per time step (in processing order): activated gates [N,4H], cell [N,H],
  // tanh(cell) [N,H].
  std::vector<AlignedVector> gates, cell, cell_tanh;
};

void check_direction(const LstmDirection& d, std::size_t f, std::size_t& hidden) {
  const Array& wi = d.w_input.value();
  const Array& wh = d.w_hidden.value();
  const Array& b = d.bias.value();
  require_rank(wi, 2, "lstm w_input");
  require_rank(wh, 2, "lstm w_hidden");
  require_rank(b, 1, "lstm bias");
  const std::size_t h = wh.dim(0);
  if (wi.dim(0) != f || wi.dim(1) != 4 * h || wh.dim(1) != 4 * h || b.dim(0) != 4 * h) {
    throw DimensionError("lstm: parameter shapes inconsistent with F=" + std::to_string(f) +
                         " H=" + std::to_string(h));
  }
  if (hidden != 0 && hidden != h) throw DimensionError("lstm: directions differ in width");
  hidden = h;
}


// Runs one direction, writing hidden states into out[:, :, col:col+H].
LstmTrace lstm_forward(const Array& x, const Array& wi, const Array& wh, const Array& b,
                       bool reversed, Array& out, std::size_t col) {
  const std::size_t t_len = x.dim(0), n = x.dim(1), f = x.dim(2);
  const std::size_t h = wh.dim(0), g4 = 4 * h;
  const std::size_t out_w = out.dim(2);
  const ConstMatMap w_in(wi.data(), f, g4), w_hid(wh.data(), h, g4);
  const Eigen::Map<const Eigen::RowVectorXd> bias(b.data(), g4);
  LstmTrace trace;
  RowMat hprev = RowMat::Zero(n, h);
  AlignedVector cprev(n * h, 0.0);
  for (std::size_t step = 0; step < t_len; ++step) {
    const std::size_t t = reversed ? t_len - 1 - step : step;
    AlignedVector gates(n * g4), cell(n * h), ctanh(n * h);
    MatMap g(gates.data(), n, g4);
    g.noalias() = ConstMatMap(x.data() + t * n * f, n, f) * w_in;
    if (step > 0) g.noalias() += hprev * w_hid;
    g.rowwise() += bias;
    for (std::size_t r = 0; r < n; ++r) {
      double* gr = gates.data() + r * g4;
      for (std::size_t j = 0; j < h; ++j) {
        const double i_g = sigmoid(gr[j]);
        const double f_g = sigmoid(gr[h + j]);
        const double c_g = std::tanh(gr[2 * h + j]);
        const double o_g = sigmoid(gr[3 * h + j]);
        gr[j] = i_g;
        gr[h + j] = f_g;
        gr[2 * h + j] = c_g;
        gr[3 * h + j] = o_g;
        const double c = f_g * cprev[r * h + j] + i_g * c_g;
        cell[r * h + j] = c;
        ctanh[r * h + j] = std::tanh(c);
        const double hv = o_g * ctanh[r * h + j];
        out[(t * n + r) * out_w + col + j] = hv;
        hprev(r, j) = hv;
      }
    }
    cprev = cell;
    trace.gates.push_back(std::move(gates));
    trace.cell.push_back(std::move(cell));
    trace.cell_tanh.push_back(std::move(ctanh));
  }
  return trace;
}

void lstm_backward(const LstmTrace& trace, const Array& x, const Array& wi, const Array& wh,
                   bool reversed, const Array& out, const Array& gout, std::size_t col,
                   Array* gx, Array* gwi, Array* gwh, Array* gb) {
  const std::size_t t_len = x.dim(0), n = x.dim(1), f = x.dim(2);
  const std::size_t h = wh.dim(0), g4 = 4 * h;
  const std::size_t out_w = out.dim(2);
  const ConstMatMap w_in(wi.data(), f, g4), w_hid(wh.data(), h, g4);
  RowMat dh_next = RowMat::Zero(n, h);
  AlignedVector dc_next(n * h, 0.0);
  RowMat dpre(n, g4);
  for (std::size_t step = t_len; step-- > 0;) {
    const std::size_t t = reversed ? t_len - 1 - step : step;
    const AlignedVector& gates = trace.gates[step];
    const AlignedVector& ctanh = trace.cell_tanh[step];
    const AlignedVector* cprev = step > 0 ? &trace.cell[step - 1] : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      const double* gr = gates.data() + r * g4;
      double* dp = dpre.data() + r * g4;
      for (std::size_t j = 0; j < h; ++j) {
        const double dh = gout[(t * n + r) * out_w + col + j] + dh_next(r, j);
        const double i_g = gr[j], f_g = gr[h + j], c_g = gr[2 * h + j], o_g = gr[3 * h + j];
        const double th = ctanh[r * h + j];
        const double dc = dh * o_g * (1.0 - th * th) + dc_next[r * h + j];
        const double cp = cprev ? (*cprev)[r * h + j] : 0.0;
        dp[j] = dc * c_g * i_g * (1.0 - i_g);
        dp[h + j] = dc * cp * f_g * (1.0 - f_g);
        dp[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
        dp[3 * h + j] = dh * th * o_g * (1.0 - o_g);
        dc_next[r * h + j] = dc * f_g;
      }
    }
    const ConstMatMap x_t(x.data() + t * n * f, n, f);
    if (gb) Eigen::Map<Eigen::RowVectorXd>(gb->data(), g4) += dpre.colwise().sum();
    if (gwi) MatMap(gwi->data(), f, g4).noalias() += x_t.transpose() * dpre;
    if (gx) MatMap(gx->data() + t * n * f, n, f).noalias() += dpre * w_in.transpose();
    // Hidden state that fed this step (zero at the first processed step).
    if (step > 0 && gwh) {
      const std::size_t t_prev = reversed ? t + 1 : t - 1;
      const StridedMap h_prev(out.data() + t_prev * n * out_w + col, n, h,
                              Eigen::OuterStride<>(out_w));
      MatMap(gwh->data(), h, g4).noalias() += h_prev.transpose() * dpre;
    }
    dh_next.noalias() = dpre * w_hid.transpose();
  }
}

}  // namespace

Tensor lstm_sequence(const Tensor& inputs, const LstmDirection& forward,
                     const std::optional<LstmDirection>& reverse) {
  const Array& x = inputs.value();
  require_rank(x, 3, "lstm_sequence input");
  const std::size_t t_len = x.dim(0), n = x.dim(1), f = x.dim(2);
  if (t_len < 1) throw PreconditionError("lstm_sequence: empty sequence");
  std::size_t h = 0;
  check_direction(forward, f, h);
  if (reverse) check_direction(*reverse, f, h);
  const bool bi = reverse.has_value();
  Array out(Shape{t_len, n, bi ? 2 * h : h});
  auto fwd_trace = std::make_shared<LstmTrace>(lstm_forward(
      x, forward.w_input.value(), forward.w_hidden.value(), forward.bias.value(), false, out, 0));
  auto rev_trace = std::make_shared<LstmTrace>();
  if (bi) {
    *rev_trace = lstm_forward(x, reverse->w_input.value(), reverse->w_hidden.value(),
                              reverse->bias.value(), true, out, h);
  }
  std::vector<Tensor> deps{inputs, forward.w_input, forward.w_hidden, forward.bias};
  if (bi) {
    deps.push_back(reverse->w_input);
    deps.push_back(reverse->w_hidden);
    deps.push_back(reverse->bias);
  }
  return inputs.tape().record(
      std::move(out), deps, [fwd_trace, rev_trace, bi, h](const GradContext& ctx) {
        const Array& x = *ctx.inputs[0];
        lstm_backward(*fwd_trace, x, *ctx.inputs[1], *ctx.inputs[2], false, ctx.out_value,
                      ctx.out_grad, 0, ctx.input_grads[0], ctx.input_grads[1],
                      ctx.input_grads[2], ctx.input_grads[3]);
        if (bi) {
          lstm_backward(*rev_trace, x, *ctx.inputs[4], *ctx.inputs[5], true, ctx.out_value,
                        ctx.out_grad, h, ctx.input_grads[0], ctx.input_grads[4],
                        ctx.input_grads[5], ctx.input_grads[6]);
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a.value(), b.value(), "add");
  Array y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [](const GradContext& ctx) {
    for (int k = 0; k < 2; ++k)
      if (Array* g = ctx.input_grads[k]) axpy(1.0, ctx.out_grad.data(), g->data(), g->size());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Array y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [](const GradContext& ctx) {
    if (Array* g = ctx.input_grads[0]) axpy(1.0, ctx.out_grad.data(), g->data(), g->size());
    if (Array* g = ctx.input_grads[1]) axpy(-1.0, ctx.out_grad.data(), g->data(), g->size());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Array y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [](const GradContext& ctx) {
    for (std::size_t i = 0; i < ctx.out_grad.size(); ++i) {
      if (ctx.input_grads[0]) (*ctx.input_grads[0])[i] += ctx.out_grad[i] * (*ctx.inputs[1])[i];
      if (ctx.input_grads[1]) (*ctx.input_grads[1])[i] += ctx.out_grad[i] * (*ctx.inputs[0])[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  Array y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * factor;
  return a.tape().record(std::move(y), {a}, [factor](const GradContext& ctx) {
    axpy(factor, ctx.out_grad.data(), ctx.input_grads[0]->data(), ctx.out_grad.size());
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  Array y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + offset;
  return a.tape().record(std::move(y), {a}, [](const GradContext& ctx) {
    axpy(1.0, ctx.out_grad.data(), ctx.input_grads[0]->data(), ctx.out_grad.size());
  });
}

Tensor square(const Tensor& a) {
  Array y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * a.value()[i];
  return a.tape().record(std::move(y), {a}, [](const GradContext& ctx) {
    for (std::size_t i = 0; i < ctx.out_grad.size(); ++i)
      (*ctx.input_grads[0])[i] += 2.0 * (*ctx.inputs[0])[i] * ctx.out_grad[i];
  });
}

Tensor abs(const Tensor& a) {
  Array y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::fabs(a.value()[i]);
  return a.tape().record(std::move(y), {a}, [](const GradContext& ctx) {
    for (std::size_t i = 0; i < ctx.out_grad.size(); ++i) {
      const double v = (*ctx.inputs[0])[i];
      const double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      (*ctx.input_grads[0])[i] += s * ctx.out_grad[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Array::scalar(s), {a}, [](const GradContext& ctx) {
    const double g = ctx.out_grad[0];
    for (double& v : ctx.input_grads[0]->values()) v += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw PreconditionError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor reshape(const Tensor& a, Shape shape) {
  Array y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a}, [](const GradContext& ctx) {
    axpy(1.0, ctx.out_grad.data(), ctx.input_grads[0]->data(), ctx.out_grad.size());
  });
}

Tensor transpose01(const Tensor& a) {
  const Array& x = a.value();
  if (x.rank() < 2) throw DimensionError("transpose01: rank must be >= 2");
  const std::size_t p = x.dim(0), q = x.dim(1);
  const std::size_t inner = x.size() / std::max<std::size_t>(1, p * q);
  Shape shape = x.shape();
  std::swap(shape[0], shape[1]);
  Array y(shape);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j)
      std::copy_n(x.data() + (i * q + j) * inner, inner, y.data() + (j * p + i) * inner);
  return a.tape().record(std::move(y), {a}, [p, q, inner](const GradContext& ctx) {
    double* g = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j)
        axpy(1.0, ctx.out_grad.data() + (j * p + i) * inner, g + (i * q + j) * inner, inner);
  });
}

Tensor pairwise_differences(const Tensor& v) {
  const Array& x = v.value();
  require_rank(x, 1, "pairwise_differences");
  const std::size_t n = x.dim(0);
  Array y(Shape{n * (n - 1) / 2});
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) y[k++] = x[i] - x[j];
  return v.tape().record(std::move(y), {v}, [n](const GradContext& ctx) {
    Array& g = *ctx.input_grads[0];
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j, ++k) {
        g[i] += ctx.out_grad[k];
        g[j] -= ctx.out_grad[k];
      }
  });
}

Tensor minmax_normalize(const Tensor& rows) {
  const Array& x = rows.value();
  require_rank(x, 2, "minmax_normalize");
  const std::size_t b = x.dim(0), n = x.dim(1);
  Array y(x.shape());
  std::vector<std::size_t> lo_idx(b), hi_idx(b);
  std::vector<double> range(b);
  for (std::size_t r = 0; r < b; ++r) {
    const double* p = x.data() + r * n;
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (p[i] < p[lo]) lo = i;
      if (p[i] > p[hi]) hi = i;
    }
    lo_idx[r] = lo;
    hi_idx[r] = hi;
    range[r] = p[hi] - p[lo];
    for (std::size_t i = 0; i < n; ++i) {
      y[r * n + i] = range[r] > 0.0 ? (p[i] - p[lo]) / range[r] : 0.5;
    }
  }
  return rows.tape().record(
      std::move(y), {rows}, [b, n, lo_idx, hi_idx, range](const GradContext& ctx) {
        Array& g = *ctx.input_grads[0];
        for (std::size_t r = 0; r < b; ++r) {
          if (!(range[r] > 0.0)) continue;
          const double inv = 1.0 / range[r];
          double d_lo = 0.0, d_hi = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const double gy = ctx.out_grad[r * n + i];
            const double yi = ctx.out_value[r * n + i];
            g[r * n + i] += gy * inv;
            d_lo += gy * (yi - 1.0) * inv;
            d_hi -= gy * yi * inv;
          }
          g[r * n + lo_idx[r]] += d_lo;
          g[r * n + hi_idx[r]] += d_hi;
        }
      });
}

}  // namespace brainage
