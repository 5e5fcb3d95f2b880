#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "brainage/error.hpp"
#include "brainage/gradcheck.hpp"
#include "brainage/ops.hpp"
#include "test_util.hpp"

namespace brainage {
namespace {

using testing::max_gradient_error;
using testing::random_array;

Conv3dOptions same3() { return Conv3dOptions{1, {1, 1, 1}}; }

TEST(Conv3d, OneByOneIsScalarMultiply) {
  Tape tape;
  auto x = tape.constant(Array(Shape{1, 1, 1, 1, 1}, 2.0));
  auto k = tape.constant(Array(Shape{1, 1, 1, 1, 1}, 3.0));
  auto b = tape.constant(Array(Shape{1}, 0.0));
  EXPECT_DOUBLE_EQ(conv3d(x, k, b).item(), 6.0);
}

TEST(Conv3d, AllOnesSumsWindow) {
  Tape tape;
  auto x = tape.constant(Array(Shape{1, 1, 3, 3, 3}, 1.0));
  auto k = tape.constant(Array(Shape{1, 1, 3, 3, 3}, 1.0));
  auto b = tape.constant(Array(Shape{1}, 0.0));
  auto y = conv3d(x, k, b);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.item(), 27.0);
}

TEST(Conv3d, OutputExtentFormula) {
  Tape tape;
  auto x = tape.constant(Array(Shape{2, 1, 7, 6, 5}, 1.0));
  auto k = tape.constant(Array(Shape{4, 1, 3, 1, 2}, 1.0));
  auto b = tape.constant(Array(Shape{4}, 0.0));
  auto y = conv3d(x, k, b, Conv3dOptions{2, {1, 0, 1}});
  // floor((in + 2 pad - k) / stride) + 1
  EXPECT_EQ(y.shape(), (Shape{2, 4, 4, 3, 3}));
}

TEST(Conv3d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  const std::vector<Array> in{random_array({1, 2, 5, 5, 5}, rng), random_array({3, 2, 3, 3, 3}, rng),
                              random_array({3}, rng)};
  for (const Conv3dOptions& opt : {Conv3dOptions{}, same3(), Conv3dOptions{2, {1, 0, 2}}}) {
    const double err = max_gradient_error(
        [&](Tape&, std::span<const Tensor> t) { return conv3d(t[0], t[1], t[2], opt); }, in, rng);
    EXPECT_LT(err, 1e-6);
  }
}

TEST(Conv3d, ChannelMismatchIsDimensionError) {
  Tape tape;
  auto x = tape.constant(Array(Shape{1, 2, 3, 3, 3}));
  auto k = tape.constant(Array(Shape{1, 3, 3, 3, 3}));
  auto b = tape.constant(Array(Shape{1}));
  EXPECT_THROW(conv3d(x, k, b), DimensionError);
  auto big = tape.constant(Array(Shape{1, 2, 5, 5, 5}));
  EXPECT_THROW(conv3d(x, big, b), DimensionError);
}

TEST(MaxPool3d, DegenerateDepthPicksPairMaxima) {
  Tape tape;
  auto x = tape.constant(Array(Shape{1, 1, 4, 1, 1}, {1, 2, 3, 4}));
  auto y = maxpool3d(x, {2, 1, 1}, {2, 1, 1});
  EXPECT_EQ(y.value().storage(), (std::vector<double>{2, 4}));
}

TEST(MaxPool3d, ConstantVolumeStaysConstant) {
  Tape tape;
  auto x = tape.constant(Array(Shape{1, 2, 4, 4, 4}, 1.75));
  auto y = maxpool3d(x, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 2, 2, 2}));
  for (double v : y.value().values()) EXPECT_EQ(v, 1.75);
}

TEST(MaxPool3d, TiesRouteGradientToFirstElement) {
  Tape tape;
  auto x = tape.leaf(Array(Shape{1, 1, 2, 2, 2}, 1.0), true);
  tape.backward(sum(maxpool3d(x, 2, 2)));
  const Array& g = tape.grad(x);
  EXPECT_EQ(g[0], 1.0);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(MaxPool3d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const std::vector<Array> in{random_array({1, 1, 4, 4, 4}, rng)};
  const double err = max_gradient_error(
      [](Tape&, std::span<const Tensor> t) { return maxpool3d(t[0], 2, 2); }, in, rng);
  EXPECT_LT(err, 1e-6);
}

TEST(MaxPool3d, WindowLargerThanExtentIsDimensionError) {
  Tape tape;
  auto x = tape.constant(Array(Shape{1, 1, 4, 1, 4}));
  EXPECT_THROW(maxpool3d(x, 2, 2), DimensionError);
}

TEST(GlobalAvgPool, MeansPerChannel) {
  Tape tape;
  Array a(Shape{1, 2, 2, 2, 2}, 5.0);
  for (std::size_t i = 8; i < 16; ++i) a[i] = 0.0;
  a[15] = 4.0;
  auto y = global_avg_pool(tape.constant(a));
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(y.value()[0], 5.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 4.0 / 8.0);
}

TEST(GlobalAvgPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const std::vector<Array> in{random_array({2, 3, 2, 3, 2}, rng)};
  const double err = max_gradient_error(
      [](Tape&, std::span<const Tensor> t) { return global_avg_pool(t[0]); }, in, rng);
  EXPECT_LT(err, 1e-8);
}

TEST(BatchNorm, TrainModeStandardizesPerChannel) {
  std::mt19937_64 rng(7);
  Tape tape;
  Array raw = random_array({4, 3, 2, 2, 2}, rng, -3.0, 5.0);
  RunningStats stats{Array(Shape{3}, 0.0), Array(Shape{3}, 1.0)};
  auto y = batch_norm(tape.constant(raw), tape.constant(Array(Shape{3}, 1.0)),
                      tape.constant(Array(Shape{3}, 0.0)), stats, {NormMode::Train, 0.1, 1e-5});
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0, ss = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t v = 0; v < 8; ++v) {
        const double val = y.value()[(n * 3 + c) * 8 + v];
        s += val;
        ss += val * val;
      }
    EXPECT_NEAR(s / 32.0, 0.0, 1e-12);
    EXPECT_NEAR(ss / 32.0, 1.0, 1e-3);  // eps shrinks the variance slightly
  }
  // running stats moved 10% toward the batch statistics
  EXPECT_NE(stats.mean[0], 0.0);
}

TEST(BatchNorm, AffineParametersShiftAndScale) {
  Tape tape;
  // per-channel mean 0 and biased variance 1 already
  Array raw(Shape{2, 1, 1, 1, 2}, {1.0, -1.0, 1.0, -1.0});
  RunningStats stats{Array(Shape{1}, 0.0), Array(Shape{1}, 1.0)};
  auto y = batch_norm(tape.constant(raw), tape.constant(Array(Shape{1}, 2.0)),
                      tape.constant(Array(Shape{1}, 3.0)), stats, {NormMode::Train, 0.1, 0.0});
  EXPECT_EQ(y.value().storage(), (std::vector<double>{5.0, 1.0, 5.0, 1.0}));
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  const std::vector<Array> in{random_array({4, 3, 2, 2, 2}, rng), random_array({3}, rng, 0.5, 1.5),
                              random_array({3}, rng)};
  for (NormMode mode : {NormMode::Train, NormMode::Eval}) {
    const double err = max_gradient_error(
        [&](Tape&, std::span<const Tensor> t) {
          RunningStats stats{Array(Shape{3}, 0.2), Array(Shape{3}, 0.8)};
          return batch_norm(t[0], t[1], t[2], stats, {mode, 0.1, 1e-5});
        },
        in, rng);
    EXPECT_LT(err, 1e-5);
  }
}

TEST(BatchNorm, SingleSampleTrainingIsRejected) {
  Tape tape;
  RunningStats stats{Array(Shape{1}, 0.0), Array(Shape{1}, 1.0)};
  auto x = tape.constant(Array(Shape{1, 1, 2, 2, 2}, 1.0));
  auto g = tape.constant(Array(Shape{1}, 1.0));
  auto b = tape.constant(Array(Shape{1}, 0.0));
  EXPECT_THROW(batch_norm(x, g, b, stats, {NormMode::Train}), PreconditionError);
  EXPECT_NO_THROW(batch_norm(x, g, b, stats, {NormMode::Eval}));
}

TEST(Activation, ReluValues) {
  Tape tape;
  auto y = activation(tape.constant(Array::vector({-2.0, 3.0})), Activation::Relu);
  EXPECT_EQ(y.value().storage(), (std::vector<double>{0.0, 3.0}));
}

TEST(Activation, EluIsSmoothAtZero) {
  Tape tape;
  auto x = tape.leaf(Array::vector({0.0}), true);
  auto y = activation(x, Activation::Elu);
  EXPECT_EQ(y.item(), 0.0);
  tape.backward(y);
  EXPECT_EQ(tape.grad(x)[0], 1.0);
  const double left = (std::expm1(0.0) - std::expm1(-1e-7)) / 1e-7;
  EXPECT_NEAR(left, 1.0, 1e-6);
}

TEST(Activation, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  const std::vector<Array> in{random_array({3, 5}, rng)};
  for (Activation kind : {Activation::Sigmoid, Activation::Tanh, Activation::Elu, Activation::Relu,
                          Activation::Identity}) {
    const double err = max_gradient_error(
        [&](Tape&, std::span<const Tensor> t) { return activation(t[0], kind); }, in, rng);
    EXPECT_LT(err, 1e-8);
  }
}

TEST(ConcatChannels, ShapesAndIdentity) {
  Tape tape;
  auto a = tape.constant(Array(Shape{2, 2, 3, 1, 1}, 1.0));
  auto b = tape.constant(Array(Shape{2, 3, 3, 1, 1}, 2.0));
  EXPECT_EQ(concat_channels({a, b}).shape(), (Shape{2, 5, 3, 1, 1}));
  EXPECT_EQ(concat_channels({a}).node_id(), a.node_id());
  auto bad = tape.constant(Array(Shape{2, 1, 2, 1, 1}));
  EXPECT_THROW(concat_channels({a, bad}), DimensionError);
}

TEST(ConcatChannels, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  const std::vector<Array> in{random_array({2, 1, 2, 2, 1}, rng), random_array({2, 3, 2, 2, 1}, rng),
                              random_array({2, 2, 2, 2, 1}, rng)};
  const double err = max_gradient_error(
      [](Tape&, std::span<const Tensor> t) { return concat_channels(t); }, in, rng);
  EXPECT_LT(err, 1e-8);
}

TEST(FullyConnected, IdentityAndBiasOnly) {
  Tape tape;
  Array eye(Shape{3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Array x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = fully_connected(tape.constant(x), tape.constant(eye), tape.constant(Array(Shape{3})));
  EXPECT_EQ(y.value(), x);
  auto z = fully_connected(tape.constant(x), tape.constant(Array(Shape{3, 2})),
                           tape.constant(Array::vector({7, -1})));
  EXPECT_EQ(z.value().storage(), (std::vector<double>{7, -1, 7, -1}));
  EXPECT_THROW(fully_connected(tape.constant(x), tape.constant(Array(Shape{2, 2})),
                               tape.constant(Array(Shape{2}))),
               DimensionError);
}

TEST(FullyConnected, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(19);
  const std::vector<Array> in{random_array({3, 4}, rng), random_array({4, 2}, rng),
                              random_array({2}, rng)};
  const double err = max_gradient_error(
      [](Tape&, std::span<const Tensor> t) { return fully_connected(t[0], t[1], t[2]); }, in, rng);
  EXPECT_LT(err, 1e-8);
}

LstmDirection direction(std::span<const Tensor> t, std::size_t first) {
  return LstmDirection{t[first], t[first + 1], t[first + 2]};
}

TEST(Lstm, ZeroParametersGiveZeroOutput) {
  std::mt19937_64 rng(23);
  Tape tape;
  auto x = tape.constant(random_array({4, 2, 3}, rng));
  LstmDirection d{tape.constant(Array(Shape{3, 8})), tape.constant(Array(Shape{2, 8})),
                  tape.constant(Array(Shape{8}))};
  auto y = lstm_sequence(x, d, d);
  EXPECT_EQ(y.shape(), (Shape{4, 2, 4}));
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, SingleStepMatchesCellEquations) {
  std::mt19937_64 rng(29);
  const Array x = random_array({1, 1, 2}, rng);
  const Array wi = random_array({2, 4}, rng);
  const Array wh = random_array({1, 4}, rng);
  const Array b = random_array({4}, rng);
  Tape tape;
  auto y = lstm_sequence(tape.constant(x),
                         {tape.constant(wi), tape.constant(wh), tape.constant(b)});
  double pre[4];
  for (int j = 0; j < 4; ++j) pre[j] = b[j] + x[0] * wi[j] + x[1] * wi[4 + j];
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double c = sig(pre[0]) * std::tanh(pre[2]);  // previous cell is zero
  EXPECT_NEAR(y.item(), sig(pre[3]) * std::tanh(c), 1e-15);
}

TEST(Lstm, BidirectionalGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(31);
  const std::size_t f = 2, h = 3;
  std::vector<Array> in{random_array({3, 2, f}, rng)};
  for (int d = 0; d < 2; ++d) {
    in.push_back(random_array({f, 4 * h}, rng));
    in.push_back(random_array({h, 4 * h}, rng));
    in.push_back(random_array({4 * h}, rng));
  }
  const double err = max_gradient_error(
      [](Tape&, std::span<const Tensor> t) {
        return lstm_sequence(t[0], direction(t, 1), direction(t, 4));
      },
      in, rng);
  EXPECT_LT(err, 1e-5);
}

TEST(Backward, LeafAndScaledSum) {
  Tape tape;
  auto x = tape.leaf(Array::scalar(4.0), true);
  tape.backward(x);
  EXPECT_EQ(tape.grad(x)[0], 1.0);

  Tape t2;
  auto v = t2.leaf(Array::vector({1, 2, 3}), true);
  t2.backward(sum(scale(v, 2.0)));
  EXPECT_EQ(t2.grad(v).storage(), (std::vector<double>{2, 2, 2}));
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape tape;
  auto v = tape.leaf(Array::vector({1, 2}), true);
  EXPECT_THROW(tape.backward(square(v)), PreconditionError);
}

TEST(Backward, UnreachableLeafGetsZeroGradient) {
  Tape tape;
  auto a = tape.leaf(Array::vector({1, 2}), true);
  auto b = tape.leaf(Array::vector({5, 6, 7}), true);
  tape.backward(sum(square(a)));
  EXPECT_EQ(tape.grad(b).shape(), b.shape());
  for (double g : tape.grad(b).values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(37);
  const std::vector<Array> in{random_array({2, 1, 4, 4, 4}, rng), random_array({2, 1, 3, 3, 3}, rng),
                              random_array({2}, rng), random_array({16, 1}, rng),
                              random_array({1}, rng), random_array({2}, rng, 0.0, 1.0)};
  const double err = max_gradient_error(
      [](Tape&, std::span<const Tensor> t) {
        auto c = activation(conv3d(t[0], t[1], t[2], Conv3dOptions{1, {1, 1, 1}}), Activation::Elu);
        auto p = reshape(maxpool3d(c, 2, 2), Shape{2, 16});
        auto out = reshape(fully_connected(p, t[3], t[4]), Shape{2});
        return mean(square(sub(out, t[5])));
      },
      in, rng);
  EXPECT_LT(err, 1e-5);
}

TEST(Backward, IsLinearInTheLoss) {
  std::mt19937_64 rng(41);
  const Array x0 = random_array({5}, rng);
  auto grad_of = [&](double a, double b) {
    Tape tape;
    auto x = tape.leaf(x0, true);
    auto l1 = sum(square(x));
    auto l2 = sum(activation(x, Activation::Sigmoid));
    tape.backward(add(scale(l1, a), scale(l2, b)));
    return tape.grad(x);
  };
  const Array g1 = grad_of(1.0, 0.0), g2 = grad_of(0.0, 1.0), g = grad_of(2.5, -0.75);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 2.5 * g1[i] - 0.75 * g2[i], 1e-14);
}

TEST(FiniteDifference, SquareAndConstant) {
  const Array g = finite_difference_gradient([](const Array& x) { return x[0] * x[0]; },
                                             Array::scalar(3.0), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
  const Array z = finite_difference_gradient([](const Array&) { return 4.0; },
                                             Array::vector({1, 2}), 1e-5);
  EXPECT_EQ(z.storage(), (std::vector<double>{0.0, 0.0}));
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(43);
  const Array x = random_array({2, 2, 6, 6, 6}, rng);
  const Array k = random_array({3, 2, 3, 3, 3}, rng);
  auto run = [&] {
    Tape tape;
    auto y = conv3d(tape.constant(x), tape.constant(k), tape.constant(Array(Shape{3})), same3());
    return maxpool3d(activation(y, Activation::Elu), 2, 2).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Forward, FiniteInputsGiveFiniteOutputs) {
  std::mt19937_64 rng(47);
  Tape tape;
  auto x = tape.constant(random_array({2, 3, 4, 4, 4}, rng, -50.0, 50.0));
  for (Activation kind : {Activation::Sigmoid, Activation::Elu, Activation::Tanh}) {
    EXPECT_TRUE(activation(x, kind).value().all_finite());
  }
}

}  // namespace
}  // namespace brainage
