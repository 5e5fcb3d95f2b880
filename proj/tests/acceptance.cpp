// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Usage: acceptance [--only 1,5,...] [--workdir DIR]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "brainage/analysis.hpp"
#include "brainage/data.hpp"
#include "brainage/losses.hpp"
#include "brainage/model.hpp"
#include "brainage/ops.hpp"
#include "brainage/train.hpp"
#include "brainage/weights_io.hpp"
#include "commands.hpp"
#include "test_util.hpp"

namespace brainage {
namespace {

namespace fs = std::filesystem;
using testing::max_gradient_error;
using testing::random_array;

// Desk-scale schedule for the end-to-end and ablation runs.
constexpr std::size_t kStage1Epochs = 40;
constexpr std::size_t kStage2Epochs = 20;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Result {
  int id = 0;
  std::string name;
  Outcome outcome;
  double seconds = 0.0;
  double budget = 0.0;  // 0: no runtime limit
  bool pass() const { return outcome.pass && (budget == 0.0 || seconds < budget); }
};

std::string num(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// State shared between criteria that build on each other.
struct Shared {
  fs::path workdir;
  std::optional<fs::path> sorter32;
  std::optional<double> stage1_total_seed0;  // test MAE of the end-to-end stage 1
  std::vector<double> train_y, train_y_hat;  // end-to-end training predictions
};

// ---------------------------------------------------------------------------
// 1. discretization
// ---------------------------------------------------------------------------

Outcome discretization(Shared&) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> age(-10.0, 130.0);
  std::size_t idempotence = 0, identity = 0;
  for (int i = 0; i < 100000; ++i) {
    const double y = age(rng);
    const double delta = 1.0 + static_cast<double>(i % 9);
    const double d = discretize(y, delta);
    if (discretize(d, delta) != d) ++idempotence;
    if (discretize(y, 0.0) != y) ++identity;
  }
  const double example = discretize(73.6, 5.0);
  return {example == 75.0 && idempotence == 0 && identity == 0,
          "D(73.6,5)=" + num(example) + ", idempotence violations " + std::to_string(idempotence) +
              ", delta=0 identity violations " + std::to_string(identity) + " over 1e5 points"};
}

// ---------------------------------------------------------------------------
// 2. discretization bounds
// ---------------------------------------------------------------------------

Outcome theorem_bounds(Shared&) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> age(0.0, 100.0), unit(-1.0, 1.0);
  std::size_t violations = 0, report_mismatch = 0, pairs = 0;
  for (double delta : {3.0, 5.0, 7.0, 9.0}) {
    for (int i = 0; i < 100000; ++i, ++pairs) {
      const double y = age(rng), y_hat = y + delta * unit(rng);
      // Independent of the library's own check.
      const double gap = std::abs(discretize(y, delta) - discretize(y_hat, delta));
      const double err = std::abs(discretize(y_hat, delta) - y);
      const bool ok = (gap == 0.0 || gap == delta) && err <= 1.5 * delta;
      if (!ok) ++violations;
      if (theorem1_check(y, y_hat, delta).holds() != ok) ++report_mismatch;
    }
  }
  return {violations == 0 && report_mismatch == 0,
          std::to_string(pairs) + " pairs over delta {3,5,7,9}: " + std::to_string(violations) +
              " violations, " + std::to_string(report_mismatch) + " disagreements with theorem1_check"};
}

// ---------------------------------------------------------------------------
// 3. gradient oracle
// ---------------------------------------------------------------------------

Sorter sorter_for_gradients(const Shared& shared) {
  if (shared.sorter32) return Sorter::load(*shared.sorter32);
  SorterTrainConfig c;
  c.n_sequences = 4000;
  c.epochs = 5;
  c.seed = 31;
  return sorter_train(32, c);
}

Outcome gradient_oracle(Shared& shared) {
  std::mt19937_64 rng(3);
  using Build = testing::GraphBuilder;
  struct Check {
    std::string name;
    Build build;
    std::vector<Array> inputs;
  };
  std::vector<Check> checks;
  auto add_check = [&](std::string name, Build b, std::vector<Array> in) {
    checks.push_back({std::move(name), std::move(b), std::move(in)});
  };
  auto arr = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_array(s, rng, lo, hi); };

  Conv3dOptions same;
  same.padding = {1, 1, 1};
  add_check("conv3d", [same](Tape&, std::span<const Tensor> in) { return conv3d(in[0], in[1], in[2], same); },
            {arr({2, 2, 4, 5, 3}), arr({3, 2, 3, 3, 3}), arr({3})});
  Conv3dOptions strided;
  strided.stride = 2;
  strided.padding = {0, 1, 1};
  add_check("conv3d_strided",
            [strided](Tape&, std::span<const Tensor> in) { return conv3d(in[0], in[1], in[2], strided); },
            {arr({1, 2, 5, 5, 6}), arr({2, 2, 1, 3, 3}), arr({2})});
  add_check("maxpool3d", [](Tape&, std::span<const Tensor> in) { return maxpool3d(in[0], 2, 2); },
            {arr({2, 2, 4, 4, 5})});
  add_check("global_avg_pool", [](Tape&, std::span<const Tensor> in) { return global_avg_pool(in[0]); },
            {arr({2, 3, 3, 2, 4})});
  add_check("pad_spatial",
            [](Tape&, std::span<const Tensor> in) { return pad_spatial(in[0], {4, 5, 5}); },
            {arr({1, 2, 3, 3, 4})});
  for (NormMode mode : {NormMode::Train, NormMode::Eval}) {
    add_check(mode == NormMode::Train ? "batch_norm_train" : "batch_norm_eval",
              [mode](Tape&, std::span<const Tensor> in) {
                RunningStats stats{Array(Shape{3}, 0.1), Array(Shape{3}, 1.5)};
                BatchNormOptions o;
                o.mode = mode;
                return batch_norm(in[0], in[1], in[2], stats, o);
              },
              {arr({3, 3, 2, 2, 2}), arr({3}, 0.5, 1.5), arr({3})});
  }
  for (auto [kind, name] : {std::pair{Activation::Relu, "relu"}, std::pair{Activation::Elu, "elu"},
                            std::pair{Activation::Sigmoid, "sigmoid"}, std::pair{Activation::Tanh, "tanh"},
                            std::pair{Activation::Identity, "identity"}}) {
    add_check(name, [kind](Tape&, std::span<const Tensor> in) { return activation(in[0], kind); },
              {arr({2, 3, 4})});
  }
  add_check("concat_channels",
            [](Tape&, std::span<const Tensor> in) { return concat_channels({in[0], in[1]}); },
            {arr({2, 1, 2, 2, 2}), arr({2, 3, 2, 2, 2})});
  add_check("channel_scale",
            [](Tape&, std::span<const Tensor> in) { return channel_scale(in[0], in[1]); },
            {arr({2, 3, 2, 2, 2}), arr({2, 3})});
  add_check("fully_connected",
            [](Tape&, std::span<const Tensor> in) { return fully_connected(in[0], in[1], in[2]); },
            {arr({4, 5}), arr({5, 3}), arr({3})});
  add_check("lstm_bidirectional",
            [](Tape&, std::span<const Tensor> in) {
              return lstm_sequence(in[0], LstmDirection{in[1], in[2], in[3]},
                                   LstmDirection{in[4], in[5], in[6]});
            },
            {arr({4, 2, 3}), arr({3, 8}), arr({2, 8}), arr({8}), arr({3, 8}), arr({2, 8}), arr({8})});
  add_check("add", [](Tape&, std::span<const Tensor> in) { return add(in[0], in[1]); }, {arr({6}), arr({6})});
  add_check("sub", [](Tape&, std::span<const Tensor> in) { return sub(in[0], in[1]); }, {arr({6}), arr({6})});
  add_check("mul", [](Tape&, std::span<const Tensor> in) { return mul(in[0], in[1]); }, {arr({6}), arr({6})});
  add_check("scale", [](Tape&, std::span<const Tensor> in) { return scale(in[0], -2.5); }, {arr({6})});
  add_check("add_scalar", [](Tape&, std::span<const Tensor> in) { return add_scalar(in[0], 3.0); }, {arr({6})});
  add_check("square", [](Tape&, std::span<const Tensor> in) { return square(in[0]); }, {arr({6})});
  add_check("abs", [](Tape&, std::span<const Tensor> in) { return abs(in[0]); }, {arr({6})});
  add_check("sum", [](Tape&, std::span<const Tensor> in) { return sum(in[0]); }, {arr({2, 3})});
  add_check("mean", [](Tape&, std::span<const Tensor> in) { return mean(in[0]); }, {arr({2, 3})});
  add_check("reshape", [](Tape&, std::span<const Tensor> in) { return reshape(in[0], {3, 2}); }, {arr({2, 3})});
  add_check("transpose01", [](Tape&, std::span<const Tensor> in) { return transpose01(in[0]); }, {arr({2, 3, 2})});
  add_check("pairwise_differences",
            [](Tape&, std::span<const Tensor> in) { return pairwise_differences(in[0]); }, {arr({6})});
  add_check("minmax_normalize",
            [](Tape&, std::span<const Tensor> in) { return minmax_normalize(in[0]); }, {arr({3, 6})});

  const Sorter sorter = sorter_for_gradients(shared);
  const std::size_t n = sorter.length();
  const Array y = random_array({n}, rng, 20.0, 80.0);
  const Array y_hat = random_array({n}, rng, 20.0, 80.0);
  add_check("mae_loss", [&](Tape& t, std::span<const Tensor> in) { return mae_loss(in[0], t.constant(y)); }, {y_hat});
  add_check("mse_loss", [&](Tape& t, std::span<const Tensor> in) { return mse_loss(in[0], t.constant(y)); }, {y_hat});
  add_check("age_difference_loss",
            [&](Tape& t, std::span<const Tensor> in) { return age_difference_loss(in[0], t.constant(y)); },
            {y_hat});
  add_check("rank_loss",
            [&](Tape& t, std::span<const Tensor> in) { return rank_loss(in[0], t.constant(y), sorter); },
            {y_hat});
  add_check("total_loss",
            [&](Tape& t, std::span<const Tensor> in) {
              return total_loss(in[0], t.constant(y), &sorter, {10.0, 10.0});
            },
            {y_hat});

  double worst = 0.0;
  std::string worst_name;
  std::size_t failures = 0;
  for (const Check& c : checks) {
    const double e = max_gradient_error(c.build, c.inputs, rng, 1e-5);
    if (!(e < 1e-4)) ++failures;
    if (!(e <= worst)) {
      worst = e;
      worst_name = c.name;
    }
  }
  return {failures == 0, std::to_string(checks.size()) + " primitives and losses (sorter N=" +
                             std::to_string(n) + "), worst relative error " + num(worst, 3) +
                             " (" + worst_name + "), " + std::to_string(failures) + " above 1e-4"};
}

// ---------------------------------------------------------------------------
// 4. ranking-loss algebra
// ---------------------------------------------------------------------------

Outcome ranking_algebra(Shared& shared) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  double worst_identity = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(32), b(32);
    for (double& v : a) v = u(rng);
    for (double& v : b) v = u(rng);
    const double n = 32.0;
    const double via_sum = 1.0 - 6.0 * rank_loss_exact(a, b) / (n * (n * n - 1.0));
    worst_identity = std::max(worst_identity, std::abs(via_sum - srcc(a, b)));
  }
  // Dyadic ages keep the shifted pairwise differences exact.
  bool shift_exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> yh(16), y(16), shifted(16);
    for (int i = 0; i < 16; ++i) {
      yh[i] = std::floor(u(rng)) / 4.0;
      y[i] = std::floor(u(rng)) / 4.0;
      shifted[i] = yh[i] + 17.0;
    }
    Tape t;
    const double l0 = age_difference_loss(t.constant(Array::vector(yh)), t.constant(Array::vector(y))).item();
    const double l1 = age_difference_loss(t.constant(Array::vector(shifted)), t.constant(Array::vector(y))).item();
    if (l0 != l1) shift_exact = false;
  }
  const Sorter sorter = sorter_for_gradients(shared);
  double self_loss = 0.0, affine_gap = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> y(sorter.length()), yh(sorter.length()), affine(sorter.length());
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = 20.0 + 0.7 * u(rng);
      yh[i] = 20.0 + 0.7 * u(rng);
      affine[i] = 2.5 * yh[i] + 13.0;
    }
    Tape t;
    const Tensor ty = t.constant(Array::vector(y));
    self_loss = std::max(self_loss, std::abs(rank_loss(ty, ty, sorter).item()));
    const double base = rank_loss(t.constant(Array::vector(yh)), ty, sorter).item();
    const double moved = rank_loss(t.constant(Array::vector(affine)), ty, sorter).item();
    affine_gap = std::max(affine_gap, std::abs(base - moved));
  }
  return {worst_identity <= 1e-12 && shift_exact && self_loss <= 1e-10 && affine_gap < 1e-10,
          "sum-of-squares vs SRCC max diff " + num(worst_identity, 3) + " (1000 vectors), shift " +
              (shift_exact ? "exact" : "NOT exact") + ", rank_loss(y,y) " + num(self_loss, 3) +
              ", affine change " + num(affine_gap, 3)};
}

// ---------------------------------------------------------------------------
// 5. sorter quality
// ---------------------------------------------------------------------------

Outcome sorter_quality(Shared& shared) {
  SorterTrainConfig c;  // 50k sequences
  SorterTrainReport report;
  const Sorter s = sorter_train(32, c, &report);
  const fs::path path = shared.workdir / "sorter32.tsnw";
  s.save(path);
  shared.sorter32 = path;
  const double err = report.heldout_error.back();
  return {err < 1.0, "N=32, " + std::to_string(c.n_sequences) + " sequences, " +
                         std::to_string(c.epochs) + " epochs: held-out mean rank error " + num(err)};
}

// ---------------------------------------------------------------------------
// 6 & 7. end-to-end regression and loss ablation
// ---------------------------------------------------------------------------

struct Cohort {
  Dataset train, val, test;
  double baseline = 0.0;  // test MAE of the training-mean predictor
};

const Cohort& cohort(Shared& shared) {
  static std::optional<Cohort> cached;
  if (cached) return *cached;
  PhantomParams p;  // 300 subjects, 32x40x32, ages 20-90
  const fs::path dir = shared.workdir / "cohort";
  const std::vector<SampleRecord> rows = phantom_generate(p, dir);
  const Splits splits = split_subject_level(rows, {0.70, 0.15, 0.15}, 0);
  Cohort c{load_dataset(splits.train, dir), load_dataset(splits.val, dir), load_dataset(splits.test, dir)};
  const double m = mean_of(c.train.ages);
  for (double a : c.test.ages) c.baseline += std::abs(a - m);
  c.baseline /= static_cast<double>(c.test.size());
  cached = std::move(c);
  return *cached;
}

TrainConfig desk_config(std::uint64_t seed, double lambda) {
  TrainConfig c;
  c.n_layer = 3;
  c.n_ini = 4;
  c.max_epochs = kStage1Epochs;
  c.lambda1 = c.lambda2 = lambda;
  c.seed = seed;
  return c;
}

const Sorter& batch_sorter(Shared& shared) {
  static std::optional<Sorter> sorter;
  if (!sorter) {
    if (!shared.sorter32) sorter_quality(shared);
    sorter = Sorter::load(*shared.sorter32);
  }
  return *sorter;
}

Outcome end_to_end(Shared& shared) {
  const Cohort& c = cohort(shared);
  const Sorter& sorter = batch_sorter(shared);
  TrainConfig config = desk_config(0, 10.0);
  TsanModel model(config.cascade({32, 40, 32}));
  train_stage1(model.stage1, c.train, c.val, config, &sorter);
  const double mae1 = stage1_mae(model.stage1, c.test);
  shared.stage1_total_seed0 = mae1;
  config.max_epochs = kStage2Epochs;
  train_stage2(model.stage2, model.stage1, c.train, c.val, config, &sorter);
  const double mae2 = cascade_mae(model, c.test);
  save_model(shared.workdir / "tsan.tsnw", model);
  shared.train_y = c.train.ages;
  shared.train_y_hat.clear();
  for (const auto& e : tsan_predict(model, c.train.volumes, c.train.sexes)) shared.train_y_hat.push_back(e.y_hat);
  return {mae2 < 0.5 * c.baseline && mae2 <= mae1 + 0.1,
          "test MAE stage1 " + num(mae1) + ", cascade " + num(mae2) + ", baseline " + num(c.baseline) +
              " (limit " + num(0.5 * c.baseline) + "); " + std::to_string(kStage1Epochs) + "+" +
              std::to_string(kStage2Epochs) + " epochs, n_layer 3, n_ini 4"};
}

Outcome ablation(Shared& shared) {
  const Cohort& c = cohort(shared);
  const Sorter& sorter = batch_sorter(shared);
  std::vector<double> total, mse;
  for (std::uint64_t seed : {0, 1, 2}) {
    for (double lambda : {10.0, 0.0}) {
      if (seed == 0 && lambda > 0.0 && shared.stage1_total_seed0) {
        total.push_back(*shared.stage1_total_seed0);
        continue;
      }
      const TrainConfig config = desk_config(seed, lambda);
      StageNetwork net(Stage::First, config.cascade({32, 40, 32}));
      train_stage1(net, c.train, c.val, config, lambda > 0.0 ? &sorter : nullptr);
      (lambda > 0.0 ? total : mse).push_back(stage1_mae(net, c.test));
    }
  }
  const double mt = mean_of(total), mm = mean_of(mse);
  std::string per_seed;
  for (std::size_t i = 0; i < total.size(); ++i) per_seed += " " + num(total[i]) + "/" + num(mse[i]);
  return {mt <= mm + 0.3,
          "stage-1 test MAE total " + num(mt) + " vs MSE " + num(mm) + " (per seed total/MSE:" + per_seed +
              "); total <= MSE + 0.1: " + (mt <= mm + 0.1 ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 8. bias correction
// ---------------------------------------------------------------------------

Outcome bias_correction(Shared& shared) {
  std::vector<double> y = shared.train_y, y_hat = shared.train_y_hat;
  std::string source = "end-to-end training predictions";
  if (y.empty()) {
    // Without the end-to-end run: a regression-to-the-mean predictor.
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> age(20, 90);
    std::normal_distribution<double> noise(0, 3);
    for (int i = 0; i < 210; ++i) {
      y.push_back(age(rng));
      y_hat.push_back(55.0 + 0.8 * (y.back() - 55.0) + noise(rng));
    }
    source = "synthetic shrunk predictions";
  }
  const BiasModel fitted = bias_fit(y_hat, y);
  std::vector<double> gap;
  for (std::size_t i = 0; i < y.size(); ++i) gap.push_back(bias_apply(y_hat[i], y[i], fitted) - y[i]);
  const double pcc_gap = pearson(gap, y);

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> age(20, 90);
  const double alpha = -0.183, beta = 9.71;
  std::vector<double> py, ph;
  for (int i = 0; i < 500; ++i) {
    py.push_back(age(rng));
    ph.push_back(py.back() + alpha * py.back() + beta);
  }
  const BiasModel planted = bias_fit(ph, py);
  const double err = std::max(std::abs(planted.alpha - alpha), std::abs(planted.beta - beta));
  return {std::abs(pcc_gap) <= 1e-10 && err <= 1e-6,
          "corrected-gap PCC " + num(pcc_gap, 3) + " on " + std::to_string(y.size()) + " " + source +
              "; planted (alpha,beta) error " + num(err, 3)};
}

// ---------------------------------------------------------------------------
// 9. classification
// ---------------------------------------------------------------------------

double pg_dual(const std::vector<double>& x, const std::vector<int>& y, double c, double gamma) {
  const std::size_t n = x.size();
  const double n_pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  std::vector<double> upper(n), q(n * n);
  double lmax = 0;
  for (std::size_t i = 0; i < n; ++i) {
    upper[i] = c * n / (2.0 * (y[i] == 1 ? n_pos : n - n_pos));
    double row = 0;
    for (std::size_t j = 0; j < n; ++j) {
      q[i * n + j] = y[i] * y[j] * std::exp(-gamma * (x[i] - x[j]) * (x[i] - x[j]));
      row += std::abs(q[i * n + j]);
    }
    lmax = std::max(lmax, row);
  }
  auto project = [&](const std::vector<double>& v) {
    std::vector<double> a(n);
    auto at = [&](double nu) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = std::clamp(v[i] - nu * y[i], 0.0, upper[i]);
        s += y[i] * a[i];
      }
      return s;
    };
    double lo = -1e6, hi = 1e6;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (at(mid) > 0 ? lo : hi) = mid;
    }
    at(0.5 * (lo + hi));
    return a;
  };
  std::vector<double> a(n, 0.0), z = a, prev = a, v(n);
  double t = 1.0;
  for (int it = 0; it < 20000; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double grad = -1.0;
      for (std::size_t j = 0; j < n; ++j) grad += q[i * n + j] * z[j];
      v[i] = z[i] - grad / lmax;
    }
    a = project(v);
    const double t_next = 0.5 * (1 + std::sqrt(1 + 4 * t * t));
    for (std::size_t i = 0; i < n; ++i) z[i] = a[i] + (t - 1) / t_next * (a[i] - prev[i]);
    prev = a;
    t = t_next;
  }
  double obj = 0;
  for (std::size_t i = 0; i < n; ++i) {
    obj += a[i];
    for (std::size_t j = 0; j < n; ++j) obj -= 0.5 * a[i] * a[j] * q[i * n + j];
  }
  return obj;
}

Outcome classification(Shared&) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> hc(0.082, 1.568), ad(7.780, 3.804);
  std::vector<double> x;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    x.push_back(hc(rng));
    labels.push_back(-1);
  }
  for (int i = 0; i < 196; ++i) {
    x.push_back(ad(rng));
    labels.push_back(1);
  }
  NestedCvOptions o;
  o.repeats = 100;
  o.seed = 10;
  const ClassificationReport real = nested_cv(x, labels, SvmGrid::standard(), o);

  std::vector<int> shuffled = labels;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const ClassificationReport null = nested_cv(x, shuffled, SvmGrid::standard(), o);

  // Dual objective against the projected-gradient oracle on a subsample.
  std::vector<double> sx;
  std::vector<int> sy;
  for (std::size_t i = 0; i < x.size(); i += 4) {
    sx.push_back(x[i]);
    sy.push_back(labels[i]);
  }
  double worst = 0.0;
  for (double c : {0.1, 1.0, 10.0}) {
    for (double gamma : {0.01, 0.1, 1.0}) {
      const double smo = svm_train(sx, sy, c, gamma).dual_objective;
      const double oracle = pg_dual(sx, sy, c, gamma);
      worst = std::max(worst, std::abs(smo - oracle) / std::max(1.0, std::abs(oracle)));
    }
  }
  const bool pass = real.auc.mean >= 0.85 && null.auc.mean >= 0.4 && null.auc.mean <= 0.6 && worst <= 1e-3;
  return {pass, "HC vs AD AUC " + num(real.auc.mean) + "±" + num(real.auc.std, 2) + " (ACC " +
                    num(real.acc.mean, 3) + ", SEN " + num(real.sen.mean, 3) + ", SPE " +
                    num(real.spe.mean, 3) + ", 100 repeats); shuffled-label AUC " + num(null.auc.mean) +
                    " (100 repeats); dual vs oracle max rel diff " +
                    num(worst, 3)};
}

// ---------------------------------------------------------------------------
// 10. determinism and I/O
// ---------------------------------------------------------------------------

bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files) {
  bool same = true;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename().string().find("run") != std::string::npos) continue;
    const fs::path rel = fs::relative(e.path(), a);
    if (slurp(e.path()) != slurp(b / rel)) same = false;
    ++files;
  }
  return same;
}

Outcome determinism(Shared& shared) {
  using namespace cli;
  const fs::path root = shared.workdir / "determinism";
  fs::remove_all(root);
  std::vector<std::string> problems;
  std::size_t files = 0;
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    GenDataOptions g;
    g.out = dir / "data";
    g.n_subjects = 40;
    g.dims = {16, 16, 16};
    g.group_fractions = {0.5, 0.0, 0.5};
    g.seed = 11;
    cmd_gen_data(g);
    std::ofstream(dir / "config.txt") << "n_layer=2\nn_ini=2\nbatch_size=8\nlr_stage1=0.01\n"
                                         "lr_stage2=0.00001\nmax_epochs=3\nlambda1=0\nlambda2=0\nseed=4\n";
    TrainOptions t;
    t.config = dir / "config.txt";
    t.data = g.out;
    t.verbose = false;
    t.stage = "1";
    t.out = dir / "stage1.tsnw";
    cmd_train(t);
    t.stage = "2";
    t.stage1 = dir / "stage1.tsnw";
    t.out = dir / "model.tsnw";
    cmd_train(t);
    EvalOptions e;
    e.model = dir / "model.tsnw";
    e.data = g.out;
    e.split = "train";
    e.out = dir / "eval_train";
    cmd_eval(e);
    cmd_bias({e.out / "predictions.csv", dir / "bias.txt"});
    e.split = (g.out / "manifest.csv").string();
    e.bias_model = dir / "bias.txt";
    e.out = dir / "eval_all";
    cmd_eval(e);
    ClassifyOptions c;
    c.gaps = e.out / "predictions.csv";
    c.repeats = 2;
    c.seed = 5;
    c.out = dir / "classification.csv";
    cmd_classify(c);
  }
  if (!same_tree(root / "a", root / "b", files)) problems.push_back("run outputs differ");

  // VOL1 bit-exact round trip, special values included.
  std::mt19937_64 rng(12);
  Volume v({5, 4, 3});
  std::normal_distribution<double> n01;
  for (double& x : v.voxels) x = n01(rng);
  v.voxels[0] = -0.0;
  v.voxels[1] = 4.9e-324;
  v.voxels[2] = 1.7976931348623157e308;
  volume_write(v, root / "v.vol");
  const Volume back = volume_read(root / "v.vol");
  if (back.dims != v.dims || std::memcmp(back.voxels.data(), v.voxels.data(), v.voxels.size() * sizeof(double)) != 0) {
    problems.push_back("VOL1 round trip");
  }
  volume_write(back, root / "v2.vol");
  if (slurp(root / "v.vol") != slurp(root / "v2.vol")) problems.push_back("VOL1 rewrite");

  // TSNW: a full cascade survives save/load/save byte for byte.
  const TensorRecords records = read_records(root / "a" / "model.tsnw");
  write_records(root / "copy.tsnw", records);
  const TensorRecords again = read_records(root / "copy.tsnw");
  bool tsnw_same = records.size() == again.size();
  for (const auto& [name, arr] : records) {
    const auto it = again.find(name);
    if (it == again.end() || it->second.shape() != arr.shape() ||
        std::memcmp(it->second.data(), arr.data(), arr.size() * sizeof(double)) != 0) {
      tsnw_same = false;
    }
  }
  if (!tsnw_same || slurp(root / "copy.tsnw") != slurp(root / "a" / "model.tsnw")) {
    problems.push_back("TSNW round trip");
  }
  std::string detail = std::to_string(files) + " generated, trained and report files byte-identical across two runs; VOL1 and TSNW round trips bit-exact";
  if (!problems.empty()) {
    detail = "problems:";
    for (const auto& p : problems) detail += " [" + p + "]";
  }
  return {problems.empty(), detail};
}

}  // namespace
}  // namespace brainage

int main(int argc, char** argv) {
  using namespace brainage;
  std::set<int> only;
  fs::path workdir = fs::temp_directory_path() / "brainage_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      for (std::string item; std::getline(s, item, ',');) only.insert(std::stoi(item));
    } else if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only 1,2,...] [--workdir DIR]\n");
      return 2;
    }
  }
  fs::create_directories(workdir);
  Shared shared{workdir};

  struct Entry {
    int id;
    const char* name;
    double budget;
    Outcome (*run)(Shared&);
  };
  // The sorter is trained first so later criteria can reuse it.
  const std::vector<Entry> entries{
      {5, "sorter quality", 600, sorter_quality},    {1, "discretization", 1, discretization},
      {2, "discretization bounds", 5, theorem_bounds}, {3, "gradient oracle", 120, gradient_oracle},
      {4, "ranking-loss algebra", 30, ranking_algebra}, {6, "end-to-end regression", 3600, end_to_end},
      {7, "loss ablation", 0, ablation},              {8, "bias correction", 5, bias_correction},
      {9, "classification", 600, classification},     {10, "determinism and I/O", 120, determinism}};
  std::vector<Result> results;
  for (const Entry& e : entries) {
    if (!only.empty() && !only.count(e.id)) continue;
    Result r{e.id, e.name, {}, 0.0, e.budget};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.outcome = e.run(shared);
    } catch (const std::exception& ex) {
      r.outcome = {false, std::string("exception: ") + ex.what()};
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "criterion %d finished in %.1f s\n", e.id, r.seconds);
    results.push_back(r);
  }
  std::sort(results.begin(), results.end(), [](const Result& a, const Result& b) { return a.id < b.id; });
  std::size_t passed = 0;
  for (const Result& r : results) {
    passed += r.pass();
    const std::string time = r.budget > 0 ? num(r.seconds, 3) + " s, budget " + num(r.budget, 4) + " s"
                                          : num(r.seconds, 3) + " s, no budget";
    std::printf("[%s] %2d %s: %s (%s)\n", r.pass() ? "PASS" : "FAIL", r.id, r.name.c_str(),
                r.outcome.detail.c_str(), time.c_str());
  }
  std::printf("acceptance: %zu/%zu criteria passed\n", passed, results.size());
  return passed == results.size() ? 0 : 1;
}
