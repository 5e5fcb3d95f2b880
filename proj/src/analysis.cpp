#include "brainage/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "brainage/error.hpp"
#include "brainage/losses.hpp"

namespace brainage {
namespace {

void check_pair(std::span<const double> a, std::span<const double> b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
  }
  if (a.size() < 2) throw PreconditionError(std::string(op) + ": need at least 2 samples");
}

std::optional<double> correlation(double (*f)(std::span<const double>, std::span<const double>),
                                  std::span<const double> a, std::span<const double> b) {
  try {
    return f(a, b);
  } catch (const NumericError&) {
    return std::nullopt;
  }
}

void check_labels(std::span<const int> labels, std::size_t n, const char* op) {
  if (labels.size() != n) throw DimensionError(std::string(op) + ": one label per sample required");
  bool pos = false, neg = false;
  for (int l : labels) {
    if (l == 1) pos = true;
    else if (l == -1) neg = true;
    else throw PreconditionError(std::string(op) + ": labels must be +1 or -1");
  }
  if (!pos || !neg) throw PreconditionError(std::string(op) + ": both classes must be present");
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct SmoResult {
  std::vector<double> alpha;
  double rho = 0.0;
  double objective = 0.0;
  double gap = 0.0;
  std::size_t iterations = 0;
};

// Minimizes 1/2 a'Qa - e'a with Q_ij = y_i y_j K_ij, 0 <= a_i <= C_i and
// y'a = 0, choosing the maximal violating pair at each step.
SmoResult smo(std::span<const double> k, std::span<const int> y, std::span<const double> upper,
              const SvmOptions& options) {
  const std::size_t n = y.size();
  SmoResult r;
  r.alpha.assign(n, 0.0);
  std::vector<double> g(n, -1.0);
  std::vector<double>& a = r.alpha;
  const std::size_t max_iter = std::max<std::size_t>(options.max_passes * n, 1);
  auto q = [&](std::size_t i, std::size_t j) { return y[i] * y[j] * k[i * n + j]; };
  double gap = 0.0;
  for (; r.iterations < max_iter; ++r.iterations) {
    double gmax = -std::numeric_limits<double>::infinity();
    double gmin = std::numeric_limits<double>::infinity();
    std::size_t i = n, j = n;
    for (std::size_t t = 0; t < n; ++t) {
      const double v = -y[t] * g[t];
      const bool up = y[t] == 1 ? a[t] < upper[t] : a[t] > 0.0;
      const bool low = y[t] == 1 ? a[t] > 0.0 : a[t] < upper[t];
      if (up && v > gmax) {
        gmax = v;
        i = t;
      }
      if (low && v < gmin) {
        gmin = v;
        j = t;
      }
    }
    gap = gmax - gmin;
    if (i == n || j == n || gap < options.tol) break;

    const double quad = std::max(k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j], 1e-12);
    const double ci = upper[i], cj = upper[j];
    const double old_i = a[i], old_j = a[j];
    if (y[i] != y[j]) {
      const double delta = (-g[i] - g[j]) / quad;
      const double diff = a[i] - a[j];
      a[i] += delta;
      a[j] += delta;
      if (diff > 0.0) {
        if (a[j] < 0.0) {
          a[j] = 0.0;
          a[i] = diff;
        }
      } else if (a[i] < 0.0) {
        a[i] = 0.0;
        a[j] = -diff;
      }
      if (diff > ci - cj) {
        if (a[i] > ci) {
          a[i] = ci;
          a[j] = ci - diff;
        }
      } else if (a[j] > cj) {
        a[j] = cj;
        a[i] = cj + diff;
      }
    } else {
      const double delta = (g[i] - g[j]) / quad;
      const double sum = a[i] + a[j];
      a[i] -= delta;
      a[j] += delta;
      if (sum > ci) {
        if (a[i] > ci) {
          a[i] = ci;
          a[j] = sum - ci;
        }
      } else if (a[j] < 0.0) {
        a[j] = 0.0;
        a[i] = sum;
      }
      if (sum > cj) {
        if (a[j] > cj) {
          a[j] = cj;
          a[i] = sum - cj;
        }
      } else if (a[i] < 0.0) {
        a[i] = 0.0;
        a[j] = sum;
      }
    }
    const double di = a[i] - old_i, dj = a[j] - old_j;
    for (std::size_t t = 0; t < n; ++t) g[t] += q(t, i) * di + q(t, j) * dj;
  }
  r.gap = gap;

  // Threshold from free vectors, else the midpoint of the feasible range.
  double ub = std::numeric_limits<double>::infinity();
  double lb = -std::numeric_limits<double>::infinity();
  double free_sum = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * g[t];
    if (a[t] >= upper[t]) {
      if (y[t] == -1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (a[t] <= 0.0) {
      if (y[t] == 1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++n_free;
      free_sum += yg;
    }
  }
  r.rho = n_free > 0 ? free_sum / static_cast<double>(n_free) : (ub + lb) / 2.0;
  double obj = 0.0;
  for (std::size_t t = 0; t < n; ++t) obj += a[t] * (1.0 - g[t]);
  r.objective = 0.5 * obj;
  return r;
}

// Balanced box constraints C * N / (2 * N_class).
std::vector<double> class_bounds(std::span<const int> y, double c) {
  const double n = static_cast<double>(y.size());
  const double n_pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
  std::vector<double> upper(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    upper[i] = c * n / (2.0 * (y[i] == 1 ? n_pos : n - n_pos));
  }
  return upper;
}

void rbf_matrix(std::span<const double> x, double gamma, std::vector<double>& k) {
  const std::size_t n = x.size();
  k.resize(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    k[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = x[i] - x[j];
      k[i * n + j] = k[j * n + i] = std::exp(-gamma * d * d);
    }
  }
}

MeanStd mean_std(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  MeanStd m;
  if (v.empty()) return m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// estimation metrics and bias correction
// ---------------------------------------------------------------------------

EstimationReport estimation_report(std::span<const double> y_hat, std::span<const double> y) {
  check_pair(y_hat, y, "estimation_report");
  EstimationReport r;
  std::vector<double> gap(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    gap[i] = y_hat[i] - y[i];
    r.mae += std::abs(gap[i]);
  }
  r.mae /= static_cast<double>(y.size());
  r.pcc_age = correlation(pcc, y_hat, y);
  r.srcc_age = correlation(srcc, y_hat, y);
  r.pcc_gap = correlation(pcc, gap, y);
  r.srcc_gap = correlation(srcc, gap, y);
  return r;
}

BiasModel bias_fit(std::span<const double> y_hat, std::span<const double> y) {
  check_pair(y_hat, y, "bias_fit");
  const double n = static_cast<double>(y.size());
  double my = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    my += y[i];
    mg += y_hat[i] - y[i];
  }
  my /= n;
  mg /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sxy += (y[i] - my) * ((y_hat[i] - y[i]) - mg);
    sxx += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw PreconditionError("bias_fit: chronological ages have zero variance");
  BiasModel m;
  m.alpha = sxy / sxx;
  m.beta = mg - m.alpha * my;
  return m;
}

double bias_apply(double y_hat, double y, const BiasModel& model) {
  return y_hat - (model.alpha * y + model.beta);
}

void save_bias_model(const BiasModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "alpha=" << format_double(model.alpha) << "\nbeta=" << format_double(model.beta) << '\n';
  if (!out) throw FormatError("write failed: " + path.string());
}

BiasModel load_bias_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  BiasModel m;
  bool has_alpha = false, has_beta = false;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(where + "expected key=value");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    double v = 0.0;
    const auto r = std::from_chars(value.data(), value.data() + value.size(), v);
    if (r.ec != std::errc() || r.ptr != value.data() + value.size()) {
      throw FormatError(where + "bad number '" + value + "'");
    }
    if (key == "alpha") {
      m.alpha = v;
      has_alpha = true;
    } else if (key == "beta") {
      m.beta = v;
      has_beta = true;
    } else {
      throw FormatError(where + "unknown key '" + key + "'");
    }
  }
  if (!has_alpha || !has_beta) throw FormatError(path.string() + ": needs alpha and beta");
  return m;
}

// ---------------------------------------------------------------------------
// SVM
// ---------------------------------------------------------------------------

SvmModel svm_train_kernel(std::span<const double> x, std::span<const int> labels,
                          std::span<const double> kernel, double c, double gamma,
                          const SvmOptions& options) {
  const std::size_t n = x.size();
  check_labels(labels, n, "svm_train");
  if (!(c > 0.0) || !(gamma > 0.0)) throw PreconditionError("svm_train: C and gamma must be > 0");
  if (kernel.size() != n * n) throw DimensionError("svm_train: kernel must be N x N");
  const std::size_t n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  SvmModel m;
  m.c = c;
  m.gamma = gamma;
  m.weight_positive = static_cast<double>(n) / (2.0 * static_cast<double>(n_pos));
  m.weight_negative = static_cast<double>(n) / (2.0 * static_cast<double>(n - n_pos));
  const SmoResult r = smo(kernel, labels, class_bounds(labels, c), options);
  for (std::size_t i = 0; i < n; ++i) {
    if (r.alpha[i] > 0.0) {
      m.support.push_back(x[i]);
      m.coef.push_back(r.alpha[i] * labels[i]);
    }
  }
  m.bias = -r.rho;
  m.dual_objective = r.objective;
  m.iterations = r.iterations;
  m.kkt_gap = r.gap;
  return m;
}

SvmModel svm_train(std::span<const double> x, std::span<const int> labels, double c, double gamma,
                   const SvmOptions& options) {
  check_labels(labels, x.size(), "svm_train");
  std::vector<double> k;
  rbf_matrix(x, gamma, k);
  return svm_train_kernel(x, labels, k, c, gamma, options);
}

double svm_decision(const SvmModel& model, double x) {
  double s = model.bias;
  for (std::size_t i = 0; i < model.support.size(); ++i) {
    const double d = model.support[i] - x;
    s += model.coef[i] * std::exp(-model.gamma * d * d);
  }
  return s;
}

// ---------------------------------------------------------------------------
// classification metrics
// ---------------------------------------------------------------------------

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_labels(labels, scores.size(), "roc_auc");
  const std::vector<double> ranks = fractional_rank(scores);
  double rank_sum = 0.0, n_pos = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (labels[i] == 1) {
      rank_sum += ranks[i];
      n_pos += 1.0;
    }
  }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

BinaryMetrics classification_metrics(std::span<const double> scores, std::span<const int> labels,
                                     double threshold) {
  check_labels(labels, scores.size(), "classification_metrics");
  double tp = 0, tn = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] > threshold;
    if (labels[i] == 1) {
      ++pos;
      tp += predicted;
    } else {
      ++neg;
      tn += !predicted;
    }
  }
  return {(tp + tn) / (pos + neg), tp / pos, tn / neg};
}

SvmGrid SvmGrid::standard() {
  SvmGrid g;
  for (double base : {1e-2, 1e-1, 1.0, 1e1, 1e2})
    for (double m : {1.0, 5.0}) g.c.push_back(m * base);
  for (double base : {1e-4, 1e-3, 1e-2, 1e-1, 1.0})
    for (double m : {1.0, 5.0}) g.gamma.push_back(m * base);
  return g;
}

std::vector<std::size_t> stratified_folds(std::span<const int> labels, std::size_t k,
                                          std::uint64_t seed) {
  if (k < 2) throw PreconditionError("stratified_folds: k must be >= 2");
  std::vector<std::size_t> fold(labels.size());
  std::mt19937_64 rng(seed);
  for (int cls : {1, -1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(i);
    if (idx.size() < k) {
      throw PreconditionError("class " + std::to_string(cls) + " has " +
                              std::to_string(idx.size()) + " samples, fewer than " +
                              std::to_string(k) + " folds");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t p = 0; p < idx.size(); ++p) fold[idx[p]] = p % k;
  }
  return fold;
}

ClassificationReport nested_cv(std::span<const double> x_in, std::span<const int> labels_in,
                               const SvmGrid& grid, const NestedCvOptions& options) {
  const std::size_t n = x_in.size();
  check_labels(labels_in, n, "nested_cv");
  if (grid.c.empty() || grid.gamma.empty()) throw PreconditionError("nested_cv: empty grid");
  // Canonical order makes every statistic independent of the input order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::pair(labels_in[a], x_in[a]) < std::pair(labels_in[b], x_in[b]);
  });
  std::vector<double> x(n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = x_in[order[i]];
    labels[i] = labels_in[order[i]];
  }
  // Class sizes must survive one outer split for the inner stratification.
  for (int cls : {1, -1}) {
    const std::size_t count = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), cls));
    if (count < options.outer_k || count - (count + options.outer_k - 1) / options.outer_k <
                                       options.inner_k) {
      throw PreconditionError("class " + std::to_string(cls) + " has " + std::to_string(count) +
                              " samples, too few for " + std::to_string(options.outer_k) + "x" +
                              std::to_string(options.inner_k) + " stratified folds");
    }
  }

  std::vector<std::vector<double>> kernels(grid.gamma.size());
  for (std::size_t g = 0; g < grid.gamma.size(); ++g) rbf_matrix(x, grid.gamma[g], kernels[g]);

  // Trains on rows `train` with the shared kernel and scores rows `test`.
  std::vector<double> sub_k;
  std::vector<int> sub_y;
  auto fit_score = [&](std::span<const std::size_t> train, std::span<const std::size_t> test,
                       std::size_t ci, std::size_t gi) {
    const std::vector<double>& k = kernels[gi];
    const std::size_t m = train.size();
    sub_k.resize(m * m);
    sub_y.resize(m);
    for (std::size_t a = 0; a < m; ++a) {
      sub_y[a] = labels[train[a]];
      for (std::size_t b = 0; b < m; ++b) sub_k[a * m + b] = k[train[a] * n + train[b]];
    }
    const SmoResult r = smo(sub_k, sub_y, class_bounds(sub_y, grid.c[ci]), options.svm);
    std::vector<double> scores;
    for (std::size_t t : test) {
      double v = -r.rho;
      for (std::size_t a = 0; a < m; ++a)
        if (r.alpha[a] > 0.0) v += r.alpha[a] * sub_y[a] * k[t * n + train[a]];
      scores.push_back(v);
    }
    return scores;
  };

  std::vector<double> aucs, accs, sens, spes;
  for (std::size_t rep = 0; rep < options.repeats; ++rep) {
    std::seed_seq seq{static_cast<std::uint32_t>(options.seed),
                      static_cast<std::uint32_t>(options.seed >> 32),
                      static_cast<std::uint32_t>(rep)};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    const std::uint64_t rep_seed = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    const std::vector<std::size_t> outer = stratified_folds(labels, options.outer_k, rep_seed);
    for (std::size_t of = 0; of < options.outer_k; ++of) {
      std::vector<std::size_t> train, test;
      for (std::size_t i = 0; i < n; ++i) (outer[i] == of ? test : train).push_back(i);
      std::vector<int> train_labels;
      for (std::size_t i : train) train_labels.push_back(labels[i]);
      const std::vector<std::size_t> inner =
          stratified_folds(train_labels, options.inner_k, rep_seed + 1 + of);

      std::vector<std::vector<std::size_t>> inner_train(options.inner_k), inner_test(options.inner_k);
      for (std::size_t a = 0; a < train.size(); ++a) {
        for (std::size_t f = 0; f < options.inner_k; ++f) {
          (inner[a] == f ? inner_test[f] : inner_train[f]).push_back(train[a]);
        }
      }
      double best_auc = -1.0;
      std::size_t best_c = 0, best_g = 0;
      std::vector<std::size_t> c_order(grid.c.size()), g_order(grid.gamma.size());
      std::iota(c_order.begin(), c_order.end(), 0);
      std::iota(g_order.begin(), g_order.end(), 0);
      std::sort(c_order.begin(), c_order.end(), [&](auto a, auto b) { return grid.c[a] < grid.c[b]; });
      std::sort(g_order.begin(), g_order.end(),
                [&](auto a, auto b) { return grid.gamma[a] < grid.gamma[b]; });
      for (std::size_t ci : c_order) {
        for (std::size_t gi : g_order) {
          double auc = 0.0;
          for (std::size_t f = 0; f < options.inner_k; ++f) {
            const auto scores = fit_score(inner_train[f], inner_test[f], ci, gi);
            std::vector<int> y;
            for (std::size_t t : inner_test[f]) y.push_back(labels[t]);
            auc += roc_auc(scores, y);
          }
          auc /= static_cast<double>(options.inner_k);
          if (auc > best_auc) {
            best_auc = auc;
            best_c = ci;
            best_g = gi;
          }
        }
      }
      const auto scores = fit_score(train, test, best_c, best_g);
      std::vector<int> y;
      for (std::size_t t : test) y.push_back(labels[t]);
      aucs.push_back(roc_auc(scores, y));
      const BinaryMetrics bm = classification_metrics(scores, y);
      accs.push_back(bm.acc);
      sens.push_back(bm.sen);
      spes.push_back(bm.spe);
    }
  }
  ClassificationReport r;
  r.auc = mean_std(aucs);
  r.acc = mean_std(accs);
  r.sen = mean_std(sens);
  r.spe = mean_std(spes);
  r.evaluations = aucs.size();
  return r;
}

}  // namespace brainage
