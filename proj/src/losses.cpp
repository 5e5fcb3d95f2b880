#include "brainage/losses.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "brainage/error.hpp"
#include "brainage/optim.hpp"

namespace brainage {
namespace {

void check_same_size(const Tensor& a, const Tensor& b, const char* what) {
  if (a.size() != b.size() || a.size() == 0) {
    throw DimensionError(std::string(what) + ": sizes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " differ or are empty");
  }
}

Tensor flat(const Tensor& t) { return t.shape().size() == 1 ? t : reshape(t, Shape{t.size()}); }

void check_spans(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw DimensionError(std::string(what) + ": length mismatch");
  if (a.size() < 2) throw PreconditionError(std::string(what) + ": needs at least two values");
}

}  // namespace

Tensor mae_loss(const Tensor& y_hat, const Tensor& y) {
  check_same_size(y_hat, y, "mae_loss");
  return mean(abs(sub(flat(y_hat), flat(y))));
}

Tensor mse_loss(const Tensor& y_hat, const Tensor& y) {
  check_same_size(y_hat, y, "mse_loss");
  return mean(square(sub(flat(y_hat), flat(y))));
}

Tensor age_difference_loss(const Tensor& y_hat, const Tensor& y) {
  check_same_size(y_hat, y, "age_difference_loss");
  if (y_hat.size() < 2) throw PreconditionError("age_difference_loss needs at least two samples");
  return mean(square(sub(pairwise_differences(flat(y_hat)), pairwise_differences(flat(y)))));
}

std::vector<double> fractional_rank(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pcc(std::span<const double> a, std::span<const double> b) {
  check_spans(a, b, "pcc");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericError("correlation undefined: zero variance");
  // Sample covariance over sample deviations; the (n-1) factors cancel.
  return (sab / (n - 1.0)) / (std::sqrt(saa / (n - 1.0)) * std::sqrt(sbb / (n - 1.0)));
}

double srcc(std::span<const double> a, std::span<const double> b) {
  check_spans(a, b, "srcc");
  const std::vector<double> ra = fractional_rank(a), rb = fractional_rank(b);
  return pcc(ra, rb);
}

double srcc_tie_free(std::span<const double> a, std::span<const double> b) {
  check_spans(a, b, "srcc");
  const double n = static_cast<double>(a.size());
  return 1.0 - 6.0 * rank_loss_exact(a, b) / (n * (n * n - 1.0));
}

double rank_loss_exact(std::span<const double> y_hat, std::span<const double> y) {
  check_spans(y_hat, y, "rank_loss_exact");
  const std::vector<double> ra = fractional_rank(y_hat), rb = fractional_rank(y);
  double s = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) s += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return s;
}

SortingData make_sorting_data(std::size_t count, std::size_t length, std::uint64_t seed) {
  if (length < 2) throw PreconditionError("sorting sequences need length >= 2");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> bell(0.5, 0.15), jitter(0.0, 0.1);
  std::uniform_int_distribution<std::size_t> pos(0, length - 1);
  SortingData d{Array(Shape{count, length}), Array(Shape{count, length})};
  for (std::size_t s = 0; s < count; ++s) {
    double* z = d.values.data() + s * length;
    switch (s % 4) {
      case 0:
        for (std::size_t i = 0; i < length; ++i) z[i] = unit(rng);
        break;
      case 1:
        for (std::size_t i = 0; i < length; ++i) z[i] = std::clamp(bell(rng), 0.0, 1.0);
        break;
      case 2:
        for (std::size_t i = 0; i < length; ++i) z[i] = unit(rng);
        std::sort(z, z + length);
        for (std::size_t i = 0; i < length; ++i) z[i] += jitter(rng);
        break;
      default:
        for (std::size_t i = 0; i < length; ++i) z[i] = unit(rng);
        for (std::size_t k = 0; k < std::max<std::size_t>(1, length / 4); ++k) {
          const std::size_t dst = pos(rng);
          z[dst] = z[pos(rng)];
        }
        break;
    }
    const std::vector<double> r = fractional_rank(std::span<const double>(z, length));
    for (std::size_t i = 0; i < length; ++i) {
      d.targets[s * length + i] = (r[i] - 1.0) / static_cast<double>(length - 1);
    }
  }
  return d;
}

Sorter::Sorter(std::size_t length, std::size_t hidden, std::uint64_t seed)
    : length_(length), hidden_(hidden) {
  if (length < 2) throw ConfigError("sorter sequence length must be >= 2");
  if (hidden < 1) throw ConfigError("sorter hidden width must be >= 1");
  const std::size_t g4 = 4 * hidden;
  for (const char* dir : {"lstm.fwd", "lstm.bwd"}) {
    const std::string p = dir;
    store_.add(p + ".w_input", Shape{1, g4}, ParamKind::Weight, 1);
    store_.add(p + ".w_hidden", Shape{hidden, g4}, ParamKind::Weight, hidden);
    store_.add(p + ".bias", Shape{g4}, ParamKind::Bias);
  }
  add_fc(store_, "proj", 2 * hidden, 1);
  // Uniform(-1/sqrt(fan), 1/sqrt(fan)), the customary recurrent init.
  std::mt19937_64 rng(seed);
  for (auto& [name, param] : store_.entries()) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(name.starts_with("proj") ? 2 * hidden : hidden));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : param.value.values()) v = dist(rng);
  }
}

Tensor Sorter::forward_normalized(ParamBinding& params, const Tensor& normalized) const {
  const Shape& s = normalized.shape();
  if (s.size() != 2 || s[1] != length_) {
    throw PreconditionError("sorter expects sequences of length " + std::to_string(length_) +
                            ", got " + to_string(s));
  }
  const std::size_t b = s[0];
  const Tensor seq = reshape(transpose01(normalized), Shape{length_, b, 1});
  const LstmDirection fwd{params("lstm.fwd.w_input"), params("lstm.fwd.w_hidden"),
                          params("lstm.fwd.bias")};
  const LstmDirection bwd{params("lstm.bwd.w_input"), params("lstm.bwd.w_hidden"),
                          params("lstm.bwd.bias")};
  const Tensor h = reshape(lstm_sequence(seq, fwd, bwd), Shape{length_ * b, 2 * hidden_});
  const Tensor r = reshape(apply_fc(params, "proj", h), Shape{length_, b});
  return transpose01(r);
}

Tensor Sorter::apply(const Tensor& scores) const {
  const Shape& s = scores.shape();
  if (s.size() != 2 || s[1] != length_) {
    throw PreconditionError("sorter expects sequences of length " + std::to_string(length_) +
                            ", got " + to_string(s));
  }
  ParamBinding params(scores.tape(), store_);
  return forward_normalized(params, minmax_normalize(scores));
}

double Sorter::mean_rank_error(const SortingData& data) const {
  const std::size_t count = data.values.dim(0);
  double total = 0.0;
  for (std::size_t start = 0; start < count; start += 500) {
    std::vector<std::size_t> rows(std::min<std::size_t>(500, count - start));
    std::iota(rows.begin(), rows.end(), start);
    Tape tape;
    NoGradScope no_grad(tape);
    const Array out = apply(tape.constant(take_rows(data.values, rows))).value();
    const Array target = take_rows(data.targets, rows);
    for (std::size_t i = 0; i < out.size(); ++i) total += std::abs(out[i] - target[i]);
  }
  return total * static_cast<double>(length_ - 1) / static_cast<double>(data.values.size());
}

void Sorter::save(const std::filesystem::path& path) const {
  TensorRecords records;
  put_scalar(records, "sorter.sequence_length", static_cast<double>(length_));
  put_scalar(records, "sorter.hidden", static_cast<double>(hidden_));
  put_scalar(records, "sorter.trained", trained_ ? 1.0 : 0.0);
  export_store(store_, "sorter.", records);
  write_records(path, records);
}

Sorter Sorter::load(const std::filesystem::path& path) {
  const TensorRecords records = read_records(path);
  const double n = get_scalar(records, "sorter.sequence_length");
  const double h = get_scalar(records, "sorter.hidden");
  if (!(n >= 2.0) || !(h >= 1.0)) throw FormatError("invalid sorter header in " + path.string());
  Sorter s(static_cast<std::size_t>(n), static_cast<std::size_t>(h));
  import_store(records, "sorter.", s.store_);
  s.trained_ = get_scalar(records, "sorter.trained") != 0.0;
  return s;
}

Sorter sorter_train(std::size_t length, const SorterTrainConfig& config,
                    SorterTrainReport* report,
                    const std::function<void(std::size_t, double)>& progress) {
  if (config.batch_size < 1 || config.n_sequences < config.batch_size) {
    throw ConfigError("sorter training set smaller than one batch");
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(config.seed);
  Sorter sorter(length, config.hidden, rng());
  const SortingData train = make_sorting_data(config.n_sequences, length, rng());
  const SortingData heldout = make_sorting_data(config.heldout, length, rng());
  Array normalized;
  {
    Tape tape;
    NoGradScope no_grad(tape);
    normalized = minmax_normalize(tape.constant(train.values)).value();
  }
  AdamConfig adam_config;
  adam_config.lr = config.lr;
  Adam adam(adam_config);
  std::vector<std::size_t> order(config.n_sequences);
  std::iota(order.begin(), order.end(), 0);
  SorterTrainReport local;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + config.batch_size <= order.size();
         start += config.batch_size) {
      const std::span<const std::size_t> rows(order.data() + start, config.batch_size);
      Tape tape;
      ParamBinding params(tape, sorter.store_, true, NormMode::Train);
      const Tensor out = sorter.forward_normalized(params, tape.constant(take_rows(normalized, rows)));
      const Tensor diff = sub(out, tape.constant(take_rows(train.targets, rows)));
      const Tensor loss = scale(sum(square(diff)), 1.0 / static_cast<double>(config.batch_size));
      tape.backward(loss);
      adam.step(sorter.store_, params.gradients());
      loss_sum += loss.item();
      ++batches;
    }
    local.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    local.heldout_error.push_back(config.heldout > 0 ? sorter.mean_rank_error(heldout) : 0.0);
    if (progress) progress(epoch, local.heldout_error.back());
  }
  sorter.trained_ = true;
  local.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (report) *report = std::move(local);
  return sorter;
}

Tensor rank_loss(const Tensor& y_hat, const Tensor& y, const Sorter& sorter) {
  check_same_size(y_hat, y, "rank_loss");
  const std::size_t n = y_hat.size();
  const Tensor r_hat = sorter.apply(reshape(y_hat, Shape{1, n}));
  Array r_target;
  {
    NoGradScope no_grad(y.tape());
    r_target = sorter.apply(y.tape().constant(y.value().reshaped(Shape{1, n}))).value();
  }
  return sum(square(sub(r_hat, y_hat.tape().constant(r_target))));
}

void LossWeights::validate() const {
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("loss weights must be >= 0");
}

Tensor total_loss(const Tensor& y_hat, const Tensor& y, const Sorter* sorter,
                  const LossWeights& weights) {
  weights.validate();
  Tensor loss = mse_loss(y_hat, y);
  if (weights.lambda1 > 0.0) loss = add(loss, scale(age_difference_loss(y_hat, y), weights.lambda1));
  if (weights.lambda2 > 0.0) {
    if (!sorter) throw PreconditionError("rank loss requested without a trained sorter");
    loss = add(loss, scale(rank_loss(y_hat, y, *sorter), weights.lambda2));
  }
  return loss;
}

}  // namespace brainage
