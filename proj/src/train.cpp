#include "brainage/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "brainage/error.hpp"

namespace brainage {
namespace {

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& text, const std::string& where) {
  double v = 0.0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw ConfigError(where + "expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& text, const std::string& where) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw ConfigError(where + "expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

// Field table shared by the parser and the formatter.
struct Field {
  const char* key;
  double TrainConfig::*real = nullptr;
  std::size_t TrainConfig::*count = nullptr;
};

constexpr Field kFields[] = {
    {"lr_stage1", &TrainConfig::lr_stage1},
    {"lr_stage2", &TrainConfig::lr_stage2},
    {"adam_beta1", &TrainConfig::adam_beta1},
    {"adam_beta2", &TrainConfig::adam_beta2},
    {"adam_decay", &TrainConfig::adam_decay},
    {"batch_size", nullptr, &TrainConfig::batch_size},
    {"weight_decay", &TrainConfig::weight_decay},
    {"lr_factor", &TrainConfig::lr_factor},
    {"lr_patience", nullptr, &TrainConfig::lr_patience},
    {"early_stop_patience", nullptr, &TrainConfig::early_stop_patience},
    {"max_epochs", nullptr, &TrainConfig::max_epochs},
    {"augment_prob", &TrainConfig::augment_prob},
    {"max_translate", &TrainConfig::max_translate},
    {"max_rotate", &TrainConfig::max_rotate},
    {"delta_d", &TrainConfig::delta_d},
    {"lambda1", &TrainConfig::lambda1},
    {"lambda2", &TrainConfig::lambda2},
    {"n_layer", nullptr, &TrainConfig::n_layer},
    {"n_ini", nullptr, &TrainConfig::n_ini},
    {"kernel_size", nullptr, &TrainConfig::kernel_size},
    {"se_reduction", nullptr, &TrainConfig::se_reduction},
    {"head_hidden", nullptr, &TrainConfig::head_hidden},
};

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

double mean_abs_error(std::span<const double> y_hat, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y_hat[i] - y[i]);
  return s / static_cast<double>(y.size());
}

template <typename Fn>
void for_each_batch(std::size_t n, std::size_t batch, Fn&& fn) {
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> rows(std::min(batch, n - start));
    std::iota(rows.begin(), rows.end(), start);
    fn(rows);
  }
}

std::vector<Sex> pick(std::span<const Sex> s, std::span<const std::size_t> rows) {
  std::vector<Sex> out;
  for (std::size_t r : rows) out.push_back(s[r]);
  return out;
}

Array column_array(std::span<const double> v, std::span<const std::size_t> rows) {
  Array a(Shape{rows.size(), 1});
  for (std::size_t k = 0; k < rows.size(); ++k) a[k] = v[rows[k]];
  return a;
}

// D(first-stage estimate) for every row of `volumes`, in eval mode.
std::vector<double> discretized_first_stage(const StageNetwork& stage1, const Array& volumes,
                                            std::span<const Sex> sexes, double delta_d) {
  std::vector<double> d = first_stage_predict(stage1, volumes, sexes);
  for (double& v : d) v = discretize(v, delta_d);
  return d;
}

// Residual-stage estimates D(y1) + r for known D(y1), in eval mode.
std::vector<double> second_stage_predict(const StageNetwork& net, const Array& volumes,
                                         std::span<const Sex> sexes, std::span<const double> d1) {
  std::vector<double> out;
  for_each_batch(sexes.size(), 16, [&](const std::vector<std::size_t>& rows) {
    Tape tape;
    NoGradScope no_grad(tape);
    ParamBinding p(tape, net.params());
    const Tensor r = net.forward(p, tape.constant(take_rows(volumes, rows)),
                                 tape.constant(sex_one_hot(pick(sexes, rows))),
                                 tape.constant(column_array(d1, rows)));
    for (std::size_t k = 0; k < rows.size(); ++k) out.push_back(d1[rows[k]] + r.value()[k]);
  });
  return out;
}

Array history_column(const TrainHistory& h, double EpochRecord::*field) {
  Array a(Shape{h.epochs.size()});
  for (std::size_t i = 0; i < h.epochs.size(); ++i) a[i] = h.epochs[i].*field;
  return a;
}

struct LoopState {
  std::size_t epoch = 0;  // completed epochs
  Adam adam;
  PlateauSchedule plateau;
  EarlyStopping early;
  ParameterStore best;
  TrainHistory history;
};

void save_checkpoint(const std::filesystem::path& path, const LoopState& s,
                     const ParameterStore& current) {
  TensorRecords r;
  put_scalar(r, "state.epoch", static_cast<double>(s.epoch));
  put_scalar(r, "state.plateau_best", s.plateau.best());
  put_scalar(r, "state.plateau_stale", static_cast<double>(s.plateau.stale_epochs()));
  put_scalar(r, "state.early_best", s.early.best());
  put_scalar(r, "state.early_stale", static_cast<double>(s.early.stale_epochs()));
  put_scalar(r, "state.best_epoch", static_cast<double>(s.history.best_epoch));
  put_scalar(r, "state.best_val_mae", s.history.best_val_mae);
  r["history.train_loss"] = history_column(s.history, &EpochRecord::train_loss);
  r["history.val_mae"] = history_column(s.history, &EpochRecord::val_mae);
  r["history.lr"] = history_column(s.history, &EpochRecord::lr);
  export_store(current, "current.", r);
  export_store(s.best, "best.", r);
  s.adam.export_state("adam.", r);
  const std::filesystem::path tmp = path.string() + ".tmp";
  write_records(tmp, r);
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(const std::filesystem::path& path, LoopState& s, ParameterStore& current) {
  const TensorRecords r = read_records(path);
  s.epoch = static_cast<std::size_t>(get_scalar(r, "state.epoch"));
  s.plateau.restore(get_scalar(r, "state.plateau_best"),
                    static_cast<std::size_t>(get_scalar(r, "state.plateau_stale")));
  s.early.restore(get_scalar(r, "state.early_best"),
                  static_cast<std::size_t>(get_scalar(r, "state.early_stale")));
  s.history.best_epoch = static_cast<std::size_t>(get_scalar(r, "state.best_epoch"));
  s.history.best_val_mae = get_scalar(r, "state.best_val_mae");
  const Array& loss = r.at("history.train_loss");
  const Array& mae = r.at("history.val_mae");
  const Array& lr = r.at("history.lr");
  s.history.epochs.clear();
  for (std::size_t i = 0; i < loss.size(); ++i) {
    s.history.epochs.push_back({i + 1, loss[i], mae[i], lr[i]});
  }
  import_store(r, "current.", current);
  s.best = current;
  import_store(r, "best.", s.best);
  s.adam.import_state(r, "adam.");
}

using BatchLoss = std::function<Tensor(ParamBinding&, const Array& volumes,
                                       std::span<const std::size_t> rows)>;

// Shared epoch loop of both stages.
TrainHistory run_training(StageNetwork& net, const Dataset& train, const TrainConfig& config,
                          double lr, std::uint64_t stage_tag, const BatchLoss& batch_loss,
                          const std::function<double()>& val_mae, const TrainHooks& hooks,
                          const std::function<void()>& initialize) {
  if (train.size() < config.batch_size) {
    throw PreconditionError("training set has " + std::to_string(train.size()) +
                            " samples, fewer than one batch of " +
                            std::to_string(config.batch_size));
  }
  LoopState s{0,
              Adam({lr, config.adam_beta1, config.adam_beta2, 1e-8, config.adam_decay,
                    config.weight_decay}),
              PlateauSchedule(config.lr_factor, config.lr_patience),
              EarlyStopping(config.early_stop_patience),
              {},
              {}};
  const bool resuming =
      hooks.resume && hooks.checkpoint && std::filesystem::exists(*hooks.checkpoint);
  if (resuming) {
    load_checkpoint(*hooks.checkpoint, s, net.params());
  } else {
    initialize();
    s.best = net.params();
  }
  const std::size_t batches = train.size() / config.batch_size;
  bool stop = false;
  if (resuming && s.early.stale_epochs() >= config.early_stop_patience) {
    stop = true;
    s.history.stopped_early = true;
  }
  while (!stop && s.epoch < config.max_epochs) {
    const std::size_t epoch = s.epoch + 1;
    std::mt19937_64 rng(derive_seed(config.seed, stage_tag, epoch));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const double epoch_lr = s.adam.lr();
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::span<const std::size_t> rows(order.data() + b * config.batch_size,
                                              config.batch_size);
      Array volumes = take_rows(train.volumes, rows);
      augment_batch(volumes, rng, config);
      Tape tape;
      ParamBinding params(tape, net.params(), true, NormMode::Train);
      const Tensor loss = batch_loss(params, volumes, rows);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      tape.backward(loss);
      s.adam.step(net.params(), params.gradients());
      loss_sum += loss.item();
    }
    const EpochRecord rec{epoch, loss_sum / static_cast<double>(batches), val_mae(), epoch_lr};
    s.history.epochs.push_back(rec);
    s.adam.set_lr(s.plateau.update(rec.train_loss, s.adam.lr()));
    stop = s.early.update(rec.val_mae);
    if (s.early.improved()) {
      s.best = net.params();
      s.history.best_epoch = epoch;
      s.history.best_val_mae = rec.val_mae;
    }
    s.history.stopped_early = stop;
    s.epoch = epoch;
    if (hooks.checkpoint) save_checkpoint(*hooks.checkpoint, s, net.params());
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  net.params() = s.best;
  return s.history;
}

Tensor stage_loss(const Tensor& y_hat, const Tensor& y, const Sorter* sorter,
                  const TrainConfig& config) {
  if (config.lambda1 == 0.0 && config.lambda2 == 0.0) return mse_loss(y_hat, y);
  return total_loss(y_hat, y, sorter, config.loss_weights());
}

void check_training_inputs(const StageNetwork& net, const Dataset& train, const Dataset& val,
                           const TrainConfig& config, const Sorter* sorter) {
  config.validate();
  if (val.size() == 0) throw PreconditionError("validation set is empty");
  for (const Dataset* d : {&train, &val}) {
    const auto& e = net.config().input_extent;
    if (d->volumes.rank() != 5 || d->volumes.dim(2) != e[0] || d->volumes.dim(3) != e[1] ||
        d->volumes.dim(4) != e[2]) {
      throw DimensionError("dataset volumes do not match the model input extent");
    }
  }
  if (config.lambda2 > 0.0) {
    if (!sorter) throw PreconditionError("lambda2 > 0 requires a trained sorter");
    if (sorter->length() != config.batch_size) {
      throw ConfigError("sorter length " + std::to_string(sorter->length()) +
                        " differs from batch_size " + std::to_string(config.batch_size));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ConfigError(std::string(name) + " must be > 0");
  };
  positive(lr_stage1, "lr_stage1");
  positive(lr_stage2, "lr_stage2");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in [0,1)");
  if (!(adam_decay >= 0.0)) throw ConfigError("adam_decay must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_factor > 0.0 && lr_factor <= 1.0)) throw ConfigError("lr_factor must lie in (0,1]");
  if (lr_patience < 1) throw ConfigError("lr_patience must be >= 1");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(augment_prob >= 0.0 && augment_prob <= 1.0)) {
    throw ConfigError("augment_prob must lie in [0,1]");
  }
  if (!(max_translate >= 0.0)) throw ConfigError("max_translate must be >= 0");
  if (!(max_rotate >= 0.0)) throw ConfigError("max_rotate must be >= 0");
  if (!(delta_d >= 0.0)) throw ConfigError("delta_d must be >= 0");
  if (!(lambda1 >= 0.0)) throw ConfigError("lambda1 must be >= 0");
  if (!(lambda2 >= 0.0)) throw ConfigError("lambda2 must be >= 0");
  if (head_hidden < 1) throw ConfigError("head_hidden must be >= 1");
  ScaledDenseConfig{n_layer, n_ini, kernel_size, se_reduction}.validate();
}

CascadeConfig TrainConfig::cascade(std::array<std::size_t, 3> input_extent) const {
  CascadeConfig c;
  c.delta_d = delta_d;
  c.backbone = {n_layer, n_ini, kernel_size, se_reduction};
  c.head_hidden = head_hidden;
  c.input_extent = input_extent;
  c.validate();
  return c;
}

TrainConfig parse_train_config(const std::string& text, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string where = "config line " + std::to_string(lineno) + ": ";
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "seed") {
      c.seed = parse_uint(value, where);
      continue;
    }
    const auto f = std::find_if(std::begin(kFields), std::end(kFields),
                                [&](const Field& f) { return key == f.key; });
    if (f == std::end(kFields)) throw ConfigError(where + "unknown key '" + key + "'");
    if (f->real) {
      c.*(f->real) = parse_double(value, where);
    } else {
      c.*(f->count) = static_cast<std::size_t>(parse_uint(value, where));
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path, const TrainConfig& defaults) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_train_config(ss.str(), defaults);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_train_config(const TrainConfig& config) {
  std::string out;
  for (const Field& f : kFields) {
    out += f.key;
    out += '=';
    out += f.real ? format_double(config.*(f.real)) : std::to_string(config.*(f.count));
    out += '\n';
  }
  out += "seed=" + std::to_string(config.seed) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

std::optional<AugmentParams> draw_augmentation(std::mt19937_64& rng, const TrainConfig& config) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (!(unit(rng) < config.augment_prob)) return std::nullopt;
  std::uniform_real_distribution<double> shift(-config.max_translate, config.max_translate);
  std::uniform_real_distribution<double> angle(-config.max_rotate, config.max_rotate);
  AugmentParams p;
  for (double& t : p.translate) t = shift(rng);
  p.rotate_deg = angle(rng);
  p.flip = unit(rng) < 0.5;
  return p;
}

Volume apply_augmentation(const Volume& volume, const AugmentParams& params) {
  volume.validate();
  const auto [dx, dy, dz] = volume.dims;
  Volume out(volume.dims);
  const double cx = (dx - 1) / 2.0, cy = (dy - 1) / 2.0;
  const double theta = params.rotate_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  auto inside = [](long v, std::uint32_t n) { return v >= 0 && v < static_cast<long>(n); };
  for (std::uint32_t z = 0; z < dz; ++z) {
    const long sz = std::lround(z - params.translate[2]);
    if (!inside(sz, dz)) continue;
    for (std::uint32_t y = 0; y < dy; ++y)
      for (std::uint32_t x = 0; x < dx; ++x) {
        // Undo the flip, the translation, then the rotation about the centre.
        const double fx = params.flip ? (dx - 1.0) - x : static_cast<double>(x);
        const double ux = fx - params.translate[0] - cx;
        const double uy = y - params.translate[1] - cy;
        const long sx = std::lround(cx + c * ux + s * uy);
        const long sy = std::lround(cy - s * ux + c * uy);
        if (inside(sx, dx) && inside(sy, dy)) out.at(x, y, z) = volume.at(sx, sy, sz);
      }
  }
  return out;
}

Volume augment(const Volume& volume, std::mt19937_64& rng, const TrainConfig& config) {
  const auto p = draw_augmentation(rng, config);
  return p ? apply_augmentation(volume, *p) : volume;
}

void augment_batch(Array& volumes, std::mt19937_64& rng, const TrainConfig& config) {
  if (volumes.rank() != 5 || volumes.dim(1) != 1) {
    throw DimensionError("augment_batch expects [N,1,D,H,W]");
  }
  const std::size_t voxels = volumes.size() / volumes.dim(0);
  for (std::size_t n = 0; n < volumes.dim(0); ++n) {
    const auto p = draw_augmentation(rng, config);
    if (!p) continue;
    const Volume v = apply_augmentation(array_to_volume(volumes, n), *p);
    std::copy(v.voxels.begin(), v.voxels.end(), volumes.data() + n * voxels);
  }
}

// ---------------------------------------------------------------------------
// history
// ---------------------------------------------------------------------------

void write_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "epoch,train_loss,val_mae,lr\n";
  for (const EpochRecord& r : history.epochs) {
    out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_mae) << ','
        << format_double(r.lr) << '\n';
  }
  if (!out) throw FormatError("write failed: " + path.string());
}

TrainHistory read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,val_mae,lr") {
    throw FormatError(path.string() + ":1: expected header epoch,train_loss,val_mae,lr");
  }
  TrainHistory h;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (f.size() != 4) throw FormatError(where + "expected 4 fields");
    try {
      EpochRecord r{static_cast<std::size_t>(parse_uint(f[0], where)), parse_double(f[1], where),
                    parse_double(f[2], where), parse_double(f[3], where)};
      if (r.val_mae < h.best_val_mae) {
        h.best_val_mae = r.val_mae;
        h.best_epoch = r.epoch;
      }
      h.epochs.push_back(r);
    } catch (const ConfigError& e) {
      throw FormatError(e.what());
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

TrainHistory train_stage1(StageNetwork& net, const Dataset& train, const Dataset& val,
                          const TrainConfig& config, const Sorter* sorter,
                          const TrainHooks& hooks) {
  if (net.stage() != Stage::First) throw PreconditionError("train_stage1 needs a first-stage net");
  check_training_inputs(net, train, val, config, sorter);
  const BatchLoss batch_loss = [&](ParamBinding& params, const Array& volumes,
                                   std::span<const std::size_t> rows) {
    Tape& tape = params.tape();
    const Tensor y_hat = net.forward(params, tape.constant(volumes),
                                     tape.constant(sex_one_hot(pick(train.sexes, rows))));
    return stage_loss(y_hat, tape.constant(column_array(train.ages, rows)), sorter, config);
  };
  const auto val_mae = [&] { return stage1_mae(net, val); };
  // Starting as the mean-age predictor keeps the output ReLU active.
  const double mean_age = std::accumulate(train.ages.begin(), train.ages.end(), 0.0) /
                          static_cast<double>(train.size());
  const auto initialize = [&] {
    he_init(net.params(), derive_seed(config.seed, 1));
    net.params().value("head.output.bias").fill(mean_age / net.config().output_scale);
    net.params().value("head.output.weight").fill(0.0);
  };
  return run_training(net, train, config, config.lr_stage1, 1, batch_loss, val_mae, hooks,
                      initialize);
}

TrainHistory train_stage2(StageNetwork& net, const StageNetwork& stage1, const Dataset& train,
                          const Dataset& val, const TrainConfig& config, const Sorter* sorter,
                          const TrainHooks& hooks) {
  if (net.stage() != Stage::Second || stage1.stage() != Stage::First) {
    throw PreconditionError("train_stage2 needs a second-stage net and a first-stage net");
  }
  check_training_inputs(net, train, val, config, sorter);
  if (stage1.config().delta_d != net.config().delta_d) {
    throw ConfigError("stage networks disagree on delta_d");
  }
  const double delta = net.config().delta_d;
  const std::vector<double> val_d1 = discretized_first_stage(stage1, val.volumes, val.sexes, delta);
  const BatchLoss batch_loss = [&](ParamBinding& params, const Array& volumes,
                                   std::span<const std::size_t> rows) {
    Tape& tape = params.tape();
    const std::vector<Sex> sexes = pick(train.sexes, rows);
    const Tensor x = tape.constant(volumes);
    const Tensor sex = tape.constant(sex_one_hot(sexes));
    Array d1;
    {
      NoGradScope no_grad(tape);
      ParamBinding frozen(tape, stage1.params());
      d1 = stage1.forward(frozen, x, sex).value();
      for (double& v : d1.values()) v = discretize(v, delta);
    }
    const Tensor d1t = tape.constant(d1);
    const Tensor y_hat = add(net.forward(params, x, sex, d1t), d1t);
    return stage_loss(y_hat, tape.constant(column_array(train.ages, rows)), sorter, config);
  };
  const auto val_mae = [&] {
    return mean_abs_error(second_stage_predict(net, val.volumes, val.sexes, val_d1), val.ages);
  };
  const auto initialize = [&] {
    he_init(net.params(), derive_seed(config.seed, 2));
    for (auto& [name, p] : net.params().entries())
      if (name.starts_with("head.output.")) p.value.fill(0.0);
  };
  return run_training(net, train, config, config.lr_stage2, 2, batch_loss, val_mae, hooks,
                      initialize);
}

double stage1_mae(const StageNetwork& net, const Dataset& data) {
  return mean_abs_error(first_stage_predict(net, data.volumes, data.sexes), data.ages);
}

double cascade_mae(const TsanModel& model, const Dataset& data) {
  const auto est = tsan_predict(model, data.volumes, data.sexes);
  std::vector<double> y_hat;
  for (const auto& e : est) y_hat.push_back(e.y_hat);
  return mean_abs_error(y_hat, data.ages);
}

}  // namespace brainage
