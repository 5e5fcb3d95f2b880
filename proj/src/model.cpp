#include "brainage/model.hpp"

#include <cmath>
#include <numeric>

#include "brainage/error.hpp"

namespace brainage {

Array sex_one_hot(std::span<const Sex> sexes) {
  Array out(Shape{sexes.size(), 2});
  for (std::size_t i = 0; i < sexes.size(); ++i) {
    out[2 * i + (sexes[i] == Sex::Male ? 0 : 1)] = 1.0;
  }
  return out;
}

double discretize(double y_hat, double delta_d) {
  if (!(delta_d >= 0.0)) throw PreconditionError("discretize: delta_d must be >= 0");
  if (delta_d == 0.0) return y_hat;
  return std::round(y_hat / delta_d) * delta_d;
}

Theorem1Report theorem1_check(double y, double y_hat, double delta_d) {
  Theorem1Report r;
  const double eps = std::abs(y_hat - y);
  r.applicable = delta_d >= eps;
  r.discretized_gap = std::abs(discretize(y, delta_d) - discretize(y_hat, delta_d));
  r.estimate_error = std::abs(discretize(y_hat, delta_d) - y);
  if (!r.applicable) return r;
  const double tol = 1e-9 * std::max(1.0, std::abs(y) + delta_d);
  r.gap_holds = r.discretized_gap <= tol || std::abs(r.discretized_gap - delta_d) <= tol;
  r.bound_holds = r.estimate_error <= 0.5 * delta_d + eps + tol && 0.5 * delta_d + eps <= 1.5 * delta_d + tol;
  return r;
}

void CascadeConfig::validate() const {
  if (!(delta_d >= 0.0)) throw ConfigError("delta_d must be >= 0");
  if (head_hidden < 1) throw ConfigError("head_hidden must be >= 1");
  if (!(age_scale > 0.0)) throw ConfigError("age_scale must be > 0");
  if (!(output_scale > 0.0)) throw ConfigError("output_scale must be > 0");
  backbone.validate();
}

StageNetwork::StageNetwork(Stage stage, const CascadeConfig& config)
    : config_(config),
      stage_(stage),
      backbone_(store_, "backbone", config.backbone, 1, config.input_extent) {
  config_.validate();
  const std::size_t extra = stage == Stage::First ? 2 : 3;
  add_fc(store_, "head.hidden", backbone_.out_channels() + extra, config.head_hidden);
  add_fc(store_, "head.output", config.head_hidden, 1);
}

Tensor StageNetwork::forward(ParamBinding& params, const Tensor& volume, const Tensor& sex,
                             const std::optional<Tensor>& d1) const {
  const std::size_t n = volume.shape().empty() ? 0 : volume.shape()[0];
  if (sex.shape() != Shape{n, 2}) {
    throw DimensionError("sex one-hot must be [" + std::to_string(n) + ",2], got " +
                         to_string(sex.shape()));
  }
  std::vector<Tensor> head_inputs{global_avg_pool(backbone_.forward(params, volume)), sex};
  if (stage_ == Stage::Second) {
    if (!d1) throw PreconditionError("second stage needs the discretized first-stage age");
    if (d1->shape() != Shape{n, 1}) {
      throw DimensionError("d1 must be [" + std::to_string(n) + ",1], got " +
                           to_string(d1->shape()));
    }
    head_inputs.push_back(scale(*d1, 1.0 / config_.age_scale));
  }
  Tensor h = activation(apply_fc(params, "head.hidden", concat_channels(head_inputs)),
                        Activation::Elu);
  Tensor out = scale(apply_fc(params, "head.output", h), config_.output_scale);
  return stage_ == Stage::First ? activation(out, Activation::Relu) : out;
}

namespace {

template <typename Fn>
void for_each_batch(std::size_t n, std::size_t batch_size, Fn fn) {
  if (batch_size == 0) throw PreconditionError("batch size must be >= 1");
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> rows(std::min(batch_size, n - start));
    std::iota(rows.begin(), rows.end(), start);
    fn(rows);
  }
}

void check_inputs(const CascadeConfig& config, const Array& volumes, std::span<const Sex> sexes) {
  const Shape expected{volumes.rank() > 0 ? volumes.dim(0) : 0, 1, config.input_extent[0],
                       config.input_extent[1], config.input_extent[2]};
  if (volumes.shape() != expected) {
    throw DimensionError("volumes must be " + to_string(expected) + ", got " +
                         to_string(volumes.shape()));
  }
  if (sexes.size() != volumes.dim(0)) {
    throw DimensionError("got " + std::to_string(sexes.size()) + " sex labels for " +
                         std::to_string(volumes.dim(0)) + " volumes");
  }
}

std::vector<double> column(const Array& a) { return a.storage(); }

}  // namespace

std::vector<double> first_stage_predict(const StageNetwork& net, const Array& volumes,
                                        std::span<const Sex> sexes, std::size_t batch_size) {
  check_inputs(net.config(), volumes, sexes);
  std::vector<double> out;
  out.reserve(sexes.size());
  for_each_batch(sexes.size(), batch_size, [&](const std::vector<std::size_t>& rows) {
    Tape tape;
    NoGradScope no_grad(tape);
    ParamBinding params(tape, net.params());
    std::vector<Sex> s;
    for (std::size_t r : rows) s.push_back(sexes[r]);
    const Tensor y = net.forward(params, tape.constant(take_rows(volumes, rows)),
                                 tape.constant(sex_one_hot(s)));
    for (double v : column(y.value())) out.push_back(v);
  });
  return out;
}

std::vector<BrainAgeEstimate> tsan_predict(const TsanModel& model, const Array& volumes,
                                           std::span<const Sex> sexes, std::size_t batch_size) {
  check_inputs(model.config(), volumes, sexes);
  std::vector<BrainAgeEstimate> out;
  out.reserve(sexes.size());
  for_each_batch(sexes.size(), batch_size, [&](const std::vector<std::size_t>& rows) {
    Tape tape;
    NoGradScope no_grad(tape);
    ParamBinding p1(tape, model.stage1.params());
    ParamBinding p2(tape, model.stage2.params());
    std::vector<Sex> s;
    for (std::size_t r : rows) s.push_back(sexes[r]);
    const Tensor x = tape.constant(take_rows(volumes, rows));
    const Tensor sex = tape.constant(sex_one_hot(s));
    const std::vector<double> y1 = column(model.stage1.forward(p1, x, sex).value());
    Array d1(Shape{rows.size(), 1});
    for (std::size_t k = 0; k < rows.size(); ++k) d1[k] = discretize(y1[k], model.config().delta_d);
    const std::vector<double> res =
        column(model.stage2.forward(p2, x, sex, tape.constant(d1)).value());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      BrainAgeEstimate e;
      e.y_hat_stage1 = y1[k];
      e.d_stage1 = d1[k];
      e.residual = res[k];
      e.y_hat = d1[k] + res[k];
      out.push_back(e);
    }
  });
  return out;
}

std::vector<BrainAgeEstimate> ensemble_predict(std::span<const TsanModel* const> models,
                                               const Array& volumes, std::span<const Sex> sexes,
                                               std::size_t batch_size) {
  if (models.empty()) throw PreconditionError("ensemble needs at least one model");
  std::vector<BrainAgeEstimate> mean = tsan_predict(*models[0], volumes, sexes, batch_size);
  for (std::size_t m = 1; m < models.size(); ++m) {
    const std::vector<BrainAgeEstimate> e = tsan_predict(*models[m], volumes, sexes, batch_size);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i].y_hat_stage1 += e[i].y_hat_stage1;
      mean[i].d_stage1 += e[i].d_stage1;
      mean[i].residual += e[i].residual;
      mean[i].y_hat += e[i].y_hat;
    }
  }
  if (models.size() > 1) {
    const double k = static_cast<double>(models.size());
    for (BrainAgeEstimate& e : mean) {
      e.y_hat_stage1 /= k;
      e.d_stage1 /= k;
      e.residual /= k;
      e.y_hat /= k;
    }
  }
  return mean;
}

void export_config(const CascadeConfig& config, TensorRecords& records) {
  put_scalar(records, "config.delta_d", config.delta_d);
  put_scalar(records, "config.n_layer", static_cast<double>(config.backbone.n_layer));
  put_scalar(records, "config.n_ini", static_cast<double>(config.backbone.n_ini));
  put_scalar(records, "config.kernel_size", static_cast<double>(config.backbone.kernel_size));
  put_scalar(records, "config.se_reduction", static_cast<double>(config.backbone.se_reduction));
  put_scalar(records, "config.head_hidden", static_cast<double>(config.head_hidden));
  put_scalar(records, "config.age_scale", config.age_scale);
  put_scalar(records, "config.output_scale", config.output_scale);
  records["config.input_extent"] =
      Array::vector({static_cast<double>(config.input_extent[0]),
                     static_cast<double>(config.input_extent[1]),
                     static_cast<double>(config.input_extent[2])});
}

CascadeConfig import_config(const TensorRecords& records) {
  auto count = [&](const std::string& name) {
    const double v = get_scalar(records, name);
    if (!(v >= 0.0) || v != std::floor(v)) throw FormatError(name + " is not a count");
    return static_cast<std::size_t>(v);
  };
  CascadeConfig c;
  c.delta_d = get_scalar(records, "config.delta_d");
  c.backbone.n_layer = count("config.n_layer");
  c.backbone.n_ini = count("config.n_ini");
  c.backbone.kernel_size = count("config.kernel_size");
  c.backbone.se_reduction = count("config.se_reduction");
  c.head_hidden = count("config.head_hidden");
  c.age_scale = get_scalar(records, "config.age_scale");
  c.output_scale = get_scalar(records, "config.output_scale");
  auto it = records.find("config.input_extent");
  if (it == records.end() || it->second.size() != 3) {
    throw FormatError("weights file lacks config.input_extent");
  }
  for (int a = 0; a < 3; ++a) c.input_extent[a] = static_cast<std::size_t>(it->second[a]);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("stored configuration invalid: ") + e.what());
  }
  return c;
}

void save_model(const std::filesystem::path& path, const TsanModel& model) {
  TensorRecords records;
  export_config(model.config(), records);
  export_store(model.stage1.params(), "stage1.", records);
  export_store(model.stage2.params(), "stage2.", records);
  write_records(path, records);
}

TsanModel load_model(const std::filesystem::path& path) {
  const TensorRecords records = read_records(path);
  TsanModel model(import_config(records));
  import_store(records, "stage1.", model.stage1.params());
  import_store(records, "stage2.", model.stage2.params());
  return model;
}

}  // namespace brainage
