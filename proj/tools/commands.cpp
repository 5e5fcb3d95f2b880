#include "commands.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "brainage/analysis.hpp"
#include "brainage/data.hpp"
#include "brainage/error.hpp"
#include "brainage/losses.hpp"
#include "brainage/model.hpp"
#include "brainage/train.hpp"
#include "brainage/weights_io.hpp"

namespace brainage::cli {
namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "undefined"; }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
  out.close();
  if (!out) throw FormatError("write failed: " + path.string());
}

// Every declared output must exist and be non-empty before success.
void validate_outputs(const std::vector<fs::path>& outputs) {
  for (const fs::path& p : outputs) {
    std::error_code ec;
    if (!fs::is_regular_file(p, ec) || fs::file_size(p, ec) == 0) {
      throw FormatError("output missing or empty: " + p.string());
    }
  }
}

fs::path with_suffix(const fs::path& path, const std::string& suffix) {
  return fs::path(path.string() + suffix);
}

// Minimal CSV table: a header and comma-separated fields without quoting.
struct CsvTable {
  fs::path path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // 1-based source line per row

  std::optional<std::size_t> column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  }
  std::size_t require(const std::string& name) const {
    const auto c = column(name);
    if (!c) throw FormatError(path.string() + ":1: missing column '" + name + "'");
    return *c;
  }
  double number(std::size_t row, std::size_t col) const {
    const std::string& s = rows[row][col];
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
      throw FormatError(path.string() + ":" + std::to_string(lines[row]) + ": column '" +
                        header[col] + "' is not a finite number: '" + s + "'");
    }
    return v;
  }
};

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  CsvTable t;
  t.path = path;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.header.empty()) {
      t.header = split_fields(line);
      continue;
    }
    auto fields = split_fields(line);
    if (fields.size() != t.header.size()) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " fields, found " +
                        std::to_string(fields.size()));
    }
    t.rows.push_back(std::move(fields));
    t.lines.push_back(lineno);
  }
  if (t.header.empty()) throw FormatError(path.string() + ":1: empty file");
  return t;
}

std::string timestamp_utc() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Inputs of a dataset split: the manifest and every volume it names.
void add_split_inputs(const fs::path& manifest, std::vector<fs::path>& inputs) {
  inputs.push_back(manifest);
  for (const SampleRecord& r : read_manifest(manifest)) {
    inputs.push_back(manifest.parent_path() / r.path);
  }
}

Dataset load_split(const fs::path& manifest) {
  if (!fs::exists(manifest)) {
    throw PreconditionError("split manifest " + manifest.string() +
                            " not found; run `brainage gen-data` first");
  }
  return load_dataset(read_manifest(manifest), manifest.parent_path());
}

std::array<std::size_t, 3> extent_of(const Dataset& d) {
  const Shape& s = d.volumes.shape();
  return {s[2], s[3], s[4]};
}

void write_sorter_history(const SorterTrainReport& report, const fs::path& path) {
  std::string text = "epoch,train_loss,heldout_rank_error\n";
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    text += std::to_string(e + 1) + "," + fmt(report.epoch_loss[e]) + "," +
            fmt(report.heldout_error[e]) + "\n";
  }
  write_file(path, text);
}

bool has_prefix(const TensorRecords& records, const std::string& prefix) {
  const auto it = records.lower_bound(prefix);
  return it != records.end() && it->first.rfind(prefix, 0) == 0;
}

// SVG scatter of y_hat against y with the identity line and the OLS fit.
std::string scatter_svg(const std::vector<double>& y, const std::vector<double>& y_hat) {
  const std::size_t n = y.size();
  double my = 0, mh = 0;
  for (std::size_t i = 0; i < n; ++i) {
    my += y[i];
    mh += y_hat[i];
  }
  my /= static_cast<double>(n);
  mh /= static_cast<double>(n);
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (y[i] - my) * (y_hat[i] - mh);
    sxx += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw PreconditionError("scatter: chronological ages have zero variance");
  const double slope = sxy / sxx, intercept = mh - slope * my;

  double lo = std::min(*std::min_element(y.begin(), y.end()),
                       *std::min_element(y_hat.begin(), y_hat.end()));
  double hi = std::max(*std::max_element(y.begin(), y.end()),
                       *std::max_element(y_hat.begin(), y_hat.end()));
  lo = std::floor(lo / 5.0) * 5.0 - 5.0;
  hi = std::ceil(hi / 5.0) * 5.0 + 5.0;
  const double size = 480, margin = 50, span = size - 2 * margin;
  auto px = [&](double v) { return margin + (v - lo) / (hi - lo) * span; };
  auto py = [&](double v) { return size - margin - (v - lo) / (hi - lo) * span; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
    << "\" viewBox=\"0 0 " << size << ' ' << size << "\">\n";
  s << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << span << "\" height=\""
    << span << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << size / 2 << "\" y=\"" << size - 12
    << "\" text-anchor=\"middle\" font-size=\"14\">chronological age</text>\n";
  s << "<text x=\"16\" y=\"" << size / 2 << "\" text-anchor=\"middle\" font-size=\"14\" "
    << "transform=\"rotate(-90 16 " << size / 2 << ")\">estimated brain age</text>\n";
  for (double t = lo; t <= hi + 1e-9; t += 10.0) {
    s << "<text x=\"" << fmt(px(t)) << "\" y=\"" << size - margin + 16
      << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(t) << "</text>\n";
    s << "<text x=\"" << margin - 6 << "\" y=\"" << fmt(py(t) + 3)
      << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(t) << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    s << "<circle cx=\"" << fmt(px(y[i])) << "\" cy=\"" << fmt(py(y_hat[i]))
      << "\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.6\"/>\n";
  }
  s << "<line class=\"identity\" x1=\"" << fmt(px(lo)) << "\" y1=\"" << fmt(py(lo)) << "\" x2=\""
    << fmt(px(hi)) << "\" y2=\"" << fmt(py(hi))
    << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
  s << "<line class=\"fit\" x1=\"" << fmt(px(lo)) << "\" y1=\"" << fmt(py(intercept + slope * lo))
    << "\" x2=\"" << fmt(px(hi)) << "\" y2=\"" << fmt(py(intercept + slope * hi))
    << "\" stroke=\"crimson\"/>\n";
  s << "</svg>\n";
  return s.str();
}

const char* kValidGroups = "HC, MCI, AD";

Group group_arg(const std::string& name) {
  for (Group g : {Group::HC, Group::MCI, Group::AD}) {
    if (to_string(g) == name) return g;
  }
  throw ConfigError("unknown group '" + name + "'; valid groups: " + kValidGroups);
}

}  // namespace

// ---------------------------------------------------------------------------
// run manifest
// ---------------------------------------------------------------------------

std::string git_blob_hash(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("sha1: out of memory");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string git_blob_hash_file(const fs::path& path) { return git_blob_hash(read_file(path)); }

void write_run_manifest(RunManifest m, const fs::path& path) {
  m.input_hashes.clear();
  std::string listing;
  for (const fs::path& p : m.inputs) {
    m.input_hashes.push_back(git_blob_hash_file(p));
    listing += p.generic_string() + '\0' + m.input_hashes.back() + '\n';
  }
  m.inputs_hash = git_blob_hash(listing);
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["config"] = m.config ? nlohmann::ordered_json(m.config->generic_string()) : nullptr;
  j["seed"] = m.seed;
  j["inputs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.inputs.size(); ++i) {
    j["inputs"].push_back({{"path", m.inputs[i].generic_string()}, {"hash", m.input_hashes[i]}});
  }
  j["inputs_hash"] = m.inputs_hash;
  j["outputs"] = nlohmann::ordered_json::array();
  for (const fs::path& p : m.outputs) j["outputs"].push_back(p.generic_string());
  j["timestamp"] = timestamp_utc();
  write_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

void cmd_gen_data(const GenDataOptions& o) {
  PhantomParams params;
  params.n_subjects = o.n_subjects;
  params.scans_per_subject = o.scans_per_subject;
  params.dims = o.dims;
  params.noise_sigma = o.noise;
  params.group_fractions = o.group_fractions;
  params.seed = o.seed;
  params.validate();
  fs::create_directories(o.out);
  const std::vector<SampleRecord> all = phantom_generate(params, o.out);
  const Splits splits = split_subject_level(all, o.split_fractions, o.seed);
  const std::vector<fs::path> outputs{o.out / "manifest.csv", o.out / "train.csv",
                                      o.out / "val.csv", o.out / "test.csv"};
  write_manifest(all, outputs[0]);
  write_manifest(splits.train, outputs[1]);
  write_manifest(splits.val, outputs[2]);
  write_manifest(splits.test, outputs[3]);
  validate_outputs(outputs);
  RunManifest m;
  m.command = "gen-data";
  m.seed = o.seed;
  m.outputs = outputs;
  write_run_manifest(m, o.out / "run_manifest.json");
}

void cmd_train(const TrainOptions& o) {
  TrainConfig config = o.config ? load_train_config(*o.config) : TrainConfig{};
  if (o.seed) config.seed = *o.seed;
  if (o.lambda1) config.lambda1 = *o.lambda1;
  if (o.lambda2) config.lambda2 = *o.lambda2;
  if (o.max_epochs) config.max_epochs = *o.max_epochs;
  config.validate();

  RunManifest m;
  m.command = "train --stage " + o.stage;
  m.config = o.config;
  m.seed = config.seed;
  if (o.config) m.inputs.push_back(*o.config);

  if (o.stage == "sorter") {
    const fs::path out = o.out.value_or("sorter.tsnw");
    const fs::path history = o.history.value_or(with_suffix(out, ".history.csv"));
    SorterTrainConfig sc;
    sc.n_sequences = o.sorter_sequences;
    sc.epochs = o.sorter_epochs;
    sc.seed = config.seed;
    SorterTrainReport report;
    const Sorter sorter =
        sorter_train(o.sorter_length.value_or(config.batch_size), sc, &report,
                     [&](std::size_t epoch, double err) {
                       if (o.verbose) std::cout << "sorter epoch " << epoch << " rank_error " << fmt(err) << std::endl;
                     });
    sorter.save(out);
    write_sorter_history(report, history);
    m.outputs = {out, history};
    validate_outputs(m.outputs);
    write_run_manifest(m, with_suffix(out, ".run.json"));
    return;
  }
  if (o.stage != "1" && o.stage != "2") {
    throw ConfigError("unknown stage '" + o.stage + "'; valid stages: sorter, 1, 2");
  }
  const bool second = o.stage == "2";
  if (second && !fs::exists(o.stage1)) {
    throw PreconditionError("stage 2 needs stage-1 weights but " + o.stage1.string() +
                            " does not exist; run `brainage train --stage 1` first");
  }
  std::optional<Sorter> sorter;
  if (config.lambda2 > 0.0) {
    if (!fs::exists(o.sorter)) {
      throw PreconditionError("lambda2 > 0 needs sorter weights but " + o.sorter.string() +
                              " does not exist; run `brainage train --stage sorter` first "
                              "or pass --lambda2 0");
    }
    sorter = Sorter::load(o.sorter);
    m.inputs.push_back(o.sorter);
  }
  const fs::path train_csv = o.data / "train.csv", val_csv = o.data / "val.csv";
  const Dataset train = load_split(train_csv);
  const Dataset val = load_split(val_csv);
  add_split_inputs(train_csv, m.inputs);
  add_split_inputs(val_csv, m.inputs);
  const CascadeConfig cascade = config.cascade(extent_of(train));

  const fs::path out = o.out.value_or(second ? "model.tsnw" : "stage1.tsnw");
  const fs::path history_path = o.history.value_or(with_suffix(out, ".history.csv"));
  TrainHooks hooks;
  hooks.checkpoint = with_suffix(out, ".ckpt");
  hooks.resume = o.resume;
  if (o.resume && !fs::exists(*hooks.checkpoint)) {
    throw PreconditionError("--resume given but checkpoint " + hooks.checkpoint->string() +
                            " does not exist");
  }
  if (o.verbose) {
    hooks.on_epoch = [](const EpochRecord& r) {
      std::cout << "epoch " << r.epoch << " train_loss " << fmt(r.train_loss) << " val_mae "
                << fmt(r.val_mae) << " lr " << fmt(r.lr) << std::endl;
    };
  }
  const Sorter* sorter_ptr = sorter ? &*sorter : nullptr;

  TrainHistory history;
  if (!second) {
    StageNetwork net(Stage::First, cascade);
    history = train_stage1(net, train, val, config, sorter_ptr, hooks);
    TensorRecords records;
    export_config(cascade, records);
    export_store(net.params(), "stage1.", records);
    write_records(out, records);
  } else {
    const TensorRecords stage1_records = read_records(o.stage1);
    const CascadeConfig saved = import_config(stage1_records);
    if (saved.delta_d != cascade.delta_d || saved.input_extent != cascade.input_extent) {
      throw ConfigError("stage-1 weights in " + o.stage1.string() +
                        " were trained with a different delta_d or volume extent");
    }
    TsanModel model(cascade);
    import_store(stage1_records, "stage1.", model.stage1.params());
    m.inputs.push_back(o.stage1);
    history = train_stage2(model.stage2, model.stage1, train, val, config, sorter_ptr, hooks);
    save_model(out, model);
  }
  write_history_csv(history, history_path);
  m.outputs = {out, history_path};
  validate_outputs(m.outputs);
  write_run_manifest(m, with_suffix(out, ".run.json"));
}

void cmd_eval(const EvalOptions& o) {
  std::vector<fs::path> paths;
  if (o.model) paths.push_back(*o.model);
  paths.insert(paths.end(), o.ensemble.begin(), o.ensemble.end());
  if (paths.empty()) throw ConfigError("eval needs --model or --ensemble");
  std::vector<TsanModel> models;
  for (const fs::path& p : paths) {
    if (!fs::exists(p)) {
      throw PreconditionError("weights " + p.string() + " not found; run `brainage train` first");
    }
    const TensorRecords records = read_records(p);
    if (!has_prefix(records, "stage2.")) {
      throw PreconditionError(p.string() + " holds first-stage weights only; run "
                              "`brainage train --stage 2` first");
    }
    models.push_back(load_model(p));
  }
  const fs::path manifest =
      (o.split == "train" || o.split == "val" || o.split == "test") ? o.data / (o.split + ".csv")
                                                                     : fs::path(o.split);
  const Dataset data = load_split(manifest);
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (models[i].config().input_extent != extent_of(data)) {
      throw DimensionError(paths[i].string() + " expects a different volume extent than " +
                           manifest.string());
    }
  }
  std::vector<const TsanModel*> members;
  for (const TsanModel& mdl : models) members.push_back(&mdl);
  const auto estimates = ensemble_predict(members, data.volumes, data.sexes);
  std::optional<BiasModel> bias;
  if (o.bias_model) bias = load_bias_model(*o.bias_model);

  std::vector<double> y_hat, corrected;
  std::string pred = "subject_id,scan_id,group,y,y_hat_stage1,y_hat,gap";
  if (bias) pred += ",y_hat_corrected,corrected_gap";
  pred += '\n';
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const SampleRecord& r = data.records[i];
    const double y = data.ages[i], yh = estimates[i].y_hat;
    y_hat.push_back(yh);
    pred += r.subject_id + "," + r.scan_id + "," + to_string(r.group) + "," + fmt(y) + "," +
            fmt(estimates[i].y_hat_stage1) + "," + fmt(yh) + "," + fmt(yh - y);
    if (bias) {
      corrected.push_back(bias_apply(yh, y, *bias));
      pred += "," + fmt(corrected.back()) + "," + fmt(corrected.back() - y);
    }
    pred += '\n';
  }
  auto summarize = [](std::string& text, const std::string& prefix, const EstimationReport& r) {
    text += prefix + "mae," + fmt(r.mae) + "\n";
    text += prefix + "pcc_age," + fmt(r.pcc_age) + "\n";
    text += prefix + "srcc_age," + fmt(r.srcc_age) + "\n";
    text += prefix + "pcc_gap," + fmt(r.pcc_gap) + "\n";
    text += prefix + "srcc_gap," + fmt(r.srcc_gap) + "\n";
  };
  std::string summary = "metric,value\n";
  summary += "n," + std::to_string(estimates.size()) + "\n";
  summary += "models," + std::to_string(models.size()) + "\n";
  summarize(summary, "", estimation_report(y_hat, data.ages));
  if (bias) summarize(summary, "corrected_", estimation_report(corrected, data.ages));

  const std::vector<fs::path> outputs{o.out / "predictions.csv", o.out / "summary.csv",
                                      o.out / "scatter.svg"};
  write_file(outputs[0], pred);
  write_file(outputs[1], summary);
  write_file(outputs[2], scatter_svg(data.ages, y_hat));
  validate_outputs(outputs);
  RunManifest m;
  m.command = "eval";
  m.inputs = paths;
  add_split_inputs(manifest, m.inputs);
  if (o.bias_model) m.inputs.push_back(*o.bias_model);
  m.outputs = outputs;
  write_run_manifest(m, o.out / "run_manifest.json");
}

void cmd_bias(const BiasOptions& o) {
  const CsvTable t = read_csv(o.predictions);
  const std::size_t cy = t.require("y"), ch = t.require("y_hat");
  std::vector<double> y, y_hat;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    y.push_back(t.number(r, cy));
    y_hat.push_back(t.number(r, ch));
  }
  save_bias_model(bias_fit(y_hat, y), o.out);
  validate_outputs({o.out});
  RunManifest m;
  m.command = "bias";
  m.inputs = {o.predictions};
  m.outputs = {o.out};
  write_run_manifest(m, with_suffix(o.out, ".run.json"));
}

void cmd_classify(const ClassifyOptions& o) {
  const auto names = split_fields(o.groups);
  if (names.size() != 2) {
    throw ConfigError("--groups needs two comma-separated groups, e.g. HC,AD; valid groups: " +
                      std::string(kValidGroups));
  }
  const Group a = group_arg(names[0]), b = group_arg(names[1]);
  if (a == b) throw ConfigError("--groups names the same group twice");
  // The more advanced stage is the positive class.
  const Group positive = std::max(a, b), negative = std::min(a, b);
  if (o.repeats < 1) throw ConfigError("--repeats must be >= 1");

  const CsvTable t = read_csv(o.gaps);
  const std::size_t cs = t.require("subject_id"), cg = t.require("gap"), cgr = t.require("group");
  const std::optional<std::size_t> cc = t.column("corrected_gap");
  struct Subject {
    Group group;
    double gap = 0, corrected = 0;
    std::size_t scans = 0;
  };
  std::map<std::string, Subject> subjects;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    Group g;
    try {
      g = parse_group(t.rows[r][cgr]);
    } catch (const ConfigError&) {
      throw FormatError(t.path.string() + ":" + std::to_string(t.lines[r]) + ": unknown group '" +
                        t.rows[r][cgr] + "'; valid groups: " + kValidGroups);
    }
    if (g != a && g != b) continue;
    auto [it, fresh] = subjects.try_emplace(t.rows[r][cs], Subject{g});
    if (!fresh && it->second.group != g) {
      throw FormatError(t.path.string() + ":" + std::to_string(t.lines[r]) + ": subject " +
                        it->first + " appears in two groups");
    }
    it->second.gap += t.number(r, cg);
    if (cc) it->second.corrected += t.number(r, *cc);
    ++it->second.scans;
  }
  std::vector<double> gap, corrected;
  std::vector<int> labels;
  for (const auto& [id, s] : subjects) {
    gap.push_back(s.gap / static_cast<double>(s.scans));
    corrected.push_back(s.corrected / static_cast<double>(s.scans));
    labels.push_back(s.group == positive ? 1 : -1);
  }
  for (Group g : {a, b}) {
    const int label = g == positive ? 1 : -1;
    if (std::count(labels.begin(), labels.end(), label) == 0) {
      throw PreconditionError("group " + to_string(g) + " has no subjects in " + o.gaps.string());
    }
  }
  NestedCvOptions cv;
  cv.repeats = o.repeats;
  cv.seed = o.seed;
  const SvmGrid grid = SvmGrid::standard();
  const std::string groups = to_string(negative) + " vs " + to_string(positive);
  std::string text =
      "model,groups,correction,auc_mean,auc_std,acc_mean,acc_std,sen_mean,sen_std,spe_mean,"
      "spe_std,evaluations\n";
  auto row = [&](const std::string& correction, const std::vector<double>& x) {
    const ClassificationReport r = nested_cv(x, labels, grid, cv);
    text += o.model + "," + groups + "," + correction + "," + fmt(r.auc.mean) + "," +
            fmt(r.auc.std) + "," + fmt(r.acc.mean) + "," + fmt(r.acc.std) + "," +
            fmt(r.sen.mean) + "," + fmt(r.sen.std) + "," + fmt(r.spe.mean) + "," +
            fmt(r.spe.std) + "," + std::to_string(r.evaluations) + "\n";
  };
  row("without", gap);
  if (cc) row("with", corrected);
  write_file(o.out, text);
  validate_outputs({o.out});
  RunManifest m;
  m.command = "classify --groups " + o.groups;
  m.seed = o.seed;
  m.inputs = {o.gaps};
  m.outputs = {o.out};
  write_run_manifest(m, with_suffix(o.out, ".run.json"));
}

// ---------------------------------------------------------------------------
// command line
// ---------------------------------------------------------------------------

namespace {

int fail(const std::string& kind, const std::string& message, int code) {
  std::string line = message;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "error: kind=" << kind << " msg=" << line << std::endl;
  return code;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Two-stage brain age estimation on synthetic phantoms"};
  app.require_subcommand(1);

  GenDataOptions gen;
  std::vector<std::uint32_t> dims{gen.dims.begin(), gen.dims.end()};
  std::vector<double> group_fractions{gen.group_fractions.begin(), gen.group_fractions.end()};
  std::vector<double> split_fractions{gen.split_fractions.begin(), gen.split_fractions.end()};
  auto* c_gen = app.add_subcommand("gen-data", "Generate phantom volumes and subject-level splits");
  c_gen->add_option("--out", gen.out, "Output directory")->capture_default_str();
  c_gen->add_option("--n-subjects", gen.n_subjects)->capture_default_str();
  c_gen->add_option("--scans-per-subject", gen.scans_per_subject)->capture_default_str();
  c_gen->add_option("--dims", dims, "Volume size x y z")->expected(3)->capture_default_str();
  c_gen->add_option("--noise", gen.noise)->capture_default_str();
  c_gen->add_option("--group-fractions", group_fractions, "HC MCI AD")->expected(3)->capture_default_str();
  c_gen->add_option("--split-fractions", split_fractions, "train val test")->expected(3)->capture_default_str();
  c_gen->add_option("--seed", gen.seed)->capture_default_str();

  TrainOptions train;
  std::string config, out, history;
  std::uint64_t seed = 0;
  double lambda1 = 0, lambda2 = 0;
  std::size_t max_epochs = 0, sorter_length = 0;
  bool quiet = false;
  auto* c_train = app.add_subcommand("train", "Train the sorter, stage 1 or stage 2");
  c_train->add_option("--stage", train.stage)->required()->check(CLI::IsMember({"sorter", "1", "2"}));
  auto* o_config = c_train->add_option("--config", config, "key=value training config");
  c_train->add_option("--data", train.data, "Dataset directory")->capture_default_str();
  auto* o_out = c_train->add_option("--out", out, "Weights file");
  auto* o_history = c_train->add_option("--history", history, "History CSV");
  c_train->add_option("--sorter", train.sorter, "Sorter weights")->capture_default_str();
  c_train->add_option("--stage1", train.stage1, "Stage-1 weights")->capture_default_str();
  c_train->add_flag("--resume", train.resume, "Continue from <out>.ckpt");
  auto* o_seed = c_train->add_option("--seed", seed);
  auto* o_l1 = c_train->add_option("--lambda1", lambda1);
  auto* o_l2 = c_train->add_option("--lambda2", lambda2);
  auto* o_epochs = c_train->add_option("--max-epochs", max_epochs);
  auto* o_len = c_train->add_option("--sorter-length", sorter_length);
  c_train->add_option("--sorter-sequences", train.sorter_sequences)->capture_default_str();
  c_train->add_option("--sorter-epochs", train.sorter_epochs)->capture_default_str();
  c_train->add_flag("--quiet", quiet);

  EvalOptions eval;
  std::string model, bias_model;
  auto* c_eval = app.add_subcommand("eval", "Predict a split and report metrics");
  auto* o_model = c_eval->add_option("--model", model, "Cascade weights");
  c_eval->add_option("--ensemble", eval.ensemble, "Weights averaged with --model");
  c_eval->add_option("--data", eval.data)->capture_default_str();
  c_eval->add_option("--split", eval.split, "train, val, test or a manifest path")->capture_default_str();
  auto* o_bias = c_eval->add_option("--bias-model", bias_model);
  c_eval->add_option("--out", eval.out, "Output directory")->capture_default_str();

  BiasOptions bias;
  auto* c_bias = app.add_subcommand("bias", "Fit the linear age bias of the gap");
  c_bias->add_option("--predictions", bias.predictions, "CSV with y and y_hat")->required();
  c_bias->add_option("--out", bias.out)->capture_default_str();

  ClassifyOptions cls;
  auto* c_cls = app.add_subcommand("classify", "Nested-CV SVM on brain age gaps");
  c_cls->add_option("--gaps", cls.gaps, "CSV with subject_id, gap, group")->required();
  c_cls->add_option("--groups", cls.groups, "Pair such as HC,AD")->capture_default_str();
  c_cls->add_option("--repeats", cls.repeats)->capture_default_str();
  c_cls->add_option("--seed", cls.seed)->capture_default_str();
  c_cls->add_option("--model-name", cls.model)->capture_default_str();
  c_cls->add_option("--out", cls.out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("UsageError", e.what(), 2);
  }

  try {
    if (*c_gen) {
      std::copy(dims.begin(), dims.end(), gen.dims.begin());
      std::copy(group_fractions.begin(), group_fractions.end(), gen.group_fractions.begin());
      std::copy(split_fractions.begin(), split_fractions.end(), gen.split_fractions.begin());
      cmd_gen_data(gen);
    } else if (*c_train) {
      if (*o_config) train.config = config;
      if (*o_out) train.out = out;
      if (*o_history) train.history = history;
      if (*o_seed) train.seed = seed;
      if (*o_l1) train.lambda1 = lambda1;
      if (*o_l2) train.lambda2 = lambda2;
      if (*o_epochs) train.max_epochs = max_epochs;
      if (*o_len) train.sorter_length = sorter_length;
      train.verbose = !quiet;
      cmd_train(train);
    } else if (*c_eval) {
      if (*o_model) eval.model = model;
      if (*o_bias) eval.bias_model = bias_model;
      cmd_eval(eval);
    } else if (*c_bias) {
      cmd_bias(bias);
    } else if (*c_cls) {
      cmd_classify(cls);
    }
  } catch (const ConfigError& e) {
    return fail("ConfigError", e.what(), 2);
  } catch (const PreconditionError& e) {
    return fail("PreconditionError", e.what(), 3);
  } catch (const FormatError& e) {
    return fail("FormatError", e.what(), 4);
  } catch (const DimensionError& e) {
    return fail("DimensionError", e.what(), 5);
  } catch (const NumericError& e) {
    return fail("NumericError", e.what(), 6);
  } catch (const fs::filesystem_error& e) {
    return fail("IoError", e.what(), 7);
  } catch (const std::exception& e) {
    return fail("Error", e.what(), 1);
  }
  return 0;
}

}  // namespace brainage::cli
