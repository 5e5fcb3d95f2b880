#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace brainage::cli {

namespace fs = std::filesystem;

/// Provenance of one command run; the only file that carries a timestamp.
struct RunManifest {
  std::string command;
  std::optional<fs::path> config;
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  /// Git blob hash per input and a combined hash over (path, hash) pairs.
  std::vector<std::string> input_hashes;
  std::string inputs_hash;
};

/// SHA-1 of "blob <size>\0<bytes>", lowercase hex.
std::string git_blob_hash(const std::string& bytes);
std::string git_blob_hash_file(const fs::path& path);
/// Fills the hashes and writes JSON with a UTC timestamp.
void write_run_manifest(RunManifest manifest, const fs::path& path);

struct GenDataOptions {
  fs::path out = "data";
  std::size_t n_subjects = 300;
  std::size_t scans_per_subject = 1;
  std::array<std::uint32_t, 3> dims{32, 40, 32};
  double noise = 0.1;
  std::array<double, 3> group_fractions{1.0, 0.0, 0.0};  // HC, MCI, AD
  std::array<double, 3> split_fractions{0.70, 0.15, 0.15};
  std::uint64_t seed = 0;
};
/// Writes volumes/, manifest.csv, train.csv, val.csv, test.csv and
/// run_manifest.json under `out`.
void cmd_gen_data(const GenDataOptions& options);

struct TrainOptions {
  std::string stage;  // sorter, 1 or 2
  std::optional<fs::path> config;
  fs::path data = "data";
  std::optional<fs::path> out;  // default <stage file name> in the working dir
  std::optional<fs::path> history;
  fs::path sorter = "sorter.tsnw";
  fs::path stage1 = "stage1.tsnw";
  bool resume = false;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda1, lambda2;
  std::optional<std::size_t> max_epochs;
  // Sorter stage only.
  std::optional<std::size_t> sorter_length;  // default: the config batch size
  std::size_t sorter_sequences = 50000;
  std::size_t sorter_epochs = 30;
  bool verbose = true;
};
/// Stage sorter writes sorter weights, stage 1 the first-stage network and
/// stage 2 the full cascade; each also writes a history CSV and
/// <out>.run.json. Stage 1 and 2 checkpoint to <out>.ckpt.
void cmd_train(const TrainOptions& options);

struct EvalOptions {
  std::optional<fs::path> model;
  std::vector<fs::path> ensemble;
  fs::path data = "data";
  std::string split = "test";  // train, val, test or a manifest path
  std::optional<fs::path> bias_model;
  fs::path out = "eval";
};
/// Writes predictions.csv, summary.csv, scatter.svg and run_manifest.json
/// under `out`.
void cmd_eval(const EvalOptions& options);

struct BiasOptions {
  fs::path predictions;
  fs::path out = "bias.txt";
};
/// Fits the gap-versus-age line on the y and y_hat columns.
void cmd_bias(const BiasOptions& options);

struct ClassifyOptions {
  fs::path gaps;
  std::string groups = "HC,AD";
  std::size_t repeats = 100;
  std::uint64_t seed = 0;
  std::string model = "tsan";
  fs::path out = "classification.csv";
};
/// Subject-level nested CV on the gap (and corrected_gap when present).
void cmd_classify(const ClassifyOptions& options);

/// Runs the command line; returns the exit code. Failures print one line
/// "error: kind=<Kind> msg=<message>" to stderr.
int run(int argc, char** argv);

}  // namespace brainage::cli
