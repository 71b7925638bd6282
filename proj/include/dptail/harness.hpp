#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dptail {

// Experiment configuration, loaded from a single JSON document.  Scalar
// norm/ncr entries are one-point grids; every field has a usable default.
struct DatagenBlock {
  int K = 5;
  int d = 1000;
  std::vector<double> norm_grid = {0.5};   // per-class signal norm ||u||
  std::vector<double> ncr_grid = {1400.0}; // target noise correlation ratio
  std::string dist = "gaussian";           // gaussian | uniform | both
  long train_per_class = 100;
  long test_per_class = 100;
  double base_eig = 0.5;
};

struct ModelBlock {
  int m = 100;
  double sigma0 = 1e-5;
  int P = 2;
};

struct OptimizerBlock {
  std::string mode = "both";  // clean | dp | both
  double clip_c = 1.0;
  double sigma_n = -1.0;      // < 0: calibrate from (epsilon, delta_dp)
  double epsilon = 8.0;
  double delta_dp = 1e-5;
  double eta = 0.002;
  long batch = 256;
  int epochs = 20;
  long trace_every = -1;      // -1: per-experiment default cadence
};

struct EvalBlock {
  std::vector<double> L_values = {1.0};
  std::vector<double> x_percents = {1.0, 5.0, 50.0};
  double delta = 0.01;        // confidence parameter for diagnostics
};

struct MnistBlock {
  std::string dir = "data/mnist";
  long train_per_class = 1000;
  long test_per_class = 0;    // 0: keep the full test set
};

struct ExperimentConfig {
  std::string experiment = "dynamics";  // dynamics | heatmap_sweep |
                                        // longtail_eval | mnist_influence |
                                        // diagnostics
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  int workers = 1;
  int repeats = 1;  // sweep only; CLI --repeats, not a config key
  DatagenBlock datagen;
  ModelBlock model;
  OptimizerBlock optimizer;
  EvalBlock eval;
  MnistBlock mnist;
};

// Strict parser: unknown keys, bad enum values, empty grids, and
// out-of-range leaves are all rejected with a descriptive message.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

// 64-bit FNV-1a over the canonical config serialization, excluding out_dir
// and workers so artifact identity is stable across storage location and
// thread count.  16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

// Comment line embedded at the top of every emitted CSV.
std::string provenance_line(const ExperimentConfig& cfg);

// Experiment runners.  Each creates out_dir, writes its CSV artifacts with a
// provenance header, and is byte-deterministic for a fixed config and seed.
// run_heatmap_sweep honors cfg.repeats: each cell is retrained under
// `repeats` independent seeds; repeat 0 reuses cfg.seed unchanged, so
// repeats=1 output is byte-identical to a run without the option, and the
// extra rows are distinguished by their seed column.
void run_dynamics(const ExperimentConfig& cfg);
void run_heatmap_sweep(const ExperimentConfig& cfg);
void run_longtail_eval(const ExperimentConfig& cfg);
void run_mnist_influence(const ExperimentConfig& cfg);
void run_diagnostics(const ExperimentConfig& cfg);
void run_gen(const ExperimentConfig& cfg);

// Renders one (mode, dist) pane of a sweep-style CSV (columns norm, ncr,
// accuracy, optional mode/dist) as an SVG heatmap.  Empty filters accept
// every row.  Rows sharing a (norm, ncr) cell (e.g. sweep repeats) are
// averaged over their finite accuracies.  Output bytes are deterministic
// for fixed input.
void render_heatmap(const std::string& csv_path, const std::string& out_svg,
                    const std::string& mode_filter = "",
                    const std::string& dist_filter = "");

// Command-line entry point: subcommands gen | dynamics | sweep | longtail |
// mnist | diag | render with --config/--seed/--out-dir/--workers/--mode
// overrides (sweep additionally takes --repeats).  Returns the process exit
// code; errors go to stderr.
int cli_main(int argc, char** argv);

}  // namespace dptail
