#include "dptail/harness.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dptail/datagen.hpp"
#include "dptail/dp_optimizer.hpp"
#include "dptail/evaluation.hpp"
#include "dptail/influence.hpp"
#include "dptail/mnist_io.hpp"
#include "dptail/model.hpp"
#include "dptail/rng.hpp"

namespace dptail {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kTagCell = 0xce11u;
constexpr std::uint64_t kTagData = 0x0da7au;
constexpr std::uint64_t kTagTest = 0x7e57u;
constexpr std::uint64_t kTagInit = 0x0b00u;
constexpr std::uint64_t kTagTrain = 0x72a1u;
constexpr std::uint64_t kTagMnist = 0x3157u;
constexpr std::uint64_t kTagRepeat = 0x9e9ea7u;

// Cadence that silences the slow trace columns except at the endpoints.
constexpr long kNoTrace = 1000000000L;

std::string fmtg(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.17g", v);
  return b;
}

std::string fmt6(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.6g", v);
  return b;
}

std::string fmt3(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.3g", v);
  return b;
}

[[noreturn]] void bad_config(const std::string& what) {
  throw std::invalid_argument("config: " + what);
}

// ---------------------------------------------------------------- parsing --

void check_keys(const json& o, const std::vector<std::string>& allowed,
                const std::string& where) {
  for (const auto& [key, value] : o.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      bad_config("unknown key '" + key + "' in " + where);
}

double getd(const json& o, const char* key, double def) {
  if (!o.contains(key)) return def;
  if (!o[key].is_number()) bad_config(std::string(key) + " must be a number");
  return o[key].get<double>();
}

long getl(const json& o, const char* key, long def) {
  if (!o.contains(key)) return def;
  if (!o[key].is_number_integer()) bad_config(std::string(key) + " must be an integer");
  return o[key].get<long>();
}

std::string gets(const json& o, const char* key, const std::string& def) {
  if (!o.contains(key)) return def;
  if (!o[key].is_string()) bad_config(std::string(key) + " must be a string");
  return o[key].get<std::string>();
}

std::vector<double> getvd(const json& o, const char* key) {
  if (!o[key].is_array()) bad_config(std::string(key) + " must be an array");
  std::vector<double> out;
  for (const auto& v : o[key]) {
    if (!v.is_number()) bad_config(std::string(key) + " entries must be numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

// Scalar `base` and array `base_grid` are alternative spellings; exactly one
// (or neither, falling back to the default) may appear.
std::vector<double> get_grid(const json& o, const char* base, const char* grid,
                             std::vector<double> def) {
  const bool has_scalar = o.contains(base);
  const bool has_grid = o.contains(grid);
  if (has_scalar && has_grid)
    bad_config(std::string("give either ") + base + " or " + grid + ", not both");
  if (has_scalar) return {getd(o, base, 0.0)};
  if (has_grid) {
    std::vector<double> g = getvd(o, grid);
    if (g.empty()) bad_config(std::string(grid) + " must be non-empty");
    return g;
  }
  return def;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    bad_config(std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object()) bad_config("top level must be an object");
  check_keys(j, {"experiment", "seed", "out_dir", "workers", "datagen", "model",
                 "optimizer", "eval", "mnist"},
             "top level");

  ExperimentConfig cfg;
  cfg.experiment = gets(j, "experiment", cfg.experiment);
  const std::vector<std::string> experiments = {
      "dynamics", "heatmap_sweep", "longtail_eval", "mnist_influence", "diagnostics"};
  if (std::find(experiments.begin(), experiments.end(), cfg.experiment) == experiments.end())
    bad_config("unknown experiment '" + cfg.experiment + "'");
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer() || getl(j, "seed", 0) < 0)
      bad_config("seed must be a non-negative integer");
    cfg.seed = j["seed"].get<std::uint64_t>();
  }
  cfg.out_dir = gets(j, "out_dir", cfg.out_dir);
  cfg.workers = static_cast<int>(getl(j, "workers", cfg.workers));
  if (cfg.workers < 1) bad_config("workers must be >= 1");

  if (j.contains("datagen")) {
    const json& o = j["datagen"];
    if (!o.is_object()) bad_config("datagen must be an object");
    check_keys(o, {"K", "d", "norm", "norm_grid", "ncr", "ncr_grid", "dist",
                   "train_per_class", "test_per_class", "base_eig"},
               "datagen");
    auto& b = cfg.datagen;
    b.K = static_cast<int>(getl(o, "K", b.K));
    b.d = static_cast<int>(getl(o, "d", b.d));
    b.norm_grid = get_grid(o, "norm", "norm_grid", b.norm_grid);
    b.ncr_grid = get_grid(o, "ncr", "ncr_grid", b.ncr_grid);
    b.dist = gets(o, "dist", b.dist);
    b.train_per_class = getl(o, "train_per_class", b.train_per_class);
    b.test_per_class = getl(o, "test_per_class", b.test_per_class);
    b.base_eig = getd(o, "base_eig", b.base_eig);
    if (b.K < 1) bad_config("K must be >= 1");
    if (b.d < 2) bad_config("d must be >= 2");
    if (b.dist != "gaussian" && b.dist != "uniform" && b.dist != "both")
      bad_config("dist must be gaussian, uniform, or both");
    if (b.train_per_class < 1) bad_config("train_per_class must be >= 1");
    if (b.test_per_class < 1) bad_config("test_per_class must be >= 1");
    if (b.base_eig <= 0.0) bad_config("base_eig must be positive");
  }

  if (j.contains("model")) {
    const json& o = j["model"];
    if (!o.is_object()) bad_config("model must be an object");
    check_keys(o, {"m", "sigma0", "P"}, "model");
    auto& b = cfg.model;
    b.m = static_cast<int>(getl(o, "m", b.m));
    b.sigma0 = getd(o, "sigma0", b.sigma0);
    b.P = static_cast<int>(getl(o, "P", b.P));
    if (b.m < 1) bad_config("m must be >= 1");
    if (b.sigma0 < 0.0) bad_config("sigma0 must be non-negative");
    if (b.P < 1) bad_config("P must be >= 1");
  }

  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    if (!o.is_object()) bad_config("optimizer must be an object");
    check_keys(o, {"mode", "clip_c", "sigma_n", "epsilon", "delta_dp", "eta", "batch",
                   "epochs", "trace_every"},
               "optimizer");
    auto& b = cfg.optimizer;
    b.mode = gets(o, "mode", b.mode);
    b.clip_c = getd(o, "clip_c", b.clip_c);
    b.sigma_n = getd(o, "sigma_n", b.sigma_n);
    b.epsilon = getd(o, "epsilon", b.epsilon);
    b.delta_dp = getd(o, "delta_dp", b.delta_dp);
    b.eta = getd(o, "eta", b.eta);
    b.batch = getl(o, "batch", b.batch);
    b.epochs = static_cast<int>(getl(o, "epochs", b.epochs));
    b.trace_every = getl(o, "trace_every", b.trace_every);
    if (b.mode != "clean" && b.mode != "dp" && b.mode != "both")
      bad_config("mode must be clean, dp, or both");
    if (b.clip_c <= 0.0) bad_config("clip_c must be positive");
    if (b.epsilon <= 0.0) bad_config("epsilon must be positive");
    if (b.delta_dp <= 0.0 || b.delta_dp >= 1.0) bad_config("delta_dp must be in (0,1)");
    if (b.eta <= 0.0) bad_config("eta must be positive");
    if (b.batch < 1) bad_config("batch must be >= 1");
    if (b.epochs < 0) bad_config("epochs must be >= 0");
    if (b.trace_every != -1 && b.trace_every < 1)
      bad_config("trace_every must be -1 (default) or >= 1");
  }

  if (j.contains("eval")) {
    const json& o = j["eval"];
    if (!o.is_object()) bad_config("eval must be an object");
    check_keys(o, {"L_values", "x_percents", "delta"}, "eval");
    auto& b = cfg.eval;
    if (o.contains("L_values")) {
      b.L_values = getvd(o, "L_values");
      if (b.L_values.empty()) bad_config("L_values must be non-empty");
      for (double v : b.L_values)
        if (v < 0.0) bad_config("L_values must be non-negative");
    }
    if (o.contains("x_percents")) {
      b.x_percents = getvd(o, "x_percents");
      if (b.x_percents.empty()) bad_config("x_percents must be non-empty");
      for (double v : b.x_percents)
        if (!(v > 0.0 && v <= 50.0)) bad_config("x_percents must lie in (0, 50]");
    }
    b.delta = getd(o, "delta", b.delta);
    if (b.delta <= 0.0 || b.delta >= 1.0) bad_config("eval delta must be in (0,1)");
  }

  if (j.contains("mnist")) {
    const json& o = j["mnist"];
    if (!o.is_object()) bad_config("mnist must be an object");
    check_keys(o, {"dir", "train_per_class", "test_per_class"}, "mnist");
    auto& b = cfg.mnist;
    b.dir = gets(o, "dir", b.dir);
    b.train_per_class = getl(o, "train_per_class", b.train_per_class);
    b.test_per_class = getl(o, "test_per_class", b.test_per_class);
    if (b.train_per_class < 1) bad_config("mnist train_per_class must be >= 1");
    if (b.test_per_class < 0) bad_config("mnist test_per_class must be >= 0");
  }

  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config(os.str());
}

namespace {

json canonical_json(const ExperimentConfig& cfg) {
  json j;
  j["experiment"] = cfg.experiment;
  j["seed"] = cfg.seed;
  j["datagen"] = {{"K", cfg.datagen.K},
                  {"d", cfg.datagen.d},
                  {"norm_grid", cfg.datagen.norm_grid},
                  {"ncr_grid", cfg.datagen.ncr_grid},
                  {"dist", cfg.datagen.dist},
                  {"train_per_class", cfg.datagen.train_per_class},
                  {"test_per_class", cfg.datagen.test_per_class},
                  {"base_eig", cfg.datagen.base_eig}};
  j["model"] = {{"m", cfg.model.m}, {"sigma0", cfg.model.sigma0}, {"P", cfg.model.P}};
  j["optimizer"] = {{"mode", cfg.optimizer.mode},
                    {"clip_c", cfg.optimizer.clip_c},
                    {"sigma_n", cfg.optimizer.sigma_n},
                    {"epsilon", cfg.optimizer.epsilon},
                    {"delta_dp", cfg.optimizer.delta_dp},
                    {"eta", cfg.optimizer.eta},
                    {"batch", cfg.optimizer.batch},
                    {"epochs", cfg.optimizer.epochs},
                    {"trace_every", cfg.optimizer.trace_every}};
  j["eval"] = {{"L_values", cfg.eval.L_values},
               {"x_percents", cfg.eval.x_percents},
               {"delta", cfg.eval.delta}};
  j["mnist"] = {{"dir", cfg.mnist.dir},
                {"train_per_class", cfg.mnist.train_per_class},
                {"test_per_class", cfg.mnist.test_per_class}};
  return j;
}

}  // namespace

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = canonical_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char b[32];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(h));
  return b;
}

std::string provenance_line(const ExperimentConfig& cfg) {
  return "dptail v1 experiment=" + cfg.experiment + " seed=" + std::to_string(cfg.seed) +
         " config=" + config_hash(cfg);
}

// ------------------------------------------------------------- experiment --

namespace {

struct ModeSpec {
  DPConfig::Mode mode;
  const char* name;
};

std::vector<ModeSpec> modes_of(const std::string& mode) {
  if (mode == "clean") return {{DPConfig::Mode::Clean, "clean"}};
  if (mode == "dp") return {{DPConfig::Mode::DP, "dp"}};
  return {{DPConfig::Mode::Clean, "clean"}, {DPConfig::Mode::DP, "dp"}};
}

std::vector<BaseDist> dists_of(const std::string& dist) {
  if (dist == "gaussian") return {BaseDist::Gaussian};
  if (dist == "uniform") return {BaseDist::UniformSqrt3};
  return {BaseDist::Gaussian, BaseDist::UniformSqrt3};
}

double clamp_ncr(double v) {
  if (v < 1.0) {
    std::fprintf(stderr, "warning: ncr %s clamped to 1\n", fmtg(v).c_str());
    return 1.0;
  }
  return v;
}

std::vector<double> clamped_ncr_grid(const std::vector<double>& in) {
  std::vector<double> out;
  for (double v : in) {
    const double c = clamp_ncr(v);
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

struct CellSeeds {
  std::uint64_t cell, data, test, w0, train;
};

// Value-keyed derivation: the cell seed depends on the coordinates, not on
// their position in the grid, so rearranged grids reuse identical cells.
CellSeeds cell_seeds(std::uint64_t root, double norm, double ncr, BaseDist dist) {
  const std::uint64_t cell =
      seed_chain(root, kTagCell, std::bit_cast<std::uint64_t>(norm),
                 std::bit_cast<std::uint64_t>(ncr), static_cast<std::uint64_t>(dist));
  return {cell, seed_chain(cell, kTagData), seed_chain(cell, kTagTest),
          seed_chain(cell, kTagInit), seed_chain(cell, kTagTrain)};
}

DPConfig make_dpc(const ExperimentConfig& cfg, DPConfig::Mode mode, std::uint64_t train_seed,
                  long default_trace) {
  DPConfig c;
  c.mode = mode;
  c.clip_c = cfg.optimizer.clip_c;
  c.sigma_n = cfg.optimizer.sigma_n;
  c.epsilon = cfg.optimizer.epsilon;
  c.delta_dp = cfg.optimizer.delta_dp;
  c.eta = cfg.optimizer.eta;
  c.batch = cfg.optimizer.batch;
  c.epochs = cfg.optimizer.epochs;
  c.seed = train_seed;
  c.trace_every = cfg.optimizer.trace_every > 0 ? cfg.optimizer.trace_every : default_trace;
  return c;
}

struct PointData {
  SignalSet sig;
  NoiseModel nm;
  Dataset train;
  Dataset test;
  Model w0;
  CellSeeds seeds;
};

PointData build_point(const ExperimentConfig& cfg, double norm, double ncr, BaseDist dist,
                      bool with_test) {
  PointData p;
  p.seeds = cell_seeds(cfg.seed, norm, ncr, dist);
  const int K = cfg.datagen.K;
  p.sig = build_signals(K, cfg.datagen.d, std::vector<double>(K, norm), p.seeds.data);
  const std::vector<long> train_counts(K, cfg.datagen.train_per_class);
  p.nm = build_noise_model(p.sig, ncr, dist, cfg.datagen.base_eig, train_counts);
  p.train = sample_dataset(p.sig, p.nm, train_counts, cfg.model.P, p.seeds.data);
  if (with_test)
    p.test = sample_dataset(p.sig, p.nm, std::vector<long>(K, cfg.datagen.test_per_class),
                            cfg.model.P, p.seeds.test);
  p.w0 = init_model(K, cfg.model.m, cfg.datagen.d, cfg.model.sigma0, p.seeds.w0);
  return p;
}

void require_single_point(const ExperimentConfig& cfg, const char* who) {
  if (cfg.datagen.norm_grid.size() != 1 || cfg.datagen.ncr_grid.size() != 1 ||
      cfg.datagen.dist == "both")
    throw std::invalid_argument(std::string(who) +
                                ": needs a single (norm, ncr, dist) point, not a grid");
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const int w = static_cast<int>(std::max<std::size_t>(
      1, std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n)));
  if (w == 1) {
    for (std::size_t j = 0; j < n; ++j) fn(j);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first;
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (int t = 0; t < w; ++t)
    pool.emplace_back([&] {
      for (std::size_t j; (j = next.fetch_add(1)) < n;) {
        try {
          fn(j);
        } catch (...) {
          std::lock_guard<std::mutex> g(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  return out;
}

// --------------------------------------------------------------- CSV read --

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string f;
  std::istringstream is(line);
  while (std::getline(is, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  CsvTable t;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
    } else {
      if (fields.size() != t.header.size())
        throw std::runtime_error(path + ": malformed row '" + line + "'");
      t.rows.push_back(std::move(fields));
    }
  }
  if (t.header.empty()) throw std::runtime_error(path + ": no header row");
  return t;
}

int column_of(const CsvTable& t, const std::string& name) {
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i] == name) return static_cast<int>(i);
  return -1;
}

double parse_double(const std::string& s, const std::string& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(path + ": not a number: '" + s + "'");
  }
}

}  // namespace

// ------------------------------------------------------------------- SVG ---

namespace {

// Three-stop linear color ramp (dark violet, teal, yellow).
std::string ramp_color(double t) {
  static const int stops[3][3] = {{68, 1, 84}, {33, 145, 140}, {253, 231, 37}};
  t = std::min(1.0, std::max(0.0, t));
  const int seg = t < 0.5 ? 0 : 1;
  const double u = (t - 0.5 * seg) * 2.0;
  char b[16];
  std::snprintf(b, sizeof b, "#%02x%02x%02x",
                static_cast<int>(std::lround(stops[seg][0] + u * (stops[seg + 1][0] - stops[seg][0]))),
                static_cast<int>(std::lround(stops[seg][1] + u * (stops[seg + 1][1] - stops[seg][1]))),
                static_cast<int>(std::lround(stops[seg][2] + u * (stops[seg + 1][2] - stops[seg][2]))));
  return b;
}

bool light_color(const std::string& hex) {
  const int r = std::stoi(hex.substr(1, 2), nullptr, 16);
  const int g = std::stoi(hex.substr(3, 2), nullptr, 16);
  const int b = std::stoi(hex.substr(5, 2), nullptr, 16);
  return 0.299 * r + 0.587 * g + 0.114 * b > 140.0;
}

}  // namespace

void render_heatmap(const std::string& csv_path, const std::string& out_svg,
                    const std::string& mode_filter, const std::string& dist_filter) {
  const CsvTable t = read_csv(csv_path);
  const int cn = column_of(t, "norm");
  const int cc = column_of(t, "ncr");
  const int cv = column_of(t, "accuracy");
  for (auto [idx, name] : {std::pair{cn, "norm"}, {cc, "ncr"}, {cv, "accuracy"}})
    if (idx < 0)
      throw std::runtime_error("render: column '" + std::string(name) + "' missing in " +
                               csv_path);
  const int cm = column_of(t, "mode");
  const int cd = column_of(t, "dist");

  std::vector<double> norms, ncrs;
  struct Cell {
    double norm, ncr, value;
  };
  std::vector<Cell> cells;
  for (const auto& row : t.rows) {
    if (!mode_filter.empty() && (cm < 0 || row[cm] != mode_filter)) continue;
    if (!dist_filter.empty() && (cd < 0 || row[cd] != dist_filter)) continue;
    Cell c{parse_double(row[cn], csv_path), parse_double(row[cc], csv_path),
           parse_double(row[cv], csv_path)};
    cells.push_back(c);
    if (std::find(norms.begin(), norms.end(), c.norm) == norms.end()) norms.push_back(c.norm);
    if (std::find(ncrs.begin(), ncrs.end(), c.ncr) == ncrs.end()) ncrs.push_back(c.ncr);
  }
  if (cells.empty()) throw std::runtime_error("render: no rows selected from " + csv_path);
  std::sort(norms.begin(), norms.end());
  std::sort(ncrs.begin(), ncrs.end());
  const int nx = static_cast<int>(norms.size());
  const int ny = static_cast<int>(ncrs.size());

  // Repeated rows for one (norm, ncr) cell average over their finite
  // accuracies; a cell whose rows all failed renders as "err".
  std::map<std::pair<int, int>, std::pair<double, int>> agg;
  for (const auto& c : cells) {
    const int xi = static_cast<int>(std::find(norms.begin(), norms.end(), c.norm) -
                                    norms.begin());
    const int yi = static_cast<int>(std::find(ncrs.begin(), ncrs.end(), c.ncr) -
                                    ncrs.begin());
    auto& [sum, count] = agg[{xi, yi}];
    if (std::isfinite(c.value)) {
      sum += c.value;
      ++count;
    }
  }
  std::map<std::pair<int, int>, double> value;
  for (const auto& [k, sc] : agg)
    value[k] = sc.second > 0 ? sc.first / sc.second
                             : std::numeric_limits<double>::quiet_NaN();

  double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
  for (const auto& [k, v] : value)
    if (std::isfinite(v)) {
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
    }
  if (!(vmin <= vmax)) {
    vmin = 0.0;
    vmax = 1.0;
  }
  const double span = vmax - vmin;

  const int cw = 64, ch = 40, ml = 86, mt = 46, mr = 96, mb = 56;
  const int W = ml + cw * nx + mr, H = mt + ch * ny + mb;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << " " << H << "\" font-family=\"monospace\" font-size=\"12\">\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"#ffffff\"/>\n";
  std::string title = "accuracy";
  if (!mode_filter.empty() || !dist_filter.empty()) {
    title += " (";
    if (!mode_filter.empty()) title += "mode=" + mode_filter;
    if (!mode_filter.empty() && !dist_filter.empty()) title += ", ";
    if (!dist_filter.empty()) title += "dist=" + dist_filter;
    title += ")";
  }
  s << "<text x=\"" << ml << "\" y=\"24\">" << title << "</text>\n";

  for (int xi = 0; xi < nx; ++xi)
    for (int yi = 0; yi < ny; ++yi) {
      const int x = ml + xi * cw;
      const int y = mt + (ny - 1 - yi) * ch;  // ncr grows upward
      auto it = value.find({xi, yi});
      const double v = it == value.end() ? std::numeric_limits<double>::quiet_NaN()
                                         : it->second;
      std::string fill, label;
      if (std::isfinite(v)) {
        fill = ramp_color(span > 0.0 ? (v - vmin) / span : 0.5);
        label = fmt3(v);
      } else {
        fill = "#9e9e9e";
        label = "err";
      }
      s << "<rect class=\"cell\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << cw
        << "\" height=\"" << ch << "\" fill=\"" << fill << "\"/>\n";
      s << "<text class=\"val\" x=\"" << x + cw / 2 << "\" y=\"" << y + ch / 2 + 4
        << "\" text-anchor=\"middle\" fill=\"" << (light_color(fill) ? "#000000" : "#ffffff")
        << "\">" << label << "</text>\n";
    }

  for (int xi = 0; xi < nx; ++xi)
    s << "<text class=\"xtick\" x=\"" << ml + xi * cw + cw / 2 << "\" y=\"" << mt + ny * ch + 16
      << "\" text-anchor=\"middle\">" << fmt6(norms[xi]) << "</text>\n";
  for (int yi = 0; yi < ny; ++yi)
    s << "<text class=\"ytick\" x=\"" << ml - 8 << "\" y=\"" << mt + (ny - 1 - yi) * ch + ch / 2 + 4
      << "\" text-anchor=\"end\">" << fmt6(ncrs[yi]) << "</text>\n";
  s << "<text x=\"" << ml + (cw * nx) / 2 << "\" y=\"" << mt + ny * ch + 38
    << "\" text-anchor=\"middle\">signal norm</text>\n";
  s << "<text x=\"" << ml - 8 << "\" y=\"" << mt - 10 << "\" text-anchor=\"end\">NCR</text>\n";

  const int lx = ml + cw * nx + 24, lh = ch * ny;
  for (int i = 0; i < 24; ++i) {
    const int y0 = mt + lh - (lh * (i + 1)) / 24;
    const int hh = (lh * (i + 1)) / 24 - (lh * i) / 24;
    s << "<rect class=\"legend\" x=\"" << lx << "\" y=\"" << y0 << "\" width=\"16\" height=\""
      << hh << "\" fill=\"" << ramp_color((i + 0.5) / 24.0) << "\"/>\n";
  }
  s << "<text x=\"" << lx + 20 << "\" y=\"" << mt + 10 << "\">" << fmt6(vmax) << "</text>\n";
  s << "<text x=\"" << lx + 20 << "\" y=\"" << mt + lh << "\">" << fmt6(vmin) << "</text>\n";
  s << "</svg>\n";

  auto out = open_out(out_svg);
  out << s.str();
  if (!out.good()) throw std::runtime_error("write failed: " + out_svg);
}

// --------------------------------------------------------------- runners ---

void run_dynamics(const ExperimentConfig& cfg0) {
  ExperimentConfig cfg = cfg0;
  cfg.experiment = "dynamics";
  require_single_point(cfg, "dynamics");
  fs::create_directories(cfg.out_dir);
  const double norm = cfg.datagen.norm_grid[0];
  const double ncr = clamp_ncr(cfg.datagen.ncr_grid[0]);
  const BaseDist dist = base_dist_from_name(cfg.datagen.dist);
  const PointData p = build_point(cfg, norm, ncr, dist, false);
  const std::string prov = provenance_line(cfg);
  const auto modes = modes_of(cfg.optimizer.mode);
  parallel_for(modes.size(), cfg.workers, [&](std::size_t i) {
    const DPConfig dpc = make_dpc(cfg, modes[i].mode, p.seeds.train, 1);
    auto [mdl, trace] = train(p.w0, p.train, &p.sig, dpc);
    write_trace_csv(cfg.out_dir + "/dynamics_" + modes[i].name + ".csv", trace, prov);
  });
}

void run_heatmap_sweep(const ExperimentConfig& cfg0) {
  ExperimentConfig cfg = cfg0;
  cfg.experiment = "heatmap_sweep";
  fs::create_directories(cfg.out_dir);
  const std::vector<double>& norms = cfg.datagen.norm_grid;
  const std::vector<double> ncrs = clamped_ncr_grid(cfg.datagen.ncr_grid);
  const auto dists = dists_of(cfg.datagen.dist);
  const auto modes = modes_of(cfg.optimizer.mode);

  const int repeats = std::max(1, cfg.repeats);

  struct Row {
    double norm = 0.0, ncr = 0.0;
    BaseDist bdist = BaseDist::Gaussian;
    DPConfig::Mode bmode = DPConfig::Mode::Clean;
    const char* dist = "";
    const char* mode = "";
    std::uint64_t root = 0;
    std::uint64_t seed = 0;
    double acc = std::numeric_limits<double>::quiet_NaN();
    std::string err;
  };
  std::vector<Row> rows;
  for (double norm : norms)
    for (double ncr : ncrs)
      for (BaseDist dist : dists)
        for (const ModeSpec& mode : modes)
          for (int rep = 0; rep < repeats; ++rep) {
            Row r;
            r.norm = norm;
            r.ncr = ncr;
            r.bdist = dist;
            r.bmode = mode.mode;
            r.dist = base_dist_name(dist);
            r.mode = mode.name;
            // Repeat 0 reuses the run seed so repeats=1 reproduces an
            // un-repeated sweep byte for byte.
            r.root = rep == 0 ? cfg.seed
                              : seed_chain(cfg.seed, kTagRepeat,
                                           static_cast<std::uint64_t>(rep));
            rows.push_back(r);
          }

  parallel_for(rows.size(), cfg.workers, [&](std::size_t j) {
    Row& r = rows[j];
    r.seed = cell_seeds(r.root, r.norm, r.ncr, r.bdist).cell;
    try {
      ExperimentConfig pcfg = cfg;
      pcfg.seed = r.root;
      const PointData p = build_point(pcfg, r.norm, r.ncr, r.bdist, true);
      const DPConfig dpc = make_dpc(cfg, r.bmode, p.seeds.train, kNoTrace);
      auto [mdl, trace] = train(p.w0, p.train, &p.sig, dpc);
      r.acc = 1.0 - test_error(mdl, p.test).overall_error;
    } catch (const std::exception& e) {
      r.err = sanitize(e.what());
    }
  });

  const std::string csv_path = cfg.out_dir + "/sweep.csv";
  {
    auto out = open_out(csv_path);
    out << "# " << provenance_line(cfg) << "\n";
    out << "norm,ncr,dist,mode,seed,accuracy,error\n";
    for (const Row& r : rows)
      out << fmtg(r.norm) << ',' << fmtg(r.ncr) << ',' << r.dist << ',' << r.mode << ','
          << r.seed << ',' << fmtg(r.acc) << ',' << r.err << "\n";
    if (!out.good()) throw std::runtime_error("write failed: " + csv_path);
  }
  for (const ModeSpec& mode : modes)
    for (BaseDist dist : dists)
      render_heatmap(csv_path,
                     cfg.out_dir + "/sweep_" + mode.name + "_" + base_dist_name(dist) + ".svg",
                     mode.name, base_dist_name(dist));
}

void run_longtail_eval(const ExperimentConfig& cfg0) {
  ExperimentConfig cfg = cfg0;
  cfg.experiment = "longtail_eval";
  require_single_point(cfg, "longtail_eval");
  fs::create_directories(cfg.out_dir);
  const double norm = cfg.datagen.norm_grid[0];
  const double ncr = clamp_ncr(cfg.datagen.ncr_grid[0]);
  const BaseDist dist = base_dist_from_name(cfg.datagen.dist);
  const PointData p = build_point(cfg, norm, ncr, dist, true);

  // The long-tail comparison always needs the clean reference and the private
  // model, whatever the configured mode toggle says.
  Model models[2] = {Model{}, Model{}};
  const DPConfig::Mode mode_of[2] = {DPConfig::Mode::Clean, DPConfig::Mode::DP};
  parallel_for(2, cfg.workers, [&](std::size_t i) {
    const DPConfig dpc = make_dpc(cfg, mode_of[i], p.seeds.train, kNoTrace);
    models[i] = train(p.w0, p.train, &p.sig, dpc).first;
  });
  const double clean_full = test_error(models[0], p.test).overall_error;
  const double dp_full = test_error(models[1], p.test).overall_error;

  const std::string path = cfg.out_dir + "/longtail.csv";
  auto out = open_out(path);
  out << "# " << provenance_line(cfg) << "\n";
  out << "L,selected,selected_frac,clean_full_error,clean_longtail_error,dp_full_error,"
         "dp_longtail_error\n";
  const double n_test = static_cast<double>(p.test.n());
  for (double L : cfg.eval.L_values) {
    const std::vector<long> subset = longtail_partition(models[0], p.test, p.nm, L);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double clean_tail = subset.empty() ? nan : longtail_error(models[0], p.test, subset);
    const double dp_tail = subset.empty() ? nan : longtail_error(models[1], p.test, subset);
    out << fmtg(L) << ',' << subset.size() << ',' << fmtg(subset.size() / n_test) << ','
        << fmtg(clean_full) << ',' << fmtg(clean_tail) << ',' << fmtg(dp_full) << ','
        << fmtg(dp_tail) << "\n";
  }
  if (!out.good()) throw std::runtime_error("write failed: " + path);
}

namespace {

std::string find_mnist_file(const std::string& dir, const std::string& base) {
  for (const std::string& cand : {dir + "/" + base, dir + "/" + base + ".gz"})
    if (fs::exists(cand)) return cand;
  throw std::runtime_error("mnist file not found: " + dir + "/" + base + "[.gz]");
}

}  // namespace

void run_mnist_influence(const ExperimentConfig& cfg0) {
  ExperimentConfig cfg = cfg0;
  cfg.experiment = "mnist_influence";
  fs::create_directories(cfg.out_dir);
  const std::string& dir = cfg.mnist.dir;
  const RawImageSet train_raw = load_idx(find_mnist_file(dir, "train-images-idx3-ubyte"),
                                         find_mnist_file(dir, "train-labels-idx1-ubyte"));
  const RawImageSet test_raw = load_idx(find_mnist_file(dir, "t10k-images-idx3-ubyte"),
                                        find_mnist_file(dir, "t10k-labels-idx1-ubyte"));
  const Dataset train_ds = to_dataset(train_raw, cfg.model.P, cfg.mnist.train_per_class,
                                      seed_chain(cfg.seed, kTagMnist, 0));
  const Dataset test_ds = to_dataset(test_raw, cfg.model.P, cfg.mnist.test_per_class,
                                     seed_chain(cfg.seed, kTagMnist, 1));
  const InfluenceTable table = influence_table(test_ds);

  const Model w0 = init_model(test_ds.K, cfg.model.m, train_ds.d, cfg.model.sigma0,
                              seed_chain(cfg.seed, kTagMnist, 2));
  const auto modes = modes_of(cfg.optimizer.mode);
  std::vector<Model> models(modes.size());
  parallel_for(modes.size(), cfg.workers, [&](std::size_t i) {
    const DPConfig dpc =
        make_dpc(cfg, modes[i].mode, seed_chain(cfg.seed, kTagMnist, 3), kNoTrace);
    models[i] = train(w0, train_ds, nullptr, dpc).first;
  });

  const std::string path = cfg.out_dir + "/mnist_influence.csv";
  auto out = open_out(path);
  out << "# " << provenance_line(cfg) << "\n";
  out << "x_percent,mode,top_n,bottom_n,top_acc,bottom_acc\n";
  for (double x : cfg.eval.x_percents) {
    const auto [top, bottom] = quantile_partition(table, x);
    for (std::size_t i = 0; i < modes.size(); ++i) {
      const double top_acc = 1.0 - longtail_error(models[i], test_ds, top);
      const double bottom_acc = 1.0 - longtail_error(models[i], test_ds, bottom);
      out << fmtg(x) << ',' << modes[i].name << ',' << top.size() << ',' << bottom.size()
          << ',' << fmtg(top_acc) << ',' << fmtg(bottom_acc) << "\n";
    }
  }
  if (!out.good()) throw std::runtime_error("write failed: " + path);
}

namespace {

// Shared by the diagnostics and gen runners: signal/noise construction plus
// the condition table for the configured training run.
struct DiagContext {
  SignalSet sig;
  NoiseModel nm;
  std::vector<long> counts;
  CellSeeds seeds;
  double sigma_n = 0.0;
  long steps = 0;
  ConditionReport report;
};

DiagContext build_diag(const ExperimentConfig& cfg) {
  DiagContext ctx;
  const double norm = cfg.datagen.norm_grid[0];
  const double ncr = clamp_ncr(cfg.datagen.ncr_grid[0]);
  const BaseDist dist = base_dist_from_name(cfg.datagen.dist);
  ctx.seeds = cell_seeds(cfg.seed, norm, ncr, dist);
  const int K = cfg.datagen.K;
  ctx.sig = build_signals(K, cfg.datagen.d, std::vector<double>(K, norm), ctx.seeds.data);
  ctx.counts.assign(K, cfg.datagen.train_per_class);
  ctx.nm = build_noise_model(ctx.sig, ncr, dist, cfg.datagen.base_eig, ctx.counts);
  const long n = K * cfg.datagen.train_per_class;
  const DPConfig dpc = make_dpc(cfg, DPConfig::Mode::DP, 0, kNoTrace);
  ctx.steps = steps_for(n, dpc);
  ctx.sigma_n = cfg.optimizer.sigma_n >= 0.0
                    ? cfg.optimizer.sigma_n
                    : calibrate_sigma(cfg.optimizer.clip_c, ctx.steps, n,
                                      cfg.optimizer.epsilon, cfg.optimizer.delta_dp);
  ConditionHyper h;
  h.n = n;
  h.m = cfg.model.m;
  h.batch = cfg.optimizer.batch;
  h.eta = cfg.optimizer.eta;
  h.sigma0 = cfg.model.sigma0;
  h.delta = cfg.eval.delta;
  h.clip_c = cfg.optimizer.clip_c;
  h.sigma_n = ctx.sigma_n;
  h.steps = ctx.steps;
  ctx.report = check_condition(ctx.sig, ctx.nm, ctx.counts, h);
  return ctx;
}

double min_off_diagonal(const std::vector<double>& row) {
  double best = std::numeric_limits<double>::quiet_NaN();
  for (double v : row)
    if (std::isfinite(v) && !(best <= v)) best = std::isnan(best) ? v : std::min(best, v);
  return best;
}

}  // namespace

void run_diagnostics(const ExperimentConfig& cfg0) {
  ExperimentConfig cfg = cfg0;
  cfg.experiment = "diagnostics";
  require_single_point(cfg, "diagnostics");
  fs::create_directories(cfg.out_dir);
  const DiagContext ctx = build_diag(cfg);
  const std::string prov = provenance_line(cfg);
  write_condition_csv(cfg.out_dir + "/conditions.csv", ctx.report, prov);

  const long n = static_cast<long>(ctx.counts.size()) * cfg.datagen.train_per_class;
  const DiagnosticBounds db =
      diagnostics(ctx.sig, ctx.nm, ctx.counts, cfg.optimizer.clip_c, ctx.sigma_n, n,
                  cfg.model.m, cfg.eval.L_values[0], cfg.eval.delta);
  const std::string path = cfg.out_dir + "/diag.csv";
  auto out = open_out(path);
  out << "# " << prov << "\n";
  out << "class,clipping_factor,min_snr,min_ncr,thm_signal_fraction,thm_longtail_fraction,"
         "privacy_floor\n";
  for (std::size_t k = 0; k < db.clipping_factor.size(); ++k)
    out << k << ',' << fmtg(db.clipping_factor[k]) << ',' << fmtg(min_off_diagonal(db.snr[k]))
        << ',' << fmtg(min_off_diagonal(db.ncr[k])) << ',' << fmtg(db.thm_signal_fraction[k])
        << ',' << fmtg(db.thm_longtail_fraction[k]) << ',' << fmtg(db.privacy_floor[k])
        << "\n";
  if (!out.good()) throw std::runtime_error("write failed: " + path);
}

void run_gen(const ExperimentConfig& cfg0) {
  ExperimentConfig cfg = cfg0;
  cfg.experiment = "gen";
  require_single_point(cfg, "gen");
  fs::create_directories(cfg.out_dir);
  const DiagContext ctx = build_diag(cfg);
  const Dataset ds =
      sample_dataset(ctx.sig, ctx.nm, ctx.counts, cfg.model.P, ctx.seeds.data);
  save_dataset(cfg.out_dir + "/dataset.bin", ds);
  write_dataset_sidecar(cfg.out_dir + "/dataset.json", ctx.sig, ctx.nm, ds);
  write_condition_csv(cfg.out_dir + "/conditions.csv", ctx.report, provenance_line(cfg));
}

// ------------------------------------------------------------------- CLI ---

int cli_main(int argc, char** argv) {
  CLI::App app{"dptail: differentially private training and long-tail memorization studies"};
  app.require_subcommand(1);

  std::string config_path, out_dir_flag, mode_flag, csv_flag;
  std::uint64_t seed_flag = 0;
  int workers_flag = 1;

  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", config_path, "JSON experiment config")
        ->required()
        ->check(CLI::ExistingFile);
    s->add_option("--seed", seed_flag, "root seed override");
    s->add_option("--out-dir", out_dir_flag, "output directory override");
    s->add_option("--workers", workers_flag, "worker thread count override");
    s->add_option("--mode", mode_flag, "clean|dp|both override");
  };
  CLI::App* c_gen = app.add_subcommand("gen", "generate a dataset container");
  CLI::App* c_dyn = app.add_subcommand("dynamics", "paired clean/dp training traces");
  CLI::App* c_sweep = app.add_subcommand("sweep", "accuracy heatmap over (norm, ncr)");
  int repeats_flag = 1;
  c_sweep->add_option("--repeats", repeats_flag, "independent seeds per sweep cell");
  CLI::App* c_ltail = app.add_subcommand("longtail", "full-set vs long-tail error");
  CLI::App* c_mnist = app.add_subcommand("mnist", "influence quantile accuracy on MNIST");
  CLI::App* c_diag = app.add_subcommand("diag", "condition table and bound diagnostics");
  for (CLI::App* s : {c_gen, c_dyn, c_sweep, c_ltail, c_mnist, c_diag}) add_common(s);

  CLI::App* c_render = app.add_subcommand("render", "re-render heatmap SVGs from a sweep CSV");
  c_render->add_option("--csv", csv_flag, "sweep CSV to render")
      ->required()
      ->check(CLI::ExistingFile);
  std::string render_out = ".";
  c_render->add_option("--out-dir", render_out, "directory for the SVG panes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (c_render->parsed()) {
      const CsvTable t = read_csv(csv_flag);
      const int cm = column_of(t, "mode");
      const int cd = column_of(t, "dist");
      fs::create_directories(render_out);
      if (cm < 0 || cd < 0) {
        render_heatmap(csv_flag, render_out + "/heatmap.svg");
        return 0;
      }
      std::vector<std::pair<std::string, std::string>> panes;
      for (const auto& row : t.rows) {
        const std::pair<std::string, std::string> p{row[cm], row[cd]};
        if (std::find(panes.begin(), panes.end(), p) == panes.end()) panes.push_back(p);
      }
      for (const auto& [mode, dist] : panes)
        render_heatmap(csv_flag, render_out + "/sweep_" + mode + "_" + dist + ".svg", mode,
                       dist);
      return 0;
    }

    ExperimentConfig cfg = load_config_file(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (sub->count("--seed")) cfg.seed = seed_flag;
    if (sub->count("--out-dir")) cfg.out_dir = out_dir_flag;
    if (sub->count("--workers")) {
      if (workers_flag < 1) throw std::invalid_argument("workers must be >= 1");
      cfg.workers = workers_flag;
    }
    if (sub->count("--mode")) {
      if (mode_flag != "clean" && mode_flag != "dp" && mode_flag != "both")
        throw std::invalid_argument("mode must be clean, dp, or both");
      cfg.optimizer.mode = mode_flag;
    }
    if (sub == c_sweep && sub->count("--repeats")) {
      if (repeats_flag < 1) throw std::invalid_argument("repeats must be >= 1");
      cfg.repeats = repeats_flag;
    }

    if (sub == c_gen) run_gen(cfg);
    else if (sub == c_dyn) run_dynamics(cfg);
    else if (sub == c_sweep) run_heatmap_sweep(cfg);
    else if (sub == c_ltail) run_longtail_eval(cfg);
    else if (sub == c_mnist) run_mnist_influence(cfg);
    else run_diagnostics(cfg);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace dptail
