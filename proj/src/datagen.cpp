#include "dptail/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "dptail/rng.hpp"
#include "json.hpp"

namespace dptail {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint32_t kNoSignalPos = 0xffffffffu;

void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::ifstream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error(std::string("dataset read failed at ") + what);
  return v;
}

}  // namespace

const char* base_dist_name(BaseDist d) {
  return d == BaseDist::Gaussian ? "gaussian" : "uniform";
}

BaseDist base_dist_from_name(const std::string& name) {
  if (name == "gaussian") return BaseDist::Gaussian;
  if (name == "uniform") return BaseDist::UniformSqrt3;
  throw std::invalid_argument("unknown base distribution: " + name);
}

SignalSet build_signals(int K, int d, const std::vector<double>& norms, std::uint64_t seed) {
  require(K >= 1, "build_signals: K must be >= 1");
  require(d >= 2 * K, "build_signals: need d >= 2K so the shared noise subspace is non-empty");
  require(static_cast<int>(norms.size()) == K, "build_signals: norms length must equal K");
  for (double v : norms) require(v >= 0.0, "build_signals: norms must be non-negative");

  auto basis = std::make_shared<Matrix>(d, d);
  Rng rng(seed_chain(seed, 0xba515u));
  for (double& v : basis->a) v = rng.normal();
  orthonormalize_columns(*basis);

  SignalSet sig;
  sig.K = K;
  sig.d = d;
  sig.seed = seed;
  sig.norms = norms;
  sig.basis = basis;
  sig.signals.assign(K, std::vector<double>(d, 0.0));
  for (int k = 0; k < K; ++k) {
    const double* col = basis->col(k);
    for (int i = 0; i < d; ++i) sig.signals[k][i] = norms[k] * col[i];
  }
  return sig;
}

NoiseModel build_noise_model(const SignalSet& sig, double target_ncr, BaseDist dist,
                             double base_eig, const std::vector<long>& class_counts) {
  require(sig.basis != nullptr, "build_noise_model: signal set has no basis");
  require(target_ncr >= 1.0,
          "build_noise_model: target NCR < 1 is unreachable under the spike-plus-shared construction");
  require(base_eig > 0.0, "build_noise_model: base eigenvalue must be positive");
  const int K = sig.K, d = sig.d;
  const int rs = d - 2 * K;
  require(rs >= 1, "build_noise_model: shared subspace is empty (d == 2K)");
  if (!class_counts.empty()) {
    require(static_cast<int>(class_counts.size()) == K,
            "build_noise_model: class_counts length must equal K");
    for (long c : class_counts)
      require(c == class_counts[0],
              "build_noise_model: uniform target NCR requires equal class counts");
  }

  NoiseModel nm;
  nm.K = K;
  nm.d = d;
  nm.rs = rs;
  nm.base_eig = base_eig;
  nm.target_ncr = target_ncr;
  nm.base_dist = dist;
  nm.basis = sig.basis;
  const double c4 = base_eig * base_eig * base_eig * base_eig;
  const double lambda = std::pow(c4 * rs * (target_ncr * target_ncr - 1.0), 0.25);
  nm.spike_vals.assign(K, lambda);
  nm.spike_dirs.assign(K, std::vector<double>(d, 0.0));
  for (int k = 0; k < K; ++k) {
    const double* col = sig.basis->col(K + k);
    std::copy(col, col + d, nm.spike_dirs[k].begin());
  }
  return nm;
}

std::vector<double> NoiseModel::apply(int k, const std::vector<double>& zeta) const {
  if (k < 0 || k >= K) throw std::invalid_argument("NoiseModel::apply: class out of range");
  if (static_cast<int>(zeta.size()) != d)
    throw std::invalid_argument("NoiseModel::apply: dimension mismatch");
  // Q_s spans the exact complement of the 2K signal+spike columns, so the
  // shared projection is the identity minus those rank-one terms.
  std::vector<double> out = zeta;
  for (int c = 0; c < 2 * K; ++c) {
    const double* col = basis->col(c);
    axpy(-dot(col, zeta.data(), d), col, out.data(), d);
  }
  scal(base_eig, out.data(), d);
  const double proj = dot(spike_dirs[k].data(), zeta.data(), d);
  axpy(spike_vals[k] * proj, spike_dirs[k].data(), out.data(), d);
  return out;
}

Matrix NoiseModel::shared_basis() const {
  Matrix qs(d, rs);
  for (int c = 0; c < rs; ++c) {
    const double* src = basis->col(2 * K + c);
    std::copy(src, src + d, qs.col(c));
  }
  return qs;
}

Dataset sample_dataset(const SignalSet& sig, const NoiseModel& noise,
                       const std::vector<long>& class_counts, int P, std::uint64_t seed,
                       bool retain_zeta) {
  require(static_cast<int>(class_counts.size()) == sig.K,
          "sample_dataset: class_counts length must equal K");
  require(P >= 1, "sample_dataset: need at least one patch");
  for (long c : class_counts) require(c >= 0, "sample_dataset: negative class count");

  Dataset ds;
  ds.K = sig.K;
  ds.d = sig.d;
  ds.P = P;
  ds.seed = seed;
  ds.synthetic = true;
  ds.class_counts = class_counts;

  const int d = sig.d;
  Rng rng(seed_chain(seed, 0xda7a));
  std::vector<double> zeta(d);
  for (int k = 0; k < sig.K; ++k) {
    for (long i = 0; i < class_counts[k]; ++i) {
      Sample s;
      s.label = static_cast<std::uint32_t>(k);
      s.signal_pos = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(P)));
      s.patches.resize(static_cast<std::size_t>(P) * d);
      for (int j = 0; j < P; ++j) {
        double* dst = s.patches.data() + static_cast<std::size_t>(j) * d;
        if (j == s.signal_pos) {
          std::copy(sig.signals[k].begin(), sig.signals[k].end(), dst);
          continue;
        }
        for (int t = 0; t < d; ++t)
          zeta[t] = noise.base_dist == BaseDist::Gaussian
                        ? rng.normal()
                        : rng.uniform(-std::sqrt(3.0), std::sqrt(3.0));
        std::vector<double> xi = noise.apply(k, zeta);
        std::copy(xi.begin(), xi.end(), dst);
        if (retain_zeta) s.raw_zeta.insert(s.raw_zeta.end(), zeta.begin(), zeta.end());
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

double cross_gram_fro(const NoiseModel& nm, int k, int j) {
  const double c2 = nm.base_eig * nm.base_eig;
  if (k != j) return c2 * std::sqrt(static_cast<double>(nm.rs));
  const double l2 = nm.spike_vals[k] * nm.spike_vals[k];
  return std::sqrt(l2 * l2 + c2 * c2 * nm.rs);
}

double self_gram_trace(const NoiseModel& nm, int k) {
  return nm.spike_vals[k] * nm.spike_vals[k] + nm.base_eig * nm.base_eig * nm.rs;
}

double transform_fro(const NoiseModel& nm, int k) {
  return std::sqrt(self_gram_trace(nm, k));
}

double transform_op(const NoiseModel& nm, int k) {
  return std::max(nm.spike_vals[k], nm.base_eig);
}

double compute_snr(const SignalSet& sig, const NoiseModel& nm,
                   const std::vector<long>& class_counts, int k, int j) {
  require(k != j, "compute_snr: requires k != j");
  const double den = std::sqrt(static_cast<double>(class_counts[j])) * cross_gram_fro(nm, k, j);
  if (den == 0.0) throw std::domain_error("compute_snr: zero cross-correlation denominator");
  return class_counts[k] * sig.norms[k] * sig.norms[k] / den;
}

double compute_ncr(const NoiseModel& nm, const std::vector<long>& class_counts, int k, int j) {
  require(k != j, "compute_ncr: requires k != j");
  const double den = std::sqrt(static_cast<double>(class_counts[j])) * cross_gram_fro(nm, k, j);
  if (den == 0.0) throw std::domain_error("compute_ncr: zero cross-correlation denominator");
  return std::sqrt(static_cast<double>(class_counts[k])) * cross_gram_fro(nm, k, k) / den;
}

std::vector<std::vector<double>> snr_matrix(const SignalSet& sig, const NoiseModel& nm,
                                            const std::vector<long>& class_counts) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> m(nm.K, std::vector<double>(nm.K, nan));
  for (int k = 0; k < nm.K; ++k)
    for (int j = 0; j < nm.K; ++j)
      if (k != j) m[k][j] = compute_snr(sig, nm, class_counts, k, j);
  return m;
}

std::vector<std::vector<double>> ncr_matrix(const NoiseModel& nm,
                                            const std::vector<long>& class_counts) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> m(nm.K, std::vector<double>(nm.K, nan));
  for (int k = 0; k < nm.K; ++k)
    for (int j = 0; j < nm.K; ++j)
      if (k != j) m[k][j] = compute_ncr(nm, class_counts, k, j);
  return m;
}

ConditionReport check_condition(const SignalSet& sig, const NoiseModel& nm,
                                const std::vector<long>& class_counts,
                                const ConditionHyper& hyper) {
  const int K = nm.K;
  const double n = static_cast<double>(hyper.n);
  const double delta = hyper.delta;
  const double logn2 = std::log(n * n / delta);

  double min_trace = std::numeric_limits<double>::infinity();
  double max_cross = 0.0, min_cross = std::numeric_limits<double>::infinity();
  double min_fro_op = std::numeric_limits<double>::infinity();
  double max_fro = 0.0, max_trace = 0.0, max_op_ratio = 0.0;
  double max_u = 0.0, min_u2 = std::numeric_limits<double>::infinity();
  long min_count = hyper.n;
  for (int i = 0; i < K; ++i) {
    min_trace = std::min(min_trace, self_gram_trace(nm, i));
    max_trace = std::max(max_trace, self_gram_trace(nm, i));
    max_u = std::max(max_u, sig.norms[i]);
    min_u2 = std::min(min_u2, sig.norms[i] * sig.norms[i]);
    const double lmax = std::max(nm.spike_vals[i], nm.base_eig);
    const double lmin = nm.spike_vals[i] > 0.0 ? std::min(nm.spike_vals[i], nm.base_eig)
                                               : nm.base_eig;
    max_op_ratio = std::max(max_op_ratio, (lmax * lmax) / (lmin * lmin));
    if (i < static_cast<int>(class_counts.size()))
      min_count = std::min(min_count, class_counts[i]);
    for (int j = 0; j < K; ++j) {
      const double f = cross_gram_fro(nm, i, j);
      max_fro = std::max(max_fro, f);
      if (i != j) {
        max_cross = std::max(max_cross, f);
        min_cross = std::min(min_cross, f);
      }
      const double op = i == j ? std::max(nm.spike_vals[i] * nm.spike_vals[i],
                                          nm.base_eig * nm.base_eig)
                               : nm.base_eig * nm.base_eig;
      min_fro_op = std::min(min_fro_op, f / op);
    }
  }

  ConditionReport rep;
  auto line = [&rep](const std::string& name, double lhs, double rhs) {
    rep.lines.push_back({name, lhs, rhs, lhs >= rhs});
  };

  const double term1 = max_fro * logn2;
  const double term2 = std::sqrt(n) * std::sqrt(max_fro) * std::sqrt(logn2) /
                       std::max<double>(1, min_count);
  line("a.trace_vs_cross", min_trace, n * std::max(term1, term2));
  line("a.fro_over_op", min_fro_op, std::sqrt(std::log(K / delta)));
  line("a.cross_uniform", min_cross, max_cross);
  line("a.base_dist_tail", 0.5, 0.4);  // both base distributions are symmetric about 0
  line("b.m_vs_eigratio", hyper.m, std::log(n / delta) * max_op_ratio);
  line("b.n_vs_log_m", n, std::log(hyper.m / delta));
  line("b.m_vs_sigma0", hyper.m,
       std::log(n / delta) * std::pow(std::log(std::max<double>(hyper.steps, 2)), 2) /
           (n * hyper.sigma0 * hyper.sigma0));
  int min_rank = nm.rs;
  for (int j = 0; j < K; ++j)
    min_rank = std::min(min_rank, nm.rs + (nm.spike_vals[j] > 0.0 ? 1 : 0));
  line("b.rank_vs_n", std::min({static_cast<double>(hyper.m), static_cast<double>(sig.d),
                                static_cast<double>(min_rank)}) - 0.9 * hyper.m, n);
  line("b.d_vs_log", sig.d, std::log(hyper.m * n / delta));
  line("c.eta_vs_scale", 1.0 / ((hyper.clip_c + std::sqrt(static_cast<double>(sig.d)) * hyper.sigma_n) *
                                (max_u + std::sqrt(1.5 * max_trace))),
       hyper.eta);
  line("c.eta_vs_trace", hyper.m * n * std::log(std::max<double>(hyper.steps, 2)) / max_trace,
       hyper.eta);
  line("c.batch_vs_n", static_cast<double>(hyper.batch), n);
  const double phi = std::min(min_cross, min_u2);
  const double logkm = std::log(K * hyper.m / delta);
  double fro_max_a = 0.0;
  for (int k = 0; k < K; ++k) fro_max_a = std::max(fro_max_a, transform_fro(nm, k));
  const double sigma0_bound = phi / (n * std::max(std::sqrt(logkm) * max_u, logkm * fro_max_a));
  line("c.sigma0_vs_bound", sigma0_bound, hyper.sigma0);

  rep.all_satisfied = true;
  for (const auto& l : rep.lines) rep.all_satisfied = rep.all_satisfied && l.satisfied;
  return rep;
}

void write_condition_csv(const std::string& path, const ConditionReport& report,
                         const std::string& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  if (!provenance.empty()) out << "# " << provenance << "\n";
  out << "name,lhs,rhs,ratio,satisfied\n";
  char buf[128];
  for (const auto& l : report.lines) {
    const double ratio = l.rhs != 0.0 ? l.lhs / l.rhs : std::numeric_limits<double>::infinity();
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%d\n", l.name.c_str(), l.lhs, l.rhs,
                  ratio, l.satisfied ? 1 : 0);
    out << buf;
  }
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write("DPTL", 4);
  put<std::uint32_t>(out, kDatasetVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.K));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.d));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.P));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(ds.n()));
  for (const auto& s : ds.samples) {
    put<std::uint32_t>(out, s.label);
    put<std::uint32_t>(out, s.signal_pos < 0 ? kNoSignalPos
                                             : static_cast<std::uint32_t>(s.signal_pos));
    out.write(reinterpret_cast<const char*>(s.patches.data()),
              static_cast<std::streamsize>(s.patches.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DPTL", 4) != 0)
    throw std::runtime_error(path + ": bad dataset magic");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kDatasetVersion) throw std::runtime_error(path + ": unsupported dataset version");
  Dataset ds;
  ds.K = static_cast<int>(get<std::uint32_t>(in, "K"));
  ds.d = static_cast<int>(get<std::uint32_t>(in, "d"));
  ds.P = static_cast<int>(get<std::uint32_t>(in, "P"));
  const auto n = get<std::uint64_t>(in, "n");
  ds.class_counts.assign(ds.K, 0);
  ds.samples.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Sample s;
    s.label = get<std::uint32_t>(in, "label");
    const auto pos = get<std::uint32_t>(in, "signal_pos");
    s.signal_pos = pos == kNoSignalPos ? -1 : static_cast<std::int32_t>(pos);
    if (s.signal_pos < 0) ds.synthetic = false;
    s.patches.resize(static_cast<std::size_t>(ds.P) * ds.d);
    in.read(reinterpret_cast<char*>(s.patches.data()),
            static_cast<std::streamsize>(s.patches.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path + ": truncated sample block");
    if (s.label < static_cast<std::uint32_t>(ds.K)) ++ds.class_counts[s.label];
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_dataset_sidecar(const std::string& path, const SignalSet& sig, const NoiseModel& nm,
                           const Dataset& ds) {
  nlohmann::json j;
  j["K"] = ds.K;
  j["d"] = ds.d;
  j["P"] = ds.P;
  j["n"] = ds.n();
  j["dataset_seed"] = ds.seed;
  j["signal_seed"] = sig.seed;
  j["norms"] = sig.norms;
  j["target_ncr"] = nm.target_ncr;
  j["base_eig"] = nm.base_eig;
  j["spike_vals"] = nm.spike_vals;
  j["base_dist"] = base_dist_name(nm.base_dist);
  j["class_counts"] = ds.class_counts;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(2) << "\n";
}

}  // namespace dptail
