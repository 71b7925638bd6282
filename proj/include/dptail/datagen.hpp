#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dptail/linalg.hpp"

namespace dptail {

enum class BaseDist { Gaussian, UniformSqrt3 };

const char* base_dist_name(BaseDist d);
BaseDist base_dist_from_name(const std::string& name);

// Per-class signal vectors u_k = ||u_k|| * U e_k, where U is a seeded random
// orthonormal basis shared with the noise model construction.
struct SignalSet {
  int K = 0;
  int d = 0;
  std::uint64_t seed = 0;
  std::vector<double> norms;            // ||u_k||, length K
  std::vector<std::vector<double>> signals;  // u_k, K rows of length d
  std::shared_ptr<const Matrix> basis;  // orthonormal d x d, column-major
};

// Class-conditional noise transform A_k = lambda_k q_k q_k^T + c Q_s Q_s^T,
// stored implicitly: spike directions q_k are basis columns K..2K-1 and the
// shared subspace Q_s is basis columns 2K..d-1.  Signals, spikes and Q_s are
// mutually orthogonal by construction.
struct NoiseModel {
  int K = 0;
  int d = 0;
  int rs = 0;  // shared subspace dimension, d - 2K
  double base_eig = 0.5;
  double target_ncr = 1.0;
  BaseDist base_dist = BaseDist::Gaussian;
  std::vector<double> spike_vals;            // lambda_k, length K
  std::vector<std::vector<double>> spike_dirs;  // q_k, K rows of length d
  std::shared_ptr<const Matrix> basis;       // same basis as the SignalSet

  // Columns 0..2K-1 of the basis span the complement of Q_s; the transform is
  // applied as lambda_k q_k <q_k,z> + c (z - sum_c U_c <U_c,z>).
  std::vector<double> apply(int k, const std::vector<double>& zeta) const;

  // Dense d x rs copy of Q_s (test/diagnostic use; the hot path never forms it).
  Matrix shared_basis() const;
};

struct Sample {
  std::uint32_t label = 0;
  std::int32_t signal_pos = -1;   // patch holding the signal; -1 for real data
  std::vector<double> patches;    // P*d, patch j at [j*d, (j+1)*d)
  std::vector<double> raw_zeta;   // base draws, only if retained at sampling

  const double* patch(int j, int d) const { return patches.data() + static_cast<std::size_t>(j) * d; }
};

struct Dataset {
  int K = 0;
  int d = 0;
  int P = 2;
  std::uint64_t seed = 0;
  bool synthetic = true;
  std::vector<Sample> samples;
  std::vector<long> class_counts;  // length K

  long n() const { return static_cast<long>(samples.size()); }
};

SignalSet build_signals(int K, int d, const std::vector<double>& norms, std::uint64_t seed);

// class_counts, when provided, must be uniform: the closed-form spike value
// assumes the count factors cancel in the target ratio.
NoiseModel build_noise_model(const SignalSet& sig, double target_ncr, BaseDist dist,
                             double base_eig = 0.5,
                             const std::vector<long>& class_counts = {});

// Stratified sampler: class_counts[k] samples of class k in class-major order,
// signal patch position uniform, remaining patches independent noise draws.
Dataset sample_dataset(const SignalSet& sig, const NoiseModel& noise,
                       const std::vector<long>& class_counts, int P, std::uint64_t seed,
                       bool retain_zeta = false);

// Closed-form norms of the implicit transforms.
double cross_gram_fro(const NoiseModel& nm, int k, int j);  // ||A_k^T A_j||_F
double self_gram_trace(const NoiseModel& nm, int k);        // tr(A_k^T A_k)
double transform_fro(const NoiseModel& nm, int k);          // ||A_k||_F
double transform_op(const NoiseModel& nm, int k);           // ||A_k||_2

// Pairwise ratios, k != j.
double compute_snr(const SignalSet& sig, const NoiseModel& nm,
                   const std::vector<long>& class_counts, int k, int j);
double compute_ncr(const NoiseModel& nm, const std::vector<long>& class_counts, int k, int j);

// Full K x K matrices for CSV export; diagonal entries are NaN.
std::vector<std::vector<double>> snr_matrix(const SignalSet& sig, const NoiseModel& nm,
                                            const std::vector<long>& class_counts);
std::vector<std::vector<double>> ncr_matrix(const NoiseModel& nm,
                                            const std::vector<long>& class_counts);

struct ConditionLine {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;
  bool satisfied = false;
};

struct ConditionReport {
  std::vector<ConditionLine> lines;
  bool all_satisfied = false;
};

struct ConditionHyper {
  long n = 0;
  int m = 0;
  long batch = 0;
  double eta = 0.0;
  double sigma0 = 0.0;
  double delta = 0.01;    // failure probability in the condition statements
  double clip_c = 1.0;    // step-size line couples to clipping and DP noise
  double sigma_n = 0.0;
  long steps = 1;
};

ConditionReport check_condition(const SignalSet& sig, const NoiseModel& nm,
                                const std::vector<long>& class_counts,
                                const ConditionHyper& hyper);

void write_condition_csv(const std::string& path, const ConditionReport& report,
                         const std::string& provenance);

// Binary dataset container (magic "DPTL") plus a JSON sidecar describing the
// generator parameters.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);
void write_dataset_sidecar(const std::string& path, const SignalSet& sig, const NoiseModel& nm,
                           const Dataset& ds);

}  // namespace dptail
