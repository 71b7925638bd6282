#pragma once

#include <cstdint>
#include <vector>

#include "dptail/datagen.hpp"
#include "dptail/model.hpp"

namespace dptail {

// Both metrics put the max over filters outside the sum over samples:
//   signal_align = (1/N) max_r sum_i <w_{y_i,r}, u_{y_i}>
//   noise_align  = (1/N) max_r sum_i <w_{y_i,r}, xi_i>
// where xi_i is the sample's noise content (sum of its non-signal patches).
struct AlignmentRecord {
  double signal_align = 0.0;
  double noise_align = 0.0;
  long step = 0;
};

AlignmentRecord alignment_metrics(const Model& mdl, const Dataset& data, const SignalSet& sig);

struct EvalReport {
  std::vector<double> per_class_error;  // NaN for classes absent from the set
  std::vector<long> per_class_count;
  double overall_error = 0.0;  // macro average over present classes
};

EvalReport test_error(const Model& mdl, const Dataset& testset);

// Long-tail selection against a clean-trained reference model: a test sample
// is long-tailed when the aggregate of its activated filters w_agg =
// sum_{r: <w_{y,r}, xi> > 0} w_{y,r} satisfies <w_agg, xi> >= L ||A_y^T w_agg||.
// Samples whose activated set is empty are never selected.  Returns sorted
// sample indices into the testset.
std::vector<long> longtail_partition(const Model& clean, const Dataset& testset,
                                     const NoiseModel& noise, double L);

// Misclassification rate of mdl restricted to the given sample indices.
double longtail_error(const Model& mdl, const Dataset& testset, const std::vector<long>& subset);

struct DiagnosticBounds {
  std::vector<double> clipping_factor;        // Lambda_k = C / (||u_k|| + ||A_k||_F)
  std::vector<std::vector<double>> snr;       // K x K, diagonal NaN
  std::vector<std::vector<double>> ncr;       // K x K, diagonal NaN
  std::vector<double> thm_signal_fraction;    // learning-statement exponent argument
  std::vector<double> thm_longtail_fraction;  // long-tail-statement exponent argument
  std::vector<double> privacy_floor;          // error floor with nominal constants
};

// Numeric evaluation of the theory's exponent arguments with all absolute
// constants at 1; intended for monotonicity and ordering studies only.
DiagnosticBounds diagnostics(const SignalSet& sig, const NoiseModel& nm,
                             const std::vector<long>& class_counts, double clip_c,
                             double sigma_n, long n, int m, double L, double delta);

}  // namespace dptail
