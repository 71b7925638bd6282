#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dptail/datagen.hpp"
#include "dptail/evaluation.hpp"
#include "dptail/model.hpp"

namespace dptail {

// Update rule: W <- W - (eta/B) sum_i clip_C(grad_i) + eta * n_t, with n_t
// i.i.d. N(0, sigma_n^2) per coordinate, drawn once per step over the whole
// flattened parameter vector.  Clean mode drops both the clip and the noise.
struct DPConfig {
  enum class Mode { Clean, DP };
  Mode mode = Mode::DP;
  double clip_c = 1.0;
  double sigma_n = -1.0;  // < 0: calibrate from (clip_c, steps, n, epsilon, delta_dp)
  double epsilon = 8.0;
  double delta_dp = 1e-5;
  double eta = 0.002;
  long batch = 256;
  int epochs = 20;
  std::uint64_t seed = 0;
  int trace_every = 1;  // cadence of full-train loss / alignment evaluation
};

long steps_for(long n, const DPConfig& cfg);  // epochs * ceil(n / B)

// Noise std sigma_n = c * C * sqrt(T * ln(1/delta_dp)) / (n * epsilon) with the
// nominal constant c = 1 (advanced composition; absolute constant unspecified
// upstream, overridable by setting sigma_n explicitly).
double calibrate_sigma(double clip_c, long steps, long n, double epsilon, double delta_dp);

// g / max(1, ||g||/C) over the flattened vector; rejects non-finite entries.
std::vector<double> clip(const std::vector<double>& g, double clip_c);

struct TraceRow {
  long step = 0;
  int epoch = 0;
  double batch_loss = 0.0;            // mean CE of the step's batch, pre-update
  double train_loss = 0.0;            // full-train mean CE, post-update (cadence)
  double signal_align = 0.0;          // cadence; NaN for real data
  double noise_align = 0.0;
  double mean_one_minus_logit = 0.0;  // mean (1 - p_y) over the batch, pre-update
  double clip_frac = 0.0;             // fraction of batch samples with ||g|| > C
};

struct TrainTrace {
  std::vector<TraceRow> rows;  // steps_T + 1, row 0 is the initial snapshot
};

// Observer for the clipping contract: (step, pre-clip norm, post-clip norm)
// per processed sample.
struct TrainHooks {
  std::function<void(long, double, double)> on_sample;
};

// Epoch partition: a seeded permutation of 0..n-1 cut into consecutive blocks
// of size B; the final short block is used as-is (the 1/B divisor stays B).
std::vector<std::vector<long>> epoch_batches(long n, long batch, std::uint64_t seed, int epoch);

// sig may be null (real data): alignment columns become NaN.  Throws on
// non-finite loss with the offending step in the message.
std::pair<Model, TrainTrace> train(const Model& w0, const Dataset& data, const SignalSet* sig,
                                   const DPConfig& cfg, const TrainHooks* hooks = nullptr);

void write_trace_csv(const std::string& path, const TrainTrace& trace,
                     const std::string& provenance);

}  // namespace dptail
