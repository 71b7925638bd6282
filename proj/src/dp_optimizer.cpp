#include "dptail/dp_optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "dptail/rng.hpp"

namespace dptail {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kTagShuffle = 0x5f1eu;
constexpr std::uint64_t kTagNoise = 0x90153u;

}  // namespace

long steps_for(long n, const DPConfig& cfg) {
  return static_cast<long>(cfg.epochs) * ((n + cfg.batch - 1) / cfg.batch);
}

double calibrate_sigma(double clip_c, long steps, long n, double epsilon, double delta_dp) {
  if (clip_c <= 0.0) throw std::invalid_argument("calibrate_sigma: clip threshold must be positive");
  if (steps < 0) throw std::invalid_argument("calibrate_sigma: negative step count");
  if (n < 1) throw std::invalid_argument("calibrate_sigma: need n >= 1");
  if (epsilon <= 0.0) throw std::invalid_argument("calibrate_sigma: epsilon must be positive");
  if (delta_dp <= 0.0 || delta_dp >= 1.0)
    throw std::invalid_argument("calibrate_sigma: delta must lie in (0,1)");
  return clip_c * std::sqrt(steps * std::log(1.0 / delta_dp)) / (n * epsilon);
}

std::vector<double> clip(const std::vector<double>& g, double clip_c) {
  if (clip_c <= 0.0) throw std::invalid_argument("clip: threshold must be positive");
  double sq = 0.0;
  for (double v : g) {
    if (!std::isfinite(v)) throw std::invalid_argument("clip: non-finite gradient entry");
    sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm <= clip_c) return g;
  std::vector<double> out(g.size());
  const double scale = clip_c / norm;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = scale * g[i];
  return out;
}

std::vector<std::vector<long>> epoch_batches(long n, long batch, std::uint64_t seed, int epoch) {
  std::vector<long> perm(n);
  for (long i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed_chain(seed, kTagShuffle, static_cast<std::uint64_t>(epoch)));
  for (long i = n - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);

  std::vector<std::vector<long>> batches;
  for (long start = 0; start < n; start += batch)
    batches.emplace_back(perm.begin() + start, perm.begin() + std::min(n, start + batch));
  return batches;
}

std::pair<Model, TrainTrace> train(const Model& w0, const Dataset& data, const SignalSet* sig,
                                   const DPConfig& cfg, const TrainHooks* hooks) {
  const long n = data.n();
  if (w0.K != data.K || w0.d != data.d)
    throw std::invalid_argument("train: model shape does not match the dataset");
  if (cfg.batch < 1 || cfg.batch > n)
    throw std::invalid_argument("train: need 1 <= B <= n");
  if (cfg.epochs < 0) throw std::invalid_argument("train: negative epoch count");
  if (cfg.eta <= 0.0) throw std::invalid_argument("train: learning rate must be positive");
  if (cfg.trace_every < 1) throw std::invalid_argument("train: trace cadence must be >= 1");
  const bool dp = cfg.mode == DPConfig::Mode::DP;
  if (dp && cfg.clip_c <= 0.0)
    throw std::invalid_argument("train: DP mode needs a positive clip threshold");

  const long T = steps_for(n, cfg);
  const double sigma =
      !dp ? 0.0
          : (cfg.sigma_n >= 0.0 ? cfg.sigma_n
                                : calibrate_sigma(cfg.clip_c, T, n, cfg.epsilon, cfg.delta_dp));

  const int P = data.P;
  // Per-sample patch Gram matrices, reused by every step's norm computation.
  std::vector<double> grams(static_cast<std::size_t>(n) * P * P);
  for (long i = 0; i < n; ++i)
    patch_gram(data.samples[i], P, data.d, grams.data() + static_cast<std::size_t>(i) * P * P);

  Model mdl = w0;
  Rng noise_rng(seed_chain(cfg.seed, kTagNoise));
  Forward f;
  std::vector<double> acc(mdl.size());
  const bool aligned = sig != nullptr && data.synthetic;

  TrainTrace trace;
  trace.rows.reserve(T + 1);
  auto slow_columns = [&](TraceRow& row) {
    row.train_loss = mean_loss(mdl, data);
    if (!std::isfinite(row.train_loss)) {
      char msg[96];
      std::snprintf(msg, sizeof(msg), "train: non-finite loss at step %ld", row.step);
      throw std::runtime_error(msg);
    }
    if (aligned) {
      AlignmentRecord rec = alignment_metrics(mdl, data, *sig);
      row.signal_align = rec.signal_align;
      row.noise_align = rec.noise_align;
    } else {
      row.signal_align = kNaN;
      row.noise_align = kNaN;
    }
  };

  TraceRow init;
  init.step = 0;
  init.epoch = 0;
  init.batch_loss = kNaN;
  init.mean_one_minus_logit = kNaN;
  init.clip_frac = kNaN;
  slow_columns(init);
  trace.rows.push_back(init);

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(n, cfg.batch, cfg.seed, epoch)) {
      ++step;
      std::fill(acc.begin(), acc.end(), 0.0);
      double loss_sum = 0.0, miss_sum = 0.0;
      long clipped = 0;
      for (long idx : batch) {
        const Sample& s = data.samples[idx];
        evaluate_sample(mdl, s, P, f);
        loss_sum += f.loss;
        miss_sum += 1.0 - f.probs[s.label];
        double scale = 1.0 / cfg.batch;
        if (dp) {
          const double norm = std::sqrt(per_sample_grad_sq(
              mdl, f, grams.data() + static_cast<std::size_t>(idx) * P * P, P));
          double h = 1.0;
          if (norm > cfg.clip_c) {
            h = cfg.clip_c / norm;
            ++clipped;
          }
          scale *= h;
          if (hooks && hooks->on_sample) hooks->on_sample(step, norm, h * norm);
        }
        accumulate_grad(mdl, s, P, f, scale, acc);
      }
      axpy(-cfg.eta, acc.data(), mdl.w.data(), static_cast<int>(mdl.size()));
      if (sigma > 0.0)
        for (double& w : mdl.w) w += cfg.eta * sigma * noise_rng.normal();

      TraceRow row;
      row.step = step;
      row.epoch = epoch;
      row.batch_loss = loss_sum / batch.size();
      row.mean_one_minus_logit = miss_sum / batch.size();
      row.clip_frac = dp ? static_cast<double>(clipped) / batch.size() : 0.0;
      if (!std::isfinite(row.batch_loss)) {
        char msg[96];
        std::snprintf(msg, sizeof(msg), "train: non-finite loss at step %ld", step);
        throw std::runtime_error(msg);
      }
      if (step % cfg.trace_every == 0 || step == T) {
        slow_columns(row);
      } else {
        row.train_loss = kNaN;
        row.signal_align = kNaN;
        row.noise_align = kNaN;
      }
      trace.rows.push_back(row);
    }
  }
  return {std::move(mdl), std::move(trace)};
}

void write_trace_csv(const std::string& path, const TrainTrace& trace,
                     const std::string& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  if (!provenance.empty()) out << "# " << provenance << "\n";
  out << "step,epoch,batch_loss,train_loss,signal_align,noise_align,mean_one_minus_logit,"
         "clip_frac\n";
  char buf[256];
  for (const auto& r : trace.rows) {
    std::snprintf(buf, sizeof(buf), "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step,
                  r.epoch, r.batch_loss, r.train_loss, r.signal_align, r.noise_align,
                  r.mean_one_minus_logit, r.clip_frac);
    out << buf;
  }
}

}  // namespace dptail
