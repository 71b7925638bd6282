#include "dptail/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dptail {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Sum of the sample's non-signal patches; requires synthetic provenance.
void noise_content(const Sample& s, int P, int d, std::vector<double>& xi) {
  if (s.signal_pos < 0)
    throw std::invalid_argument("noise content undefined: sample lacks a signal position");
  xi.assign(d, 0.0);
  for (int j = 0; j < P; ++j) {
    if (j == s.signal_pos) continue;
    const double* p = s.patch(j, d);
    for (int t = 0; t < d; ++t) xi[t] += p[t];
  }
}

}  // namespace

AlignmentRecord alignment_metrics(const Model& mdl, const Dataset& data, const SignalSet& sig) {
  const int K = mdl.K, m = mdl.m, d = mdl.d;
  AlignmentRecord rec;
  if (data.samples.empty()) return rec;

  // The signal sum collapses over classes: every class-k sample contributes
  // the same <w_{k,r}, u_k>.
  std::vector<long> counts(K, 0);
  for (const auto& s : data.samples) ++counts[s.label];
  double best_sig = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < m; ++r) {
    double acc = 0.0;
    for (int k = 0; k < K; ++k)
      if (counts[k] > 0) acc += counts[k] * dot(mdl.filter(k, r), sig.signals[k].data(), d);
    best_sig = std::max(best_sig, acc);
  }

  // The noise sum is genuinely per-sample.
  std::vector<double> per_r(m, 0.0);
  std::vector<double> xi;
  for (const auto& s : data.samples) {
    noise_content(s, data.P, d, xi);
    for (int r = 0; r < m; ++r) per_r[r] += dot(mdl.filter(s.label, r), xi.data(), d);
  }
  rec.signal_align = best_sig / data.n();
  rec.noise_align = *std::max_element(per_r.begin(), per_r.end()) / data.n();
  return rec;
}

EvalReport test_error(const Model& mdl, const Dataset& testset) {
  const int K = mdl.K;
  EvalReport rep;
  rep.per_class_error.assign(K, kNaN);
  rep.per_class_count.assign(K, 0);
  std::vector<long> wrong(K, 0);
  Forward f;
  for (const auto& s : testset.samples) {
    ++rep.per_class_count[s.label];
    if (predict(mdl, s, testset.P, f) != static_cast<int>(s.label)) ++wrong[s.label];
  }
  double macro = 0.0;
  int present = 0;
  for (int k = 0; k < K; ++k) {
    if (rep.per_class_count[k] == 0) continue;
    rep.per_class_error[k] = static_cast<double>(wrong[k]) / rep.per_class_count[k];
    macro += rep.per_class_error[k];
    ++present;
  }
  rep.overall_error = present > 0 ? macro / present : kNaN;
  return rep;
}

std::vector<long> longtail_partition(const Model& clean, const Dataset& testset,
                                     const NoiseModel& noise, double L) {
  if (L < 0.0) throw std::invalid_argument("longtail_partition: negative threshold");
  const int m = clean.m, d = clean.d;
  std::vector<long> selected;
  std::vector<double> xi, agg;
  for (long i = 0; i < testset.n(); ++i) {
    const auto& s = testset.samples[i];
    noise_content(s, testset.P, d, xi);
    agg.assign(d, 0.0);
    double lhs = 0.0;
    bool any = false;
    for (int r = 0; r < m; ++r) {
      const double* w = clean.filter(s.label, r);
      const double act = dot(w, xi.data(), d);
      if (act > 0.0) {
        any = true;
        lhs += act;
        axpy(1.0, w, agg.data(), d);
      }
    }
    if (!any) continue;
    const std::vector<double> Aw = noise.apply(s.label, agg);  // A_y is symmetric
    if (lhs >= L * nrm2(Aw.data(), d)) selected.push_back(i);
  }
  return selected;
}

double longtail_error(const Model& mdl, const Dataset& testset, const std::vector<long>& subset) {
  if (subset.empty()) throw std::invalid_argument("longtail_error: empty subset");
  long wrong = 0;
  Forward f;
  for (long id : subset) {
    const auto& s = testset.samples.at(static_cast<std::size_t>(id));
    if (predict(mdl, s, testset.P, f) != static_cast<int>(s.label)) ++wrong;
  }
  return static_cast<double>(wrong) / subset.size();
}

DiagnosticBounds diagnostics(const SignalSet& sig, const NoiseModel& nm,
                             const std::vector<long>& class_counts, double clip_c,
                             double sigma_n, long n, int m, double L, double delta) {
  const int K = nm.K;
  DiagnosticBounds db;
  db.clipping_factor.resize(K);
  db.thm_signal_fraction.resize(K);
  db.thm_longtail_fraction.resize(K);
  db.privacy_floor.resize(K);
  db.snr = snr_matrix(sig, nm, class_counts);
  db.ncr = ncr_matrix(nm, class_counts);

  for (int k = 0; k < K; ++k) {
    const double u = sig.norms[k];
    const double fro = transform_fro(nm, k);
    const double lam = clip_c / (u + fro);
    db.clipping_factor[k] = lam;

    // Worst competing class maximizes the shared denominator.
    double den = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < K; ++j) {
      if (j == k) continue;
      den = std::max(den, std::sqrt(static_cast<double>(class_counts[j])) *
                              cross_gram_fro(nm, k, j) +
                              n * sigma_n * fro);
    }
    const double sk = static_cast<double>(class_counts[k]);
    db.thm_signal_fraction[k] =
        (sk * lam * u * u - n * sigma_n * u * std::sqrt(2.0 * std::log(2.0 / delta))) / den;
    db.thm_longtail_fraction[k] =
        (L * std::sqrt(sk) * lam * cross_gram_fro(nm, k, k) -
         n * sigma_n * std::sqrt(nm.d + L * L) * transform_op(nm, k)) /
        den;
    db.privacy_floor[k] =
        u > 0.0 ? n * std::sqrt(static_cast<double>(m)) * sigma_n * std::sqrt(nm.d) *
                      (u + fro) / (lam * sk * u * u)
                : std::numeric_limits<double>::infinity();
  }
  return db;
}

}  // namespace dptail
