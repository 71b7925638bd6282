#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "dptail/evaluation.hpp"
#include "dptail/rng.hpp"
#include "helpers.hpp"

using namespace dptail;

namespace {

Model make_model(int K, int m, int d) {
  Model mdl;
  mdl.K = K;
  mdl.m = m;
  mdl.d = d;
  mdl.w.assign(static_cast<std::size_t>(K) * m * d, 0.0);
  return mdl;
}

Model random_model(int K, int m, int d, std::uint64_t seed, double scale) {
  Model mdl = make_model(K, m, d);
  Rng r(seed);
  for (double& v : mdl.w) v = scale * r.normal();
  return mdl;
}

// Sum of the sample's non-signal patches.
std::vector<double> noise_content(const Sample& s, int P, int d) {
  std::vector<double> xi(d, 0.0);
  for (int j = 0; j < P; ++j) {
    if (j == s.signal_pos) continue;
    const double* p = s.patch(j, d);
    for (int t = 0; t < d; ++t) xi[t] += p[t];
  }
  return xi;
}

}  // namespace

TEST_CASE("alignment metrics: zero, constructed, and double-loop oracle") {
  SignalSet sig = build_signals(3, 20, {0.5, 0.5, 0.5}, 5);
  NoiseModel nm = build_noise_model(sig, 4.0, BaseDist::Gaussian);
  Dataset ds = sample_dataset(sig, nm, {9, 9, 9}, 2, 6);

  Model zero = make_model(3, 4, 20);
  AlignmentRecord rec = alignment_metrics(zero, ds, sig);
  CHECK(rec.signal_align == 0.0);
  CHECK(rec.noise_align == 0.0);

  // Filter 1 of every class set to the unit signal direction: the class sums
  // collapse to ||u|| for every sample, so the metric equals 0.5 exactly.
  Model unit = make_model(3, 4, 20);
  for (int k = 0; k < 3; ++k)
    for (int t = 0; t < 20; ++t) unit.filter(k, 1)[t] = sig.signals[k][t] / 0.5;
  rec = alignment_metrics(unit, ds, sig);
  CHECK(oracle::rel_err(rec.signal_align, 0.5) < 1e-12);

  // Random weights against an explicit double loop.
  Model rnd = random_model(3, 4, 20, 7, 0.8);
  rec = alignment_metrics(rnd, ds, sig);
  double best_sig = -1e300, best_noise = -1e300;
  for (int r = 0; r < 4; ++r) {
    double ssum = 0.0, nsum = 0.0;
    for (const auto& s : ds.samples) {
      std::vector<double> w(rnd.filter(s.label, r), rnd.filter(s.label, r) + 20);
      ssum += oracle::vec_dot(w, sig.signals[s.label]);
      nsum += oracle::vec_dot(w, noise_content(s, 2, 20));
    }
    best_sig = std::max(best_sig, ssum / ds.n());
    best_noise = std::max(best_noise, nsum / ds.n());
  }
  CHECK(oracle::rel_err(rec.signal_align, best_sig) < 1e-10);
  CHECK(oracle::rel_err(rec.noise_align, best_noise) < 1e-10);

  // The filter index attaining the max may differ between the two metrics.
  ds.samples[0].signal_pos = -1;
  CHECK_THROWS(alignment_metrics(rnd, ds, sig));
}

TEST_CASE("test error: exact predictor, tie-break chance level, confusion oracle") {
  const int K = 5, d = 24;
  SignalSet sig = build_signals(K, d, std::vector<double>(K, 1.0), 31);
  // Nearly noiseless: signals dominate every logit.
  NoiseModel nm = build_noise_model(sig, 1.0, BaseDist::Gaussian, 1e-8);
  Dataset ds = sample_dataset(sig, nm, std::vector<long>(K, 20), 2, 32);

  Model truth = make_model(K, 1, d);
  for (int k = 0; k < K; ++k)
    std::copy(sig.signals[k].begin(), sig.signals[k].end(), truth.filter(k, 0));
  EvalReport rep = test_error(truth, ds);
  CHECK(rep.overall_error == 0.0);
  for (int k = 0; k < K; ++k) CHECK(rep.per_class_error[k] == 0.0);

  // Zero weights tie at logit 0 everywhere; argmax resolves to class 0, so
  // class 0 is always right and the other four classes are always wrong.
  Model zero = make_model(K, 3, d);
  rep = test_error(zero, ds);
  CHECK(rep.per_class_error[0] == 0.0);
  for (int k = 1; k < K; ++k) CHECK(rep.per_class_error[k] == 1.0);
  CHECK(oracle::rel_err(rep.overall_error, 0.8) < 1e-15);

  // Noisy regime against a brute-force confusion count.
  NoiseModel loud = build_noise_model(sig, 6.0, BaseDist::UniformSqrt3);
  Dataset hard = sample_dataset(sig, loud, std::vector<long>(K, 17), 2, 33);
  Model rnd = random_model(K, 3, d, 34, 0.5);
  rep = test_error(rnd, hard);
  std::vector<long> wrong(K, 0), count(K, 0);
  Forward f;
  for (const auto& s : hard.samples) {
    forward(rnd, s.patches.data(), hard.P, f);
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (f.logits[k] > f.logits[best]) best = k;
    ++count[s.label];
    if (best != static_cast<int>(s.label)) ++wrong[s.label];
  }
  double macro = 0.0;
  for (int k = 0; k < K; ++k) {
    const double e = static_cast<double>(wrong[k]) / count[k];
    CHECK(rep.per_class_error[k] == doctest::Approx(e).epsilon(1e-15));
    macro += e / K;
  }
  CHECK(oracle::rel_err(rep.overall_error + 1e-300, macro + 1e-300) < 1e-12);

  // A class missing from the test set is reported absent, not zero.
  Dataset skew = sample_dataset(sig, loud, {11, 0, 11, 11, 11}, 2, 35);
  rep = test_error(rnd, skew);
  CHECK(std::isnan(rep.per_class_error[1]));
  CHECK(rep.per_class_count[1] == 0);
  CHECK(std::isfinite(rep.overall_error));
}

TEST_CASE("long-tail partition: edge thresholds, nesting, dense oracle") {
  const int K = 3, d = 30;
  SignalSet sig = build_signals(K, d, std::vector<double>(K, 0.6), 41);
  NoiseModel nm = build_noise_model(sig, 5.0, BaseDist::Gaussian);
  Dataset ds = sample_dataset(sig, nm, {70, 70, 60}, 2, 42);
  Model mdl = random_model(K, 6, d, 43, 0.4);

  CHECK_THROWS(longtail_partition(mdl, ds, nm, -0.5));

  // L = 0 keeps exactly the samples with a non-empty activated set, because
  // the activated sum is positive by construction.
  std::vector<long> at0 = longtail_partition(mdl, ds, nm, 0.0);
  std::vector<long> expect;
  for (long i = 0; i < ds.n(); ++i) {
    const auto& s = ds.samples[i];
    std::vector<double> xi = noise_content(s, ds.P, d);
    int active = 0;
    for (int r = 0; r < 6; ++r) {
      std::vector<double> w(mdl.filter(s.label, r), mdl.filter(s.label, r) + d);
      if (oracle::vec_dot(w, xi) > 0.0) ++active;
    }
    if (active > 0) expect.push_back(i);
  }
  CHECK(at0 == expect);
  CHECK(longtail_partition(mdl, ds, nm, 1e12).empty());

  // Antitone nesting in L, and agreement with a dense-materialization oracle.
  std::vector<std::vector<long>> sels;
  for (double L : {0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6}) {
    std::vector<long> sel = longtail_partition(mdl, ds, nm, L);
    for (std::size_t q = 0; q + 1 < sel.size(); ++q) CHECK(sel[q] < sel[q + 1]);
    sels.push_back(sel);

    std::vector<long> naive;
    for (long i = 0; i < ds.n(); ++i) {
      const auto& s = ds.samples[i];
      std::vector<double> xi = noise_content(s, ds.P, d);
      std::vector<double> agg(d, 0.0);
      int active = 0;
      for (int r = 0; r < 6; ++r) {
        std::vector<double> w(mdl.filter(s.label, r), mdl.filter(s.label, r) + d);
        if (oracle::vec_dot(w, xi) > 0.0) {
          ++active;
          for (int t = 0; t < d; ++t) agg[t] += w[t];
        }
      }
      if (active == 0) continue;
      Matrix A = oracle::materialize_transform(nm, s.label);
      std::vector<double> Aw = oracle::matvec_t(A, agg);  // A^T w_agg
      if (oracle::vec_dot(agg, xi) >= L * oracle::vec_norm(Aw)) naive.push_back(i);
    }
    CHECK(sel == naive);
  }
  for (std::size_t q = 0; q + 1 < sels.size(); ++q) {
    std::set<long> big(sels[q].begin(), sels[q].end());
    for (long id : sels[q + 1]) CHECK(big.count(id) == 1);
  }

  // Activation is strict: an exactly-zero inner product activates nothing,
  // so the zero model selects no sample even at L = 0.
  Model inert = make_model(K, 2, d);
  CHECK(longtail_partition(inert, ds, nm, 0.0).empty());

  // longtail_error mirrors test_error on the subset.
  std::vector<long> sel = sels[2];
  REQUIRE(!sel.empty());
  long wrong = 0;
  Forward f;
  for (long id : sel) {
    const auto& s = ds.samples[id];
    if (predict(mdl, s, ds.P, f) != static_cast<int>(s.label)) ++wrong;
  }
  CHECK(longtail_error(mdl, ds, sel) ==
        doctest::Approx(static_cast<double>(wrong) / sel.size()).epsilon(1e-15));
  CHECK_THROWS(longtail_error(mdl, ds, {}));
}

TEST_CASE("diagnostics: closed forms, zero-noise reduction, monotone grids") {
  const int K = 5, d = 1000, m = 100;
  const long n = 500;
  SignalSet sig = build_signals(K, d, std::vector<double>(K, 0.5), 51);
  NoiseModel nm = build_noise_model(sig, 1400.0, BaseDist::Gaussian);
  std::vector<long> counts(K, 100);

  DiagnosticBounds db = diagnostics(sig, nm, counts, 1.0, 0.0053649, n, m, 1.0, 0.01);
  for (int k = 0; k < K; ++k) {
    // Lambda_k = C/(||u|| + ||A||_F) with ||A||_F = sqrt(lambda^2 + c^2 rs).
    CHECK(oracle::rel_err(db.clipping_factor[k], 0.00937971033) < 1e-8);
    CHECK(std::isfinite(db.thm_signal_fraction[k]));
    CHECK(std::isfinite(db.thm_longtail_fraction[k]));
    CHECK(std::isfinite(db.privacy_floor[k]));
    CHECK(db.privacy_floor[k] > 0.0);
    for (int j = 0; j < K; ++j) {
      if (j == k) {
        CHECK(std::isnan(db.snr[k][j]));
        continue;
      }
      CHECK(oracle::rel_err(db.snr[k][j], compute_snr(sig, nm, counts, k, j)) < 1e-12);
      CHECK(oracle::rel_err(db.ncr[k][j], compute_ncr(nm, counts, k, j)) < 1e-12);
    }
  }

  // Small-d check of the same closed form against dense materialization.
  SignalSet lil = build_signals(2, 12, {0.3, 0.7}, 52);
  NoiseModel lnm = build_noise_model(lil, 2.0, BaseDist::Gaussian);
  DiagnosticBounds ldb = diagnostics(lil, lnm, {10, 10}, 1.3, 0.01, 20, 8, 1.0, 0.01);
  for (int k = 0; k < 2; ++k) {
    Matrix A = oracle::materialize_transform(lnm, k);
    const double fro = oracle::fro_norm(A);
    CHECK(oracle::rel_err(ldb.clipping_factor[k], 1.3 / (lil.norms[k] + fro)) < 1e-10);
  }

  // sigma_n = 0 wipes the noise terms from both fractions.
  DiagnosticBounds clean = diagnostics(sig, nm, counts, 1.0, 0.0, n, m, 1.0, 0.01);
  for (int k = 0; k < K; ++k) {
    const double lam = clean.clipping_factor[k];
    const double den = std::sqrt(100.0) * cross_gram_fro(nm, k, (k + 1) % K);
    CHECK(oracle::rel_err(clean.thm_signal_fraction[k], 100.0 * lam * 0.25 / den) < 1e-10);
    CHECK(oracle::rel_err(clean.thm_longtail_fraction[k],
                          std::sqrt(100.0) * lam * cross_gram_fro(nm, k, k) / den) < 1e-10);
  }

  // Monotone in sigma_n (non-increasing) and in C (non-decreasing).
  double prev_s1 = 1e300, prev_s2 = 1e300;
  for (int g = 0; g < 10; ++g) {
    DiagnosticBounds x = diagnostics(sig, nm, counts, 1.0, 0.002 * g, n, m, 1.0, 0.01);
    CHECK(x.thm_signal_fraction[0] <= prev_s1 + 1e-12);
    CHECK(x.thm_longtail_fraction[0] <= prev_s2 + 1e-12);
    prev_s1 = x.thm_signal_fraction[0];
    prev_s2 = x.thm_longtail_fraction[0];
  }
  prev_s1 = -1e300;
  prev_s2 = -1e300;
  for (int g = 1; g <= 10; ++g) {
    DiagnosticBounds x = diagnostics(sig, nm, counts, 0.3 * g, 0.005, n, m, 1.0, 0.01);
    CHECK(x.thm_signal_fraction[0] >= prev_s1 - 1e-12);
    CHECK(x.thm_longtail_fraction[0] >= prev_s2 - 1e-12);
    prev_s1 = x.thm_signal_fraction[0];
    prev_s2 = x.thm_longtail_fraction[0];
  }

  // Zero signal norm sends the privacy floor to +inf.
  SignalSet nosig = build_signals(2, 12, {0.0, 0.4}, 53);
  NoiseModel nonm = build_noise_model(nosig, 2.0, BaseDist::Gaussian);
  DiagnosticBounds ndb = diagnostics(nosig, nonm, {10, 10}, 1.0, 0.01, 20, 8, 1.0, 0.01);
  CHECK(std::isinf(ndb.privacy_floor[0]));
  CHECK(std::isfinite(ndb.privacy_floor[1]));
}
