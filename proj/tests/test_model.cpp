#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "dptail/model.hpp"
#include "dptail/rng.hpp"
#include "helpers.hpp"

using namespace dptail;

namespace {

// Independent forward pass by direct summation over filters and patches.
double oracle_logit(const Model& mdl, const Sample& s, int k) {
  double acc = 0.0;
  const int P = static_cast<int>(s.patches.size()) / mdl.d;
  for (int r = 0; r < mdl.m; ++r)
    for (int j = 0; j < P; ++j) {
      double z = 0.0;
      for (int t = 0; t < mdl.d; ++t) z += mdl.filter(k, r)[t] * s.patch(j, mdl.d)[t];
      if (z > 0.0) acc += z;
    }
  return acc / mdl.m;
}

double oracle_loss(const Model& mdl, const Sample& s) {
  std::vector<double> lg(mdl.K);
  for (int k = 0; k < mdl.K; ++k) lg[k] = oracle_logit(mdl, s, k);
  const double mx = *std::max_element(lg.begin(), lg.end());
  double z = 0.0;
  for (double v : lg) z += std::exp(v - mx);
  return std::log(z) - (lg[s.label] - mx);
}

Sample random_sample(int d, int P, std::uint32_t label, std::uint64_t seed) {
  Sample s;
  s.label = label;
  s.signal_pos = 0;
  s.patches.resize(static_cast<std::size_t>(P) * d);
  Rng r(seed);
  for (double& v : s.patches) v = r.normal();
  return s;
}

Model random_model(int K, int m, int d, std::uint64_t seed, double scale = 0.7) {
  Model mdl;
  mdl.K = K;
  mdl.m = m;
  mdl.d = d;
  mdl.w.resize(static_cast<std::size_t>(K) * m * d);
  Rng r(seed);
  for (double& v : mdl.w) v = scale * r.normal();
  return mdl;
}

}  // namespace

TEST_CASE("forward matches direct summation and hand-computed cases") {
  // Hand case: one filter per class picks out one coordinate.
  Model mdl;
  mdl.K = 2;
  mdl.m = 1;
  mdl.d = 2;
  mdl.w = {1.0, 0.0, 0.0, -1.0};  // w_{0,0}=(1,0), w_{1,0}=(0,-1)
  Sample s;
  s.label = 0;
  s.patches = {3.0, 4.0};  // single patch
  Forward f;
  forward(mdl, s.patches.data(), 1, f);
  CHECK(f.logits[0] == 3.0);   // relu(3)
  CHECK(f.logits[1] == 0.0);   // relu(-4)

  // Duplicating a filter leaves the logit unchanged through the 1/m scaling.
  Model dup;
  dup.K = 2;
  dup.m = 2;
  dup.d = 2;
  dup.w = {1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, -1.0};
  forward(dup, s.patches.data(), 1, f);
  CHECK(f.logits[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(f.logits[1] == 0.0);

  // Random shapes against the independent oracle.
  for (int t = 0; t < 20; ++t) {
    const int K = 2 + t % 3, m = 1 + t % 5, d = 3 + t % 7, P = 1 + t % 4;
    Model rm = random_model(K, m, d, 4000 + t);
    Sample rs = random_sample(d, P, 0, 5000 + t);
    forward(rm, rs.patches.data(), P, f);
    for (int k = 0; k < K; ++k)
      CHECK(oracle::rel_err(f.logits[k], oracle_logit(rm, rs, k)) < 1e-12);
  }
}

TEST_CASE("softmax is shift-invariant, normalized, and stable at extreme logits") {
  std::vector<double> probs;
  double loss = 0.0;
  softmax_ce({2.0, 5.0}, 0, probs, loss);
  const double p1 = std::exp(3.0) / (1.0 + std::exp(3.0));
  CHECK(oracle::rel_err(probs[0], 1.0 - p1) < 1e-12);
  CHECK(oracle::rel_err(probs[1], p1) < 1e-12);
  CHECK(oracle::rel_err(loss, -std::log(1.0 - p1)) < 1e-12);

  std::vector<double> shifted;
  double loss2 = 0.0;
  softmax_ce({2.0 + 123.5, 5.0 + 123.5}, 0, shifted, loss2);
  CHECK(oracle::rel_err(shifted[1], p1) < 1e-12);
  CHECK(oracle::rel_err(loss2, loss) < 1e-12);

  // Without max subtraction these logits would overflow exp().
  softmax_ce({1e4, 1e4 - 3.0, 0.0}, 1, probs, loss);
  CHECK(std::isfinite(loss));
  CHECK(std::isfinite(probs[0]));
  CHECK(oracle::rel_err(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0) < 1e-12);
  CHECK(oracle::rel_err(probs[1] / probs[0], std::exp(-3.0)) < 1e-9);
  CHECK(probs[2] < 1e-300);  // underflow to ~0 rather than NaN
}

TEST_CASE("zero weights give uniform softmax, log K loss, and an exactly zero gradient") {
  const int K = 5, m = 7, d = 11, P = 2;
  Model mdl;
  mdl.K = K;
  mdl.m = m;
  mdl.d = d;
  mdl.w.assign(static_cast<std::size_t>(K) * m * d, 0.0);
  Sample s = random_sample(d, P, 3, 71);
  Forward f;
  evaluate_sample(mdl, s, P, f);
  for (int k = 0; k < K; ++k) CHECK(f.probs[k] == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(oracle::rel_err(f.loss, std::log(5.0)) < 1e-14);

  // Strict ReLU derivative: zero pre-activations contribute nothing, so the
  // gradient at the origin is identically zero, not merely small.
  std::vector<double> grad;
  per_sample_grad(mdl, s, P, f, grad);
  for (double g : grad) CHECK(g == 0.0);
}

TEST_CASE("per-sample gradient matches central finite differences") {
  const int K = 3, m = 4, d = 10, P = 2;
  Model mdl = random_model(K, m, d, 901);
  Sample s = random_sample(d, P, 1, 902);
  Forward f;
  evaluate_sample(mdl, s, P, f);

  // Keep every pre-activation clear of the ReLU kink so the finite-difference
  // stencil stays on one side; the fixed seeds above satisfy this margin.
  const double h = 1e-5;
  double min_abs = 1e300, max_x = 0.0;
  for (double z : f.preact) min_abs = std::min(min_abs, std::fabs(z));
  for (double x : s.patches) max_x = std::max(max_x, std::fabs(x));
  REQUIRE(min_abs > 50.0 * h * max_x);

  std::vector<double> grad;
  per_sample_grad(mdl, s, P, f, grad);
  REQUIRE(grad.size() == mdl.size());
  for (std::size_t i = 0; i < mdl.size(); ++i) {
    Model up = mdl, dn = mdl;
    up.w[i] += h;
    dn.w[i] -= h;
    const double fd = (oracle_loss(up, s) - oracle_loss(dn, s)) / (2.0 * h);
    CHECK(std::fabs(fd - grad[i]) <= 1e-7 + 1e-5 * std::fabs(grad[i]));
  }

  // Structure: each row is the class softmax residual times its active-patch sum.
  for (int k = 0; k < K; ++k) {
    const double coef = (f.probs[k] - (k == 1 ? 1.0 : 0.0)) / m;
    for (int r = 0; r < m; ++r) {
      std::vector<double> v(d, 0.0);
      for (int j = 0; j < P; ++j)
        if (f.preact[(static_cast<std::size_t>(k) * m + r) * P + j] > 0.0)
          for (int t = 0; t < d; ++t) v[t] += s.patch(j, d)[t];
      for (int t = 0; t < d; ++t)
        CHECK(std::fabs(grad[(static_cast<std::size_t>(k) * m + r) * d + t] - coef * v[t]) <
              1e-12);
    }
  }
}

TEST_CASE("gradient respects the strict ReLU convention at exact zeros") {
  // w_{0,0}=(1,0) is orthogonal to patch 0 and active on patch 1;
  // w_{1,0}=(0,1) is active on patch 0 and orthogonal to patch 1.
  Model mdl;
  mdl.K = 2;
  mdl.m = 1;
  mdl.d = 2;
  mdl.w = {1.0, 0.0, 0.0, 1.0};
  Sample s;
  s.label = 0;
  s.patches = {0.0, 5.0, 2.0, 0.0};
  Forward f;
  std::vector<double> grad;
  per_sample_grad(mdl, s, 2, f, grad);

  const double p1 = std::exp(3.0) / (1.0 + std::exp(3.0));  // logits (2, 5)
  CHECK(oracle::rel_err(f.logits[0], 2.0) < 1e-15);
  CHECK(oracle::rel_err(f.logits[1], 5.0) < 1e-15);
  // Row (0,0): only patch 1 = (2,0) is active; coefficient p_0 - 1.
  CHECK(oracle::rel_err(grad[0], ((1.0 - p1) - 1.0) * 2.0) < 1e-12);
  CHECK(grad[1] == 0.0);
  // Row (1,0): only patch 0 = (0,5) is active; coefficient p_1.
  CHECK(grad[2] == 0.0);
  CHECK(oracle::rel_err(grad[3], p1 * 5.0) < 1e-12);
}

TEST_CASE("fused gradient norm and accumulation agree with the dense gradient") {
  Forward f;
  for (int t = 0; t < 25; ++t) {
    const int K = 2 + t % 3, m = 1 + t % 6, d = 4 + t % 9, P = 1 + t % 4;
    // Larger weight scale drives a mix of active and inactive patches.
    Model mdl = random_model(K, m, d, 7100 + t, 0.3 + 0.2 * (t % 4));
    Sample s = random_sample(d, P, static_cast<std::uint32_t>(t % K), 7200 + t);
    evaluate_sample(mdl, s, P, f);

    std::vector<double> gram(static_cast<std::size_t>(P) * P);
    patch_gram(s, P, d, gram.data());
    for (int a = 0; a < P; ++a)
      for (int b = 0; b < P; ++b) {
        std::vector<double> pa(s.patch(a, d), s.patch(a, d) + d);
        std::vector<double> pb(s.patch(b, d), s.patch(b, d) + d);
        CHECK(oracle::rel_err(gram[a * P + b], oracle::vec_dot(pa, pb)) < 1e-12);
      }

    std::vector<double> dense;
    per_sample_grad(mdl, s, P, f, dense);
    double dense_sq = 0.0;
    for (double g : dense) dense_sq += g * g;
    const double fused = per_sample_grad_sq(mdl, f, gram.data(), P);
    CHECK(std::fabs(fused - dense_sq) <= 1e-12 * std::max(1.0, dense_sq));

    std::vector<double> acc(mdl.size(), 0.25);
    accumulate_grad(mdl, s, P, f, -1.75, acc);
    for (std::size_t i = 0; i < mdl.size(); ++i)
      CHECK(std::fabs(acc[i] - (0.25 - 1.75 * dense[i])) < 1e-12);
  }
}

TEST_CASE("initialization is seeded, scaled, and exactly zero at sigma0 = 0") {
  Model a = init_model(2, 50, 100, 0.05, 42);
  Model b = init_model(2, 50, 100, 0.05, 42);
  Model c = init_model(2, 50, 100, 0.05, 43);
  CHECK(a.w == b.w);
  CHECK(a.w != c.w);

  double mean = 0.0, sq = 0.0;
  for (double v : a.w) mean += v;
  mean /= static_cast<double>(a.size());
  for (double v : a.w) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(a.size()));
  CHECK(std::fabs(mean) < 0.05 * 0.05);  // ~3 sigma of the mean estimate
  CHECK(std::fabs(sd - 0.05) < 0.002);

  Model z = init_model(3, 4, 5, 0.0, 42);
  for (double v : z.w) CHECK(v == 0.0);
}

TEST_CASE("mean loss and prediction match per-sample evaluation") {
  SignalSet sig = build_signals(3, 16, {0.8, 0.8, 0.8}, 11);
  NoiseModel nm = build_noise_model(sig, 3.0, BaseDist::Gaussian);
  Dataset ds = sample_dataset(sig, nm, {7, 7, 7}, 2, 12);
  Model mdl = random_model(3, 5, 16, 13, 0.2);

  Forward f;
  double acc = 0.0;
  for (const auto& s : ds.samples) {
    evaluate_sample(mdl, s, ds.P, f);
    acc += f.loss;
  }
  CHECK(oracle::rel_err(mean_loss(mdl, ds), acc / ds.n()) < 1e-12);

  // Zero weights: all logits tie at zero and argmax resolves to class 0.
  Model zero;
  zero.K = 3;
  zero.m = 5;
  zero.d = 16;
  zero.w.assign(static_cast<std::size_t>(3) * 5 * 16, 0.0);
  for (const auto& s : ds.samples) CHECK(predict(zero, s, ds.P, f) == 0);

  for (const auto& s : ds.samples) {
    evaluate_sample(mdl, s, ds.P, f);
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (f.logits[k] > f.logits[best]) best = k;
    CHECK(predict(mdl, s, ds.P, f) == best);
  }
}

TEST_CASE("weight container round trip is bitwise") {
  namespace fs = std::filesystem;
  Model mdl = random_model(3, 4, 6, 2024);
  const std::string path = (fs::temp_directory_path() / "dptail_w.bin").string();
  save_weights(path, mdl);
  Model back = load_weights(path);
  CHECK(back.K == mdl.K);
  CHECK(back.m == mdl.m);
  CHECK(back.d == mdl.d);
  CHECK(back.w == mdl.w);
  fs::remove(path);

  CHECK_THROWS(load_weights("/nonexistent/weights.bin"));
}
