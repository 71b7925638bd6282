#include "dptail/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dptail/rng.hpp"

namespace dptail {

namespace {

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::ifstream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error(std::string("weights read failed at ") + what);
  return v;
}

}  // namespace

Model init_model(int K, int m, int d, double sigma0, std::uint64_t seed) {
  if (K < 1 || m < 1 || d < 1) throw std::invalid_argument("init_model: bad dimensions");
  if (sigma0 < 0.0) throw std::invalid_argument("init_model: negative sigma0");
  Model mdl;
  mdl.K = K;
  mdl.m = m;
  mdl.d = d;
  mdl.w.resize(static_cast<std::size_t>(K) * m * d);
  Rng rng(seed_chain(seed, 0x1417u));
  for (double& v : mdl.w) v = sigma0 * rng.normal();
  return mdl;
}

void forward(const Model& mdl, const double* patches, int P, Forward& f) {
  const int K = mdl.K, m = mdl.m, d = mdl.d;
  f.preact.resize(static_cast<std::size_t>(K) * m * P);
  f.logits.assign(K, 0.0);
  for (int k = 0; k < K; ++k) {
    double acc = 0.0;
    for (int r = 0; r < m; ++r) {
      const double* w = mdl.filter(k, r);
      double* pre = f.preact.data() + (static_cast<std::size_t>(k) * m + r) * P;
      for (int j = 0; j < P; ++j) {
        const double z = dot(w, patches + static_cast<std::size_t>(j) * d, d);
        pre[j] = z;
        if (z > 0.0) acc += z;
      }
    }
    f.logits[k] = acc / m;
  }
}

void softmax_ce(const std::vector<double>& logits, std::uint32_t label,
                std::vector<double>& probs, double& loss) {
  const int K = static_cast<int>(logits.size());
  probs.resize(K);
  if (label >= static_cast<std::uint32_t>(K))
    throw std::invalid_argument("softmax_ce: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (int k = 0; k < K; ++k) {
    probs[k] = std::exp(logits[k] - mx);
    z += probs[k];
  }
  for (double& p : probs) p /= z;
  loss = std::log(z) - (logits[label] - mx);
}

void evaluate_sample(const Model& mdl, const Sample& s, int P, Forward& f) {
  forward(mdl, s.patches.data(), P, f);
  f.label = s.label;
  softmax_ce(f.logits, s.label, f.probs, f.loss);
}

void per_sample_grad(const Model& mdl, const Sample& s, int P, Forward& f,
                     std::vector<double>& grad) {
  evaluate_sample(mdl, s, P, f);
  grad.assign(mdl.size(), 0.0);
  accumulate_grad(mdl, s, P, f, 1.0, grad);
}

double per_sample_grad_sq(const Model& mdl, const Forward& f, const double* gram, int P) {
  const int K = mdl.K, m = mdl.m;
  double total = 0.0;
  for (int k = 0; k < K; ++k) {
    const double resid = f.probs[k] - (f.label == static_cast<std::uint32_t>(k) ? 1.0 : 0.0);
    const double coef = resid / m;
    if (coef == 0.0) continue;
    double rows = 0.0;
    for (int r = 0; r < m; ++r) {
      const double* pre = f.preact.data() + (static_cast<std::size_t>(k) * m + r) * P;
      for (int i = 0; i < P; ++i) {
        if (pre[i] <= 0.0) continue;
        for (int j = 0; j < P; ++j)
          if (pre[j] > 0.0) rows += gram[i * P + j];
      }
    }
    total += coef * coef * rows;
  }
  return total;
}

void accumulate_grad(const Model& mdl, const Sample& s, int P, const Forward& f,
                     double scale, std::vector<double>& acc) {
  const int K = mdl.K, m = mdl.m, d = mdl.d;
  for (int k = 0; k < K; ++k) {
    const double resid = f.probs[k] - (s.label == static_cast<std::uint32_t>(k) ? 1.0 : 0.0);
    const double coef = scale * resid / m;
    if (coef == 0.0) continue;
    for (int r = 0; r < m; ++r) {
      const double* pre = f.preact.data() + (static_cast<std::size_t>(k) * m + r) * P;
      double* out = acc.data() + (static_cast<std::size_t>(k) * m + r) * d;
      for (int j = 0; j < P; ++j)
        if (pre[j] > 0.0) axpy(coef, s.patch(j, d), out, d);
    }
  }
}

void patch_gram(const Sample& s, int P, int d, double* gram) {
  for (int i = 0; i < P; ++i)
    for (int j = 0; j <= i; ++j) {
      const double g = dot(s.patch(i, d), s.patch(j, d), d);
      gram[i * P + j] = g;
      gram[j * P + i] = g;
    }
}

double mean_loss(const Model& mdl, const Dataset& ds) {
  Forward f;
  double acc = 0.0;
  for (const auto& s : ds.samples) {
    evaluate_sample(mdl, s, ds.P, f);
    acc += f.loss;
  }
  return ds.n() > 0 ? acc / ds.n() : 0.0;
}

int predict(const Model& mdl, const Sample& s, int P, Forward& f) {
  forward(mdl, s.patches.data(), P, f);
  int best = 0;
  for (int k = 1; k < mdl.K; ++k)
    if (f.logits[k] > f.logits[best]) best = k;
  return best;
}

void save_weights(const std::string& path, const Model& mdl) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write("DPTW", 4);
  put<std::uint32_t>(out, 1);  // version
  put<std::uint32_t>(out, static_cast<std::uint32_t>(mdl.K));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(mdl.m));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(mdl.d));
  out.write(reinterpret_cast<const char*>(mdl.w.data()),
            static_cast<std::streamsize>(mdl.w.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed for " + path);
}

Model load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DPTW", 4) != 0)
    throw std::runtime_error(path + ": bad weights magic");
  if (get<std::uint32_t>(in, "version") != 1)
    throw std::runtime_error(path + ": unsupported weights version");
  Model mdl;
  mdl.K = static_cast<int>(get<std::uint32_t>(in, "K"));
  mdl.m = static_cast<int>(get<std::uint32_t>(in, "m"));
  mdl.d = static_cast<int>(get<std::uint32_t>(in, "d"));
  mdl.w.resize(static_cast<std::size_t>(mdl.K) * mdl.m * mdl.d);
  in.read(reinterpret_cast<char*>(mdl.w.data()),
          static_cast<std::streamsize>(mdl.w.size() * sizeof(double)));
  if (!in) throw std::runtime_error(path + ": truncated weight block");
  return mdl;
}

}  // namespace dptail
