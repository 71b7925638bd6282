#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dptail/datagen.hpp"

namespace dptail {

// Two-layer CNN with m ReLU filters per class, second layer frozen at 1/m:
//   F_k(W; x) = (1/m) sum_r sum_j relu(<w_{k,r}, x^(j)>).
// ReLU uses the strict derivative convention: a zero pre-activation
// contributes nothing to the gradient.
struct Model {
  int K = 0, m = 0, d = 0;
  std::vector<double> w;  // K*m*d, filter (k,r) at [(k*m+r)*d, +d)

  std::size_t size() const { return w.size(); }
  double* filter(int k, int r) {
    return w.data() + (static_cast<std::size_t>(k) * m + r) * d;
  }
  const double* filter(int k, int r) const {
    return w.data() + (static_cast<std::size_t>(k) * m + r) * d;
  }
};

Model init_model(int K, int m, int d, double sigma0, std::uint64_t seed);

// Reusable per-sample scratch: pre-activations, logits, softmax, CE loss.
struct Forward {
  std::vector<double> preact;  // K*m*P, entry ((k*m+r)*P + j)
  std::vector<double> logits;  // K
  std::vector<double> probs;   // K
  std::uint32_t label = 0;     // label the loss/probs were computed against
  double loss = 0.0;
};

// Fills f.preact and f.logits for one sample (patches = P contiguous blocks of d).
void forward(const Model& mdl, const double* patches, int P, Forward& f);

// Max-subtracted softmax cross-entropy; fills probs and loss.
void softmax_ce(const std::vector<double>& logits, std::uint32_t label,
                std::vector<double>& probs, double& loss);

// Convenience: forward + softmax_ce for a sample.
void evaluate_sample(const Model& mdl, const Sample& s, int P, Forward& f);

// Dense per-sample CE gradient (runs its own forward); grad has weight layout.
void per_sample_grad(const Model& mdl, const Sample& s, int P, Forward& f,
                     std::vector<double>& grad);

// Squared flat norm of the per-sample gradient, computed from the recorded
// pre-activations and the P x P patch Gram matrix, without materializing it.
double per_sample_grad_sq(const Model& mdl, const Forward& f, const double* gram, int P);

// acc += scale * per-sample gradient, reusing the recorded pre-activations.
void accumulate_grad(const Model& mdl, const Sample& s, int P, const Forward& f,
                     double scale, std::vector<double>& acc);

// Row-major P x P Gram matrix of the sample's patches.
void patch_gram(const Sample& s, int P, int d, double* gram);

double mean_loss(const Model& mdl, const Dataset& ds);

// Argmax over logits; ties resolve to the lowest class index.
int predict(const Model& mdl, const Sample& s, int P, Forward& f);

// Binary weight container (magic "DPTW").
void save_weights(const std::string& path, const Model& mdl);
Model load_weights(const std::string& path);

}  // namespace dptail
