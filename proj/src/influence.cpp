#include "dptail/influence.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dptail {

namespace {

// Squared Frobenius norm of (S - n mu mu^T)/div given the moment scalars
// Q = ||S||_F^2, t = mu^T S mu, u4 = ||mu||^4:
//   ||S/div - (n/div) mu mu^T||^2 = (Q - 2 n t + n^2 u4) / div^2.
double cov_fro_sq(double Q, double t, double u4, double n, double div) {
  return (Q - 2.0 * n * t + n * n * u4) / (div * div);
}

}  // namespace

CovStats class_covariance(const std::vector<std::vector<double>>& vectors,
                          bool sample_convention) {
  const long n = static_cast<long>(vectors.size());
  if (n < 2) throw std::invalid_argument("class_covariance: need at least two vectors");
  const int d = static_cast<int>(vectors[0].size());
  for (const auto& v : vectors)
    if (static_cast<int>(v.size()) != d)
      throw std::invalid_argument("class_covariance: ragged vector lengths");

  CovStats cs;
  cs.mean.assign(d, 0.0);
  cs.second_moment = Matrix(d, d);
  for (const auto& x : vectors) {
    for (int i = 0; i < d; ++i) {
      cs.mean[i] += x[i] / n;
      for (int j = 0; j < d; ++j) cs.second_moment.at(i, j) += x[i] * x[j] / n;
    }
  }
  const double div = sample_convention ? n - 1.0 : static_cast<double>(n);
  cs.cov = Matrix(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      cs.cov.at(i, j) =
          (n * cs.second_moment.at(i, j) - n * cs.mean[i] * cs.mean[j]) / div;
  return cs;
}

std::vector<double> influence_scores(const std::vector<std::vector<double>>& vectors,
                                     bool sample_convention) {
  const long n = static_cast<long>(vectors.size());
  if (n < 3) throw std::invalid_argument("influence_scores: need at least three vectors");
  const int d = static_cast<int>(vectors[0].size());

  // Accumulate S = sum x x^T and s = sum x once.
  Matrix S(d, d);
  std::vector<double> s(d, 0.0);
  for (const auto& x : vectors) {
    if (static_cast<int>(x.size()) != d)
      throw std::invalid_argument("influence_scores: ragged vector lengths");
    for (int i = 0; i < d; ++i) {
      s[i] += x[i];
      double* col = S.col(i);
      const double xi = x[i];
      for (int j = 0; j < d; ++j) col[j] += xi * x[j];
    }
  }
  double Q = 0.0;  // ||S||_F^2
  for (double v : S.a) Q += v * v;
  std::vector<double> Ss(d, 0.0);
  for (int i = 0; i < d; ++i) {
    const double* col = S.col(i);
    for (int j = 0; j < d; ++j) Ss[j] += col[j] * s[i];
  }
  const double sSs = dot(s.data(), Ss.data(), d);
  const double s_sq = dot(s.data(), s.data(), d);

  const double div_full = sample_convention ? n - 1.0 : static_cast<double>(n);
  const double full = cov_fro_sq(Q, sSs / (static_cast<double>(n) * n),
                                 (s_sq / (static_cast<double>(n) * n)) *
                                     (s_sq / (static_cast<double>(n) * n)),
                                 static_cast<double>(n), div_full);

  const double np = n - 1.0;  // leave-one-out count
  const double div_loo = sample_convention ? n - 2.0 : np;
  if (div_loo <= 0.0)
    throw std::invalid_argument("influence_scores: too few vectors for the convention");

  std::vector<double> scores(n);
  std::vector<double> Sx(d);
  for (long i = 0; i < n; ++i) {
    const auto& x = vectors[i];
    std::fill(Sx.begin(), Sx.end(), 0.0);
    for (int c = 0; c < d; ++c) {
      const double* col = S.col(c);
      const double xc = x[c];
      for (int j = 0; j < d; ++j) Sx[j] += col[j] * xc;
    }
    const double xSx = dot(x.data(), Sx.data(), d);
    const double xSs = dot(x.data(), Ss.data(), d);
    const double xs = dot(x.data(), s.data(), d);
    const double x_sq = dot(x.data(), x.data(), d);

    const double Qp = Q - 2.0 * xSx + x_sq * x_sq;        // ||S - x x^T||_F^2
    const double spSsp = sSs - 2.0 * xSs + xSx;           // (s-x)^T S (s-x)
    const double xsp = xs - x_sq;                         // x^T (s-x)
    // mu'^T (S - x x^T) mu' with mu' = (s-x)/(n-1).
    const double t_loo = spSsp / (np * np) - (xsp / np) * (xsp / np);
    const double u_sq = (s_sq - 2.0 * xs + x_sq) / (np * np);  // ||mu'||^2
    scores[i] = full - cov_fro_sq(Qp, t_loo, u_sq * u_sq, np, div_loo);
  }
  return scores;
}

InfluenceTable influence_table(const Dataset& ds, bool sample_convention) {
  InfluenceTable table;
  table.entries.resize(ds.n());
  for (int k = 0; k < ds.K; ++k) {
    std::vector<std::vector<double>> xs;
    std::vector<long> ids;
    for (long i = 0; i < ds.n(); ++i)
      if (ds.samples[i].label == static_cast<std::uint32_t>(k)) {
        xs.push_back(ds.samples[i].patches);
        ids.push_back(i);
      }
    if (ids.empty()) continue;
    std::vector<double> sc = influence_scores(xs, sample_convention);
    for (std::size_t j = 0; j < ids.size(); ++j)
      table.entries[ids[j]] = {ids[j], static_cast<std::uint32_t>(k), sc[j]};
  }
  return table;
}

std::pair<std::vector<long>, std::vector<long>> quantile_partition(const InfluenceTable& table,
                                                                   double x_percent) {
  if (!(x_percent > 0.0 && x_percent <= 50.0))
    throw std::invalid_argument("quantile_partition: need 0 < x <= 50");
  if (table.entries.empty()) throw std::invalid_argument("quantile_partition: empty table");

  std::vector<std::uint32_t> labels;
  for (const auto& e : table.entries)
    if (std::find(labels.begin(), labels.end(), e.label) == labels.end())
      labels.push_back(e.label);

  std::vector<long> top, bottom;
  for (std::uint32_t lab : labels) {
    std::vector<const InfluenceEntry*> cls;
    for (const auto& e : table.entries)
      if (e.label == lab) cls.push_back(&e);
    const long take = static_cast<long>(
        std::ceil(x_percent * static_cast<double>(cls.size()) / 100.0 - 1e-9));
    std::sort(cls.begin(), cls.end(), [](const InfluenceEntry* a, const InfluenceEntry* b) {
      return a->score != b->score ? a->score > b->score : a->id < b->id;
    });
    for (long i = 0; i < take; ++i) top.push_back(cls[i]->id);
    std::sort(cls.begin(), cls.end(), [](const InfluenceEntry* a, const InfluenceEntry* b) {
      return a->score != b->score ? a->score < b->score : a->id < b->id;
    });
    for (long i = 0; i < take; ++i) bottom.push_back(cls[i]->id);
  }
  std::sort(top.begin(), top.end());
  std::sort(bottom.begin(), bottom.end());
  return {top, bottom};
}

}  // namespace dptail
