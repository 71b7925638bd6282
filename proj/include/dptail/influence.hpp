#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dptail/datagen.hpp"
#include "dptail/linalg.hpp"

namespace dptail {

struct CovStats {
  std::vector<double> mean;
  Matrix second_moment;  // (1/n) sum x x^T
  Matrix cov;
};

// Population convention (1/n) by default; sample_convention switches the
// divisor to 1/(n-1).
CovStats class_covariance(const std::vector<std::vector<double>>& vectors,
                          bool sample_convention = false);

// Leave-one-out influence: score_i = ||cov(all)||_F^2 - ||cov(all minus i)||_F^2,
// computed by downdating the accumulated first and second moments — one matvec
// per sample, O(n d'^2) total, never O(n^2 d'^2).
std::vector<double> influence_scores(const std::vector<std::vector<double>>& vectors,
                                     bool sample_convention = false);

struct InfluenceEntry {
  long id = 0;  // index into the source dataset
  std::uint32_t label = 0;
  double score = 0.0;
};

struct InfluenceTable {
  std::vector<InfluenceEntry> entries;  // dataset order
};

// Scores every sample against its own class, using the flattened patch vector
// as the feature vector (for split patchification this is the original image).
InfluenceTable influence_table(const Dataset& ds, bool sample_convention = false);

// Per class: the highest and lowest ceil(x * n_k / 100) scores, ties broken by
// ascending id; unions across classes, returned as sorted dataset indices.
std::pair<std::vector<long>, std::vector<long>> quantile_partition(const InfluenceTable& table,
                                                                   double x_percent);

}  // namespace dptail
