#pragma once

#include <univpm/clustering.hpp>
#include <univpm/common.hpp>
#include <univpm/evaluation.hpp>

#include <vector>

namespace univpm {

// Streaming two-component Gaussian benchmark that reproduces the uniform
// effect. The majority component is broad and the minority compact, so the
// distortion-optimal two-center quantization of the raw 90/10 stream parks
// both centers inside the majority mass; balanced re-sampling equalizes the
// caches and keeps one center on the minority component instead.
struct TwoBlobConfig {
  double imbalance = 0.9;        // majority fraction
  double separation = 4.5;       // distance between component means
  double majority_spread = 3.5;
  double minority_spread = 0.5;
  int dim = 2;
  int clusters = 2;
  int batches = 160;
  int batch_size = 50;
  int init_buffer = 300;
  std::uint64_t seed = 0;
  bool pruning = false;

  void validate() const {
    if (!(imbalance > 0.0 && imbalance < 1.0))
      throw ConfigError("imbalance must lie in (0, 1)");
    if (!(separation > 0.0)) throw ConfigError("separation must be > 0");
    if (!(majority_spread > 0.0) || !(minority_spread > 0.0))
      throw ConfigError("spreads must be > 0");
    if (dim < 1 || clusters < 1 || batches < 1 || batch_size < 1)
      throw ConfigError("dim, clusters, batches, batch_size must be >= 1");
  }
};

struct TwoBlobResult {
  // Some assignment pairs every component with a distinct center within
  // 3 spreads of its mean.
  bool all_covered = false;
  // No center within 3 minority spreads of the minority mean.
  bool minority_lost = false;
  // Every center sits inside the majority component (within 3 majority
  // spreads of its mean) while the minority goes uncovered.
  bool both_in_majority = false;
  int covered_count = 0;
  double size_ratio = 0.0;
  Matrix centers;
};

inline TwoBlobResult run_two_blob_stream(const TwoBlobConfig& config) {
  config.validate();
  Rng rng(config.seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);

  Matrix means = Matrix::Zero(2, config.dim);
  means(1, 0) = config.separation;
  const double spreads_by_component[2] = {config.majority_spread,
                                          config.minority_spread};

  BankConfig bank_config;
  bank_config.cluster_count = config.clusters;
  bank_config.max_cluster_size = 20;
  bank_config.init_buffer_min = config.init_buffer;
  bank_config.seed = config.seed ^ 0x6a09e667f3bcc909ull;
  ClusterBank bank(bank_config);

  std::vector<Vector> batch(config.batch_size);
  for (int b = 0; b < config.batches; ++b) {
    for (int i = 0; i < config.batch_size; ++i) {
      int component = uniform_real(rng, 0.0, 1.0) < config.imbalance ? 0 : 1;
      Vector v(config.dim);
      for (int d = 0; d < config.dim; ++d)
        v(d) = means(component, d) + spreads_by_component[component] * gaussian(rng);
      batch[i] = std::move(v);
    }
    if (config.pruning)
      bank.ingest_batch_pruning_baseline(batch);
    else
      bank.ingest_batch(batch);
  }

  TwoBlobResult result;
  result.centers = bank.centers();
  Vector spreads(2);
  spreads << spreads_by_component[0], spreads_by_component[1];
  CoverageReport coverage = coverage_report(bank, means, spreads);
  result.covered_count = coverage.covered_count;
  result.size_ratio = coverage.size_ratio;

  // Bijective coverage: match components to distinct centers.
  const int n = config.clusters;
  if (n >= 2) {
    Matrix cost = Matrix::Zero(n, n);
    for (int c = 0; c < 2; ++c)
      for (int k = 0; k < n; ++k)
        cost(c, k) = (means.row(c) - result.centers.row(k)).norm();
    // Rows beyond the two components stay zero so any center matches them.
    auto assignment = optimal_assignment_oracle(cost);
    result.all_covered = true;
    for (int c = 0; c < 2; ++c) {
      double dist = (means.row(c) - result.centers.row(assignment[c])).norm();
      if (dist > 3.0 * spreads(c)) result.all_covered = false;
    }
  }

  result.minority_lost = true;
  bool all_in_majority = true;
  for (int k = 0; k < n; ++k) {
    if ((result.centers.row(k) - means.row(1)).norm() <= 3.0 * config.minority_spread)
      result.minority_lost = false;
    if (result.centers.row(k).norm() > 3.0 * config.majority_spread)
      all_in_majority = false;
  }
  result.both_in_majority = result.minority_lost && all_in_majority;
  return result;
}

}  // namespace univpm
