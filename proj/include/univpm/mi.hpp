#pragma once

#include <univpm/common.hpp>
#include <univpm/neural.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace univpm {

struct PairedBatch {
  Matrix x;  // M x D_x
  Matrix y;  // M x D_y

  int size() const { return static_cast<int>(x.rows()); }

  void validate() const {
    if (x.rows() != y.rows()) throw ShapeError("PairedBatch: row count mismatch");
    if (x.rows() < 1) throw DataError("PairedBatch: empty batch");
  }
};

struct MiEstimate {
  double value = 0.0;
  int batch_size = 0;
};

// Plug-in mutual information of an empirical joint count matrix, in nats.
// 0 * log 0 terms are dropped.
inline double exact_discrete_mi(const Eigen::MatrixXi& joint_counts) {
  const Eigen::Index rows = joint_counts.rows();
  const Eigen::Index cols = joint_counts.cols();
  long long total = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (joint_counts(i, j) < 0)
        throw DataError("exact_discrete_mi: negative count");
      total += joint_counts(i, j);
    }
  if (total == 0) throw DataError("exact_discrete_mi: empty distribution");

  std::vector<double> row_marginal(rows, 0.0), col_marginal(cols, 0.0);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      row_marginal[i] += joint_counts(i, j);
      col_marginal[j] += joint_counts(i, j);
    }
  const double n = static_cast<double>(total);
  double mi = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (joint_counts(i, j) == 0) continue;
      double p = joint_counts(i, j) / n;
      double px = row_marginal[i] / n;
      double py = col_marginal[j] / n;
      mi += p * std::log(p / (px * py));
    }
  return mi;
}

// Uniform random non-identity permutation of 0..m-1 (rejection sampling).
inline std::vector<int> random_non_identity_permutation(int m, Rng& rng) {
  if (m < 2) throw DataError("random_non_identity_permutation: need m >= 2");
  std::vector<int> perm(m);
  while (true) {
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = m - 1; i > 0; --i) {
      std::uniform_int_distribution<int> pick(0, i);
      std::swap(perm[i], perm[pick(rng)]);
    }
    bool identity = true;
    for (int i = 0; i < m; ++i)
      if (perm[i] != i) { identity = false; break; }
    if (!identity) return perm;
  }
}

inline Matrix apply_row_permutation(const Matrix& m, const std::vector<int>& perm) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(perm[i]);
  return out;
}

// Produces the shuffled-marginal batch: x untouched, y rows permuted by a
// uniform non-identity permutation.
inline PairedBatch shuffle_marginal(const PairedBatch& batch, Rng& rng) {
  batch.validate();
  if (batch.size() < 2) throw DataError("shuffle_marginal: need at least 2 rows");
  auto perm = random_non_identity_permutation(batch.size(), rng);
  return PairedBatch{batch.x, apply_row_permutation(batch.y, perm)};
}

inline Matrix concat_pairs(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw ShapeError("concat_pairs: row count mismatch");
  Matrix out(x.rows(), x.cols() + y.cols());
  out.leftCols(x.cols()) = x;
  out.rightCols(y.cols()) = y;
  return out;
}

// Scalar statistic T for every row pair of a batch.
inline Vector statistic_outputs(const DenseNetwork& net, const PairedBatch& batch,
                                ForwardCache* cache = nullptr) {
  batch.validate();
  if (net.output_dim() != 1)
    throw ShapeError("statistic network must have scalar output");
  Matrix t = forward(net, concat_pairs(batch.x, batch.y), cache);
  return t.col(0);
}

inline double log_mean_exp(const Vector& v) {
  double mx = v.maxCoeff();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) acc += std::exp(v(i) - mx);
  return mx + std::log(acc / static_cast<double>(v.size()));
}

// Donsker-Varadhan estimate: E_joint[T] - log E_marginal[e^T].
inline MiEstimate dv_mi_estimate(const DenseNetwork& net, const PairedBatch& joint,
                                 const PairedBatch& marginal) {
  Vector t_joint = statistic_outputs(net, joint);
  Vector t_marginal = statistic_outputs(net, marginal);
  return MiEstimate{t_joint.mean() - log_mean_exp(t_marginal), joint.size()};
}

// Jensen-Shannon estimate: E_joint[-sp(-T)] - E_marginal[sp(T)]. A training
// signal rather than an MI value in nats; equals -2 ln 2 when T is zero.
inline MiEstimate js_mi_estimate(const DenseNetwork& net, const PairedBatch& joint,
                                 const PairedBatch& marginal) {
  Vector t_joint = statistic_outputs(net, joint);
  Vector t_marginal = statistic_outputs(net, marginal);
  double joint_term = 0.0;
  for (Eigen::Index i = 0; i < t_joint.size(); ++i) joint_term += -softplus(-t_joint(i));
  double marginal_term = 0.0;
  for (Eigen::Index i = 0; i < t_marginal.size(); ++i) marginal_term += softplus(t_marginal(i));
  return MiEstimate{joint_term / t_joint.size() - marginal_term / t_marginal.size(),
                    joint.size()};
}

// Gradients of the JS estimate with respect to the statistic outputs.
inline void js_output_gradients(const Vector& t_joint, const Vector& t_marginal,
                                Vector& grad_joint, Vector& grad_marginal) {
  grad_joint.resize(t_joint.size());
  for (Eigen::Index i = 0; i < t_joint.size(); ++i)
    grad_joint(i) = sigmoid(-t_joint(i)) / static_cast<double>(t_joint.size());
  grad_marginal.resize(t_marginal.size());
  for (Eigen::Index i = 0; i < t_marginal.size(); ++i)
    grad_marginal(i) = -sigmoid(t_marginal(i)) / static_cast<double>(t_marginal.size());
}

// Gradients of the DV estimate with respect to the statistic outputs.
inline void dv_output_gradients(const Vector& t_joint, const Vector& t_marginal,
                                Vector& grad_joint, Vector& grad_marginal) {
  grad_joint = Vector::Constant(t_joint.size(), 1.0 / static_cast<double>(t_joint.size()));
  double mx = t_marginal.maxCoeff();
  Vector e = (t_marginal.array() - mx).exp();
  double denom = e.sum();
  grad_marginal = -(e / denom);
}

enum class MiObjective { DonskerVaradhan, JensenShannon };

struct MiTrainConfig {
  MiObjective objective = MiObjective::DonskerVaradhan;
  int steps = 2000;
  int batch_size = 512;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  // Shuffles averaged when evaluating the final estimate on the full data.
  int eval_shuffles = 4;
};

namespace detail {

inline PairedBatch sample_rows(const Matrix& x, const Matrix& y, int batch, Rng& rng) {
  PairedBatch out;
  out.x.resize(batch, x.cols());
  out.y.resize(batch, y.cols());
  for (int i = 0; i < batch; ++i) {
    int idx = uniform_index(rng, static_cast<int>(x.rows()));
    out.x.row(i) = x.row(idx);
    out.y.row(i) = y.row(idx);
  }
  return out;
}

}  // namespace detail

// Maximizes the chosen variational bound over the statistic network by
// stochastic ascent, then returns the estimate on the full paired data.
inline double train_mi_estimator(DenseNetwork& net, const Matrix& x, const Matrix& y,
                                 const MiTrainConfig& config) {
  if (x.rows() != y.rows()) throw ShapeError("train_mi_estimator: row count mismatch");
  if (x.rows() < 2) throw DataError("train_mi_estimator: need at least 2 samples");
  Rng rng(config.seed);
  AdamState adam = AdamState::for_network(net, config.learning_rate);
  const int batch = std::min<int>(config.batch_size, static_cast<int>(x.rows()));

  for (int step = 0; step < config.steps; ++step) {
    PairedBatch joint = detail::sample_rows(x, y, batch, rng);
    PairedBatch marginal = shuffle_marginal(joint, rng);

    ForwardCache cache_joint, cache_marginal;
    Vector t_joint = statistic_outputs(net, joint, &cache_joint);
    Vector t_marginal = statistic_outputs(net, marginal, &cache_marginal);

    Vector grad_joint, grad_marginal;
    if (config.objective == MiObjective::DonskerVaradhan)
      dv_output_gradients(t_joint, t_marginal, grad_joint, grad_marginal);
    else
      js_output_gradients(t_joint, t_marginal, grad_joint, grad_marginal);

    // Ascent on the bound = descent on its negation.
    Gradients grads = Gradients::zeros_like(net);
    backward(net, cache_joint, -grad_joint, grads);
    backward(net, cache_marginal, -grad_marginal, grads);
    adam_step(net, grads, adam);
  }

  PairedBatch full{x, y};
  double acc = 0.0;
  for (int k = 0; k < config.eval_shuffles; ++k) {
    PairedBatch marginal = shuffle_marginal(full, rng);
    MiEstimate est = config.objective == MiObjective::DonskerVaradhan
                         ? dv_mi_estimate(net, full, marginal)
                         : js_mi_estimate(net, full, marginal);
    acc += est.value;
  }
  return acc / config.eval_shuffles;
}

}  // namespace univpm
