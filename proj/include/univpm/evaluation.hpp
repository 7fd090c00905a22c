#pragma once

#include <univpm/clustering.hpp>
#include <univpm/common.hpp>
#include <univpm/corpus.hpp>
#include <univpm/io.hpp>
#include <univpm/neural.hpp>
#include <univpm/transfer.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

namespace univpm {

// Exact minimum-cost perfect assignment on a square matrix (Hungarian method
// with potentials, O(n^3)). Returns perm with row i assigned to perm[i].
inline std::vector<int> optimal_assignment_oracle(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw ShapeError("optimal_assignment_oracle: non-square");
  const int n = static_cast<int>(cost.rows());
  if (n == 0) return {};
  for (Eigen::Index i = 0; i < cost.rows(); ++i)
    for (Eigen::Index j = 0; j < cost.cols(); ++j)
      if (!std::isfinite(cost(i, j)))
        throw DataError("optimal_assignment_oracle: non-finite cost");

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      int i0 = match[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> result(n, -1);
  for (int j = 1; j <= n; ++j)
    if (match[j] != 0) result[match[j] - 1] = j - 1;
  return result;
}

struct ConfusionMatrix {
  Eigen::MatrixXi counts;

  long long total() const {
    long long t = 0;
    for (Eigen::Index i = 0; i < counts.rows(); ++i)
      for (Eigen::Index j = 0; j < counts.cols(); ++j) t += counts(i, j);
    return t;
  }
};

// Fraction of rows whose dominant column coincides with their Hungarian-
// matched column (matching maximizes total matched counts). Rows with no
// mass count as misses.
inline double hungarian_row_match_accuracy(const ConfusionMatrix& confusion) {
  const Eigen::Index n = confusion.counts.rows();
  if (n != confusion.counts.cols())
    throw ShapeError("hungarian_row_match_accuracy: non-square confusion");
  Matrix cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      cost(i, j) = -static_cast<double>(confusion.counts(i, j));
  auto matched = optimal_assignment_oracle(cost);
  int hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (confusion.counts.row(i).sum() == 0) continue;
    Eigen::Index best;
    confusion.counts.row(i).maxCoeff(&best);
    if (static_cast<int>(best) == matched[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Referee classifiers for phoneme match accuracy.
// ---------------------------------------------------------------------------

struct OracleConfig {
  int hidden = 128;
  int steps = 4000;
  int batch_size = 256;
  double learning_rate = 2e-3;
  std::uint64_t seed = 7;
  double required_accuracy = 0.99;
};

// Frozen referee trained on clean audio features; stands in for the paper's
// pre-trained phoneme recognizer.
struct OracleClassifier {
  DenseNetwork net;
  bool trained = false;
  double clean_accuracy = 0.0;

  std::vector<int> predict(const Matrix& features) const {
    if (!trained) throw StateError("oracle classifier is not trained");
    return argmax_rows(forward(net, features));
  }
};

inline double classification_accuracy(const std::vector<int>& predicted,
                                      const std::vector<int>& labels) {
  if (predicted.size() != labels.size())
    throw ShapeError("classification_accuracy: size mismatch");
  if (predicted.empty()) return 0.0;
  int hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    if (predicted[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / predicted.size();
}

inline OracleClassifier train_oracle_classifier(const Matrix& clean_features,
                                                const std::vector<int>& labels,
                                                int num_classes,
                                                const OracleConfig& config = {}) {
  if (static_cast<std::size_t>(clean_features.rows()) != labels.size())
    throw ShapeError("train_oracle_classifier: label count mismatch");
  if (clean_features.rows() < num_classes)
    throw DataError("train_oracle_classifier: not enough samples");

  Rng rng(config.seed);
  const int dim = static_cast<int>(clean_features.cols());
  OracleClassifier oracle;
  oracle.net = DenseNetwork::xavier({dim, config.hidden, num_classes}, rng);
  AdamState adam = AdamState::for_network(oracle.net, config.learning_rate);

  const int m = static_cast<int>(clean_features.rows());
  const int batch = std::min(config.batch_size, m);
  Matrix bx(batch, dim);
  std::vector<int> by(batch);
  for (int step = 0; step < config.steps; ++step) {
    for (int i = 0; i < batch; ++i) {
      int idx = uniform_index(rng, m);
      bx.row(i) = clean_features.row(idx);
      by[i] = labels[idx];
    }
    ForwardCache cache;
    Matrix logits = forward(oracle.net, bx, &cache);
    Matrix dlogits;
    softmax_cross_entropy(logits, by, &dlogits);
    Gradients grads = Gradients::zeros_like(oracle.net);
    backward(oracle.net, cache, dlogits, grads);
    adam_step(oracle.net, grads, adam);
  }

  oracle.trained = true;
  oracle.clean_accuracy =
      classification_accuracy(oracle.predict(clean_features), labels);
  if (oracle.clean_accuracy < config.required_accuracy)
    throw DataError("train_oracle_classifier: clean accuracy " +
                    std::to_string(oracle.clean_accuracy) + " below the " +
                    std::to_string(config.required_accuracy) + " gate");
  return oracle;
}

// Lightweight nearest-class-mean referee used for per-epoch metric logging.
struct NearestMeanReferee {
  Matrix class_means;  // P x D

  static NearestMeanReferee fit(const Matrix& features, const std::vector<int>& labels,
                                int num_classes) {
    NearestMeanReferee referee;
    referee.class_means = Matrix::Zero(num_classes, features.cols());
    std::vector<int> counts(num_classes, 0);
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      referee.class_means.row(labels[i]) += features.row(i);
      ++counts[labels[i]];
    }
    for (int c = 0; c < num_classes; ++c)
      if (counts[c] > 0) referee.class_means.row(c) /= static_cast<double>(counts[c]);
    return referee;
  }

  std::vector<int> predict(const Matrix& features) const {
    std::vector<int> out(features.rows());
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      int best = 0;
      double best_d2 = (features.row(i) - class_means.row(0)).squaredNorm();
      for (Eigen::Index c = 1; c < class_means.rows(); ++c) {
        double d2 = (features.row(i) - class_means.row(c)).squaredNorm();
        if (d2 < best_d2) {
          best_d2 = d2;
          best = static_cast<int>(c);
        }
      }
      out[i] = best;
    }
    return out;
  }
};

// Fraction of frames whose referee prediction on the restored frame equals
// the prediction on the paired clean frame, as a percentage.
inline double phoneme_match_accuracy(const OracleClassifier& oracle, const Matrix& restored,
                                     const Matrix& clean) {
  if (restored.rows() != clean.rows() || restored.cols() != clean.cols())
    throw ShapeError("phoneme_match_accuracy: shape mismatch");
  auto on_restored = oracle.predict(restored);
  auto on_clean = oracle.predict(clean);
  return 100.0 * classification_accuracy(on_restored, on_clean);
}

// ---------------------------------------------------------------------------
// Mapping confusion (Fig. 5 / Fig. 8 analogs).
// ---------------------------------------------------------------------------

struct MappingConfusion {
  // True phoneme label x nearest phoneme-center id over clean audio frames.
  ConfusionMatrix label_vs_phoneme_center;
  // Nearest phoneme-center id of f_a x nearest viseme-center id of paired f_v.
  ConfusionMatrix phoneme_center_vs_viseme_center;
};

inline MappingConfusion mapping_confusion(const ClusterBank& viseme_bank,
                                          const ClusterBank& phoneme_bank,
                                          const Matrix& visual_features,
                                          const Matrix& audio_features,
                                          const std::vector<int>& labels,
                                          int num_classes) {
  if (!viseme_bank.initialized() || !phoneme_bank.initialized())
    throw StateError("mapping_confusion: banks must be initialized");
  if (visual_features.rows() != audio_features.rows() ||
      static_cast<std::size_t>(visual_features.rows()) != labels.size())
    throw ShapeError("mapping_confusion: frame count mismatch");

  MappingConfusion out;
  out.label_vs_phoneme_center.counts =
      Eigen::MatrixXi::Zero(num_classes, phoneme_bank.cluster_count());
  out.phoneme_center_vs_viseme_center.counts =
      Eigen::MatrixXi::Zero(phoneme_bank.cluster_count(), viseme_bank.cluster_count());

  for (Eigen::Index i = 0; i < audio_features.rows(); ++i) {
    int pc = phoneme_bank.nearest_center(audio_features.row(i).transpose()).first;
    int vc = viseme_bank.nearest_center(visual_features.row(i).transpose()).first;
    out.label_vs_phoneme_center.counts(labels[i], pc) += 1;
    out.phoneme_center_vs_viseme_center.counts(pc, vc) += 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cluster coverage (Fig. 3 analog).
// ---------------------------------------------------------------------------

struct CoverageEntry {
  int class_id = 0;
  int nearest_center = 0;
  double distance = 0.0;
  bool covered = false;
};

struct CoverageReport {
  std::vector<CoverageEntry> per_class;
  int covered_count = 0;
  double size_ratio = 0.0;  // max cluster size over min (clamped to >= 1)
};

// Distance from each true class prototype to its nearest bank center;
// covered iff within 3 spreads of the class.
inline CoverageReport coverage_report(const ClusterBank& bank, const Matrix& prototypes,
                                      const Vector& spreads) {
  if (!bank.initialized()) throw StateError("coverage_report: bank not initialized");
  if (prototypes.rows() != spreads.size())
    throw ShapeError("coverage_report: spread count mismatch");
  CoverageReport report;
  for (Eigen::Index c = 0; c < prototypes.rows(); ++c) {
    auto [idx, center] = bank.nearest_center(prototypes.row(c).transpose());
    CoverageEntry entry;
    entry.class_id = static_cast<int>(c);
    entry.nearest_center = idx;
    entry.distance = (prototypes.row(c).transpose() - center).norm();
    entry.covered = entry.distance <= 3.0 * spreads(c);
    if (entry.covered) ++report.covered_count;
    report.per_class.push_back(entry);
  }
  auto sizes = bank.cluster_sizes();
  int mx = 0, mn = std::numeric_limits<int>::max();
  for (int s : sizes) {
    mx = std::max(mx, s);
    mn = std::min(mn, s);
  }
  report.size_ratio = static_cast<double>(mx) / static_cast<double>(std::max(mn, 1));
  return report;
}

// ---------------------------------------------------------------------------
// CSV exports of centers and frame embeddings (for external plotting).
// ---------------------------------------------------------------------------

namespace detail {

inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m,
                             const std::vector<int>* labels, const std::string& id_column) {
  auto out = open_output(path);
  out << id_column;
  if (labels != nullptr) out << ",label";
  for (Eigen::Index c = 0; c < m.cols(); ++c) out << ",x" << c;
  out << "\n";
  char buf[64];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out << r;
    if (labels != nullptr) out << "," << (*labels)[r];
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<float>(m(r, c)));
      out << "," << buf;
    }
    out << "\n";
  }
}

}  // namespace detail

inline void export_embeddings(const ClusterBank& viseme_bank, const ClusterBank& phoneme_bank,
                              const Matrix& visual_features, const Matrix& audio_features,
                              const std::vector<int>& labels,
                              const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("export_embeddings: cannot create " + dir.string());
  detail::write_matrix_csv(dir / "viseme_centers.csv",
                           viseme_bank.initialized() ? viseme_bank.centers() : Matrix(0, 0),
                           nullptr, "center_id");
  detail::write_matrix_csv(dir / "phoneme_centers.csv",
                           phoneme_bank.initialized() ? phoneme_bank.centers() : Matrix(0, 0),
                           nullptr, "center_id");
  detail::write_matrix_csv(dir / "visual_frames.csv", visual_features, &labels, "frame_id");
  detail::write_matrix_csv(dir / "audio_frames.csv", audio_features, &labels, "frame_id");
}

}  // namespace univpm
