#pragma once

#include <univpm/common.hpp>

#include <cmath>

namespace univpm {

struct AddressingMatrix {
  Matrix probs;  // T x N, row-stochastic
  double temperature = 0.1;
};

namespace detail {

inline void require_nonzero_rows(const Matrix& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double norm = m.row(i).norm();
    if (!(norm > 0.0))
      throw DataError(std::string("addressing_scores: zero-norm ") + what + " at row " +
                      std::to_string(i));
  }
}

}  // namespace detail

// Cosine similarities between every frame and every center, row-softmaxed at
// temperature tau with max-shift stabilization.
inline AddressingMatrix addressing_scores(const Matrix& frames, const Matrix& centers,
                                          double tau) {
  if (!(tau > 0.0)) throw ConfigError("addressing_scores: temperature must be > 0");
  if (frames.cols() != centers.cols())
    throw ShapeError("addressing_scores: dimension mismatch");
  if (centers.rows() < 1) throw ShapeError("addressing_scores: no centers");
  detail::require_nonzero_rows(frames, "frame");
  detail::require_nonzero_rows(centers, "center");

  const Eigen::Index t = frames.rows(), n = centers.rows();
  Vector frame_norms(t), center_norms(n);
  for (Eigen::Index i = 0; i < t; ++i) frame_norms(i) = frames.row(i).norm();
  for (Eigen::Index j = 0; j < n; ++j) center_norms(j) = centers.row(j).norm();

  AddressingMatrix out;
  out.temperature = tau;
  out.probs.resize(t, n);
  for (Eigen::Index i = 0; i < t; ++i) {
    Vector scores(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      double cosine = frames.row(i).dot(centers.row(j)) / (frame_norms(i) * center_norms(j));
      scores(j) = cosine / tau;
    }
    double mx = scores.maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      scores(j) = std::exp(scores(j) - mx);
      denom += scores(j);
    }
    out.probs.row(i) = (scores / denom).transpose();
  }
  return out;
}

// Restored frames are addressing-weighted mixtures of the centers.
inline Matrix restore_audio(const AddressingMatrix& addressing, const Matrix& centers) {
  if (addressing.probs.cols() != centers.rows())
    throw ShapeError("restore_audio: addressing columns must match center count");
  return addressing.probs * centers;
}

// Gradient of a scalar loss through the addressing softmax and cosine
// similarities into the frames. `addr_grad` is dL/dA (T x N); centers are
// treated as constants.
inline Matrix addressing_backward(const Matrix& frames, const Matrix& centers, double tau,
                                  const AddressingMatrix& addressing,
                                  const Matrix& addr_grad) {
  const Eigen::Index t = frames.rows(), n = centers.rows(), d = frames.cols();
  if (addr_grad.rows() != t || addr_grad.cols() != n)
    throw ShapeError("addressing_backward: gradient shape mismatch");

  Matrix frame_grad = Matrix::Zero(t, d);
  for (Eigen::Index i = 0; i < t; ++i) {
    double fnorm = frames.row(i).norm();
    Vector unit_frame = frames.row(i).transpose() / fnorm;
    // Softmax backward within the row.
    double dot = addr_grad.row(i).dot(addressing.probs.row(i));
    for (Eigen::Index j = 0; j < n; ++j) {
      double score_grad = addressing.probs(i, j) * (addr_grad(i, j) - dot);
      double cosine_grad = score_grad / tau;
      double cnorm = centers.row(j).norm();
      Vector unit_center = centers.row(j).transpose() / cnorm;
      double cosine = unit_frame.dot(unit_center);
      frame_grad.row(i) +=
          (cosine_grad / fnorm) * (unit_center - cosine * unit_frame).transpose();
    }
  }
  return frame_grad;
}

// Combined backward for restore_audio(addressing_scores(frames)): returns
// dL/dframes given dL/drestored.
inline Matrix transfer_backward(const Matrix& frames, const Matrix& centers, double tau,
                                const AddressingMatrix& addressing,
                                const Matrix& restored_grad) {
  Matrix addr_grad = restored_grad * centers.transpose();
  return addressing_backward(frames, centers, tau, addressing, addr_grad);
}

}  // namespace univpm
