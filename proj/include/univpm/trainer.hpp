#pragma once

#include <univpm/clustering.hpp>
#include <univpm/common.hpp>
#include <univpm/corpus.hpp>
#include <univpm/evaluation.hpp>
#include <univpm/mi.hpp>
#include <univpm/neural.hpp>
#include <univpm/transfer.hpp>

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace univpm {

enum class TrainerVariant { Univpm, NoAmie, PruningBaseline, Noisy };

inline std::string variant_name(TrainerVariant v) {
  switch (v) {
    case TrainerVariant::Univpm: return "univpm";
    case TrainerVariant::NoAmie: return "no-amie";
    case TrainerVariant::PruningBaseline: return "pruning-baseline";
    case TrainerVariant::Noisy: return "noisy";
  }
  return "univpm";
}

inline TrainerVariant variant_from_name(const std::string& name) {
  if (name == "univpm") return TrainerVariant::Univpm;
  if (name == "no-amie") return TrainerVariant::NoAmie;
  if (name == "pruning-baseline") return TrainerVariant::PruningBaseline;
  if (name == "noisy") return TrainerVariant::Noisy;
  throw ConfigError("unknown variant: " + name);
}

struct TrainerConfig {
  double lambda_gan = 0.1;
  double lambda_rec = 0.2;
  double lambda_var = 0.5;
  int bank_update_interval_epochs = 10;
  int epochs = 60;
  int batch_sequences = 4;
  double lr_generator = 1e-3;
  double lr_discriminator = 1e-3;
  std::uint64_t seed = 1;
  double temperature = 0.1;

  int bank_clusters = 0;  // 0 selects the corpus phoneme count
  int bank_max_size = 20;
  int bank_init_buffer = 768;
  int encoder_hidden = 64;
  int statistic_hidden = 64;
  double encoder_init_gain = 1.0;
  // Noisy stream: per-batch probability that the recognition head consumes
  // the noisy audio channel instead of the clean one. The `noisy` variant
  // enables it; other variants can opt in via `noisy_stream`.
  double noisy_probability = 0.25;
  bool noisy_stream = false;

  bool uses_noisy_stream() const {
    return noisy_stream || variant == TrainerVariant::Noisy;
  }

  TrainerVariant variant = TrainerVariant::Univpm;
  bool freeze_banks = false;
  // Literal Alg. 2 sign for the variance term (+Var in the minimized loss)
  // instead of the dispersive reading (-Var).
  bool literal_var_sign = false;

  // The no-amie and pruning-baseline variants reproduce the ablation stack's
  // pre-AMIE rows: clustering + retrieval over the fixed front-end space,
  // with the whole mapping-supervision stage (adversarial, reconstruction,
  // dispersion) switched off and the front-ends frozen; only the recognition
  // head trains.
  bool mapping_supervision_enabled() const {
    return variant == TrainerVariant::Univpm || variant == TrainerVariant::Noisy;
  }
  bool encoders_trainable() const { return mapping_supervision_enabled(); }
  double effective_lambda_gan() const {
    return mapping_supervision_enabled() ? lambda_gan : 0.0;
  }
  double effective_lambda_rec() const {
    return mapping_supervision_enabled() ? lambda_rec : 0.0;
  }
  double effective_lambda_var() const {
    return mapping_supervision_enabled() ? lambda_var : 0.0;
  }

  void validate() const {
    if (lambda_gan < 0.0 || lambda_rec < 0.0 || lambda_var < 0.0)
      throw ConfigError("loss weights must be >= 0");
    if (bank_update_interval_epochs < 1)
      throw ConfigError("bank_update_interval_epochs must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_sequences < 1) throw ConfigError("batch_sequences must be >= 1");
    if (!(lr_generator > 0.0) || !(lr_discriminator > 0.0))
      throw ConfigError("learning rates must be > 0");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (bank_max_size < 1) throw ConfigError("bank_max_size must be >= 1");
    if (encoder_hidden < 1 || statistic_hidden < 1)
      throw ConfigError("hidden widths must be >= 1");
  }
};

struct EpochMetrics {
  int epoch = 0;
  double l_proxy = 0.0;
  double l_gan_d = 0.0;
  double l_g = 0.0;
  double l_rec = 0.0;
  double l_var = 0.0;
  double js_mi_symbols = 0.0;
  double phoneme_match_acc = 0.0;
};

struct TrainerState {
  TrainerConfig config;
  int feature_dim = 0;
  int phoneme_count = 0;

  DenseNetwork visual_encoder;
  DenseNetwork audio_encoder;
  DenseNetwork proxy_head;
  DenseNetwork statistic_network;
  ClusterBank viseme_bank;
  ClusterBank phoneme_bank;

  AdamState opt_visual, opt_audio, opt_proxy, opt_statistic;
  Rng rng;

  int epochs_completed = 0;
  std::vector<EpochMetrics> metrics;
};

// ---------------------------------------------------------------------------
// Standalone loss pieces (also used directly by tests).
// ---------------------------------------------------------------------------

inline Matrix encode(const DenseNetwork& encoder, const Matrix& raw_frames,
                     ForwardCache* cache = nullptr) {
  return forward(encoder, raw_frames, cache);
}

// Front-end input lift: appends the frame norm as an extra feature. Cosine
// addressing is scale-free, so without this the encoders could never route
// scale information into the retrieval geometry.
inline Matrix norm_augment(const Matrix& frames) {
  Matrix out(frames.rows(), frames.cols() + 1);
  out.leftCols(frames.cols()) = frames;
  for (Eigen::Index i = 0; i < frames.rows(); ++i)
    out(i, frames.cols()) = frames.row(i).norm();
  return out;
}

// Front-end output normalization: every feature row is scaled onto the
// sphere of radius sqrt(D). Without a scale anchor the joint losses shrink
// the feature space, which silently erodes class margins while the
// reconstruction values keep improving.
inline double feature_scale(Eigen::Index dim) {
  return std::sqrt(static_cast<double>(dim));
}

inline Matrix normalize_features(const Matrix& raw, Vector* norms = nullptr) {
  const double scale = feature_scale(raw.cols());
  Matrix out(raw.rows(), raw.cols());
  if (norms != nullptr) norms->resize(raw.rows());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    double n = raw.row(i).norm();
    if (!(n > 1e-12)) throw DataError("normalize_features: zero-norm row");
    out.row(i) = raw.row(i) * (scale / n);
    if (norms != nullptr) (*norms)(i) = n;
  }
  return out;
}

// Chain rule through the row normalization: given dL/dnormalized, returns
// dL/draw.
inline Matrix normalize_backward(const Matrix& raw, const Vector& norms,
                                 const Matrix& d_normalized) {
  const double scale = feature_scale(raw.cols());
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    Vector unit = raw.row(i).transpose() / norms(i);
    Vector g = d_normalized.row(i).transpose();
    out.row(i) = ((scale / norms(i)) * (g - g.dot(unit) * unit)).transpose();
  }
  return out;
}

// Full front-end: norm-augmented input, dense network, normalized output.
inline Matrix encode_frames(const DenseNetwork& encoder, const Matrix& raw_frames) {
  return normalize_features(forward(encoder, norm_augment(raw_frames)));
}

// Per-frame nearest-center vectors for both modalities.
inline std::pair<Matrix, Matrix> symbol_sequences(const Matrix& visual_features,
                                                  const Matrix& audio_features,
                                                  const ClusterBank& viseme_bank,
                                                  const ClusterBank& phoneme_bank) {
  if (!viseme_bank.initialized() || !phoneme_bank.initialized())
    throw StateError("symbol_sequences: banks must be initialized");
  Matrix s_v(visual_features.rows(), visual_features.cols());
  Matrix s_a(audio_features.rows(), audio_features.cols());
  for (Eigen::Index i = 0; i < visual_features.rows(); ++i)
    s_v.row(i) = viseme_bank.nearest_center(visual_features.row(i).transpose()).second.transpose();
  for (Eigen::Index i = 0; i < audio_features.rows(); ++i)
    s_a.row(i) = phoneme_bank.nearest_center(audio_features.row(i).transpose()).second.transpose();
  return {std::move(s_v), std::move(s_a)};
}

// Mean over frames of the per-frame Euclidean norm of the difference.
inline double rec_loss(const Matrix& restored, const Matrix& clean,
                       Matrix* restored_gradient = nullptr) {
  if (restored.rows() != clean.rows() || restored.cols() != clean.cols())
    throw ShapeError("rec_loss: shape mismatch");
  const double t = static_cast<double>(restored.rows());
  double loss = 0.0;
  if (restored_gradient != nullptr)
    *restored_gradient = Matrix::Zero(restored.rows(), restored.cols());
  for (Eigen::Index i = 0; i < restored.rows(); ++i) {
    double norm = (restored.row(i) - clean.row(i)).norm();
    loss += norm;
    if (restored_gradient != nullptr && norm > 0.0)
      restored_gradient->row(i) = (restored.row(i) - clean.row(i)) / (norm * t);
  }
  return loss / t;
}

// Mean squared distance of the rows to their centroid.
inline double center_variance(const Matrix& centers) {
  Vector centroid = centers.colwise().mean().transpose();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < centers.rows(); ++i)
    acc += (centers.row(i).transpose() - centroid).squaredNorm();
  return acc / static_cast<double>(centers.rows());
}

// Dispersion regularizer on the two center sets: negated variance, so that
// minimizing the total objective spreads the centers apart.
inline double var_regularizer(const Matrix& centers_v, const Matrix& centers_a) {
  if (centers_v.rows() < 2 || centers_a.rows() < 2)
    throw ConfigError("var_regularizer: need at least 2 centers per bank");
  return -(center_variance(centers_v) + center_variance(centers_a));
}

// d var_regularizer / d centers for one center set.
inline Matrix var_regularizer_center_gradient(const Matrix& centers) {
  if (centers.rows() < 2) throw ConfigError("var_regularizer: need at least 2 centers");
  const double n = static_cast<double>(centers.rows());
  Vector centroid = centers.colwise().mean().transpose();
  Matrix grad(centers.rows(), centers.cols());
  for (Eigen::Index i = 0; i < centers.rows(); ++i)
    grad.row(i) = -(2.0 / n) * (centers.row(i) - centroid.transpose());
  return grad;
}

// ---------------------------------------------------------------------------
// JS terms shared by the two adversarial sub-steps.
// ---------------------------------------------------------------------------

struct ShufflePlan {
  std::vector<int> raw_pairs;      // marginal permutation for (f_v, f_a)
  std::vector<int> symbol_pairs;   // for (s_v, s_a)
  std::vector<int> transfer_pairs; // for (f_v, f_hat_a)
};

inline ShufflePlan make_shuffle_plan(int frames, Rng& rng) {
  ShufflePlan plan;
  plan.raw_pairs = random_non_identity_permutation(frames, rng);
  plan.symbol_pairs = random_non_identity_permutation(frames, rng);
  plan.transfer_pairs = random_non_identity_permutation(frames, rng);
  return plan;
}

namespace detail {

// JS objective E_joint[-sp(-T)] - E_marginal[sp(T)] on explicit pairings.
// Statistic-parameter gradients scaled by `stat_coefficient` accumulate into
// `stat_grads`; no input gradients.
inline double js_core(const DenseNetwork& tnet, const Matrix& x, const Matrix& y_joint,
                      const Matrix& y_marginal, double stat_coefficient,
                      Gradients* stat_grads) {
  PairedBatch joint{x, y_joint};
  PairedBatch marginal{x, y_marginal};
  const bool with_grads = stat_grads != nullptr && stat_coefficient != 0.0;
  ForwardCache cache_joint, cache_marginal;
  Vector t_joint = statistic_outputs(tnet, joint, with_grads ? &cache_joint : nullptr);
  Vector t_marginal =
      statistic_outputs(tnet, marginal, with_grads ? &cache_marginal : nullptr);

  double joint_term = 0.0, marginal_term = 0.0;
  for (Eigen::Index i = 0; i < t_joint.size(); ++i) joint_term += -softplus(-t_joint(i));
  for (Eigen::Index i = 0; i < t_marginal.size(); ++i)
    marginal_term += softplus(t_marginal(i));
  const double value = joint_term / t_joint.size() - marginal_term / t_marginal.size();
  if (!with_grads) return value;

  Vector grad_joint, grad_marginal;
  js_output_gradients(t_joint, t_marginal, grad_joint, grad_marginal);
  Gradients stat_local = Gradients::zeros_like(tnet);
  backward(tnet, cache_joint, Matrix(grad_joint), stat_local);
  backward(tnet, cache_marginal, Matrix(grad_marginal), stat_local);
  if (stat_grads->weights.empty()) *stat_grads = Gradients::zeros_like(tnet);
  for (std::size_t l = 0; l < stat_local.weights.size(); ++l) {
    stat_grads->weights[l] += stat_coefficient * stat_local.weights[l];
    stat_grads->biases[l] += stat_coefficient * stat_local.biases[l];
  }
  return value;
}

// JS estimate for pair (x, y) with the marginal built from `perm`. When
// gradients are requested, `coefficient`-scaled input gradients are
// accumulated into dx / dy, and statistic-parameter gradients scaled by
// `stat_coefficient` into `stat_grads`.
inline double js_term(const DenseNetwork& tnet, const Matrix& x, const Matrix& y,
                      const std::vector<int>& perm, double coefficient, Matrix* dx,
                      Matrix* dy, double stat_coefficient, Gradients* stat_grads) {
  PairedBatch joint{x, y};
  PairedBatch marginal{x, apply_row_permutation(y, perm)};

  const bool with_grads = dx != nullptr || dy != nullptr || stat_grads != nullptr;
  ForwardCache cache_joint, cache_marginal;
  Vector t_joint = statistic_outputs(tnet, joint, with_grads ? &cache_joint : nullptr);
  Vector t_marginal =
      statistic_outputs(tnet, marginal, with_grads ? &cache_marginal : nullptr);

  double joint_term = 0.0, marginal_term = 0.0;
  for (Eigen::Index i = 0; i < t_joint.size(); ++i) joint_term += -softplus(-t_joint(i));
  for (Eigen::Index i = 0; i < t_marginal.size(); ++i)
    marginal_term += softplus(t_marginal(i));
  const double value =
      joint_term / t_joint.size() - marginal_term / t_marginal.size();
  if (!with_grads) return value;

  Vector grad_joint, grad_marginal;
  js_output_gradients(t_joint, t_marginal, grad_joint, grad_marginal);

  const double input_coef = coefficient;
  Gradients stat_local = Gradients::zeros_like(tnet);
  Matrix in_joint = backward(tnet, cache_joint, Matrix(grad_joint), stat_local);
  Matrix in_marginal = backward(tnet, cache_marginal, Matrix(grad_marginal), stat_local);
  if (stat_grads != nullptr) {
    if (stat_grads->weights.empty()) *stat_grads = Gradients::zeros_like(tnet);
    for (std::size_t l = 0; l < stat_local.weights.size(); ++l) {
      stat_grads->weights[l] += stat_coefficient * stat_local.weights[l];
      stat_grads->biases[l] += stat_coefficient * stat_local.biases[l];
    }
  }

  const Eigen::Index dx_cols = x.cols();
  if (dx != nullptr) {
    *dx += input_coef * in_joint.leftCols(dx_cols);
    *dx += input_coef * in_marginal.leftCols(dx_cols);
  }
  if (dy != nullptr) {
    *dy += input_coef * in_joint.rightCols(y.cols());
    // Marginal rows used y[perm[i]], so route the gradient back through it.
    for (Eigen::Index i = 0; i < in_marginal.rows(); ++i)
      dy->row(perm[i]) += input_coef * in_marginal.row(i).tail(y.cols());
  }
  return value;
}

// Relative variance of pseudo-count-anchored soft centroids: the centroid
// variance normalized by the mean squared centroid norm, which lies in
// [0, 1) and cannot be inflated by growing the feature scale. Each centroid
// is pulled from its bank center toward the addressing-weighted batch mean,
// which is the differentiable path by which dispersion gradients reach the
// encoders.
inline double soft_center_dispersion(const Matrix& features, const Matrix& centers,
                                     const AddressingMatrix& addressing, double coefficient,
                                     Matrix* dfeatures, Matrix* daddressing) {
  const Eigen::Index t = features.rows(), n = centers.rows(), d = features.cols();
  Matrix soft(n, d);
  Vector mass(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Vector s = Vector::Zero(d);
    double w = 0.0;
    for (Eigen::Index i = 0; i < t; ++i) {
      s += addressing.probs(i, j) * features.row(i).transpose();
      w += addressing.probs(i, j);
    }
    mass(j) = w;
    soft.row(j) = ((centers.row(j).transpose() + s) / (1.0 + w)).transpose();
  }
  const double variance = center_variance(soft);
  const double scale = soft.squaredNorm() / static_cast<double>(n);
  if (!(scale > 0.0)) return 0.0;
  const double relative = variance / scale;
  if (dfeatures == nullptr && daddressing == nullptr) return relative;

  Vector centroid = soft.colwise().mean().transpose();
  for (Eigen::Index j = 0; j < n; ++j) {
    // d relative / d soft_j by the quotient rule.
    Vector g = (2.0 / (static_cast<double>(n) * scale)) *
               ((soft.row(j).transpose() - centroid) -
                (relative)*soft.row(j).transpose()) *
               coefficient;
    const double denom = 1.0 + mass(j);
    for (Eigen::Index i = 0; i < t; ++i) {
      if (dfeatures != nullptr)
        dfeatures->row(i) += (addressing.probs(i, j) / denom) * g.transpose();
      if (daddressing != nullptr)
        (*daddressing)(i, j) +=
            g.dot((features.row(i) - soft.row(j)).transpose()) / denom;
    }
  }
  return relative;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Discriminator objective (Eq. 11): L_GAN = I_js(f_v, f_a)
//   - I_js(s_v, s_a) - I_js(f_v, f_hat_a). The discriminator ascends this;
// all inputs are treated as constants so only statistic-network parameter
// gradients exist.
// ---------------------------------------------------------------------------

struct DiscriminatorEval {
  double l_gan = 0.0;      // Eq. 11 value: js_raw - js_symbols - js_transfer
  double objective = 0.0;  // bounded ascent target the gradients belong to
  double js_raw = 0.0;
  double js_symbols = 0.0;
  double js_transfer = 0.0;
};

// Ascending the literal -I_js terms is unbounded (softplus of the statistic
// grows without limit), so the push-down of the generated-pair estimates is
// realized by swapping the joint/marginal roles inside the JS objective: the
// label-flipped classifier loss moves T in the same directions but saturates
// once the pairs are separated, like a standard GAN discriminator.
inline DiscriminatorEval evaluate_discriminator(const DenseNetwork& tnet, const Matrix& f_v,
                                                const Matrix& f_a, const Matrix& s_v,
                                                const Matrix& s_a, const Matrix& f_hat,
                                                const ShufflePlan& plan,
                                                Gradients* stat_grads = nullptr) {
  if (f_v.rows() < 2) throw DataError("discriminator: batch must have at least 2 frames");
  if (f_a.rows() != f_v.rows() || s_v.rows() != f_v.rows() || s_a.rows() != f_v.rows() ||
      f_hat.rows() != f_v.rows())
    throw ShapeError("discriminator: sequence length mismatch");

  DiscriminatorEval eval;
  Matrix f_a_marginal = apply_row_permutation(f_a, plan.raw_pairs);
  Matrix s_a_marginal = apply_row_permutation(s_a, plan.symbol_pairs);
  Matrix f_hat_marginal = apply_row_permutation(f_hat, plan.transfer_pairs);

  eval.js_raw = detail::js_core(tnet, f_v, f_a, f_a_marginal, +1.0, stat_grads);
  // Swapped-role terms: ascent lowers the corresponding generated-pair
  // estimates, with saturation.
  double swap_symbols = detail::js_core(tnet, s_v, s_a_marginal, s_a, +1.0, stat_grads);
  double swap_transfer =
      detail::js_core(tnet, f_v, f_hat_marginal, f_hat, +1.0, stat_grads);
  eval.objective = eval.js_raw + swap_symbols + swap_transfer;
  // Report Eq. 11's value as written.
  eval.js_symbols = detail::js_core(tnet, s_v, s_a, s_a_marginal, 0.0, nullptr);
  eval.js_transfer = detail::js_core(tnet, f_v, f_hat, f_hat_marginal, 0.0, nullptr);
  eval.l_gan = eval.js_raw - eval.js_symbols - eval.js_transfer;
  return eval;
}

// ---------------------------------------------------------------------------
// Generator objective: L = L_proxy + lambda_gan * L_G + lambda_rec * L_rec
//   + lambda_var * L_var, with L_G = -I_js(soft symbols) - I_js(f_v, f_hat).
// The statistic network is frozen; gradients flow into both encoders and the
// proxy head, reaching bank centers only through the soft addressing path.
// ---------------------------------------------------------------------------

struct GeneratorEval {
  double total = 0.0;
  double l_proxy = 0.0;
  double l_g = 0.0;
  double l_rec = 0.0;
  double l_var = 0.0;
  double js_soft_symbols = 0.0;
  double js_transfer = 0.0;
};

struct GeneratorBatch {
  Matrix x_v;                    // raw visual frames
  Matrix x_a;                    // raw clean audio frames
  std::optional<Matrix> x_a_noisy;
  std::vector<int> labels;
  // Set by the trainer for the noisy variant: this batch's recognition input
  // is the noisy channel.
  bool feed_noisy = false;
};

inline GeneratorEval evaluate_generator(const TrainerConfig& config,
                                        const DenseNetwork& visual_encoder,
                                        const DenseNetwork& audio_encoder,
                                        const DenseNetwork& proxy_head,
                                        const DenseNetwork& tnet, const Matrix& centers_v,
                                        const Matrix& centers_a, const GeneratorBatch& batch,
                                        const ShufflePlan& plan,
                                        Gradients* grad_visual = nullptr,
                                        Gradients* grad_audio = nullptr,
                                        Gradients* grad_proxy = nullptr) {
  const bool with_grads =
      grad_visual != nullptr || grad_audio != nullptr || grad_proxy != nullptr;
  const double lambda_gan = config.effective_lambda_gan();
  const double lambda_rec = config.effective_lambda_rec();
  const double lambda_var = config.effective_lambda_var();
  const bool noisy = batch.feed_noisy;
  if (noisy && !batch.x_a_noisy.has_value())
    throw DataError("generator: noisy batch without a noisy audio channel");
  const double tau = config.temperature;
  const Eigen::Index frames = batch.x_v.rows();
  const Eigen::Index d = centers_a.cols();
  if (frames < 2) throw DataError("generator: batch must have at least 2 frames");

  ForwardCache cache_v, cache_a, cache_an, cache_p;
  Vector norms_v, norms_a, norms_an;
  Matrix raw_v = forward(visual_encoder, norm_augment(batch.x_v),
                         with_grads ? &cache_v : nullptr);
  Matrix raw_a =
      forward(audio_encoder, norm_augment(batch.x_a), with_grads ? &cache_a : nullptr);
  Matrix f_v = normalize_features(raw_v, &norms_v);
  Matrix f_a = normalize_features(raw_a, &norms_a);
  Matrix raw_an, f_an;
  if (noisy) {
    raw_an = forward(audio_encoder, norm_augment(*batch.x_a_noisy),
                     with_grads ? &cache_an : nullptr);
    f_an = normalize_features(raw_an, &norms_an);
  }

  AddressingMatrix addr_transfer = addressing_scores(f_v, centers_a, tau);
  Matrix f_hat = restore_audio(addr_transfer, centers_a);

  const Matrix& proxy_audio = noisy ? f_an : f_a;
  Matrix proxy_in(frames, 3 * d);
  proxy_in.leftCols(d) = f_v;
  proxy_in.middleCols(d, d) = proxy_audio;
  proxy_in.rightCols(d) = f_hat;
  Matrix logits = forward(proxy_head, proxy_in, with_grads ? &cache_p : nullptr);

  GeneratorEval eval;
  Matrix dlogits;
  eval.l_proxy = softmax_cross_entropy(logits, batch.labels,
                                       with_grads ? &dlogits : nullptr);

  Matrix drec;
  eval.l_rec = rec_loss(f_hat, f_a, with_grads ? &drec : nullptr);

  const bool need_soft = lambda_gan > 0.0 || lambda_var > 0.0;
  AddressingMatrix addr_v, addr_a;
  Matrix soft_v, soft_a;
  if (need_soft) {
    addr_v = addressing_scores(f_v, centers_v, tau);
    addr_a = addressing_scores(f_a, centers_a, tau);
    soft_v = restore_audio(addr_v, centers_v);
    soft_a = restore_audio(addr_a, centers_a);
  }

  // Gradient accumulators in feature space.
  Matrix df_v, df_a, df_an, df_hat, dsoft_v, dsoft_a, daddr_v, daddr_a;
  if (with_grads) {
    df_v = Matrix::Zero(frames, d);
    df_a = Matrix::Zero(frames, d);
    if (noisy) df_an = Matrix::Zero(frames, d);
    df_hat = Matrix::Zero(frames, d);
    dsoft_v = Matrix::Zero(frames, d);
    dsoft_a = Matrix::Zero(frames, d);
    if (need_soft) {
      daddr_v = Matrix::Zero(frames, centers_v.rows());
      daddr_a = Matrix::Zero(frames, centers_a.rows());
    }
  }

  if (lambda_gan > 0.0) {
    // d total / d js = -lambda_gan for both generator JS terms.
    eval.js_soft_symbols = detail::js_term(
        tnet, soft_v, soft_a, plan.symbol_pairs, -lambda_gan,
        with_grads ? &dsoft_v : nullptr, with_grads ? &dsoft_a : nullptr, 0.0, nullptr);
    eval.js_transfer = detail::js_term(
        tnet, f_v, f_hat, plan.transfer_pairs, -lambda_gan,
        with_grads ? &df_v : nullptr, with_grads ? &df_hat : nullptr, 0.0, nullptr);
    eval.l_g = -eval.js_soft_symbols - eval.js_transfer;
  }

  if (lambda_var > 0.0) {
    const double sign = config.literal_var_sign ? 1.0 : -1.0;
    double var_v = detail::soft_center_dispersion(
        f_v, centers_v, addr_v, sign * lambda_var,
        with_grads ? &df_v : nullptr, with_grads ? &daddr_v : nullptr);
    double var_a = detail::soft_center_dispersion(
        f_a, centers_a, addr_a, sign * lambda_var,
        with_grads ? &df_a : nullptr, with_grads ? &daddr_a : nullptr);
    eval.l_var = sign * (var_v + var_a);
  }

  eval.total = eval.l_proxy + lambda_gan * eval.l_g + lambda_rec * eval.l_rec +
               lambda_var * eval.l_var;
  if (!with_grads) return eval;

  // Proxy head: gradients through its input concatenation.
  Gradients proxy_scratch;
  Gradients* proxy_target = grad_proxy != nullptr ? grad_proxy : &proxy_scratch;
  if (proxy_target->weights.empty()) *proxy_target = Gradients::zeros_like(proxy_head);
  Matrix dproxy_in = backward(proxy_head, cache_p, dlogits, *proxy_target);
  df_v += dproxy_in.leftCols(d);
  if (noisy)
    df_an += dproxy_in.middleCols(d, d);
  else
    df_a += dproxy_in.middleCols(d, d);
  df_hat += dproxy_in.rightCols(d);

  // Reconstruction loss.
  df_hat += lambda_rec * drec;
  for (Eigen::Index i = 0; i < frames; ++i) {
    double norm = (f_hat.row(i) - f_a.row(i)).norm();
    if (norm > 0.0)
      df_a.row(i) -= lambda_rec * (f_hat.row(i) - f_a.row(i)) /
                     (norm * static_cast<double>(frames));
  }

  // Soft symbol mixtures: s = A * C, centers constant.
  if (need_soft) {
    if (lambda_gan > 0.0) {
      daddr_v += dsoft_v * centers_v.transpose();
      daddr_a += dsoft_a * centers_a.transpose();
    }
    df_v += addressing_backward(f_v, centers_v, tau, addr_v, daddr_v);
    df_a += addressing_backward(f_a, centers_a, tau, addr_a, daddr_a);
  }

  // Transfer path f_hat = A_t * C_a back into f_v.
  df_v += transfer_backward(f_v, centers_a, tau, addr_transfer, df_hat);

  if (grad_visual != nullptr) {
    if (grad_visual->weights.empty()) *grad_visual = Gradients::zeros_like(visual_encoder);
    backward(visual_encoder, cache_v, normalize_backward(raw_v, norms_v, df_v),
             *grad_visual);
  }
  if (grad_audio != nullptr) {
    if (grad_audio->weights.empty()) *grad_audio = Gradients::zeros_like(audio_encoder);
    backward(audio_encoder, cache_a, normalize_backward(raw_a, norms_a, df_a),
             *grad_audio);
    if (noisy)
      backward(audio_encoder, cache_an, normalize_backward(raw_an, norms_an, df_an),
               *grad_audio);
  }
  return eval;
}

// ---------------------------------------------------------------------------
// Training loop (Alg. 2).
// ---------------------------------------------------------------------------

namespace detail {

inline GeneratorBatch assemble_batch(const Corpus& corpus, const std::vector<int>& seq_ids) {
  const int t = corpus.config.frames_per_sequence;
  const int d = corpus.config.feature_dim;
  const int frames = t * static_cast<int>(seq_ids.size());
  GeneratorBatch batch;
  batch.x_v.resize(frames, d);
  batch.x_a.resize(frames, d);
  bool has_noisy = true;
  for (int id : seq_ids)
    if (!corpus.sequences[id].audio_noisy.has_value()) has_noisy = false;
  if (has_noisy) batch.x_a_noisy = Matrix(frames, d);
  batch.labels.resize(frames);
  int row = 0;
  for (int id : seq_ids) {
    const PairedSequence& seq = corpus.sequences[id];
    batch.x_v.middleRows(row, t) = seq.visual;
    batch.x_a.middleRows(row, t) = seq.audio;
    if (has_noisy) batch.x_a_noisy->middleRows(row, t) = *seq.audio_noisy;
    for (int i = 0; i < t; ++i) batch.labels[row + i] = seq.labels[i];
    row += t;
  }
  return batch;
}

inline std::vector<Vector> matrix_rows(const Matrix& m) {
  std::vector<Vector> rows;
  rows.reserve(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(m.row(i).transpose());
  return rows;
}

inline void ingest_features(TrainerState& state, const Matrix& f_v, const Matrix& f_a) {
  auto v_rows = matrix_rows(f_v);
  auto a_rows = matrix_rows(f_a);
  if (state.config.variant == TrainerVariant::PruningBaseline) {
    state.viseme_bank.ingest_batch_pruning_baseline(v_rows);
    state.phoneme_bank.ingest_batch_pruning_baseline(a_rows);
  } else {
    state.viseme_bank.ingest_batch(v_rows);
    state.phoneme_bank.ingest_batch(a_rows);
  }
}

}  // namespace detail

// Encodes the whole corpus with the current encoders (clean channels).
struct EncodedCorpus {
  Matrix visual;
  Matrix audio;
  std::vector<int> labels;
};

inline EncodedCorpus encode_corpus(const TrainerState& state, const Corpus& corpus) {
  const int t = corpus.config.frames_per_sequence;
  const int d = corpus.config.feature_dim;
  const int frames = corpus.total_frames();
  EncodedCorpus out;
  out.visual.resize(frames, d);
  out.audio.resize(frames, d);
  out.labels.resize(frames);
  int row = 0;
  for (const PairedSequence& seq : corpus.sequences) {
    out.visual.middleRows(row, t) = encode_frames(state.visual_encoder, seq.visual);
    out.audio.middleRows(row, t) = encode_frames(state.audio_encoder, seq.audio);
    for (int i = 0; i < t; ++i) out.labels[row + i] = seq.labels[i];
    row += t;
  }
  return out;
}

// Builds networks and primes both banks with one pass of encoded frames, so
// even an epochs=0 run yields a state whose banks can serve transfer.
inline TrainerState init_trainer(const TrainerConfig& config, const Corpus& corpus) {
  config.validate();
  if (corpus.sequences.empty()) throw DataError("init_trainer: empty corpus");
  if (config.uses_noisy_stream())
    for (const PairedSequence& seq : corpus.sequences)
      if (!seq.audio_noisy.has_value())
        throw DataError("init_trainer: the noisy stream requires a corpus with a noisy channel");

  TrainerState state;
  state.config = config;
  state.feature_dim = corpus.config.feature_dim;
  state.phoneme_count = corpus.config.phoneme_count;
  const int d = state.feature_dim;

  Rng net_rng(config.seed ^ 0xabcdef1234567890ull);
  // Both front-ends start from the same weights: raw visual and audio frames
  // already live in one prototype space, and a shared initial embedding is
  // the stand-in for co-trained front-ends.
  state.visual_encoder = DenseNetwork::xavier({d + 1, config.encoder_hidden, d}, net_rng,
                                              config.encoder_init_gain);
  state.audio_encoder = state.visual_encoder;
  state.proxy_head = DenseNetwork::xavier({3 * d, state.phoneme_count}, net_rng);
  state.statistic_network = DenseNetwork::xavier(
      {2 * d, config.statistic_hidden, config.statistic_hidden, 1}, net_rng);

  state.opt_visual = AdamState::for_network(state.visual_encoder, config.lr_generator);
  state.opt_audio = AdamState::for_network(state.audio_encoder, config.lr_generator);
  state.opt_proxy = AdamState::for_network(state.proxy_head, config.lr_generator);
  state.opt_statistic =
      AdamState::for_network(state.statistic_network, config.lr_discriminator);
  state.rng.seed(config.seed);

  BankConfig bank_config;
  bank_config.cluster_count =
      config.bank_clusters > 0 ? config.bank_clusters : state.phoneme_count;
  bank_config.max_cluster_size = config.bank_max_size;
  bank_config.init_buffer_min = config.bank_init_buffer;
  bank_config.seed = config.seed ^ 0x5bd1e995;
  if (bank_config.effective_init_buffer() > corpus.total_frames())
    throw DataError("init_trainer: corpus smaller than the bank init buffer");
  state.viseme_bank = ClusterBank(bank_config);
  BankConfig audio_bank_config = bank_config;
  audio_bank_config.seed = bank_config.seed ^ 0x27d4eb2f;
  state.phoneme_bank = ClusterBank(audio_bank_config);

  // Priming pass: the epoch-0 scheduled bank update.
  const int n_seq = static_cast<int>(corpus.sequences.size());
  for (int start = 0; start < n_seq; start += config.batch_sequences) {
    std::vector<int> ids;
    for (int i = start; i < std::min(start + config.batch_sequences, n_seq); ++i)
      ids.push_back(i);
    GeneratorBatch batch = detail::assemble_batch(corpus, ids);
    Matrix f_v = encode_frames(state.visual_encoder, batch.x_v);
    Matrix f_a = encode_frames(state.audio_encoder, batch.x_a);
    detail::ingest_features(state, f_v, f_a);
  }
  if (!state.viseme_bank.initialized() || !state.phoneme_bank.initialized())
    throw DataError("init_trainer: banks failed to initialize");
  return state;
}

namespace detail {

// Scheduled bank update: rebuilds both banks from the current encoder
// features by re-running the streaming clustering over one corpus pass.
// Incremental Lloyd steps on caches of long-stale features cannot follow the
// encoders once their geometry moves, so the update refreshes the whole bank.
inline void rebuild_banks(TrainerState& state, const Corpus& corpus, int epoch) {
  const TrainerConfig& cfg = state.config;
  BankConfig bank_config = state.viseme_bank.config();
  bank_config.seed = cfg.seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(epoch + 1));
  state.viseme_bank = ClusterBank(bank_config);
  BankConfig audio_config = bank_config;
  audio_config.seed = bank_config.seed ^ 0x27d4eb2f;
  state.phoneme_bank = ClusterBank(audio_config);

  const int n_seq = static_cast<int>(corpus.sequences.size());
  for (int start = 0; start < n_seq; start += cfg.batch_sequences) {
    std::vector<int> ids;
    for (int i = start; i < std::min(start + cfg.batch_sequences, n_seq); ++i)
      ids.push_back(i);
    GeneratorBatch batch = assemble_batch(corpus, ids);
    Matrix f_v = encode_frames(state.visual_encoder, batch.x_v);
    Matrix f_a = encode_frames(state.audio_encoder, batch.x_a);
    ingest_features(state, f_v, f_a);
  }
  if (!state.viseme_bank.initialized() || !state.phoneme_bank.initialized())
    throw DataError("bank rebuild failed to initialize");
}

}  // namespace detail

inline void train_epochs(TrainerState& state, const Corpus& corpus, int epochs) {
  const TrainerConfig& cfg = state.config;
  const double lambda_gan = cfg.effective_lambda_gan();
  const int n_seq = static_cast<int>(corpus.sequences.size());

  for (int e = 0; e < epochs; ++e) {
    const int epoch = state.epochs_completed;
    // Trainable front-ends shift the feature distribution, so their scheduled
    // update rebuilds the banks on the current geometry. The clustering-only
    // variants have stationary features and stream every batch instead,
    // which is the plain Alg. 1 regime.
    const bool bank_epoch = !cfg.freeze_banks && cfg.encoders_trainable() &&
                            epoch > 0 && epoch % cfg.bank_update_interval_epochs == 0;
    const bool stream_banks = !cfg.freeze_banks && !cfg.encoders_trainable();
    if (bank_epoch) detail::rebuild_banks(state, corpus, epoch);

    std::vector<int> order(n_seq);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n_seq - 1; i > 0; --i) {
      std::uniform_int_distribution<int> pick(0, i);
      std::swap(order[i], order[pick(state.rng)]);
    }

    EpochMetrics metrics;
    metrics.epoch = epoch;
    int batches = 0;
    for (int start = 0; start < n_seq; start += cfg.batch_sequences) {
      std::vector<int> ids(order.begin() + start,
                           order.begin() + std::min(start + cfg.batch_sequences, n_seq));
      GeneratorBatch batch = detail::assemble_batch(corpus, ids);
      const int frames = static_cast<int>(batch.x_v.rows());
      if (frames < 2) continue;
      if (cfg.uses_noisy_stream())
        batch.feed_noisy = uniform_real(state.rng, 0.0, 1.0) < cfg.noisy_probability;

      if (stream_banks) {
        Matrix f_v = encode_frames(state.visual_encoder, batch.x_v);
        Matrix f_a = encode_frames(state.audio_encoder, batch.x_a);
        detail::ingest_features(state, f_v, f_a);
      }

      // Discriminator ascent with the generator detached.
      if (lambda_gan > 0.0) {
        Matrix f_v = encode_frames(state.visual_encoder, batch.x_v);
        Matrix f_a = encode_frames(state.audio_encoder, batch.x_a);
        auto [s_v, s_a] =
            symbol_sequences(f_v, f_a, state.viseme_bank, state.phoneme_bank);
        AddressingMatrix addr =
            addressing_scores(f_v, state.phoneme_bank.centers(), cfg.temperature);
        Matrix f_hat = restore_audio(addr, state.phoneme_bank.centers());
        ShufflePlan plan = make_shuffle_plan(frames, state.rng);
        Gradients stat_grads = Gradients::zeros_like(state.statistic_network);
        DiscriminatorEval d_eval =
            evaluate_discriminator(state.statistic_network, f_v, f_a, s_v, s_a, f_hat,
                                   plan, &stat_grads);
        stat_grads.scale(-1.0);  // ascend L_GAN
        adam_step(state.statistic_network, stat_grads, state.opt_statistic);
        metrics.l_gan_d += d_eval.l_gan;
        metrics.js_mi_symbols += d_eval.js_symbols;
      }

      // Generator descent with the discriminator frozen.
      {
        ShufflePlan plan;
        if (lambda_gan > 0.0) plan = make_shuffle_plan(frames, state.rng);
        Gradients g_visual, g_audio, g_proxy;
        GeneratorEval g_eval = evaluate_generator(
            cfg, state.visual_encoder, state.audio_encoder, state.proxy_head,
            state.statistic_network, state.viseme_bank.centers(),
            state.phoneme_bank.centers(), batch, plan,
            cfg.encoders_trainable() ? &g_visual : nullptr,
            cfg.encoders_trainable() ? &g_audio : nullptr, &g_proxy);
        if (cfg.encoders_trainable()) {
          adam_step(state.visual_encoder, g_visual, state.opt_visual);
          adam_step(state.audio_encoder, g_audio, state.opt_audio);
        }
        adam_step(state.proxy_head, g_proxy, state.opt_proxy);
        metrics.l_proxy += g_eval.l_proxy;
        metrics.l_g += g_eval.l_g;
        metrics.l_rec += g_eval.l_rec;
        metrics.l_var += g_eval.l_var;
      }
      ++batches;
    }

    if (batches > 0) {
      metrics.l_proxy /= batches;
      metrics.l_gan_d /= batches;
      metrics.l_g /= batches;
      metrics.l_rec /= batches;
      metrics.l_var /= batches;
      metrics.js_mi_symbols /= batches;
    }

    // Epoch-level restoration quality under a nearest-class-mean referee.
    EncodedCorpus encoded = encode_corpus(state, corpus);
    AddressingMatrix addr =
        addressing_scores(encoded.visual, state.phoneme_bank.centers(), cfg.temperature);
    Matrix restored = restore_audio(addr, state.phoneme_bank.centers());
    NearestMeanReferee referee =
        NearestMeanReferee::fit(encoded.audio, encoded.labels, state.phoneme_count);
    metrics.phoneme_match_acc =
        100.0 * classification_accuracy(referee.predict(restored),
                                        referee.predict(encoded.audio));

    state.metrics.push_back(metrics);
    ++state.epochs_completed;
  }
}

inline TrainerState train(const TrainerConfig& config, const Corpus& corpus) {
  TrainerState state = init_trainer(config, corpus);
  train_epochs(state, corpus, config.epochs);
  return state;
}

// ---------------------------------------------------------------------------
// Metric log and checkpoints.
// ---------------------------------------------------------------------------

inline std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::string out = "epoch,l_proxy,l_gan_d,l_g,l_rec,l_var,js_mi_symbols,phoneme_match_acc\n";
  char buf[256];
  for (const EpochMetrics& m : metrics) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.epoch,
                  m.l_proxy, m.l_gan_d, m.l_g, m.l_rec, m.l_var, m.js_mi_symbols,
                  m.phoneme_match_acc);
    out += buf;
  }
  return out;
}

inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const TrainerState& state, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("save_checkpoint: cannot create " + dir.string());

  nlohmann::json j;
  j["version"] = kCheckpointVersion;
  j["epochs_completed"] = state.epochs_completed;
  j["feature_dim"] = state.feature_dim;
  j["phoneme_count"] = state.phoneme_count;
  const TrainerConfig& c = state.config;
  j["config"] = {{"lambda_gan", c.lambda_gan},
                 {"lambda_rec", c.lambda_rec},
                 {"lambda_var", c.lambda_var},
                 {"bank_update_interval_epochs", c.bank_update_interval_epochs},
                 {"epochs", c.epochs},
                 {"batch_sequences", c.batch_sequences},
                 {"lr_generator", c.lr_generator},
                 {"lr_discriminator", c.lr_discriminator},
                 {"seed", c.seed},
                 {"temperature", c.temperature},
                 {"bank_clusters", c.bank_clusters},
                 {"bank_max_size", c.bank_max_size},
                 {"bank_init_buffer", c.bank_init_buffer},
                 {"encoder_hidden", c.encoder_hidden},
                 {"statistic_hidden", c.statistic_hidden},
                 {"encoder_init_gain", c.encoder_init_gain},
                 {"noisy_probability", c.noisy_probability},
                 {"noisy_stream", c.noisy_stream},
                 {"variant", variant_name(c.variant)},
                 {"freeze_banks", c.freeze_banks},
                 {"literal_var_sign", c.literal_var_sign}};
  write_text_file(dir / "trainer.json", j.dump(2) + "\n");

  save_network(state.visual_encoder, dir / "visual_encoder");
  save_network(state.audio_encoder, dir / "audio_encoder");
  save_network(state.proxy_head, dir / "proxy_head");
  save_network(state.statistic_network, dir / "statistic_network");
  state.viseme_bank.save(dir / "viseme_bank");
  state.phoneme_bank.save(dir / "phoneme_bank");
}

inline TrainerState load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json j = nlohmann::json::parse(read_text_file(dir / "trainer.json"));
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion)
    throw ConfigError("checkpoint version " + std::to_string(version) +
                      " is incompatible with supported version " +
                      std::to_string(kCheckpointVersion));

  TrainerState state;
  state.epochs_completed = j.at("epochs_completed").get<int>();
  state.feature_dim = j.at("feature_dim").get<int>();
  state.phoneme_count = j.at("phoneme_count").get<int>();
  const auto& c = j.at("config");
  state.config.lambda_gan = c.at("lambda_gan").get<double>();
  state.config.lambda_rec = c.at("lambda_rec").get<double>();
  state.config.lambda_var = c.at("lambda_var").get<double>();
  state.config.bank_update_interval_epochs =
      c.at("bank_update_interval_epochs").get<int>();
  state.config.epochs = c.at("epochs").get<int>();
  state.config.batch_sequences = c.at("batch_sequences").get<int>();
  state.config.lr_generator = c.at("lr_generator").get<double>();
  state.config.lr_discriminator = c.at("lr_discriminator").get<double>();
  state.config.seed = c.at("seed").get<std::uint64_t>();
  state.config.temperature = c.at("temperature").get<double>();
  state.config.bank_clusters = c.at("bank_clusters").get<int>();
  state.config.bank_max_size = c.at("bank_max_size").get<int>();
  state.config.bank_init_buffer = c.at("bank_init_buffer").get<int>();
  state.config.encoder_hidden = c.at("encoder_hidden").get<int>();
  state.config.statistic_hidden = c.at("statistic_hidden").get<int>();
  state.config.encoder_init_gain = c.at("encoder_init_gain").get<double>();
  state.config.noisy_probability = c.at("noisy_probability").get<double>();
  state.config.noisy_stream = c.at("noisy_stream").get<bool>();
  state.config.variant = variant_from_name(c.at("variant").get<std::string>());
  state.config.freeze_banks = c.at("freeze_banks").get<bool>();
  state.config.literal_var_sign = c.at("literal_var_sign").get<bool>();

  state.visual_encoder = load_network(dir / "visual_encoder");
  state.audio_encoder = load_network(dir / "audio_encoder");
  state.proxy_head = load_network(dir / "proxy_head");
  state.statistic_network = load_network(dir / "statistic_network");
  state.viseme_bank = ClusterBank::load(dir / "viseme_bank");
  state.phoneme_bank = ClusterBank::load(dir / "phoneme_bank");
  state.rng.seed(state.config.seed);
  return state;
}

// ---------------------------------------------------------------------------
// Post-training evaluation (Table 6 / Fig. 5 / Fig. 8 / Fig. 3 analogs).
// ---------------------------------------------------------------------------

struct RunReport {
  double phoneme_match_acc = 0.0;   // percent, oracle referee
  double oracle_clean_accuracy = 0.0;
  double mapping_accuracy = 0.0;    // percent, Hungarian row match
  double symbol_mi_nats = 0.0;      // exact MI of the paired quantizations
  MappingConfusion confusion;
  CoverageReport phoneme_coverage;  // audio feature space
  CoverageReport viseme_coverage;   // visual feature space
};

namespace detail {

// Per-class feature-space prototypes (class means) and scale, where scale is
// the root mean squared per-coordinate deviation.
inline void class_geometry(const Matrix& features, const std::vector<int>& labels,
                           int num_classes, Matrix& prototypes, Vector& spreads) {
  const Eigen::Index d = features.cols();
  prototypes = Matrix::Zero(num_classes, d);
  spreads = Vector::Zero(num_classes);
  std::vector<int> counts(num_classes, 0);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    prototypes.row(labels[i]) += features.row(i);
    ++counts[labels[i]];
  }
  for (int c = 0; c < num_classes; ++c)
    if (counts[c] > 0) prototypes.row(c) /= static_cast<double>(counts[c]);
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    spreads(labels[i]) += (features.row(i) - prototypes.row(labels[i])).squaredNorm();
  for (int c = 0; c < num_classes; ++c)
    if (counts[c] > 0)
      spreads(c) = std::sqrt(spreads(c) / (static_cast<double>(counts[c]) * d));
}

}  // namespace detail

inline RunReport evaluate_trained(const TrainerState& state, const Corpus& eval_corpus,
                                  const OracleConfig& oracle_config = {}) {
  if (!state.viseme_bank.initialized() || !state.phoneme_bank.initialized())
    throw StateError("evaluate_trained: banks must be initialized");
  EncodedCorpus encoded = encode_corpus(state, eval_corpus);
  const int num_classes = state.phoneme_count;

  RunReport report;
  OracleClassifier oracle = train_oracle_classifier(encoded.audio, encoded.labels,
                                                    num_classes, oracle_config);
  report.oracle_clean_accuracy = oracle.clean_accuracy;

  AddressingMatrix addr = addressing_scores(
      encoded.visual, state.phoneme_bank.centers(), state.config.temperature);
  Matrix restored = restore_audio(addr, state.phoneme_bank.centers());
  report.phoneme_match_acc = phoneme_match_accuracy(oracle, restored, encoded.audio);

  report.confusion =
      mapping_confusion(state.viseme_bank, state.phoneme_bank, encoded.visual,
                        encoded.audio, encoded.labels, num_classes);
  report.mapping_accuracy =
      100.0 * hungarian_row_match_accuracy(report.confusion.phoneme_center_vs_viseme_center);
  report.symbol_mi_nats =
      exact_discrete_mi(report.confusion.phoneme_center_vs_viseme_center.counts);

  Matrix prototypes;
  Vector spreads;
  detail::class_geometry(encoded.audio, encoded.labels, num_classes, prototypes, spreads);
  report.phoneme_coverage = coverage_report(state.phoneme_bank, prototypes, spreads);
  detail::class_geometry(encoded.visual, encoded.labels, num_classes, prototypes, spreads);
  report.viseme_coverage = coverage_report(state.viseme_bank, prototypes, spreads);
  return report;
}

inline nlohmann::json coverage_to_json(const CoverageReport& coverage) {
  nlohmann::json j;
  j["covered_count"] = coverage.covered_count;
  j["size_ratio"] = coverage.size_ratio;
  nlohmann::json entries = nlohmann::json::array();
  for (const CoverageEntry& e : coverage.per_class)
    entries.push_back({{"class_id", e.class_id},
                       {"nearest_center", e.nearest_center},
                       {"distance", e.distance},
                       {"covered", e.covered}});
  j["per_class"] = entries;
  return j;
}

inline nlohmann::json confusion_to_json(const ConfusionMatrix& confusion) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < confusion.counts.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < confusion.counts.cols(); ++j)
      row.push_back(confusion.counts(i, j));
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json report_to_json(const RunReport& report) {
  nlohmann::json j;
  j["phoneme_match_acc"] = report.phoneme_match_acc;
  j["oracle_clean_accuracy"] = report.oracle_clean_accuracy;
  j["mapping_accuracy"] = report.mapping_accuracy;
  j["symbol_mi_nats"] = report.symbol_mi_nats;
  j["confusion_label_vs_phoneme_center"] =
      confusion_to_json(report.confusion.label_vs_phoneme_center);
  j["confusion_phoneme_center_vs_viseme_center"] =
      confusion_to_json(report.confusion.phoneme_center_vs_viseme_center);
  j["phoneme_coverage"] = coverage_to_json(report.phoneme_coverage);
  j["viseme_coverage"] = coverage_to_json(report.viseme_coverage);
  return j;
}

}  // namespace univpm
