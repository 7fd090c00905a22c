#pragma once

#include <univpm/common.hpp>
#include <univpm/io.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace univpm {

// Numerically stable softplus: log(1 + e^z) without overflow for large |z|.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

enum class Activation { Relu, Tanh, Identity };

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "relu";
}

inline Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::Relu;
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  throw ConfigError("unknown activation: " + name);
}

// Plain fully connected network. Rows of the data matrices are samples;
// layer l maps width dims[l] to dims[l+1] via X * W_l + b_l. The hidden
// nonlinearity is applied after every layer except the last (identity head).
struct DenseNetwork {
  std::vector<int> layer_dims;
  std::vector<Matrix> weights;  // dims[l] x dims[l+1]
  std::vector<Vector> biases;   // dims[l+1]
  Activation hidden_activation = Activation::Relu;

  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  int layer_count() const { return static_cast<int>(weights.size()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l)
      n += static_cast<std::size_t>(weights[l].size()) + biases[l].size();
    return n;
  }

  static DenseNetwork zeros(const std::vector<int>& dims,
                            Activation hidden = Activation::Relu) {
    if (dims.size() < 2) throw ConfigError("DenseNetwork: need at least two layer dims");
    DenseNetwork net;
    net.layer_dims = dims;
    net.hidden_activation = hidden;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      net.weights.push_back(Matrix::Zero(dims[l], dims[l + 1]));
      net.biases.push_back(Vector::Zero(dims[l + 1]));
    }
    return net;
  }

  // Xavier-uniform initialization, optionally scaled by `gain`. Biases get a
  // small uniform init so no rectifier layer can emit an exactly zero row.
  static DenseNetwork xavier(const std::vector<int>& dims, Rng& rng, double gain = 1.0,
                             Activation hidden = Activation::Relu) {
    DenseNetwork net = zeros(dims, hidden);
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      double limit = gain * std::sqrt(6.0 / (dims[l] + dims[l + 1]));
      for (Eigen::Index i = 0; i < net.weights[l].rows(); ++i)
        for (Eigen::Index j = 0; j < net.weights[l].cols(); ++j)
          net.weights[l](i, j) = uniform_real(rng, -limit, limit);
      for (Eigen::Index j = 0; j < net.biases[l].size(); ++j)
        net.biases[l](j) = uniform_real(rng, -0.05, 0.05);
    }
    return net;
  }
};

struct ForwardCache {
  // activations[0] is the input; activations[l+1] the output of layer l.
  std::vector<Matrix> activations;
  // pre_activations[l] is X*W_l + b_l for layer l.
  std::vector<Matrix> pre_activations;
  bool valid = false;
};

inline Matrix forward(const DenseNetwork& net, const Matrix& input,
                      ForwardCache* cache = nullptr) {
  if (input.cols() != net.input_dim())
    throw ShapeError("forward: input has " + std::to_string(input.cols()) +
                     " columns, expected " + std::to_string(net.input_dim()));
  if (cache != nullptr) {
    cache->activations.clear();
    cache->pre_activations.clear();
    cache->activations.push_back(input);
  }
  Matrix x = input;
  const int layers = net.layer_count();
  for (int l = 0; l < layers; ++l) {
    Matrix z = (x * net.weights[l]).rowwise() + net.biases[l].transpose();
    if (cache != nullptr) cache->pre_activations.push_back(z);
    if (l + 1 < layers) {
      switch (net.hidden_activation) {
        case Activation::Relu: x = z.cwiseMax(0.0); break;
        case Activation::Tanh: x = z.array().tanh().matrix(); break;
        case Activation::Identity: x = z; break;
      }
    } else {
      x = z;  // identity output head
    }
    if (cache != nullptr) cache->activations.push_back(x);
  }
  if (cache != nullptr) cache->valid = true;
  return x;
}

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static Gradients zeros_like(const DenseNetwork& net) {
    Gradients g;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      g.weights.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
      g.biases.push_back(Vector::Zero(net.biases[l].size()));
    }
    return g;
  }

  void scale(double s) {
    for (auto& w : weights) w *= s;
    for (auto& b : biases) b *= s;
  }
};

// Reverse accumulation of a scalar loss whose gradient with respect to the
// network output is `output_gradient`. Parameter gradients are accumulated
// into `grads` (so several loss paths can share one Gradients); the return
// value is the gradient with respect to the input matrix.
inline Matrix backward(const DenseNetwork& net, const ForwardCache& cache,
                       const Matrix& output_gradient, Gradients& grads) {
  if (!cache.valid) throw StateError("backward: forward cache missing");
  if (grads.weights.empty()) grads = Gradients::zeros_like(net);
  const int layers = net.layer_count();
  if (output_gradient.rows() != cache.activations.back().rows() ||
      output_gradient.cols() != cache.activations.back().cols())
    throw ShapeError("backward: output gradient shape mismatch");

  Matrix delta = output_gradient;
  for (int l = layers - 1; l >= 0; --l) {
    if (l + 1 < layers) {
      switch (net.hidden_activation) {
        case Activation::Relu:
          delta = delta.cwiseProduct(
              (cache.pre_activations[l].array() > 0.0).cast<double>().matrix());
          break;
        case Activation::Tanh: {
          Matrix t = cache.pre_activations[l].array().tanh().matrix();
          delta = delta.cwiseProduct((1.0 - t.array().square()).matrix());
          break;
        }
        case Activation::Identity:
          break;
      }
    }
    grads.weights[l] += cache.activations[l].transpose() * delta;
    grads.biases[l] += delta.colwise().sum().transpose();
    if (l > 0) delta = delta * net.weights[l].transpose();
  }
  return delta * net.weights[0].transpose();
}

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Matrix> m_weights, v_weights;
  std::vector<Vector> m_biases, v_biases;
  long step = 0;

  static AdamState for_network(const DenseNetwork& net, double lr) {
    AdamState s;
    s.learning_rate = lr;
    for (std::size_t l = 0; l < net.weights.size(); ++l) {
      s.m_weights.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
      s.v_weights.push_back(Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
      s.m_biases.push_back(Vector::Zero(net.biases[l].size()));
      s.v_biases.push_back(Vector::Zero(net.biases[l].size()));
    }
    return s;
  }
};

// Bias-corrected Adam update (Kingma & Ba).
inline void adam_step(DenseNetwork& net, const Gradients& grads, AdamState& state) {
  if (grads.weights.size() != net.weights.size())
    throw ShapeError("adam_step: gradient layer count mismatch");
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    if (grads.weights[l].rows() != net.weights[l].rows() ||
        grads.weights[l].cols() != net.weights[l].cols())
      throw ShapeError("adam_step: weight gradient shape mismatch");
    state.m_weights[l] = b1 * state.m_weights[l] + (1.0 - b1) * grads.weights[l];
    state.v_weights[l] =
        b2 * state.v_weights[l] + (1.0 - b2) * grads.weights[l].cwiseProduct(grads.weights[l]);
    Matrix m_hat = state.m_weights[l] / corr1;
    Matrix v_hat = state.v_weights[l] / corr2;
    net.weights[l] -=
        state.learning_rate *
        m_hat.cwiseQuotient(v_hat.cwiseSqrt().array().matrix() +
                            Matrix::Constant(v_hat.rows(), v_hat.cols(), state.epsilon));

    state.m_biases[l] = b1 * state.m_biases[l] + (1.0 - b1) * grads.biases[l];
    state.v_biases[l] =
        b2 * state.v_biases[l] + (1.0 - b2) * grads.biases[l].cwiseProduct(grads.biases[l]);
    Vector mb_hat = state.m_biases[l] / corr1;
    Vector vb_hat = state.v_biases[l] / corr2;
    net.biases[l] -= state.learning_rate *
                     mb_hat.cwiseQuotient(vb_hat.cwiseSqrt() +
                                          Vector::Constant(vb_hat.size(), state.epsilon));
  }
}

// Mean softmax cross-entropy over rows of `logits` against integer labels.
// When `logit_gradients` is non-null it receives d(mean CE)/d(logits).
inline double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels,
                                    Matrix* logit_gradients = nullptr) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size())
    throw ShapeError("softmax_cross_entropy: label count mismatch");
  const Eigen::Index m = logits.rows(), k = logits.cols();
  double loss = 0.0;
  if (logit_gradients != nullptr) logit_gradients->resize(m, k);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw DataError("softmax_cross_entropy: label out of range");
    double mx = logits.row(i).maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) denom += std::exp(logits(i, j) - mx);
    double log_denom = mx + std::log(denom);
    loss += log_denom - logits(i, labels[i]);
    if (logit_gradients != nullptr) {
      for (Eigen::Index j = 0; j < k; ++j)
        (*logit_gradients)(i, j) = std::exp(logits(i, j) - log_denom) / m;
      (*logit_gradients)(i, labels[i]) -= 1.0 / m;
    }
  }
  return loss / m;
}

inline std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best;
    logits.row(i).maxCoeff(&best);
    out[i] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON shape manifest + raw little-endian float64 blob.
// ---------------------------------------------------------------------------

inline void save_network(const DenseNetwork& net, const std::filesystem::path& path_prefix) {
  nlohmann::json manifest;
  manifest["layer_dims"] = net.layer_dims;
  manifest["hidden_activation"] = activation_name(net.hidden_activation);
  write_text_file(path_prefix.string() + ".json", manifest.dump(2) + "\n");
  auto out = open_output(path_prefix.string() + ".bin");
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    write_f64_matrix(out, net.weights[l]);
    write_f64_matrix(out, net.biases[l].transpose());
  }
}

inline DenseNetwork load_network(const std::filesystem::path& path_prefix) {
  nlohmann::json manifest =
      nlohmann::json::parse(read_text_file(path_prefix.string() + ".json"));
  auto dims = manifest.at("layer_dims").get<std::vector<int>>();
  DenseNetwork net = DenseNetwork::zeros(
      dims, activation_from_name(manifest.at("hidden_activation").get<std::string>()));
  auto in = open_input(path_prefix.string() + ".bin");
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    net.weights[l] = read_f64_matrix(in, dims[l], dims[l + 1]);
    net.biases[l] = read_f64_matrix(in, 1, dims[l + 1]).transpose();
  }
  return net;
}

}  // namespace univpm
