#include <univpm/mi.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

using namespace univpm;

namespace {

double entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

}  // namespace

TEST_CASE("exact MI of a product-form table is zero") {
  Eigen::MatrixXi counts(2, 2);
  counts << 1, 1, 1, 1;
  REQUIRE(std::abs(exact_discrete_mi(counts)) < 1e-12);

  Eigen::MatrixXi outer(3, 4);
  int row_w[3] = {1, 2, 3};
  int col_w[4] = {2, 1, 4, 3};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) outer(i, j) = row_w[i] * col_w[j];
  REQUIRE(std::abs(exact_discrete_mi(outer)) < 1e-12);
}

TEST_CASE("exact MI of a diagonal binary coupling is ln 2") {
  Eigen::MatrixXi counts(2, 2);
  counts << 1, 0, 0, 1;
  REQUIRE(exact_discrete_mi(counts) == Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("exact MI matches the entropy decomposition on random tables") {
  Rng rng(4);
  for (int instance = 0; instance < 25; ++instance) {
    Eigen::MatrixXi counts(4, 4);
    long long total = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        counts(i, j) = uniform_index(rng, 20);
        total += counts(i, j);
      }
    if (total == 0) counts(0, 0) = 1, total = 1;

    std::vector<double> px(4, 0.0), py(4, 0.0), pxy;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double p = counts(i, j) / static_cast<double>(total);
        px[i] += p;
        py[j] += p;
        pxy.push_back(p);
      }
    double expected = entropy(px) + entropy(py) - entropy(pxy);
    REQUIRE(exact_discrete_mi(counts) == Catch::Approx(expected).margin(1e-12));

    // Transpose invariance.
    Eigen::MatrixXi t = counts.transpose();
    REQUIRE(std::abs(exact_discrete_mi(counts) - exact_discrete_mi(t)) < 1e-12);

    // Range bound.
    REQUIRE(exact_discrete_mi(counts) >= -1e-12);
    REQUIRE(exact_discrete_mi(counts) <= std::log(4.0) + 1e-12);
  }
}

TEST_CASE("exact MI rejects empty and negative tables") {
  REQUIRE_THROWS_AS(exact_discrete_mi(Eigen::MatrixXi::Zero(3, 3)), DataError);
  Eigen::MatrixXi bad(1, 2);
  bad << 1, -1;
  REQUIRE_THROWS_AS(exact_discrete_mi(bad), DataError);
}

TEST_CASE("shuffle_marginal with two rows swaps them") {
  PairedBatch batch;
  batch.x = Matrix::Random(2, 3);
  batch.y = Matrix::Zero(2, 2);
  batch.y << 1, 2, 3, 4;
  Rng rng(5);
  PairedBatch shuffled = shuffle_marginal(batch, rng);
  REQUIRE(shuffled.x == batch.x);
  REQUIRE(shuffled.y(0, 0) == 3.0);
  REQUIRE(shuffled.y(1, 0) == 1.0);
}

TEST_CASE("shuffle_marginal preserves the multiset of rows and never returns identity") {
  Rng rng(6);
  PairedBatch batch;
  batch.x = Matrix::Random(7, 2);
  batch.y = Matrix::Random(7, 3);
  for (int round = 0; round < 50; ++round) {
    PairedBatch shuffled = shuffle_marginal(batch, rng);
    REQUIRE(shuffled.y != batch.y);
    std::multiset<double> original, permuted;
    for (int i = 0; i < 7; ++i) {
      original.insert(batch.y(i, 0));
      permuted.insert(shuffled.y(i, 0));
    }
    REQUIRE(original == permuted);
  }
  PairedBatch tiny;
  tiny.x = Matrix::Random(1, 2);
  tiny.y = Matrix::Random(1, 2);
  REQUIRE_THROWS_AS(shuffle_marginal(tiny, rng), DataError);
}

TEST_CASE("non-identity permutations distribute rows nearly uniformly") {
  Rng rng(7);
  const int m = 5, rounds = 10000;
  std::vector<std::vector<int>> hits(m, std::vector<int>(m, 0));
  for (int round = 0; round < rounds; ++round) {
    auto perm = random_non_identity_permutation(m, rng);
    for (int i = 0; i < m; ++i) ++hits[i][perm[i]];
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double freq = hits[i][j] / static_cast<double>(rounds);
      REQUIRE(std::abs(freq - 0.2) < 0.02);
    }
}

TEST_CASE("DV estimate of a constant network is zero") {
  DenseNetwork net = DenseNetwork::zeros({4, 1});
  net.biases[0](0) = 2.7;  // T == 2.7 everywhere
  PairedBatch joint;
  joint.x = Matrix::Random(16, 2);
  joint.y = Matrix::Random(16, 2);
  Rng rng(8);
  PairedBatch marginal = shuffle_marginal(joint, rng);
  MiEstimate est = dv_mi_estimate(net, joint, marginal);
  REQUIRE(std::abs(est.value) < 1e-12);
  REQUIRE(est.batch_size == 16);
}

TEST_CASE("DV estimate is invariant to constant shifts of T") {
  Rng rng(9);
  DenseNetwork net = DenseNetwork::xavier({4, 8, 1}, rng);
  PairedBatch joint;
  joint.x = Matrix::Random(32, 2);
  joint.y = Matrix::Random(32, 2);
  PairedBatch marginal = shuffle_marginal(joint, rng);

  double base = dv_mi_estimate(net, joint, marginal).value;
  net.biases.back()(0) += 13.5;
  double shifted = dv_mi_estimate(net, joint, marginal).value;
  REQUIRE(std::abs(base - shifted) < 1e-9);
}

TEST_CASE("JS estimate of the zero network is exactly -2 ln 2") {
  DenseNetwork net = DenseNetwork::zeros({6, 8, 1});
  PairedBatch joint;
  joint.x = Matrix::Random(10, 3);
  joint.y = Matrix::Random(10, 3);
  Rng rng(10);
  PairedBatch marginal = shuffle_marginal(joint, rng);
  MiEstimate est = js_mi_estimate(net, joint, marginal);
  REQUIRE(est.value == Catch::Approx(-2.0 * std::log(2.0)).margin(1e-12));
}

TEST_CASE("JS estimate approaches zero from below for a separating statistic") {
  // Data: y = x + 10 on distinct integer x. A hand-built two-hidden-unit
  // network computes T = k - slope * |y - x - 10|, which is large and
  // positive on the joint and very negative on every non-identity pairing.
  const int m = 8;
  PairedBatch joint;
  joint.x.resize(m, 1);
  joint.y.resize(m, 1);
  for (int i = 0; i < m; ++i) {
    joint.x(i, 0) = 2.0 * i;
    joint.y(i, 0) = 2.0 * i + 10.0;
  }
  Rng rng(11);
  PairedBatch marginal = shuffle_marginal(joint, rng);

  DenseNetwork net = DenseNetwork::zeros({2, 2, 1});
  // Hidden: relu(y - x - 10) and relu(x + 10 - y).
  net.weights[0] << -1.0, 1.0, 1.0, -1.0;
  net.biases[0] << -10.0, 10.0;
  net.weights[1] << -300.0, -300.0;
  net.biases[1] << 30.0;

  Vector t_joint = statistic_outputs(net, joint);
  REQUIRE(t_joint.minCoeff() == Catch::Approx(30.0).margin(1e-12));
  MiEstimate est = js_mi_estimate(net, joint, marginal);
  REQUIRE(est.value < 0.0);
  REQUIRE(est.value > -1e-6);
}

TEST_CASE("trained DV estimate stays under the exact MI plus slack") {
  // Discrete pair: X uniform over {0..3}, Y = X with prob .7, else uniform.
  Rng rng(12);
  const int n = 4000;
  Matrix x(n, 1), y(n, 1);
  Eigen::MatrixXi counts = Eigen::MatrixXi::Zero(4, 4);
  for (int i = 0; i < n; ++i) {
    int xi = uniform_index(rng, 4);
    int yi = uniform_real(rng, 0.0, 1.0) < 0.7 ? xi : uniform_index(rng, 4);
    x(i, 0) = xi;
    y(i, 0) = yi;
    counts(xi, yi) += 1;
  }
  double exact = exact_discrete_mi(counts);

  DenseNetwork net = DenseNetwork::xavier({2, 32, 32, 1}, rng);
  MiTrainConfig cfg;
  cfg.objective = MiObjective::DonskerVaradhan;
  cfg.steps = 800;
  cfg.batch_size = 256;
  cfg.seed = 13;
  double estimate = train_mi_estimator(net, x, y, cfg);
  REQUIRE(estimate <= exact + 0.05);
  REQUIRE(estimate > 0.2 * exact);  // the estimator actually learned something
}

TEST_CASE("estimators reject dimension mismatches") {
  DenseNetwork net = DenseNetwork::zeros({4, 1});
  PairedBatch joint;
  joint.x = Matrix::Random(8, 3);
  joint.y = Matrix::Random(8, 3);
  Rng rng(14);
  PairedBatch marginal = shuffle_marginal(joint, rng);
  REQUIRE_THROWS_AS(dv_mi_estimate(net, joint, marginal), ShapeError);

  DenseNetwork vec_out = DenseNetwork::zeros({6, 2});
  REQUIRE_THROWS_AS(js_mi_estimate(vec_out, joint, marginal), ShapeError);
}
