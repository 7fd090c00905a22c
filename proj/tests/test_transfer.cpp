#include <univpm/transfer.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace univpm;

TEST_CASE("single-center addressing is the all-ones column") {
  Matrix frames = Matrix::Random(5, 3);
  Matrix centers = Matrix::Random(1, 3);
  AddressingMatrix a = addressing_scores(frames, centers, 0.1);
  REQUIRE(a.probs.rows() == 5);
  REQUIRE(a.probs.cols() == 1);
  for (int i = 0; i < 5; ++i) REQUIRE(a.probs(i, 0) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("a frame at equal angle from two centers splits evenly") {
  Matrix centers(2, 2);
  centers << 1, 0, 0, 1;
  Matrix frame(1, 2);
  frame << 1, 1;  // 45 degrees from both
  AddressingMatrix a = addressing_scores(frame, centers, 0.1);
  REQUIRE(a.probs(0, 0) == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(a.probs(0, 1) == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("low temperature sharpens onto the argmax-cosine center") {
  Rng rng(3);
  Matrix centers = Matrix::Random(6, 4);
  Matrix frames = Matrix::Random(10, 4);
  AddressingMatrix sharp = addressing_scores(frames, centers, 0.001);
  for (int i = 0; i < 10; ++i) {
    double best_cos = -2.0;
    int best = 0;
    for (int j = 0; j < 6; ++j) {
      double c = frames.row(i).dot(centers.row(j)) /
                 (frames.row(i).norm() * centers.row(j).norm());
      if (c > best_cos) {
        best_cos = c;
        best = j;
      }
    }
    REQUIRE(sharp.probs(i, best) >= 0.999);
  }
}

TEST_CASE("addressing rows are stochastic and scale invariant") {
  Rng rng(4);
  for (int instance = 0; instance < 10; ++instance) {
    Matrix frames = Matrix::Random(8, 5);
    Matrix centers = Matrix::Random(7, 5);
    AddressingMatrix a = addressing_scores(frames, centers, 0.1);
    for (int i = 0; i < 8; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 7; ++j) {
        REQUIRE(a.probs(i, j) >= 0.0);
        REQUIRE(a.probs(i, j) <= 1.0);
        sum += a.probs(i, j);
      }
      REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
    for (double k : {0.5, 3.0, 250.0}) {
      AddressingMatrix scaled = addressing_scores(k * frames, centers, 0.1);
      REQUIRE((scaled.probs - a.probs).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("degenerate inputs are rejected") {
  Matrix frames = Matrix::Random(3, 2);
  Matrix centers = Matrix::Random(2, 2);
  REQUIRE_THROWS_AS(addressing_scores(frames, centers, 0.0), ConfigError);
  REQUIRE_THROWS_AS(addressing_scores(frames, centers, -1.0), ConfigError);

  Matrix zero_frame = frames;
  zero_frame.row(1).setZero();
  REQUIRE_THROWS_AS(addressing_scores(zero_frame, centers, 0.1), DataError);

  Matrix zero_center = centers;
  zero_center.row(0).setZero();
  REQUIRE_THROWS_AS(addressing_scores(frames, zero_center, 0.1), DataError);

  Matrix wrong_dim = Matrix::Random(2, 3);
  REQUIRE_THROWS_AS(addressing_scores(frames, wrong_dim, 0.1), ShapeError);
}

TEST_CASE("one-hot rows reproduce centers exactly; uniform rows give midpoints") {
  Matrix centers(2, 3);
  centers << 1, 2, 3, -4, 0, 5;
  AddressingMatrix a;
  a.probs = Matrix::Zero(3, 2);
  a.probs(0, 1) = 1.0;
  a.probs(1, 0) = 1.0;
  a.probs(2, 0) = 0.5;
  a.probs(2, 1) = 0.5;
  Matrix restored = restore_audio(a, centers);
  REQUIRE((restored.row(0) - centers.row(1)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((restored.row(1) - centers.row(0)).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((restored.row(2) - 0.5 * (centers.row(0) + centers.row(1))).cwiseAbs().maxCoeff() <
          1e-15);

  AddressingMatrix bad;
  bad.probs = Matrix::Zero(1, 3);
  REQUIRE_THROWS_AS(restore_audio(bad, centers), ShapeError);
}

TEST_CASE("restore matches an independent scalar-loop summation") {
  Rng rng(5);
  Matrix frames = Matrix::Random(6, 4);
  Matrix centers = Matrix::Random(5, 4);
  AddressingMatrix a = addressing_scores(frames, centers, 0.1);
  Matrix restored = restore_audio(a, centers);
  for (int i = 0; i < 6; ++i)
    for (int d = 0; d < 4; ++d) {
      double acc = 0.0;
      for (int j = 0; j < 5; ++j) acc += a.probs(i, j) * centers(j, d);
      REQUIRE(std::abs(restored(i, d) - acc) < 1e-12);
    }
}

TEST_CASE("restored frames stay in the convex hull of the centers") {
  // Every coordinate of a restored frame is a convex combination, so it is
  // bounded by the per-coordinate center range.
  Matrix frames = Matrix::Random(20, 3);
  Matrix centers = Matrix::Random(4, 3);
  Matrix restored = restore_audio(addressing_scores(frames, centers, 0.05), centers);
  for (int d = 0; d < 3; ++d) {
    double lo = centers.col(d).minCoeff(), hi = centers.col(d).maxCoeff();
    for (int i = 0; i < 20; ++i) {
      REQUIRE(restored(i, d) >= lo - 1e-12);
      REQUIRE(restored(i, d) <= hi + 1e-12);
    }
  }
}

TEST_CASE("transfer gradient with respect to the frames matches finite differences") {
  Rng rng(6);
  Matrix frames = Matrix::Random(4, 3);
  Matrix centers = Matrix::Random(5, 3);
  const double tau = 0.1;
  Matrix upstream = Matrix::Random(4, 3);  // arbitrary dL/drestored

  AddressingMatrix a = addressing_scores(frames, centers, tau);
  Matrix dframes = transfer_backward(frames, centers, tau, a, upstream);

  auto loss = [&](const Matrix& f) {
    Matrix restored = restore_audio(addressing_scores(f, centers, tau), centers);
    return restored.cwiseProduct(upstream).sum();
  };
  const double h = 1e-6;
  for (int i = 0; i < 4; ++i)
    for (int d = 0; d < 3; ++d) {
      Matrix fp = frames, fm = frames;
      fp(i, d) += h;
      fm(i, d) -= h;
      double fd = (loss(fp) - loss(fm)) / (2 * h);
      REQUIRE(std::abs(dframes(i, d) - fd) <=
              1e-5 * std::max({1.0, std::abs(fd), std::abs(dframes(i, d))}));
    }
}

TEST_CASE("addressing gradient path matches finite differences") {
  Rng rng(7);
  Matrix frames = Matrix::Random(3, 4);
  Matrix centers = Matrix::Random(6, 4);
  const double tau = 0.2;
  Matrix upstream = Matrix::Random(3, 6);  // arbitrary dL/dA

  AddressingMatrix a = addressing_scores(frames, centers, tau);
  Matrix dframes = addressing_backward(frames, centers, tau, a, upstream);

  auto loss = [&](const Matrix& f) {
    return addressing_scores(f, centers, tau).probs.cwiseProduct(upstream).sum();
  };
  const double h = 1e-6;
  for (int i = 0; i < 3; ++i)
    for (int d = 0; d < 4; ++d) {
      Matrix fp = frames, fm = frames;
      fp(i, d) += h;
      fm(i, d) -= h;
      double fd = (loss(fp) - loss(fm)) / (2 * h);
      REQUIRE(std::abs(dframes(i, d) - fd) <=
              1e-5 * std::max({1.0, std::abs(fd), std::abs(dframes(i, d))}));
    }
}
