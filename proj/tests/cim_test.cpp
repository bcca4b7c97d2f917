#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ccseg/cim.hpp"
#include "ccseg/error.hpp"
#include "helpers.hpp"

using namespace ccseg;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Eigen::VectorXd random_simplex(Eigen::Index n, Rng& rng) {
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) w(i) = rng.uniform(0.1, 1.0);
  return w * (static_cast<double>(n) / w.sum());
}

// Weighted partial cross-covariance by explicit loops over samples and entries.
Eigen::MatrixXd weighted_cov_loops(const Eigen::MatrixXd& U, const Eigen::MatrixXd& V, const Eigen::VectorXd& w) {
  const Eigen::Index n = U.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(U.cols(), V.cols());
  for (Eigen::Index a = 0; a < U.cols(); ++a) {
    for (Eigen::Index b = 0; b < V.cols(); ++b) {
      double mu = 0.0, mv = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        mu += w(j) * U(j, a);
        mv += w(j) * V(j, b);
      }
      mu /= static_cast<double>(n);
      mv /= static_cast<double>(n);
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) acc += (w(i) * U(i, a) - mu) * (w(i) * V(i, b) - mv);
      out(a, b) = acc / static_cast<double>(n - 1);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("rff map") {
  Rng rng(1);
  const RFFBank zero_freq(Eigen::VectorXd::Zero(5), Eigen::VectorXd::LinSpaced(5, 0.1, 2.0));
  const Eigen::MatrixXd z = zero_freq.map(random_matrix(7, 1, rng));
  for (Eigen::Index j = 0; j < 5; ++j) {
    for (Eigen::Index i = 0; i < 7; ++i) CHECK(z(i, j) == std::numbers::sqrt2 * std::cos(zero_freq.phi()(j)));
  }

  const RFFBank bank = RFFBank::draw(5, 42);
  const Eigen::MatrixXd x = random_matrix(9, 1, rng);
  const Eigen::MatrixXd mapped = bank.map(x);
  for (Eigen::Index i = 0; i < 9; ++i) {
    for (Eigen::Index j = 0; j < 5; ++j) {
      const double ref = std::sqrt(2.0) * std::cos(bank.omega()(j) * x(i, 0) + bank.phi()(j));
      CHECK(std::abs(mapped(i, j) - ref) <= 1e-12);
      CHECK(std::abs(mapped(i, j)) <= std::numbers::sqrt2);
    }
  }
  const Eigen::MatrixXd at_zero = bank.map(Eigen::MatrixXd::Zero(3, 1));
  CHECK(at_zero.row(0) == at_zero.row(2));

  const RFFBank again = RFFBank::draw(5, 42);
  CHECK(again.omega() == bank.omega());
  CHECK(again.phi() == bank.phi());
}

TEST_CASE("partial cross covariance") {
  Rng rng(2);
  Eigen::MatrixXd constant(4, 2);
  constant << 1, 2, 1, 2, 1, 2, 1, 2;
  CHECK(partial_cross_cov(constant, random_matrix(4, 3, rng)).isZero(0.0));

  Eigen::MatrixXd col(3, 1);
  col << 1, 2, 3;
  CHECK(partial_cross_cov(col, col)(0, 0) == doctest::Approx(1.0).epsilon(1e-15));

  const Eigen::MatrixXd U = random_matrix(10, 3, rng), V = random_matrix(10, 4, rng);
  CHECK(std::abs(partial_cross_cov(U, V).norm() - partial_cross_cov(V, U).norm()) <= 1e-12);
  CHECK_THROWS_AS(partial_cross_cov(random_matrix(1, 2, rng), random_matrix(1, 2, rng)), DegenerateError);
  CHECK_THROWS_AS(partial_cross_cov(random_matrix(3, 2, rng), random_matrix(4, 2, rng)), ShapeError);
}

TEST_CASE("weighted partial cross covariance") {
  Rng rng(3);
  const Eigen::MatrixXd U = random_matrix(4, 3, rng), V = random_matrix(4, 2, rng);
  CHECK(weighted_partial_cross_cov(U, V, SampleWeights::uniform(4)) == partial_cross_cov(U, V));

  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd w = random_simplex(4, rng);
    const Eigen::MatrixXd A = random_matrix(4, 3, rng), B = random_matrix(4, 2, rng);
    const Eigen::MatrixXd diff = weighted_partial_cross_cov(A, B, SampleWeights(w)) - weighted_cov_loops(A, B, w);
    CHECK(diff.cwiseAbs().maxCoeff() <= 1e-12);
  }

  // Weights that exactly cancel the feature values leave nothing to centre.
  Eigen::MatrixXd u(4, 1);
  u << 1.0, 2.0, 4.0, 0.5;
  Eigen::VectorXd w = u.col(0).cwiseInverse();
  w *= 4.0 / w.sum();
  CHECK(weighted_partial_cross_cov(u, random_matrix(4, 2, rng), SampleWeights(w)).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("sample weights enforce the simplex") {
  CHECK_THROWS_AS(SampleWeights(Eigen::Vector3d(1.0, 1.0, 1.1)), ConstraintError);
  CHECK_THROWS_AS(SampleWeights(Eigen::Vector3d(2.0, 1.5, -0.5)), ConstraintError);
  CHECK_NOTHROW(SampleWeights(Eigen::Vector3d(3.0, 0.0, 0.0)));
  Rng rng(4);
  CHECK_THROWS_AS(weighted_partial_cross_cov(random_matrix(3, 1, rng), random_matrix(3, 1, rng), SampleWeights::uniform(4)),
                  ShapeError);
}

TEST_CASE("independence objective") {
  Rng rng(5);
  CimConfig cfg;
  const auto banks = make_banks(3, cfg);
  Eigen::MatrixXd same_rows(5, 3);
  same_rows.rowwise() = Eigen::RowVector3d(0.3, -1.0, 2.0);
  CHECK(independence_objective(same_rows, banks, SampleWeights::uniform(5)) == 0.0);

  // Pair sum computed from the covariance primitive.
  const Eigen::MatrixXd f = random_matrix(12, 3, rng);
  const SampleWeights w(random_simplex(12, rng));
  double ref = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      ref += weighted_partial_cross_cov(banks[static_cast<std::size_t>(i)].map(f.col(i)),
                                        banks[static_cast<std::size_t>(j)].map(f.col(j)), w)
                 .squaredNorm();
    }
  }
  CHECK(independence_objective(f, banks, w) == doctest::Approx(ref).epsilon(1e-12));

  // Swapping two features (and their banks) leaves the pair sum unchanged.
  const auto two = make_banks(2, cfg);
  const Eigen::MatrixXd g = random_matrix(20, 2, rng);
  Eigen::MatrixXd swapped(20, 2);
  swapped << g.col(1), g.col(0);
  const std::vector<RFFBank> swapped_banks{two[1], two[0]};
  CHECK(independence_objective(swapped, swapped_banks, SampleWeights::uniform(20)) ==
        doctest::Approx(independence_objective(g, two, SampleWeights::uniform(20))).epsilon(1e-12));

  CHECK_THROWS(independence_objective(random_matrix(5, 1, rng), make_banks(1, cfg), SampleWeights::uniform(5)));
}

TEST_CASE("duplicated features score higher than independent ones") {
  int wins = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(mix64(77, s));
    Eigen::MatrixXd dup(50, 2), ind(50, 2);
    for (int i = 0; i < 50; ++i) dup(i, 0) = dup(i, 1) = ind(i, 0) = rng.normal();
    for (int i = 0; i < 50; ++i) ind(i, 1) = rng.normal();
    CimConfig cfg;
    cfg.seed = s;
    const auto banks = make_banks(2, cfg);
    wins += independence_objective(dup, banks, SampleWeights::uniform(50)) >
            independence_objective(ind, banks, SampleWeights::uniform(50));
  }
  CHECK(wins == 10);
}

TEST_CASE("objective gradient matches finite differences") {
  Rng rng(6);
  const Eigen::MatrixXd f = random_matrix(7, 3, rng);
  const auto banks = make_banks(3, CimConfig{});
  const Eigen::VectorXd w = random_simplex(7, rng);
  const ObjectiveGradient g = independence_objective_gradient(f, banks, w);
  CHECK(g.value == doctest::Approx(independence_objective(f, banks, SampleWeights(w))).epsilon(1e-12));
  for (Eigen::Index i = 0; i < 7; ++i) {
    Eigen::VectorXd hi = w, lo = w;
    hi(i) += 1e-6;
    lo(i) -= 1e-6;
    const double fd = (independence_objective_gradient(f, banks, hi).value - independence_objective_gradient(f, banks, lo).value) / 2e-6;
    CHECK(g.d_weights(i) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("learn_weights") {
  Rng rng(7);
  const Eigen::MatrixXd f = random_matrix(6, 2, rng);
  CHECK(SampleWeights::uniform(6).values().sum() == 6.0);
  CHECK_THROWS_AS(learn_weights(f, CimConfig{5, 16, 0, 0.05, 0}), ConfigError);

  const WeightLearning a = learn_weights(f, CimConfig{}), b = learn_weights(f, CimConfig{});
  CHECK(a.weights.values() == b.weights.values());
  CHECK(a.objective_uniform == independence_objective(f, make_banks(2, CimConfig{}), SampleWeights::uniform(6)));
  CHECK(a.objective_best <= a.objective_uniform);
  CHECK(std::abs(a.weights.values().sum() - 6.0) <= 1e-9);
  CHECK(a.objective_best ==
        doctest::Approx(independence_objective(f, make_banks(2, CimConfig{}), a.weights)).epsilon(1e-12));

  CHECK_THROWS(learn_weights(random_matrix(1, 2, rng), CimConfig{}));
  CHECK_THROWS(learn_weights(random_matrix(4, 1, rng), CimConfig{}));
}

TEST_CASE("learner matches a simplex grid search on the one-outlier instance") {
  // One sample carries a large joint excursion in both features.
  Eigen::MatrixXd f(4, 2);
  f << 0.1, -0.1, -0.2, 0.2, 0.15, 0.05, 2.0, 2.0;
  const CimConfig cfg;
  const auto banks = make_banks(2, cfg);
  auto at = [&](const Eigen::Vector4d& p) { return independence_objective(f, banks, SampleWeights(4.0 * p)); };
  double best = at(Eigen::Vector4d::Constant(0.25));
  Eigen::Vector4d best_p = Eigen::Vector4d::Constant(0.25);
  for (int a = 0; a <= 20; ++a) {
    for (int b = 0; a + b <= 20; ++b) {
      for (int c = 0; a + b + c <= 20; ++c) {
        const Eigen::Vector4d p = Eigen::Vector4d(a, b, c, 20 - a - b - c) / 20.0;
        if (const double v = at(p); v < best) {
          best = v;
          best_p = p;
        }
      }
    }
  }
  // Finer local grids around the coarse minimiser.
  for (double step = 0.01; step >= 1e-4; step /= 5.0) {
    const Eigen::Vector4d centre = best_p;
    for (int a = -5; a <= 5; ++a) {
      for (int b = -5; b <= 5; ++b) {
        for (int c = -5; c <= 5; ++c) {
          Eigen::Vector4d p = centre + step * Eigen::Vector4d(a, b, c, 0);
          p(3) = 1.0 - p.head<3>().sum();
          if ((p.array() < 0.0).any()) continue;
          if (const double v = at(p); v < best) {
            best = v;
            best_p = p;
          }
        }
      }
    }
  }
  const WeightLearning learned = learn_weights(f, banks, cfg);
  CHECK(std::abs(learned.objective_best - best) <= 1e-3);
  // The outlier is the sample the learner turns down.
  Eigen::Index argmin = 0;
  learned.weights.values().minCoeff(&argmin);
  CHECK(argmin == 3);
}

TEST_CASE("feature extraction") {
  Tensor f5({2, 4, 2, 2});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t i = 0; i < 4; ++i) f5.mutable_data()[(n * 4 + c) * 4 + i] = static_cast<double>(c + 1);
    }
  }
  CimConfig cfg;
  const Eigen::MatrixXd vars = extract_feature_vars(f5, cfg);
  REQUIRE(vars.rows() == 2);
  REQUIRE(vars.cols() == 4);
  CHECK(vars.row(0) == Eigen::RowVector4d(1, 2, 3, 4));
  CHECK(vars.row(1) == Eigen::RowVector4d(1, 2, 3, 4));

  Tensor gap({2, 1, 2, 2}, {1, 3, 5, 7, 1, 3, 5, 7});
  CHECK(extract_feature_vars(gap, cfg)(0, 0) == 4.0);

  cfg.m_features = 2;
  const auto first = select_feature_channels(4, cfg);
  CHECK(first.size() == 2);
  CHECK(select_feature_channels(4, cfg) == first);
  CHECK(extract_feature_vars(f5, cfg).cols() == 2);

  CHECK_THROWS(extract_feature_vars(Tensor::ones({1, 4, 2, 2}), cfg));
}

TEST_CASE("cim loss") {
  const Tensor ce({2}, {0.5, 0.7});
  CHECK(cim_loss(ce, SampleWeights(Eigen::Vector2d(2.0, 0.0))).item() == 0.5);
  CHECK(cim_loss(ce, SampleWeights::uniform(2)).item() == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(cim_loss(Tensor::zeros({2}), SampleWeights(Eigen::Vector2d(1.5, 0.5))).item() == 0.0);
  CHECK_THROWS_AS(cim_loss(ce, SampleWeights::uniform(3)), ShapeError);
}
