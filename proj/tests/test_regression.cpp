#include <doctest.h>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "trajlearn/covkit.hpp"
#include "trajlearn/generators.hpp"
#include "trajlearn/regression.hpp"
#include "trajlearn/util.hpp"

using namespace trajlearn;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("ols recovers the truth without noise") {
  RngStream rs(101);
  DynamicsPair dyn{0.4 * rs.gauss_matrix(4, 4), rs.gauss_matrix(4, 4)};
  MatrixXd W = rs.gauss_matrix(3, 4);
  LabeledBatch data = label_batch(gen_lds(dyn, 6, 8, 103), W,
                                  NoiseKind::gaussian_decoupled, 0.0, 0);
  OlsFit fit = ols_fit(data);
  CHECK_FALSE(fit.rank_deficient);
  CHECK(fit.rank == 4);
  CHECK((fit.W_hat - W).cwiseAbs().maxCoeff() < 1e-8);

  // Scalar, one sample: y = 3 x fits W = 3 exactly.
  MatrixXd X(1, 1), Y(1, 1);
  X << 2.0;
  Y << 6.0;
  OlsFit s = ols_fit_xy(X, Y);
  CHECK(s.W_hat(0, 0) == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(s.gram(0, 0) == 4.0);
}

TEST_CASE("rank deficiency and the min-norm fallback") {
  // Copies with m < n: pooled gram has rank m.
  MatrixXd sigma = MatrixXd::Identity(5, 5);
  TrajectoryBatch b = gen_copies(sigma, 2, 4, 107);
  MatrixXd W = MatrixXd::Ones(1, 5);
  LabeledBatch data = label_batch(b, W, NoiseKind::gaussian_decoupled, 0.0, 0);
  OlsFit fit = ols_fit(data);
  CHECK(fit.rank_deficient);
  CHECK(fit.rank == 2);
  // Min-norm solution still interpolates the observed data ...
  for (int i = 0; i < 2; ++i)
    CHECK((data.y[i] - data.batch.x[i] * fit.W_hat.transpose()).norm() < 1e-8);
  // ... and is orthogonal to the gram's null space.
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(fit.gram);
  for (int j = 0; j < 3; ++j)  // three smallest eigenvalues are ~0
    CHECK(std::abs((fit.W_hat * es.eigenvectors().col(j))(0, 0)) < 1e-8);

  // Duplicated columns: X^T X singular, but normal equations still satisfied.
  MatrixXd X(6, 2);
  X.col(0).setLinSpaced(6, 1.0, 6.0);
  X.col(1) = X.col(0);
  MatrixXd Y = X.col(0);
  OlsFit dup = ols_fit_xy(X, Y);
  CHECK(dup.rank_deficient);
  CHECK((X.transpose() * (Y - X * dup.W_hat.transpose())).norm() <= 1e-8 * X.norm() * Y.norm());
  CHECK(dup.W_hat(0, 0) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(dup.W_hat(0, 1) == doctest::Approx(0.5).epsilon(1e-10));
}

TEST_CASE("risk and param_error") {
  MatrixXd W = MatrixXd::Zero(2, 2);
  MatrixXd What = W;
  CHECK(risk(What, W, MatrixXd::Identity(2, 2)) == 0.0);

  // Gamma = I reduces to the squared Frobenius norm.
  RngStream rs(109);
  MatrixXd D = rs.gauss_matrix(3, 4);
  CHECK(risk(D, MatrixXd::Zero(3, 4), MatrixXd::Identity(4, 4)) ==
        doctest::Approx(D.squaredNorm()).epsilon(1e-12));

  // Scalar: (W_hat - W_star)^2 * Gamma = 2^2 * 3 = 12.
  MatrixXd a(1, 1), bm(1, 1), g(1, 1);
  a << 5.0;
  bm << 3.0;
  g << 3.0;
  CHECK(risk(a, bm, g) == doctest::Approx(12.0).epsilon(1e-14));

  CHECK_THROWS_AS(risk(D, MatrixXd::Zero(4, 3), MatrixXd::Identity(4, 4)),
                  std::invalid_argument);

  // Rank-one error: Frobenius and operator norms coincide at ||u||^2 ||v||^2.
  VectorXd u = rs.gauss_vector(3), v = rs.gauss_vector(4);
  MatrixXd uv = u * v.transpose();
  double expect = u.squaredNorm() * v.squaredNorm();
  CHECK(param_error(uv, MatrixXd::Zero(3, 4), ParamNorm::frobenius) ==
        doctest::Approx(expect).epsilon(1e-12));
  CHECK(param_error(uv, MatrixXd::Zero(3, 4), ParamNorm::operator_norm) ==
        doctest::Approx(expect).epsilon(1e-12));
  // Generic error: operator norm never exceeds Frobenius.
  MatrixXd E = rs.gauss_matrix(3, 4);
  CHECK(param_error(E, MatrixXd::Zero(3, 4), ParamNorm::operator_norm) <=
        param_error(E, MatrixXd::Zero(3, 4), ParamNorm::frobenius) + 1e-12);

  // end_risk weights by the per-step covariance; for an LDS it dominates the
  // averaged risk whenever Sigma_T >= Gamma_T (true for the random walk).
  DynamicsPair walk{MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)};
  MatrixXd diff = rs.gauss_matrix(2, 2);
  CHECK(end_risk(diff, MatrixXd::Zero(2, 2), covkit::state_covariance(walk, 5)) >=
        risk(diff, MatrixXd::Zero(2, 2), covkit::avg_covariance(walk, 5)));
}

TEST_CASE("normal-equation residual") {
  RngStream rs(113);
  for (int rep = 0; rep < 10; ++rep) {
    MatrixXd X = rs.gauss_matrix(30, 5);
    MatrixXd Y = rs.gauss_matrix(30, 3);
    OlsFit fit = ols_fit_xy(X, Y);
    CHECK((X.transpose() * X * fit.W_hat.transpose() - X.transpose() * Y).norm() <=
          1e-8 * (1.0 + X.squaredNorm()) * (1.0 + Y.norm()));
  }
}

TEST_CASE("translation equivariance in the truth") {
  // Same covariates and noise, truth shifted by Delta: the fit shifts by
  // exactly Delta (OLS is linear in Y).
  RngStream rs(127);
  DynamicsPair dyn{0.3 * rs.gauss_matrix(3, 3), rs.gauss_matrix(3, 3)};
  MatrixXd W = rs.gauss_matrix(2, 3);
  MatrixXd Delta = rs.gauss_matrix(2, 3);
  LabeledBatch d0 = label_batch(gen_lds(dyn, 5, 6, 131), W,
                                NoiseKind::gaussian_decoupled, 0.8, 137);
  LabeledBatch d1 = label_batch(gen_lds(dyn, 5, 6, 131), W + Delta,
                                NoiseKind::gaussian_decoupled, 0.8, 137);
  OlsFit f0 = ols_fit(d0);
  OlsFit f1 = ols_fit(d1);
  CHECK((f1.W_hat - f0.W_hat - Delta).norm() < 1e-9);
}

TEST_CASE("more data cannot hurt on average") {
  RngStream rs(139);
  DynamicsPair dyn{0.5 * MatrixXd::Identity(3, 3), rs.gauss_matrix(3, 3)};
  MatrixXd W = dyn.A;
  auto mean_risk = [&](int m, int T, std::uint64_t seed0) {
    MeanSe acc;
    std::vector<double> vals;
    MatrixXd gamma = covkit::avg_covariance(dyn, T);
    for (int trial = 0; trial < 400; ++trial) {
      LabeledBatch d = label_batch(gen_lds(dyn, m, T, seed0 + trial), W,
                                   NoiseKind::sysid_coupled, 0.0, 0);
      vals.push_back(risk(ols_fit(d).W_hat, W, gamma));
    }
    return mean_se(vals);
  };
  MeanSe shortr = mean_risk(4, 6, 1000);
  MeanSe longr = mean_risk(4, 12, 5000);
  CHECK(longr.mean <= shortr.mean + 3.0 * (shortr.se + longr.se));
}

TEST_CASE("estimator is unbiased over noise resamples") {
  RngStream rs(149);
  DynamicsPair dyn{0.4 * rs.gauss_matrix(3, 3), rs.gauss_matrix(3, 3)};
  MatrixXd W = rs.gauss_matrix(2, 3);
  // Freeze covariates; resample only the decoupled noise.
  TrajectoryBatch base = gen_lds(dyn, 4, 8, 151);
  MatrixXd acc = MatrixXd::Zero(2, 3);
  MatrixXd accsq = MatrixXd::Zero(2, 3);
  const int trials = 2000;
  for (int k = 0; k < trials; ++k) {
    LabeledBatch d = label_batch(base, W, NoiseKind::gaussian_decoupled, 1.0,
                                 10000 + static_cast<std::uint64_t>(k));
    MatrixXd err = ols_fit(d).W_hat - W;
    acc += err;
    accsq += err.cwiseProduct(err);
  }
  MatrixXd mean = acc / trials;
  MatrixXd se = ((accsq / trials - mean.cwiseProduct(mean)) / trials).cwiseMax(0.0).cwiseSqrt();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(std::abs(mean(i, j)) < 4.0 * se(i, j) + 1e-12);
}
