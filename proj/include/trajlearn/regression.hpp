#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "trajlearn/covkit.hpp"
#include "trajlearn/generators.hpp"

namespace trajlearn {

struct OlsFit {
  Eigen::MatrixXd W_hat;  // p x n
  Eigen::MatrixXd gram;   // n x n, X^T X over the pooled data
  int rank = 0;
  double min_eig = 0.0;
  bool rank_deficient = false;
};

namespace detail {

constexpr double kGramRankRel = 1e-10;

}  // namespace detail

// Pooled OLS over all (i, t) pairs. Full-rank grams solve the normal
// equations; rank-deficient grams fall back to the minimum-Frobenius-norm
// solution with the deficiency flagged rather than thrown (the degenerate
// copies-with-few-trajectories instance is legitimate input).
inline OlsFit ols_fit_xy(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.rows() != Y.rows()) throw std::invalid_argument("ols_fit: X and Y row counts differ");
  if (X.rows() < 1) throw std::invalid_argument("ols_fit: empty data");
  OlsFit fit;
  fit.gram = X.transpose() * X;
  fit.gram = ((fit.gram + fit.gram.transpose()) / 2.0).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.gram);
  const Eigen::VectorXd& evals = es.eigenvalues();
  double lmax = std::max(evals.maxCoeff(), 0.0);
  double cutoff = lmax * detail::kGramRankRel;
  Eigen::VectorXd inv = evals;
  int rank = 0;
  for (Eigen::Index i = 0; i < inv.size(); ++i) {
    if (inv[i] > cutoff) {
      inv[i] = 1.0 / inv[i];
      ++rank;
    } else {
      inv[i] = 0.0;  // min-norm pseudo-inverse
    }
  }
  fit.rank = rank;
  fit.min_eig = evals.minCoeff();
  fit.rank_deficient = rank < X.cols();
  Eigen::MatrixXd pinv = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  fit.W_hat = (pinv * X.transpose() * Y).transpose();
  return fit;
}

inline OlsFit ols_fit(const LabeledBatch& data) {
  const int mT = data.batch.m * data.batch.T;
  Eigen::MatrixXd X(mT, data.batch.n);
  Eigen::MatrixXd Y(mT, data.p);
  for (int i = 0; i < data.batch.m; ++i) {
    X.middleRows(i * data.batch.T, data.batch.T) = data.batch.x[i];
    Y.middleRows(i * data.batch.T, data.batch.T) = data.y[i];
  }
  return ols_fit_xy(X, Y);
}

// Excess risk ||W_hat - W_star||^2 weighted by the average covariance.
inline double risk(const Eigen::MatrixXd& W_hat, const Eigen::MatrixXd& W_star,
                   const Eigen::MatrixXd& Gamma_Tprime) {
  if (W_hat.rows() != W_star.rows() || W_hat.cols() != W_star.cols())
    throw std::invalid_argument("risk: estimator/truth dimension mismatch");
  return covkit::weighted_sq_norm(W_hat - W_star, Gamma_Tprime);
}

// Final-step risk, weighted by the per-step covariance instead.
inline double end_risk(const Eigen::MatrixXd& W_hat, const Eigen::MatrixXd& W_star,
                       const Eigen::MatrixXd& Sigma_Tprime) {
  return risk(W_hat, W_star, Sigma_Tprime);
}

enum class ParamNorm { frobenius, operator_norm };

inline double param_error(const Eigen::MatrixXd& W_hat, const Eigen::MatrixXd& W_star,
                          ParamNorm norm = ParamNorm::frobenius) {
  Eigen::MatrixXd d = W_hat - W_star;
  if (norm == ParamNorm::frobenius) return d.squaredNorm();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(d);
  double s = svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
  return s * s;
}

}  // namespace trajlearn
