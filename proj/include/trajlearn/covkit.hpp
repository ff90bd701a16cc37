#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace trajlearn {

// A linear dynamical system x_{t+1} = A x_t + B w_t, w_t ~ N(0, I_d).
struct DynamicsPair {
  Eigen::MatrixXd A;  // n x n
  Eigen::MatrixXd B;  // n x d

  DynamicsPair(Eigen::MatrixXd a, Eigen::MatrixXd b)
      : A(std::move(a)), B(std::move(b)) {
    if (A.rows() != A.cols()) throw std::invalid_argument("DynamicsPair: A must be square");
    if (B.rows() != A.rows()) throw std::invalid_argument("DynamicsPair: B row count must match A");
    if (!A.allFinite() || !B.allFinite())
      throw std::invalid_argument("DynamicsPair: entries must be finite");
  }

  Eigen::Index state_dim() const { return A.rows(); }
  Eigen::Index input_dim() const { return B.cols(); }
};

namespace covkit {

constexpr double kEigClipRel = 1e-12;          // eigenvalue clip for PSD square roots
constexpr double kDiagResidualRel = 1e-8;      // diagonalizability residual threshold
constexpr double kDiagCondMax = 1e10;          // diagonalizability conditioning threshold

// Tr(M Sigma M^T), the weighted square norm of M.
inline double weighted_sq_norm(const Eigen::MatrixXd& M, const Eigen::MatrixXd& Sigma) {
  if (Sigma.rows() != Sigma.cols() || M.cols() != Sigma.rows())
    throw std::invalid_argument("weighted_sq_norm: incompatible dimensions");
  return (M * Sigma * M.transpose()).trace();
}

inline double spectral_radius(const Eigen::MatrixXd& A) {
  if (A.rows() != A.cols()) throw std::invalid_argument("spectral_radius: matrix not square");
  if (A.rows() == 0) return 0.0;
  return A.eigenvalues().cwiseAbs().maxCoeff();
}

// Per-step covariance Sigma_t(A, B) = sum_{k=0}^{t-1} A^k B B^T (A^k)^T,
// computed by the recursion Sigma_t = A Sigma_{t-1} A^T + B B^T.
inline Eigen::MatrixXd state_covariance(const DynamicsPair& dyn, int t) {
  if (t < 1) throw std::invalid_argument("state_covariance: t must be >= 1");
  Eigen::MatrixXd bbt = dyn.B * dyn.B.transpose();
  Eigen::MatrixXd sigma = bbt;
  for (int k = 2; k <= t; ++k) {
    sigma = dyn.A * sigma * dyn.A.transpose() + bbt;
    sigma = ((sigma + sigma.transpose()) / 2.0).eval();
  }
  return sigma;
}

// Average covariance Gamma_t(A, B) = (1/t) sum_{k=1}^t Sigma_k(A, B).
inline Eigen::MatrixXd avg_covariance(const DynamicsPair& dyn, int t) {
  if (t < 1) throw std::invalid_argument("avg_covariance: t must be >= 1");
  Eigen::MatrixXd bbt = dyn.B * dyn.B.transpose();
  Eigen::MatrixXd sigma = bbt;
  Eigen::MatrixXd acc = bbt;
  for (int k = 2; k <= t; ++k) {
    sigma = dyn.A * sigma * dyn.A.transpose() + bbt;
    sigma = ((sigma + sigma.transpose()) / 2.0).eval();
    acc += sigma;
  }
  return acc / static_cast<double>(t);
}

// Symmetric inverse square root of a claimed-PD matrix. Eigenvalues below
// max(lambda) * kEigClipRel raise a domain error instead of being jittered.
inline Eigen::MatrixXd pd_inverse_sqrt(const Eigen::MatrixXd& M) {
  if (M.rows() != M.cols()) throw std::invalid_argument("pd_inverse_sqrt: matrix not square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((M + M.transpose()) / 2.0);
  if (es.info() != Eigen::Success) throw std::runtime_error("pd_inverse_sqrt: eigensolve failed");
  const auto& evals = es.eigenvalues();
  double lmax = evals.maxCoeff();
  if (lmax <= 0.0 || evals.minCoeff() <= lmax * kEigClipRel)
    throw std::domain_error("pd_inverse_sqrt: matrix is not positive definite");
  Eigen::VectorXd inv_sqrt = evals.array().rsqrt();
  return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
}

// Symmetric square root of a PSD matrix with small-eigenvalue clipping;
// rank-deficient inputs are legitimate here (unlike pd_inverse_sqrt).
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& M) {
  if (M.rows() != M.cols()) throw std::invalid_argument("psd_sqrt: matrix not square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((M + M.transpose()) / 2.0);
  if (es.info() != Eigen::Success) throw std::runtime_error("psd_sqrt: eigensolve failed");
  Eigen::VectorXd evals = es.eigenvalues();
  double lmax = std::max(evals.maxCoeff(), 0.0);
  if (evals.minCoeff() < -std::max(lmax, 1.0) * 1e-8)
    throw std::domain_error("psd_sqrt: matrix has a significantly negative eigenvalue");
  Eigen::VectorXd clipped = evals.cwiseMax(0.0);
  double cutoff = lmax * kEigClipRel;
  for (Eigen::Index i = 0; i < clipped.size(); ++i)
    if (clipped[i] < cutoff) clipped[i] = 0.0;
  return es.eigenvectors() * clipped.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

// lambda_min(M2^{-1/2} M1 M2^{-1/2}), the eigenvalue ratio of two PD matrices.
inline double ulam(const Eigen::MatrixXd& M1, const Eigen::MatrixXd& M2) {
  if (M1.rows() != M2.rows() || M1.cols() != M2.cols())
    throw std::invalid_argument("ulam: dimension mismatch");
  Eigen::MatrixXd w = pd_inverse_sqrt(M2);
  Eigen::MatrixXd ratio = w * ((M1 + M1.transpose()) / 2.0) * w;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((ratio + ratio.transpose()) / 2.0);
  double lmin = es.eigenvalues().minCoeff();
  if (!(lmin > 0.0))
    throw std::domain_error("ulam: first argument is not positive definite");
  return lmin;
}

// Geometric mean of {ulam(Psi_j, Gamma)}; requires (1/S) sum Psi_j <= Gamma.
inline double umu_geometric_mean(const std::vector<Eigen::MatrixXd>& Psis,
                                 const Eigen::MatrixXd& Gamma) {
  if (Psis.empty()) throw std::invalid_argument("umu_geometric_mean: empty Psi list");
  Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(Gamma.rows(), Gamma.cols());
  for (const auto& psi : Psis) avg += psi;
  avg /= static_cast<double>(Psis.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Gamma - avg);
  if (es.eigenvalues().minCoeff() < -1e-10 * std::max(Gamma.trace(), 1.0))
    throw std::domain_error("umu_geometric_mean: average of Psi_j is not dominated by Gamma");
  double log_sum = 0.0;
  for (const auto& psi : Psis) log_sum += std::log(ulam(psi, Gamma));
  return std::exp(log_sum / static_cast<double>(Psis.size()));
}

// Least k in {1..n} such that [B AB ... A^{k-1}B] has full row rank;
// nullopt when the pair is uncontrollable.
inline std::optional<int> controllability_index(const DynamicsPair& dyn) {
  const Eigen::Index n = dyn.state_dim();
  const Eigen::Index d = dyn.input_dim();
  if (d == 0) return std::nullopt;
  Eigen::MatrixXd ctrl(n, n * d);
  Eigen::MatrixXd block = dyn.B;
  for (Eigen::Index k = 0; k < n; ++k) {
    ctrl.middleCols(k * d, d) = block;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(
        ctrl.leftCols((k + 1) * d).transpose());
    if (qr.rank() == n) return static_cast<int>(k + 1);
    block = (dyn.A * block).eval();
  }
  return std::nullopt;
}

struct SpectralInfo {
  double rho = 0.0;
  bool diagonalizable = false;
  std::optional<Eigen::MatrixXcd> S;
  std::optional<double> gamma;
  std::optional<int> controllability_index;
};

namespace detail {

struct DiagResult {
  bool ok = false;
  Eigen::MatrixXcd S;
  Eigen::VectorXcd D;
};

// Accept a complex eigendecomposition A = S D S^{-1} only when the
// reconstruction residual and the conditioning of S are within thresholds.
inline DiagResult try_diagonalize(const Eigen::MatrixXd& A) {
  DiagResult r;
  // Symmetric inputs get an orthogonal eigenbasis; the general solver can
  // return badly skewed bases inside repeated eigenspaces.
  if ((A - A.transpose()).norm() <= 1e-12 * std::max(A.norm(), 1.0)) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> se((A + A.transpose()) / 2.0);
    if (se.info() == Eigen::Success) {
      r.ok = true;
      r.S = se.eigenvectors().cast<std::complex<double>>();
      r.D = se.eigenvalues().cast<std::complex<double>>();
      return r;
    }
  }
  Eigen::EigenSolver<Eigen::MatrixXd> es(A);
  if (es.info() != Eigen::Success) return r;
  Eigen::MatrixXcd S = es.eigenvectors();
  Eigen::VectorXcd D = es.eigenvalues();
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(S);
  double smin = svd.singularValues().minCoeff();
  double smax = svd.singularValues().maxCoeff();
  if (smin <= 0.0 || smax / smin > kDiagCondMax) return r;
  Eigen::MatrixXcd recon = S * D.asDiagonal() * S.inverse();
  double anorm = A.norm();
  double resid = (recon - A.cast<std::complex<double>>()).norm();
  if (resid > kDiagResidualRel * std::max(anorm, 1e-300)) return r;
  r.ok = true;
  r.S = std::move(S);
  r.D = std::move(D);
  return r;
}

}  // namespace detail

// Condition number gamma(A, B) = lmax / lmin of S^{-1} B B^T S^{-*} for the
// solver's diagonalizing S. The eigenbasis is not unique, so neither is gamma
// for degenerate spectra; we report the value for the computed S.
inline double condition_number(const DynamicsPair& dyn) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(dyn.B);
  if (qr.rank() != dyn.state_dim())
    throw std::domain_error("condition_number: B is not full row rank");
  auto diag = detail::try_diagonalize(dyn.A);
  if (!diag.ok)
    throw std::domain_error("condition_number: A failed the diagonalizability test");
  Eigen::MatrixXcd sinv = diag.S.inverse();
  Eigen::MatrixXcd m = sinv * dyn.B * dyn.B.transpose() * sinv.adjoint();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es((m + m.adjoint()) / 2.0);
  double lmin = es.eigenvalues().minCoeff();
  double lmax = es.eigenvalues().maxCoeff();
  if (!(lmin > 0.0))
    throw std::domain_error("condition_number: whitened B B^T is not positive definite");
  return lmax / lmin;
}

inline SpectralInfo spectral_info(const DynamicsPair& dyn) {
  SpectralInfo info;
  info.rho = spectral_radius(dyn.A);
  auto diag = detail::try_diagonalize(dyn.A);
  info.diagonalizable = diag.ok;
  if (diag.ok) {
    info.S = diag.S;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(dyn.B);
    if (qr.rank() == dyn.state_dim()) info.gamma = condition_number(dyn);
  }
  info.controllability_index = controllability_index(dyn);
  return info;
}

}  // namespace covkit

}  // namespace trajlearn
