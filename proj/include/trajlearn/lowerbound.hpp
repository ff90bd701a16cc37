#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "trajlearn/covkit.hpp"
#include "trajlearn/generators.hpp"
#include "trajlearn/util.hpp"

namespace trajlearn {
namespace lowerbound {

// --- psi and the stylized problem -------------------------------------------

// Eigenvalue with multiplicity; lets block-diagonal spectra stay compact.
struct EigMult {
  double value = 0.0;
  long mult = 1;
};

// psi(y; Sigma) = y * Tr((Sigma^{-1} + y I)^{-1}) = sum_i y / (mu_i + y),
// with mu_i the eigenvalues of Sigma^{-1}. Monotone increasing from 0 to q.
inline double psi(double y, const std::vector<EigMult>& inv_sigma_eigs) {
  if (y < 0.0) throw std::invalid_argument("psi: y must be nonnegative");
  double acc = 0.0;
  for (const auto& e : inv_sigma_eigs) {
    if (!(e.value > 0.0)) throw std::invalid_argument("psi: eigenvalues of Sigma^{-1} must be positive");
    acc += static_cast<double>(e.mult) * y / (e.value + y);
  }
  return acc;
}

inline std::vector<EigMult> eig_list(const Eigen::VectorXd& vals, long mult = 1) {
  std::vector<EigMult> out;
  out.reserve(vals.size());
  for (Eigen::Index i = 0; i < vals.size(); ++i) out.push_back({vals[i], mult});
  return out;
}

struct StylizedSolution {
  double xbar = 0.0;
  double sp_value = 0.0;  // SP(Sigma, n) = sqrt(n) / xbar
  double residual = 0.0;  // |psi(xbar sqrt(n)) - n|
  int iterations = 0;
};

// Solves psi(xbar sqrt(n); Sigma) = n by bracketed bisection on y = xbar
// sqrt(n). Requires q > n strictly, otherwise there is no root.
inline StylizedSolution solve_stylized(const std::vector<EigMult>& inv_sigma_eigs, long n) {
  long q = 0;
  for (const auto& e : inv_sigma_eigs) q += e.mult;
  if (q <= n) throw std::domain_error("solve_stylized: requires q > n");
  if (n < 1) throw std::invalid_argument("solve_stylized: n must be >= 1");

  const double target = static_cast<double>(n);
  double lo = 1e-14, hi = 1.0;
  int iters = 0;
  while (psi(hi, inv_sigma_eigs) < target) {
    hi *= 2.0;
    ++iters;
    if (hi > 1e18) throw std::runtime_error("solve_stylized: bracket expansion failed");
  }
  if (psi(lo, inv_sigma_eigs) > target)
    throw std::runtime_error("solve_stylized: lower bracket too large");
  while ((hi - lo) > 1e-12 * hi) {
    double mid = 0.5 * (lo + hi);
    if (psi(mid, inv_sigma_eigs) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
    ++iters;
  }
  double y = 0.5 * (lo + hi);
  StylizedSolution sol;
  sol.xbar = y / std::sqrt(static_cast<double>(n));
  sol.sp_value = static_cast<double>(n) / y;  // sqrt(n)/xbar
  sol.residual = std::fabs(psi(y, inv_sigma_eigs) - target);
  sol.iterations = iters;
  return sol;
}

// --- Monte Carlo trace-inverse bound -----------------------------------------

struct TraceInverseEstimate {
  double mean = 0.0;
  double se = 0.0;
  int trials = 0;
  int rank_failures = 0;
  std::vector<double> per_trial;  // retained for combined-SE comparisons
};

// E Tr(Gamma^{1/2} (X^T X)^{-1} Gamma^{1/2}) over fresh batches; the risk
// lower bound is sigma_xi^2 * p times this. Trials whose gram is numerically
// singular are counted as rank failures; more than 1% aborts.
inline TraceInverseEstimate expected_trace_inverse_mc(const Process& proc, int m, int T,
                                                      const Eigen::MatrixXd& Gamma_Tprime,
                                                      int trials, std::uint64_t seed,
                                                      unsigned threads = 1) {
  const Eigen::Index n = proc.dim();
  if (static_cast<long>(m) * T < n)
    throw std::invalid_argument("expected_trace_inverse_mc: needs mT >= n");
  std::vector<double> vals(trials, 0.0);
  std::vector<char> failed(trials, 0);
  parallel_for(trials, threads, [&](std::size_t trial) {
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < m; ++i) {
      RngStream rs = RngStream::from_path(
          seed, {kStreamTrajectory, static_cast<std::uint64_t>(trial),
                 static_cast<std::uint64_t>(i)});
      Eigen::MatrixXd x = proc.sample_full(T, rs);
      gram += x.transpose() * x;
    }
    gram = ((gram + gram.transpose()) / 2.0).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    double lmax = std::max(es.eigenvalues().maxCoeff(), 0.0);
    if (es.eigenvalues().minCoeff() <= lmax * 1e-12 || lmax == 0.0) {
      failed[trial] = 1;
      return;
    }
    Eigen::MatrixXd inv = es.eigenvectors() *
                          es.eigenvalues().cwiseInverse().asDiagonal() *
                          es.eigenvectors().transpose();
    vals[trial] = (inv * Gamma_Tprime).trace();
  });
  TraceInverseEstimate est;
  est.trials = trials;
  for (int i = 0; i < trials; ++i) {
    if (failed[i]) {
      ++est.rank_failures;
    } else {
      est.per_trial.push_back(vals[i]);
    }
  }
  if (est.rank_failures * 100 > trials)
    throw std::domain_error("expected_trace_inverse_mc: rank failure rate exceeds 1%");
  MeanSe ms = mean_se(est.per_trial);
  est.mean = ms.mean;
  est.se = ms.se;
  return est;
}

// --- Theta matrices and the S_T spectrum --------------------------------------

inline Eigen::MatrixXd jordan_block(int r) {
  Eigen::MatrixXd j = Eigen::MatrixXd::Identity(r, r);
  for (int i = 0; i + 1 < r; ++i) j(i, i + 1) = 1.0;
  return j;
}

// J_r^k has entries C(k, j-i); computed by the binomial closed form so block
// Toeplitz powers stay exact integers.
inline Eigen::MatrixXd jordan_power(int r, long k) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(r, r);
  for (int i = 0; i < r; ++i) {
    for (int j = i; j < r; ++j) {
      int d = j - i;
      double c = 1.0;  // C(k, d); the product hits a zero factor when k < d
      for (int a = 0; a < d; ++a) c *= static_cast<double>(k - a) / static_cast<double>(a + 1);
      m(i, j) = k < d ? 0.0 : c;
    }
  }
  return m;
}

struct ThetaMatrix {
  int r = 0;
  int T = 0;
  int Tprime = 0;
  Eigen::MatrixXd theta;      // T x T, PD
  double whitening_cond = 0;  // condition number of Gamma_{T'}(J_r)
};

// Theta_{r,T,T'} = E Psi Psi^T E^T with Psi = BDiag(Gamma_{T'}(J_r)^{-1/2}, T)
// BToep(J_r, T) and E extracting coordinates {1, 1+r, ..., 1+(T-1)r}. Large r
// makes Gamma(J_r) ill-conditioned; we refuse past cond 1e12.
inline ThetaMatrix build_theta(int r, int T, int Tprime) {
  if (r < 1 || T < 1 || Tprime < 1) throw std::invalid_argument("build_theta: r, T, T' must be >= 1");
  DynamicsPair dyn(jordan_block(r), Eigen::MatrixXd::Identity(r, r));
  Eigen::MatrixXd gamma = covkit::avg_covariance(dyn, Tprime);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gamma);
  double cond = es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff();
  if (!(cond < 1e12))
    throw std::domain_error("build_theta: Gamma_{T'}(J_r) condition number exceeds 1e12");
  Eigen::MatrixXd w = covkit::pd_inverse_sqrt(gamma);

  // Rows of Psi restricted to the extracted coordinate (row 0 of each block):
  // row block i of Psi = w * J^{i-j} for j <= i; we only need its first row.
  Eigen::MatrixXd psi_rows(T, T * r);
  psi_rows.setZero();
  std::vector<Eigen::MatrixXd> jpow(T);
  for (int k = 0; k < T; ++k) jpow[k] = jordan_power(r, k);
  for (int i = 0; i < T; ++i) {
    for (int j = 0; j <= i; ++j) {
      Eigen::MatrixXd block = w * jpow[i - j];
      psi_rows.block(i, j * r, 1, r) = block.row(0);
    }
  }
  ThetaMatrix out;
  out.r = r;
  out.T = T;
  out.Tprime = Tprime;
  out.whitening_cond = cond;
  out.theta = psi_rows * psi_rows.transpose();
  out.theta = ((out.theta + out.theta.transpose()) / 2.0).eval();
  return out;
}

// S_T = (L_T L_T^T)^{-1} for the all-ones lower triangular L_T; equals the
// tridiagonal Tri(2,-1,T) minus e_T e_T^T.
inline Eigen::MatrixXd s_matrix(int T) {
  if (T < 1) throw std::invalid_argument("s_matrix: T must be >= 1");
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(T, T);
  for (int i = 0; i < T; ++i) {
    s(i, i) = 2.0;
    if (i + 1 < T) {
      s(i, i + 1) = -1.0;
      s(i + 1, i) = -1.0;
    }
  }
  s(T - 1, T - 1) -= 1.0;
  return s;
}

inline Eigen::VectorXd s_matrix_spectrum(int T) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s_matrix(T));
  return es.eigenvalues();  // ascending
}

// --- Slopes and conjecture scans ------------------------------------------------

inline double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2)
    throw std::invalid_argument("loglog_slope: need >= 2 matched points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0) || !(ys[i] > 0.0))
      throw std::domain_error("loglog_slope: all values must be positive");
    double lx = std::log(xs[i]), ly = std::log(ys[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  double nn = static_cast<double>(xs.size());
  double denom = sxx - sx * sx / nn;
  if (denom <= 0.0) throw std::domain_error("loglog_slope: degenerate abscissae");
  return (sxy - sx * sy / nn) / denom;
}

struct ScanRow {
  double grid = 0.0;   // n or alpha
  double value = 0.0;  // the plotted quantity
};

struct ScanResult {
  std::vector<ScanRow> rows;
  std::optional<double> slope;
};

// Scaling scan of (T d / 2m) * SP^{-1} against n for Jordan-block hard
// instances; d = n/r, T = 2n by default.
inline ScanResult figure3_scan(int r, const std::vector<int>& n_grid, int m) {
  ScanResult out;
  std::vector<double> xs, ys;
  for (int n : n_grid) {
    if (n % r != 0) throw std::invalid_argument("figure3_scan: r must divide every n");
    int d = n / r;
    int T = 2 * n;
    ThetaMatrix theta = build_theta(r, T, T);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(theta.theta);
    if (!(es.eigenvalues().minCoeff() > 0.0))
      throw std::domain_error("figure3_scan: Theta is not positive definite");
    // BDiag(Theta, m) spectrum = Theta's with multiplicity m; psi consumes
    // eigenvalues of Sigma^{-1}.
    std::vector<EigMult> inv_eigs;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
      inv_eigs.push_back({1.0 / es.eigenvalues()[i], m});
    StylizedSolution sol = solve_stylized(inv_eigs, d);
    double value = static_cast<double>(T) * d / (2.0 * m) / sol.sp_value;
    out.rows.push_back({static_cast<double>(n), value});
    xs.push_back(static_cast<double>(n));
    ys.push_back(value);
  }
  if (xs.size() >= 2) out.slope = loglog_slope(xs, ys);
  return out;
}

// Scan of 1 / ulam(Gamma_k(J_r), Gamma_{k*alpha}(J_r)) against alpha.
inline ScanResult figure4_scan(int r, int k, const std::vector<double>& alpha_grid) {
  ScanResult out;
  DynamicsPair dyn(jordan_block(r), Eigen::MatrixXd::Identity(r, r));
  Eigen::MatrixXd gamma_k = covkit::avg_covariance(dyn, k);
  std::vector<double> xs, ys;
  for (double alpha : alpha_grid) {
    if (alpha < 1.0) throw std::invalid_argument("figure4_scan: alpha grid must be >= 1");
    int t = static_cast<int>(std::lround(k * alpha));
    Eigen::MatrixXd gamma_t = covkit::avg_covariance(dyn, t);
    double lam = covkit::ulam(gamma_k, gamma_t);
    out.rows.push_back({alpha, 1.0 / lam});
    if (alpha > 1.0) {
      xs.push_back(alpha);
      ys.push_back(1.0 / lam);
    }
  }
  if (xs.size() >= 2) out.slope = loglog_slope(xs, ys);
  return out;
}

}  // namespace lowerbound
}  // namespace trajlearn
