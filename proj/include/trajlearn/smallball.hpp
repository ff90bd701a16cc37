#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "trajlearn/covkit.hpp"
#include "trajlearn/generators.hpp"
#include "trajlearn/util.hpp"

namespace trajlearn {
namespace smallball {

enum : std::uint64_t {
  kStreamDirections = 11,
  kStreamBlockTrial = 12,
  kStreamPrefix = 13,
  kStreamInner = 14,
  kStreamGammaEst = 15,
};

struct ExceedanceCurve {
  int direction = 0;
  int block = 0;             // j, 1-based
  std::vector<double> prob;  // per eps grid point; max over prefixes for j > 1
  std::size_t trials = 0;    // trials behind each probability
};

struct SmallBallCertificate {
  int T = 0;
  int k = 0;
  std::vector<Eigen::MatrixXd> Psis;
  std::vector<double> eps_grid;
  std::vector<ExceedanceCurve> curves;
  std::optional<double> fitted_csb;
  std::optional<double> fitted_alpha;
  bool refused = false;
  std::string diagnostic;
};

struct WeakCertificate {
  double alpha = 0.0;
  double beta = 0.0;
  int k = 0;
  std::vector<Eigen::MatrixXd> Psis;
  double C_S = 0.0;
  double mu_bar = 0.0;
  double worst_exceedance = 0.0;
  double worst_upper_ci = 1.0;  // Clopper-Pearson 95% upper bound
  bool passed = false;
  bool refused = false;
  std::string diagnostic;
};

namespace detail {

// Direction set: sampled unit vectors plus the eigenvectors of every Psi_j.
inline Eigen::MatrixXd build_directions(const std::vector<Eigen::MatrixXd>& Psis,
                                        Eigen::Index n, int n_directions,
                                        std::uint64_t seed) {
  std::vector<Eigen::VectorXd> dirs;
  RngStream rs = RngStream::from_path(seed, {kStreamDirections});
  for (int i = 0; i < n_directions; ++i) {
    Eigen::VectorXd g;
    do {
      g = rs.gauss_vector(n);
    } while (g.norm() < 1e-12);
    dirs.push_back(g / g.norm());
  }
  for (const auto& psi : Psis) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(psi);
    for (Eigen::Index c = 0; c < n; ++c) dirs.push_back(es.eigenvectors().col(c));
  }
  Eigen::MatrixXd v(n, static_cast<Eigen::Index>(dirs.size()));
  for (std::size_t c = 0; c < dirs.size(); ++c) v.col(c) = dirs[c];
  return v;
}

// Exceedance probabilities for one block j across all directions and grid
// points. Block 1 is the exact unconditional probability. For j > 1 the
// conditional probability is estimated by stratified resampling: freeze
// n_prefix realized prefixes, redraw the block n_inner times each, and
// report the worst prefix.
inline std::vector<std::vector<double>> block_exceedance(
    const Process& proc, int T, int k, int j, const Eigen::MatrixXd& dirs,
    const Eigen::MatrixXd& psi, const std::vector<double>& eps_grid,
    int trials, int n_prefix, std::uint64_t seed, std::size_t* trials_out) {
  const Eigen::Index n_dirs = dirs.cols();
  const Eigen::Index n_eps = static_cast<Eigen::Index>(eps_grid.size());
  Eigen::VectorXd psi_quad(n_dirs);
  for (Eigen::Index c = 0; c < n_dirs; ++c)
    psi_quad[c] = dirs.col(c).dot(psi * dirs.col(c));

  auto run_cell = [&](Sampler& base, int reps, std::uint64_t cell_tag)
      -> std::vector<std::vector<std::size_t>> {
    std::vector<std::vector<std::size_t>> counts(
        n_dirs, std::vector<std::size_t>(n_eps, 0));
    for (int rep = 0; rep < reps; ++rep) {
      RngStream rs = RngStream::from_path(
          seed, {kStreamInner, static_cast<std::uint64_t>(j), cell_tag,
                 static_cast<std::uint64_t>(rep)});
      auto s = base.clone();
      Eigen::MatrixXd block(k, dirs.rows());
      for (int t = 0; t < k; ++t) block.row(t) = s->step(rs).transpose();
      Eigen::VectorXd z =
          (block * dirs).colwise().squaredNorm() / static_cast<double>(k);
      for (Eigen::Index c = 0; c < n_dirs; ++c) {
        for (Eigen::Index e = 0; e < n_eps; ++e) {
          if (z[c] <= eps_grid[e] * psi_quad[c]) ++counts[c][e];
        }
      }
    }
    return counts;
  };

  std::vector<std::vector<double>> prob(n_dirs, std::vector<double>(n_eps, 0.0));
  if (j == 1) {
    auto base = proc.start(T);
    auto counts = run_cell(*base, trials, 0);
    for (Eigen::Index c = 0; c < n_dirs; ++c)
      for (Eigen::Index e = 0; e < n_eps; ++e)
        prob[c][e] = static_cast<double>(counts[c][e]) / trials;
    if (trials_out) *trials_out = trials;
    return prob;
  }

  int n_inner = std::max(1, trials / std::max(1, n_prefix));
  for (int p = 0; p < n_prefix; ++p) {
    RngStream prefix_rs = RngStream::from_path(
        seed, {kStreamPrefix, static_cast<std::uint64_t>(j),
               static_cast<std::uint64_t>(p)});
    auto base = proc.start(T);
    for (int t = 0; t < (j - 1) * k; ++t) base->step(prefix_rs);
    auto counts = run_cell(*base, n_inner, static_cast<std::uint64_t>(p) + 1);
    for (Eigen::Index c = 0; c < n_dirs; ++c)
      for (Eigen::Index e = 0; e < n_eps; ++e)
        prob[c][e] = std::max(prob[c][e],
                              static_cast<double>(counts[c][e]) / n_inner);
  }
  if (trials_out) *trials_out = static_cast<std::size_t>(n_inner);
  return prob;
}

// avg Psi <= Gamma within tolerance; Gamma is analytic when the process has
// one, otherwise a Monte Carlo estimate with its error folded into the slack.
inline bool check_dominance(const Process& proc, int T,
                            const std::vector<Eigen::MatrixXd>& Psis,
                            std::uint64_t seed, std::string* diag) {
  Eigen::Index n = proc.dim();
  Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(n, n);
  for (const auto& psi : Psis) avg += psi;
  avg /= static_cast<double>(Psis.size());
  Eigen::MatrixXd gamma;
  double slack = 0.0;
  if (auto g = proc.gamma(T)) {
    gamma = *g;
  } else {
    GammaEstimate est = estimate_gamma(proc, T, 2000,
                                       trajlearn::detail::mix64(seed ^ kStreamGammaEst));
    gamma = est.gamma;
    slack = 4.0 * est.se * static_cast<double>(n);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gamma - avg);
  double tol = 1e-10 * std::max(gamma.trace(), 1.0) + slack;
  if (es.eigenvalues().minCoeff() < -tol) {
    if (diag)
      *diag = "average Psi is not dominated by Gamma_T (min eig deficit " +
              std::to_string(es.eigenvalues().minCoeff()) + ")";
    return false;
  }
  return true;
}

inline std::vector<Eigen::MatrixXd> expand_psis(std::vector<Eigen::MatrixXd> Psis,
                                                int blocks) {
  if (Psis.empty()) throw std::invalid_argument("smallball: empty Psi list");
  if (static_cast<int>(Psis.size()) == 1 && blocks > 1)
    Psis.resize(blocks, Psis[0]);
  if (static_cast<int>(Psis.size()) != blocks)
    throw std::invalid_argument("smallball: Psi count must be 1 or floor(T/k)");
  return Psis;
}

}  // namespace detail

// Candidate exponents for envelope fitting: 1/(2D) for D = 1..8, plus 1/3
// and 1. Common processes land on 1/2, 1/4, or 1/(2D).
inline std::vector<double> alpha_grid() {
  std::vector<double> g;
  for (int d = 1; d <= 8; ++d) g.push_back(1.0 / (2.0 * d));
  g.push_back(1.0 / 3.0);
  g.push_back(1.0);
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  return g;
}

// Empirical certification of the trajectory small-ball condition: estimates
// block exceedance curves over sampled directions, then fits the tightest
// (c_sb, alpha) envelope on the alpha grid.
inline SmallBallCertificate certify(const Process& proc, int T, int k,
                                    std::vector<Eigen::MatrixXd> Psis,
                                    std::vector<double> eps_grid, int n_directions,
                                    int n_trials, std::uint64_t seed,
                                    int n_prefix = 8) {
  if (k < 1 || k > T) throw std::invalid_argument("certify: k must be in {1..T}");
  if (eps_grid.empty()) throw std::invalid_argument("certify: empty eps grid");
  std::sort(eps_grid.begin(), eps_grid.end());
  const int blocks = T / k;
  Psis = detail::expand_psis(std::move(Psis), blocks);

  SmallBallCertificate cert;
  cert.T = T;
  cert.k = k;
  cert.Psis = Psis;
  cert.eps_grid = eps_grid;

  if (!detail::check_dominance(proc, T, Psis, seed, &cert.diagnostic)) {
    cert.refused = true;
    return cert;
  }

  Eigen::MatrixXd dirs = detail::build_directions(Psis, proc.dim(), n_directions, seed);
  std::vector<double> worst(eps_grid.size(), 0.0);
  for (int j = 1; j <= blocks; ++j) {
    std::size_t cell_trials = 0;
    auto prob = detail::block_exceedance(proc, T, k, j, dirs, Psis[j - 1],
                                         eps_grid, n_trials, n_prefix, seed,
                                         &cell_trials);
    for (Eigen::Index c = 0; c < dirs.cols(); ++c) {
      ExceedanceCurve curve;
      curve.direction = static_cast<int>(c);
      curve.block = j;
      curve.prob = prob[c];
      curve.trials = cell_trials;
      cert.curves.push_back(std::move(curve));
      for (std::size_t e = 0; e < eps_grid.size(); ++e)
        worst[e] = std::max(worst[e], prob[c][e]);
    }
  }

  // No anti-concentration at the finest scale means no envelope exists.
  if (worst.front() >= 0.95) {
    cert.refused = true;
    cert.diagnostic = "exceedance ~ 1 at the smallest scale; no (c_sb, alpha) envelope fits";
    return cert;
  }

  double best_score = std::numeric_limits<double>::infinity();
  for (double alpha : alpha_grid()) {
    double c = 1.0;
    for (std::size_t e = 0; e < eps_grid.size(); ++e) {
      if (worst[e] <= 0.0) continue;
      c = std::max(c, std::pow(worst[e], 1.0 / alpha) / eps_grid[e]);
    }
    // Selection objective mirrors the shape of the OLS risk bound.
    double score = std::pow(c, alpha) * std::log(std::max(c / alpha, 1.0 + 1e-12)) / alpha;
    if (score < best_score) {
      best_score = score;
      cert.fitted_csb = c;
      cert.fitted_alpha = alpha;
    }
  }
  return cert;
}

struct AvgToBlockReport {
  double alpha = 0.0;
  double beta = 0.0;
  double premise_max = 0.0;       // worst per-step average probability at scale alpha
  bool premise_holds = false;     // premise_max <= beta within MC error
  std::vector<double> eps;        // grid of block scales checked, all < alpha
  std::vector<double> block_prob; // worst block exceedance at each eps
  std::vector<double> bound;      // beta / (1 - eps/alpha)
  bool implication_holds = false; // block_prob <= bound + 3 SE everywhere
  std::size_t trials = 0;
};

// Checks the average-small-ball-implies-block implication on a process: when
// the per-step average condition holds at (alpha, beta), the block exceedance
// must stay below beta / (1 - eps/alpha) for every eps < alpha.
inline AvgToBlockReport check_avg_to_block(const Process& proc, int T, int k,
                                           std::vector<Eigen::MatrixXd> Psis,
                                           double alpha, double beta, int trials,
                                           std::uint64_t seed) {
  if (!(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0))
    throw std::invalid_argument("check_avg_to_block: alpha and beta must lie in (0,1)");
  const int blocks = T / k;
  Psis = detail::expand_psis(std::move(Psis), blocks);
  Eigen::MatrixXd dirs = detail::build_directions(Psis, proc.dim(), 16, seed);

  AvgToBlockReport rep;
  rep.alpha = alpha;
  rep.beta = beta;
  rep.trials = static_cast<std::size_t>(trials);
  for (double f : {0.25, 0.5, 0.75}) rep.eps.push_back(f * alpha);
  rep.block_prob.assign(rep.eps.size(), 0.0);

  Eigen::VectorXd psi_quad(dirs.cols());
  std::vector<std::vector<std::size_t>> step_counts(
      blocks, std::vector<std::size_t>(dirs.cols(), 0));
  std::vector<std::vector<std::vector<std::size_t>>> block_counts(
      blocks, std::vector<std::vector<std::size_t>>(
                  dirs.cols(), std::vector<std::size_t>(rep.eps.size(), 0)));

  for (int trial = 0; trial < trials; ++trial) {
    RngStream rs = RngStream::from_path(
        seed, {kStreamBlockTrial, static_cast<std::uint64_t>(trial)});
    Eigen::MatrixXd x = proc.sample_full(T, rs);
    for (int j = 0; j < blocks; ++j) {
      for (Eigen::Index c = 0; c < dirs.cols(); ++c)
        psi_quad[c] = dirs.col(c).dot(Psis[j] * dirs.col(c));
      Eigen::MatrixXd xb = x.middleRows(j * k, k);
      Eigen::MatrixXd proj = xb * dirs;  // k x n_dirs
      for (Eigen::Index c = 0; c < dirs.cols(); ++c) {
        // Average of per-step events at scale alpha, accumulated over steps.
        for (int t = 0; t < k; ++t)
          if (proj(t, c) * proj(t, c) <= alpha * psi_quad[c]) ++step_counts[j][c];
        double z = proj.col(c).squaredNorm() / static_cast<double>(k);
        for (std::size_t e = 0; e < rep.eps.size(); ++e)
          if (z <= rep.eps[e] * psi_quad[c]) ++block_counts[j][c][e];
      }
    }
  }

  for (int j = 0; j < blocks; ++j) {
    for (Eigen::Index c = 0; c < dirs.cols(); ++c) {
      double avg = static_cast<double>(step_counts[j][c]) /
                   (static_cast<double>(trials) * k);
      rep.premise_max = std::max(rep.premise_max, avg);
      for (std::size_t e = 0; e < rep.eps.size(); ++e) {
        double p = static_cast<double>(block_counts[j][c][e]) / trials;
        rep.block_prob[e] = std::max(rep.block_prob[e], p);
      }
    }
  }
  double premise_se = binomial_se(
      static_cast<std::size_t>(rep.premise_max * trials * k),
      static_cast<std::size_t>(trials) * k);
  rep.premise_holds = rep.premise_max <= beta + 3.0 * premise_se;
  rep.implication_holds = true;
  for (std::size_t e = 0; e < rep.eps.size(); ++e) {
    rep.bound.push_back(beta / (1.0 - rep.eps[e] / alpha));
    double se = binomial_se(static_cast<std::size_t>(rep.block_prob[e] * trials),
                            static_cast<std::size_t>(trials));
    if (rep.block_prob[e] > rep.bound[e] + 3.0 * se) rep.implication_holds = false;
  }
  return rep;
}

// Pass/fail certification of the weak (single-scale) condition, plus the
// derived growth constants C_S and mu_bar.
inline WeakCertificate certify_weak(const Process& proc, int T, int k,
                                    std::vector<Eigen::MatrixXd> Psis,
                                    double alpha, double beta,
                                    const Eigen::MatrixXd& Gamma_lower,
                                    int trials, std::uint64_t seed,
                                    int n_prefix = 8) {
  if (!(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0))
    throw std::invalid_argument("certify_weak: alpha and beta must lie in (0,1)");
  const int blocks = T / k;
  Psis = detail::expand_psis(std::move(Psis), blocks);

  WeakCertificate cert;
  cert.alpha = alpha;
  cert.beta = beta;
  cert.k = k;
  cert.Psis = Psis;

  if (!detail::check_dominance(proc, T, Psis, seed, &cert.diagnostic)) {
    cert.refused = true;
    return cert;
  }

  // Growth constants from the eigenvalue ratios against the lower proxy.
  std::vector<double> lams;
  for (const auto& psi : Psis) lams.push_back(covkit::ulam(psi, Gamma_lower));
  double s1 = 0.0, s2 = 0.0;
  for (double l : lams) {
    s1 += l;
    s2 += l * l;
  }
  double s = static_cast<double>(lams.size());
  cert.mu_bar = s1 / s;
  cert.C_S = (s2 / s) / (cert.mu_bar * cert.mu_bar);

  Eigen::MatrixXd dirs = detail::build_directions(Psis, proc.dim(), 16, seed);
  std::vector<double> eps_single{alpha};
  std::size_t worst_trials = 1;
  for (int j = 1; j <= blocks; ++j) {
    std::size_t cell_trials = 0;
    auto prob = detail::block_exceedance(proc, T, k, j, dirs, Psis[j - 1],
                                         eps_single, trials, n_prefix, seed,
                                         &cell_trials);
    for (Eigen::Index c = 0; c < dirs.cols(); ++c) {
      if (prob[c][0] >= cert.worst_exceedance) {
        cert.worst_exceedance = prob[c][0];
        worst_trials = cell_trials;
      }
    }
  }
  BinomialCi ci = clopper_pearson(
      static_cast<std::size_t>(std::lround(cert.worst_exceedance * worst_trials)),
      worst_trials);
  cert.worst_upper_ci = ci.upper;
  cert.passed = cert.worst_exceedance <= beta;
  return cert;
}

}  // namespace smallball
}  // namespace trajlearn
