// Acceptance gate: one line per criterion, nonzero exit if any fail.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "trajlearn/covkit.hpp"
#include "trajlearn/experiments.hpp"
#include "trajlearn/generators.hpp"
#include "trajlearn/lowerbound.hpp"
#include "trajlearn/regression.hpp"
#include "trajlearn/smallball.hpp"
#include "trajlearn/util.hpp"

using namespace trajlearn;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr std::uint64_t kSeed = 20260826;

int g_failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << ": " << detail
            << std::endl;
  if (!ok) ++g_failures;
}

int find_col(const experiments::ResultTable& t, const std::string& name) {
  for (std::size_t i = 0; i < t.columns.size(); ++i)
    if (t.columns[i] == name) return static_cast<int>(i);
  throw std::logic_error("missing column " + name);
}

const std::vector<double>& find_row(const experiments::ResultTable& t, double rho,
                                    int m) {
  for (const auto& row : t.rows)
    if (row[0] == rho && row[1] == static_cast<double>(m)) return row;
  throw std::logic_error("missing row");
}

// --- criterion 1 + its determinism string ------------------------------------

lowerbound::TraceInverseEstimate wishart_run(unsigned threads) {
  DynamicsPair dyn{MatrixXd::Zero(5, 5), MatrixXd::Identity(5, 5)};
  LdsProcess proc(dyn);
  return lowerbound::expected_trace_inverse_mc(proc, 5, 10, MatrixXd::Identity(5, 5),
                                               4000, kSeed, threads);
}

std::string wishart_csv(const lowerbound::TraceInverseEstimate& est) {
  std::ostringstream os;
  os << "mean,se,rank_failures\n"
     << fmt_double(est.mean) << "," << fmt_double(est.se) << "," << est.rank_failures
     << "\n";
  for (double v : est.per_trial) os << fmt_double(v) << "\n";
  return os.str();
}

void criterion1(const lowerbound::TraceInverseEstimate& est) {
  const double truth = 5.0 / 44.0;
  double rel = std::abs(est.mean - truth) / truth;
  std::ostringstream d;
  d << "Wishart trace inverse: mean " << est.mean << " vs " << truth
    << ", rel err " << rel << " (tol 0.03)";
  report(1, rel <= 0.03, d.str());
}

// --- criterion 2 ---------------------------------------------------------------

void criterion2() {
  bool ok = true;
  double worst_lo = 1e300, worst_hi = 0.0;
  for (int T = 8; T <= 200; ++T) {
    VectorXd lam = lowerbound::s_matrix_spectrum(T);  // ascending
    for (int k = 1; k <= T; ++k) {
      double v = lam[k - 1];  // lambda_{T-k+1} in descending order
      double x = static_cast<double>(k) * k / (static_cast<double>(T) * T);
      if (v < 0.02 * x || v > M_PI * M_PI * x) ok = false;
      worst_lo = std::min(worst_lo, v / x);
      worst_hi = std::max(worst_hi, v / x);
    }
  }
  std::ostringstream d;
  d << "S_T spectrum in [0.02, pi^2] * k^2/T^2 for T in 8..200; observed ratio range ["
    << worst_lo << ", " << worst_hi << "]";
  report(2, ok, d.str());
}

// --- criterion 3 ---------------------------------------------------------------

void criterion3() {
  bool ok = true;
  std::ostringstream d;
  d << "stylized closed form x-bar sqrt(n) = n/(q-n) within 1e-9 rel:";
  for (auto [q, n] : std::vector<std::pair<long, long>>{{10, 3}, {50, 5}, {200, 20}}) {
    auto sol = lowerbound::solve_stylized({{1.0, q}}, n);
    double got = sol.xbar * std::sqrt(static_cast<double>(n));
    double want = static_cast<double>(n) / static_cast<double>(q - n);
    double rel = std::abs(got - want) / want;
    if (rel > 1e-9) ok = false;
    d << " (" << q << "," << n << "): " << rel;
  }
  report(3, ok, d.str());
}

// --- criterion 4 + determinism ---------------------------------------------------

experiments::ResultTable figure2_run(unsigned threads) {
  experiments::ExperimentConfig cfg;
  cfg.kind = "risk_ratio";
  cfg.n = 5;
  cfg.T_rule = "50";
  cfg.rho_grid = {0.98, 1.0, 1.02};
  cfg.m_grid = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  cfg.trials = 300;
  cfg.seed = kSeed;
  cfg.seed_set = true;
  cfg.threads = threads;
  return experiments::risk_ratio_experiment(cfg);
}

void criterion4(const experiments::ResultTable& t) {
  int c_ratio = find_col(t, "ratio");
  int c_lo = find_col(t, "ci_lower");
  int c_hi = find_col(t, "ci_upper");

  const auto& mid = find_row(t, 1.0, 10);
  bool a = mid[c_hi] <= 2.5;

  const auto& hot = find_row(t, 1.02, 1);
  const auto& cold = find_row(t, 0.98, 1);
  bool b = hot[c_ratio] > cold[c_ratio] && hot[c_lo] > cold[c_hi];

  double rmin = 1e300, rmax = 0.0;
  for (double rho : {0.98, 1.0, 1.02}) {
    double r = find_row(t, rho, 10)[c_ratio];
    rmin = std::min(rmin, r);
    rmax = std::max(rmax, r);
  }
  bool c = rmax <= 2.0 * rmin;

  std::ostringstream d;
  d << "risk ratios: (a) m=10 rho=1 ci_upper " << mid[c_hi] << " <= 2.5 -> "
    << (a ? "yes" : "no") << "; (b) m=1 separation [" << cold[c_hi] << " vs "
    << hot[c_lo] << "] -> " << (b ? "yes" : "no") << "; (c) m=10 spread "
    << rmax / rmin << " <= 2 -> " << (c ? "yes" : "no");
  report(4, a && b && c, d.str());
}

// --- criterion 5 + determinism ---------------------------------------------------

experiments::ResultTable rate_run(unsigned threads) {
  experiments::ExperimentConfig cfg;
  cfg.kind = "rate_scan";
  cfg.family = "many_traj";
  cfg.n = 4;
  cfg.p = 4;
  cfg.m_grid = {32};
  cfg.T_grid = {8, 16, 32, 64, 128, 256};
  cfg.trials = 500;
  cfg.seed = kSeed;
  cfg.seed_set = true;
  cfg.noise = "gaussian";
  cfg.sigma_xi = 1.0;
  cfg.threads = threads;
  return experiments::rate_scan(cfg);
}

void criterion5(const experiments::ResultTable& t) {
  double slope = t.slope.value_or(0.0);
  bool slope_ok = std::abs(slope + 1.0) <= 0.15;
  int nc = find_col(t, "normalized");
  double nmax = 0.0;
  for (const auto& row : t.rows) nmax = std::max(nmax, row[nc]);
  bool norm_ok = nmax <= 5.0;  // pinned constant for risk * mT / (pn)
  std::ostringstream d;
  d << "many-trajectory rate: slope " << slope << " (-1 +- 0.15), max normalized risk "
    << nmax << " <= 5";
  report(5, slope_ok && norm_ok, d.str());
}

// --- criteria 6 and 7 -------------------------------------------------------------

void criterion6() {
  auto scan = lowerbound::figure3_scan(1, {16, 32, 64, 128, 256}, 1);
  double slope = scan.slope.value_or(0.0);
  bool ok = std::abs(slope - 2.0) <= 0.3;
  std::ostringstream d;
  d << "stylized scaling slope " << slope << " (2.0 +- 0.3)";
  report(6, ok, d.str());
}

void criterion7() {
  bool ok = true;
  std::ostringstream d;
  d << "horizon-extension slopes:";
  for (int r : {1, 2}) {
    auto scan = lowerbound::figure4_scan(r, 5, {2, 4, 8, 16, 32, 64});
    double slope = scan.slope.value_or(0.0);
    double want = 2.0 * r - 1.0;
    if (std::abs(slope - want) > 0.3) ok = false;
    d << " r=" << r << ": " << slope << " (" << want << " +- 0.3)";
  }
  report(7, ok, d.str());
}

// --- criterion 8 -------------------------------------------------------------------

void criterion8() {
  experiments::ExperimentConfig cfg;
  cfg.kind = "lower_vs_ols";
  cfg.n = 8;
  cfg.T_rule = "32";
  cfg.m_grid = {2};
  cfg.trials = 1000;
  cfg.seed = kSeed;
  cfg.seed_set = true;
  cfg.noise = "gaussian";
  cfg.sigma_xi = 1.0;
  cfg.threads = 8;
  auto t = experiments::lower_vs_ols(cfg);
  const auto& row = t.rows.at(0);
  double margin = row[find_col(t, "margin")];
  double se = row[find_col(t, "combined_se")];
  bool ok = margin >= -3.0 * se;
  std::ostringstream d;
  d << "OLS risk minus trace-inverse bound: margin " << margin << " >= -3 SE ("
    << -3.0 * se << ")";
  report(8, ok, d.str());
}

// --- criterion 9 -------------------------------------------------------------------

void criterion9() {
  CopiesProcess proc(MatrixXd::Identity(1, 1));
  std::vector<double> eps{1e-4, 1e-3, 1e-2, 1e-1};
  auto cert = smallball::certify(proc, 8, 8, {MatrixXd::Identity(1, 1)}, eps, 4,
                                 20000, kSeed);
  bool ok = !cert.refused;
  double worst_excess = -1e300;
  for (const auto& curve : cert.curves) {
    for (std::size_t e = 0; e < eps.size(); ++e) {
      double bound = std::sqrt(std::exp(1.0) * eps[e]);
      double se = std::sqrt(curve.prob[e] * (1.0 - curve.prob[e]) /
                            static_cast<double>(curve.trials));
      double excess = curve.prob[e] - (bound + 3.0 * se);
      worst_excess = std::max(worst_excess, excess);
      if (excess > 0.0) ok = false;
    }
  }
  std::ostringstream d;
  d << "scalar copies exceedance <= sqrt(e*eps) + 3 SE; worst slack "
    << -worst_excess;
  report(9, ok, d.str());
}

// --- criterion 10 ------------------------------------------------------------------

// Brute-force mixing time: smallest k with worst-case total variation
// distance max_i (1/2) || delta_i P^k - pi ||_1 <= eps.
int mixing_time_brute(int n, double eps) {
  MatrixXd p = NormalSubspacesProcess::transition_matrix(n);
  MatrixXd pk = MatrixXd::Identity(n, n);
  for (int k = 0; k <= 4096; ++k) {
    double worst = 0.0;
    for (int i = 0; i < n; ++i)
      worst = std::max(worst, 0.5 * (pk.row(i).array() - 1.0 / n).abs().sum());
    if (worst <= eps * (1.0 + 1e-9)) return k;  // slack for l1-sum rounding only
    pk = pk * p;
  }
  throw std::runtime_error("mixing_time_brute: did not converge");
}

void criterion10() {
  bool ok = true;
  std::ostringstream d;
  d << "mixing-time formula vs brute-force TV threshold:";
  for (int n : {3, 5, 8}) {
    for (double eps : {0.2, 0.05, 0.01}) {
      int formula = mixing_time_formula(n, eps);
      int brute = mixing_time_brute(n, eps);
      if (formula != brute) ok = false;
      d << " (n=" << n << ",eps=" << eps << "): " << formula << " vs " << brute;
    }
  }
  report(10, ok, d.str());
}

}  // namespace

int main(int, char**) {
  // Primary runs at 8 threads feed both their own criteria and criterion 11.
  auto w8 = wishart_run(8);
  auto f8 = figure2_run(8);
  auto r8 = rate_run(8);

  criterion1(w8);
  criterion2();
  criterion3();
  criterion4(f8);
  criterion5(r8);
  criterion6();
  criterion7();
  criterion8();
  criterion9();
  criterion10();

  bool det = true;
  for (unsigned threads : {1u, 4u}) {
    if (wishart_csv(wishart_run(threads)) != wishart_csv(w8)) det = false;
    if (figure2_run(threads).to_csv() != f8.to_csv()) det = false;
    if (rate_run(threads).to_csv() != r8.to_csv()) det = false;
  }
  report(11, det, det ? "criteria 1, 4, 5 byte-identical across 1, 4, 8 threads"
                      : "thread count changed at least one CSV");

  if (g_failures > 0) {
    std::cout << g_failures << " criterion(s) failed" << std::endl;
    return 1;
  }
  std::cout << "all criteria passed" << std::endl;
  return 0;
}
