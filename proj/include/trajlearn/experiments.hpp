#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "trajlearn/covkit.hpp"
#include "trajlearn/generators.hpp"
#include "trajlearn/lowerbound.hpp"
#include "trajlearn/regression.hpp"
#include "trajlearn/rng.hpp"
#include "trajlearn/util.hpp"

namespace trajlearn {
namespace experiments {

using nlohmann::json;

enum : std::uint64_t {
  kStreamHaar = 21,
  kStreamLds = 22,
  kStreamInd = 23,
  kStreamLabels = 24,
  kStreamBootstrap = 25,
  kStreamCell = 26,
};

inline constexpr int kBootstrapResamples = 1000;
inline constexpr double kRankFailureFlagFrac = 0.05;

struct ExperimentConfig {
  std::string kind;          // risk_ratio | rate_scan | lower_vs_ols
  std::string family;        // rate_scan: many_traj | few_traj | ind_seq | param_recovery
  int n = 5;
  int p = -1;                // -1: matches the family default (usually n)
  std::string T_rule = "10n";
  std::vector<int> T_grid;   // explicit grid wins over T_rule
  std::vector<int> m_grid;
  std::vector<double> rho_grid;
  int trials = 1000;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string noise = "sysid";  // sysid | gaussian
  double sigma_xi = 1.0;
  int Tprime = -1;           // -1: T' = T
  int min_traj_factor = 2;   // many_traj regime constraint m >= factor * n
  unsigned threads = 1;
  std::string output;

  void validate() const {
    if (kind != "risk_ratio" && kind != "rate_scan" && kind != "lower_vs_ols")
      throw std::invalid_argument("experiment kind must be risk_ratio, rate_scan, or lower_vs_ols");
    if (trials < 1) throw std::invalid_argument("trials must be >= 1");
    if (n < 1) throw std::invalid_argument("n must be >= 1");
    if (!seed_set) throw std::invalid_argument("seed is required");
    if (kind == "risk_ratio" && (m_grid.empty() || rho_grid.empty()))
      throw std::invalid_argument("risk_ratio needs nonempty m and rho grids");
    if (kind == "rate_scan" && family != "many_traj" && family != "few_traj" &&
        family != "ind_seq" && family != "param_recovery")
      throw std::invalid_argument("rate_scan family must be many_traj, few_traj, ind_seq, or param_recovery");
  }

  int resolve_T() const {
    if (T_rule == "10n") return 10 * n;
    size_t pos = 0;
    int t = std::stoi(T_rule, &pos);
    if (pos != T_rule.size() || t < 1)
      throw std::invalid_argument("T rule must be '10n' or a positive integer");
    return t;
  }

  json to_json() const {
    json j;
    j["kind"] = kind;
    if (!family.empty()) j["family"] = family;
    j["n"] = n;
    j["p"] = p;
    j["T_rule"] = T_rule;
    if (!T_grid.empty()) j["T_grid"] = T_grid;
    if (!m_grid.empty()) j["m_grid"] = m_grid;
    if (!rho_grid.empty()) j["rho_grid"] = rho_grid;
    j["trials"] = trials;
    j["seed"] = seed;
    j["noise"] = noise;
    j["sigma_xi"] = sigma_xi;
    j["Tprime"] = Tprime;
    j["min_traj_factor"] = min_traj_factor;
    return j;
  }

  static ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    c.kind = j.value("kind", "");
    c.family = j.value("family", "");
    c.n = j.value("n", 5);
    c.p = j.value("p", -1);
    c.T_rule = j.value("T_rule", "10n");
    if (j.contains("T_grid")) c.T_grid = j.at("T_grid").get<std::vector<int>>();
    if (j.contains("m_grid")) c.m_grid = j.at("m_grid").get<std::vector<int>>();
    if (j.contains("rho_grid")) c.rho_grid = j.at("rho_grid").get<std::vector<double>>();
    c.trials = j.value("trials", 1000);
    if (j.contains("seed")) {
      c.seed = j.at("seed").get<std::uint64_t>();
      c.seed_set = true;
    }
    c.noise = j.value("noise", "sysid");
    c.sigma_xi = j.value("sigma_xi", 1.0);
    c.Tprime = j.value("Tprime", -1);
    c.min_traj_factor = j.value("min_traj_factor", 2);
    return c;
  }
};

struct ResultTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  json meta;
  std::optional<double> slope;

  std::string to_csv() const {
    std::ostringstream os;
    for (auto it = meta.begin(); it != meta.end(); ++it)
      os << "# " << it.key() << "=" << (it->is_string() ? it->get<std::string>() : it->dump())
         << "\n";
    if (slope) os << "# slope=" << fmt_double(*slope) << "\n";
    for (std::size_t c = 0; c < columns.size(); ++c)
      os << columns[c] << (c + 1 < columns.size() ? "," : "\n");
    for (const auto& row : rows)
      for (std::size_t c = 0; c < row.size(); ++c)
        os << fmt_double(row[c]) << (c + 1 < row.size() ? "," : "\n");
    return os.str();
  }
};

namespace detail {

// FNV-1a of the canonical config dump, recorded so a CSV can be matched back
// to the exact configuration that produced it.
inline std::uint64_t config_hash(const json& j) {
  std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline void stamp_meta(ResultTable& table, const ExperimentConfig& cfg) {
  json cj = cfg.to_json();
  table.meta["config"] = cj;
  table.meta["config_hash"] = config_hash(cj);
  table.meta["seed"] = cfg.seed;
  table.meta["version"] = std::string("1");
}

// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
// R-diagonal sign correction.
inline Eigen::MatrixXd haar_orthogonal(Eigen::Index n, RngStream& rs) {
  Eigen::MatrixXd g = rs.gauss_matrix(n, n);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return q;
}

// Cell tag independent of grid layout, so merging grids reproduces per-cell
// results exactly.
inline std::uint64_t cell_tag(double rho, int m) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(rho));
  std::memcpy(&bits, &rho, sizeof(bits));
  return trajlearn::detail::mix64(bits ^ trajlearn::detail::mix64(static_cast<std::uint64_t>(m)));
}

struct TrialStats {
  std::vector<double> values;
  int rank_failures = 0;
};

// Percentile bootstrap CI for the ratio mean(a)/mean(b).
inline std::pair<double, double> bootstrap_ratio_ci(const std::vector<double>& a,
                                                    const std::vector<double>& b,
                                                    std::uint64_t seed) {
  std::vector<double> ratios(kBootstrapResamples);
  RngStream rs = RngStream::from_path(seed, {kStreamBootstrap});
  for (int r = 0; r < kBootstrapResamples; ++r) {
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sa += a[rs.next_below(a.size())];
    for (std::size_t i = 0; i < b.size(); ++i) sb += b[rs.next_below(b.size())];
    ratios[r] = (sa / static_cast<double>(a.size())) / (sb / static_cast<double>(b.size()));
  }
  std::sort(ratios.begin(), ratios.end());
  auto pick = [&](double q) {
    double idx = q * (kBootstrapResamples - 1);
    return ratios[static_cast<std::size_t>(std::lround(idx))];
  };
  return {pick(0.025), pick(0.975)};
}

}  // namespace detail

// Per-trial risks of the LDS-LS instance and its iid-marginal baseline at one
// (rho, m) cell. Both problems fit OLS with sysid-style responses; the
// baseline gets decoupled noise with the matching covariance B B^T = I/4.
inline void risk_ratio_cell(const ExperimentConfig& cfg, double rho, int m,
                            detail::TrialStats& lds_out, detail::TrialStats& ind_out) {
  const int n = cfg.n;
  const int T = cfg.resolve_T();
  const int Tp = cfg.Tprime > 0 ? cfg.Tprime : T;
  const std::uint64_t tag = detail::cell_tag(rho, m);
  lds_out.values.assign(cfg.trials, 0.0);
  ind_out.values.assign(cfg.trials, 0.0);
  std::vector<int> lds_rank(cfg.trials, 0), ind_rank(cfg.trials, 0);

  parallel_for(static_cast<std::size_t>(cfg.trials), cfg.threads, [&](std::size_t trial) {
    std::uint64_t tu = static_cast<std::uint64_t>(trial);
    RngStream haar = RngStream::from_path(cfg.seed, {kStreamHaar, tag, tu});
    Eigen::MatrixXd u = detail::haar_orthogonal(n, haar);
    Eigen::VectorXd d(n);
    int pos = n / 2;
    for (int i = 0; i < n; ++i) d[i] = i < pos ? rho : -rho;
    DynamicsPair dyn{u * d.asDiagonal() * u.transpose(),
                             0.5 * Eigen::MatrixXd::Identity(n, n)};
    Eigen::MatrixXd gamma = covkit::avg_covariance(dyn, Tp);

    TrajectoryBatch lds = gen_lds(dyn, m, T,
                                  RngStream::derive_seed(cfg.seed, {kStreamLds, tag, tu}));
    LabeledBatch lds_lab = label_batch(std::move(lds), dyn.A,
                                       NoiseKind::sysid_coupled, 0.0, 0);
    OlsFit lds_fit = ols_fit(lds_lab);
    if (lds_fit.rank_deficient) lds_rank[trial] = 1;
    lds_out.values[trial] = risk(lds_fit.W_hat, dyn.A, gamma);

    IidGaussProcess ind_proc = IidGaussProcess::lds_marginals(dyn, T);
    std::uint64_t ind_seed = RngStream::derive_seed(cfg.seed, {kStreamInd, tag, tu});
    TrajectoryBatch ind = gen_batch(ind_proc, m, T, ind_seed);
    LabeledBatch ind_lab = label_batch(std::move(ind), dyn.A,
                                       NoiseKind::gaussian_decoupled, 0.5, ind_seed);
    OlsFit ind_fit = ols_fit(ind_lab);
    if (ind_fit.rank_deficient) ind_rank[trial] = 1;
    ind_out.values[trial] = risk(ind_fit.W_hat, dyn.A, gamma);
  });
  for (int r : lds_rank) lds_out.rank_failures += r;
  for (int r : ind_rank) ind_out.rank_failures += r;
}

// Ratio of mean OLS excess risks, LDS trajectories over iid draws from the
// same marginals, across an (m, rho) grid.
inline ResultTable risk_ratio_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<double> rhos = cfg.rho_grid;
  std::vector<int> ms = cfg.m_grid;
  std::sort(rhos.begin(), rhos.end());
  std::sort(ms.begin(), ms.end());

  ResultTable table;
  table.columns = {"rho", "m", "ratio", "ci_lower", "ci_upper", "lds_mean", "lds_se",
                   "ind_mean", "ind_se", "trials", "rank_failures", "flagged"};
  for (double rho : rhos) {
    for (int m : ms) {
      detail::TrialStats lds, ind;
      risk_ratio_cell(cfg, rho, m, lds, ind);
      MeanSe lm = mean_se(lds.values);
      MeanSe im = mean_se(ind.values);
      auto ci = detail::bootstrap_ratio_ci(
          lds.values, ind.values,
          RngStream::derive_seed(cfg.seed, {kStreamCell, detail::cell_tag(rho, m)}));
      int fails = lds.rank_failures + ind.rank_failures;
      double flagged =
          fails > kRankFailureFlagFrac * 2.0 * cfg.trials ? 1.0 : 0.0;
      table.rows.push_back({rho, static_cast<double>(m), lm.mean / im.mean, ci.first,
                            ci.second, lm.mean, lm.se, im.mean, im.se,
                            static_cast<double>(cfg.trials), static_cast<double>(fails),
                            flagged});
    }
  }
  detail::stamp_meta(table, cfg);
  return table;
}

namespace detail {

struct ScanInstance {
  int m = 0;
  int T = 0;
  Eigen::MatrixXd W_star;
  Eigen::MatrixXd gamma;       // Gamma_{T'}
  bool iid = false;            // ind_seq draws an iid process instead of an LDS
  bool param_metric = false;   // normalize Frobenius parameter error instead of risk
};

}  // namespace detail

// Mean OLS risk across a T grid for one of the rate families, with the
// log-log slope in T and the theory-normalized value per row.
inline ResultTable rate_scan(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.T_grid.empty()) throw std::invalid_argument("rate_scan needs a T grid");
  const int n = cfg.n;
  const int p = cfg.p > 0 ? cfg.p : n;
  int m = cfg.m_grid.empty() ? 0 : cfg.m_grid.front();
  bool iid = cfg.family == "ind_seq";
  bool param_metric = cfg.family == "param_recovery";
  if (cfg.family == "many_traj") {
    if (m == 0) m = 32;
    if (m < cfg.min_traj_factor * n)
      throw std::invalid_argument("many_traj requires m >= min_traj_factor * n");
  } else if (cfg.family == "few_traj") {
    if (m == 0) m = 2;
  } else if (cfg.family == "ind_seq") {
    if (m == 0) m = 1;
  } else {
    if (m == 0) m = 4 * n;
  }

  std::vector<int> Ts = cfg.T_grid;
  std::sort(Ts.begin(), Ts.end());
  ResultTable table;
  table.columns = {"T", "mean", "se", "normalized", "trials", "rank_failures", "flagged"};
  std::vector<double> log_T, log_mean;
  DynamicsPair dyn{Eigen::MatrixXd::Identity(n, n),
                           Eigen::MatrixXd::Identity(n, n)};
  Eigen::MatrixXd W_star = Eigen::MatrixXd::Identity(p, n);

  for (int T : Ts) {
    const int Tp = cfg.Tprime > 0 ? cfg.Tprime : T;
    Eigen::MatrixXd gamma = iid ? Eigen::MatrixXd::Identity(n, n)
                                : covkit::avg_covariance(dyn, Tp);
    std::vector<double> vals(cfg.trials, 0.0);
    std::vector<int> rank(cfg.trials, 0);
    std::uint64_t tag = detail::cell_tag(static_cast<double>(T), m);
    parallel_for(static_cast<std::size_t>(cfg.trials), cfg.threads, [&](std::size_t trial) {
      std::uint64_t tu = static_cast<std::uint64_t>(trial);
      std::uint64_t s = RngStream::derive_seed(cfg.seed, {kStreamLds, tag, tu});
      TrajectoryBatch b;
      if (iid) {
        IidGaussProcess proc = IidGaussProcess::scaled_identity(n, 1.0, 1.0, T);
        b = gen_batch(proc, m, T, s);
      } else {
        b = gen_lds(dyn, m, T, s);
      }
      LabeledBatch lab = label_batch(std::move(b), W_star, NoiseKind::gaussian_decoupled,
                                     cfg.sigma_xi, s);
      OlsFit fit = ols_fit(lab);
      if (fit.rank_deficient) rank[trial] = 1;
      if (param_metric) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gamma);
        double lmin = es.eigenvalues().minCoeff();
        vals[trial] = (fit.W_hat - W_star).squaredNorm() * m * T * lmin /
                      (static_cast<double>(p) * n);
      } else {
        vals[trial] = risk(fit.W_hat, W_star, gamma);
      }
    });
    int fails = 0;
    for (int r : rank) fails += r;
    MeanSe ms = mean_se(vals);
    double normalized;
    if (param_metric) {
      normalized = ms.mean;  // already normalized inside the trial loop
    } else if (cfg.family == "few_traj") {
      normalized = ms.mean * m * m * T / (static_cast<double>(n) * n);
    } else {
      normalized = ms.mean * m * T / (static_cast<double>(p) * n);
    }
    table.rows.push_back({static_cast<double>(T), ms.mean, ms.se, normalized,
                          static_cast<double>(cfg.trials), static_cast<double>(fails),
                          fails > kRankFailureFlagFrac * cfg.trials ? 1.0 : 0.0});
    log_T.push_back(std::log(static_cast<double>(T)));
    log_mean.push_back(std::log(ms.mean));
  }
  if (log_T.size() >= 2) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < log_T.size(); ++i) {
      sx += log_T[i];
      sy += log_mean[i];
      sxx += log_T[i] * log_T[i];
      sxy += log_T[i] * log_mean[i];
    }
    double k = static_cast<double>(log_T.size());
    table.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  }
  table.meta["family"] = cfg.family;
  table.meta["m"] = m;
  detail::stamp_meta(table, cfg);
  return table;
}

// Mean OLS risk against the Monte Carlo risk lower bound
// sigma_xi^2 p E Tr(Gamma^{1/2} (X^T X)^{-1} Gamma^{1/2}) on an A = I instance,
// scanned over the m grid. Decoupled Gaussian noise only.
inline ResultTable lower_vs_ols(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.noise != "gaussian")
    throw std::invalid_argument("lower_vs_ols requires gaussian (decoupled) noise");
  if (cfg.m_grid.empty()) throw std::invalid_argument("lower_vs_ols needs an m grid");
  const int n = cfg.n;
  const int p = cfg.p > 0 ? cfg.p : n;
  const int T = cfg.resolve_T();
  const int Tp = cfg.Tprime > 0 ? cfg.Tprime : T;
  DynamicsPair dyn{Eigen::MatrixXd::Identity(n, n),
                           Eigen::MatrixXd::Identity(n, n)};
  Eigen::MatrixXd gamma = covkit::avg_covariance(dyn, Tp);
  Eigen::MatrixXd W_star = Eigen::MatrixXd::Identity(p, n);
  LdsProcess proc(dyn);

  std::vector<int> ms = cfg.m_grid;
  std::sort(ms.begin(), ms.end());
  ResultTable table;
  table.columns = {"m", "ols_mean", "ols_se", "lower", "lower_se", "margin",
                   "combined_se", "trials", "rank_failures", "flagged"};
  for (int m : ms) {
    std::uint64_t tag = detail::cell_tag(0.0, m);
    std::vector<double> vals(cfg.trials, 0.0);
    std::vector<int> rank(cfg.trials, 0);
    parallel_for(static_cast<std::size_t>(cfg.trials), cfg.threads, [&](std::size_t trial) {
      std::uint64_t tu = static_cast<std::uint64_t>(trial);
      std::uint64_t s = RngStream::derive_seed(cfg.seed, {kStreamLds, tag, tu});
      TrajectoryBatch b = gen_lds(dyn, m, T, s);
      LabeledBatch lab = label_batch(std::move(b), W_star, NoiseKind::gaussian_decoupled,
                                     cfg.sigma_xi, s);
      OlsFit fit = ols_fit(lab);
      if (fit.rank_deficient) rank[trial] = 1;
      vals[trial] = risk(fit.W_hat, W_star, gamma);
    });
    int fails = 0;
    for (int r : rank) fails += r;
    MeanSe ols = mean_se(vals);
    lowerbound::TraceInverseEstimate ti = lowerbound::expected_trace_inverse_mc(
        proc, m, T, gamma, cfg.trials,
        RngStream::derive_seed(cfg.seed, {kStreamInd, tag}), cfg.threads);
    double lower = cfg.sigma_xi * cfg.sigma_xi * p * ti.mean;
    double lower_se = cfg.sigma_xi * cfg.sigma_xi * p * ti.se;
    double combined = std::sqrt(ols.se * ols.se + lower_se * lower_se);
    table.rows.push_back({static_cast<double>(m), ols.mean, ols.se, lower, lower_se,
                          ols.mean - lower, combined, static_cast<double>(cfg.trials),
                          static_cast<double>(fails),
                          fails > kRankFailureFlagFrac * cfg.trials ? 1.0 : 0.0});
  }
  detail::stamp_meta(table, cfg);
  return table;
}

inline ResultTable run_experiment(const ExperimentConfig& cfg) {
  if (cfg.kind == "risk_ratio") return risk_ratio_experiment(cfg);
  if (cfg.kind == "rate_scan") return rate_scan(cfg);
  return lower_vs_ols(cfg);
}

}  // namespace experiments
}  // namespace trajlearn
