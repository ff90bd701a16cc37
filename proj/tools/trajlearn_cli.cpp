// Command-line front end: trajectory generation, OLS fitting, small-ball
// certification, lower-bound numerics, spectra, and the experiment harness.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical refusal
// (rank/conditioning), 1 internal error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "trajlearn/covkit.hpp"
#include "trajlearn/experiments.hpp"
#include "trajlearn/generators.hpp"
#include "trajlearn/io.hpp"
#include "trajlearn/lowerbound.hpp"
#include "trajlearn/regression.hpp"
#include "trajlearn/smallball.hpp"
#include "trajlearn/util.hpp"

namespace {

using nlohmann::json;
using namespace trajlearn;

// Numerical refusals (rank, conditioning, non-PD inputs) map to exit 3.
struct Refusal : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string out_path(const std::string& flag) {
  if (flag.empty() || flag == "-") return flag;
  if (flag.find('/') == std::string::npos) {
    if (const char* dir = std::getenv("TRAJLEARN_OUT_DIR"))
      return std::string(dir) + "/" + flag;
  }
  return flag;
}

// Writes to the path, or stdout for "" / "-".
void emit(const std::string& path, const std::string& content) {
  std::string p = out_path(path);
  if (p.empty() || p == "-") {
    std::cout << content;
    return;
  }
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::invalid_argument("cannot open output path: " + p);
  os << content;
}

// Matrix flag: "identity" (needs n), inline JSON, or @file with JSON.
Eigen::MatrixXd parse_matrix(const std::string& spec, int n) {
  if (spec == "identity") {
    if (n < 1) throw std::invalid_argument("identity matrix needs --n");
    return Eigen::MatrixXd::Identity(n, n);
  }
  if (!spec.empty() && spec[0] == '@') {
    std::ifstream is(spec.substr(1));
    if (!is) throw std::invalid_argument("cannot open matrix file: " + spec.substr(1));
    json j;
    is >> j;
    return matrix_from_json(j);
  }
  return matrix_from_json(json::parse(spec));
}

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config: " + path);
  json j;
  is >> j;
  return j;
}

json certificate_to_json(const smallball::SmallBallCertificate& c) {
  json j;
  j["T"] = c.T;
  j["k"] = c.k;
  j["eps_grid"] = c.eps_grid;
  j["refused"] = c.refused;
  j["diagnostic"] = c.diagnostic;
  if (c.fitted_csb) j["c_sb"] = *c.fitted_csb;
  if (c.fitted_alpha) j["alpha"] = *c.fitted_alpha;
  json curves = json::array();
  for (const auto& cv : c.curves) {
    json e;
    e["direction"] = cv.direction;
    e["block"] = cv.block;
    e["prob"] = cv.prob;
    e["trials"] = cv.trials;
    json ci = json::array();
    for (double p : cv.prob) {
      auto b = clopper_pearson(static_cast<std::size_t>(std::lround(p * cv.trials)),
                               cv.trials);
      ci.push_back({b.lower, b.upper});
    }
    e["ci95"] = ci;
    curves.push_back(std::move(e));
  }
  j["curves"] = std::move(curves);
  return j;
}

json weak_to_json(const smallball::WeakCertificate& c) {
  json j;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["k"] = c.k;
  j["C_S"] = c.C_S;
  j["mu_bar"] = c.mu_bar;
  j["worst_exceedance"] = c.worst_exceedance;
  j["worst_upper_ci95"] = c.worst_upper_ci;
  j["passed"] = c.passed;
  j["refused"] = c.refused;
  j["diagnostic"] = c.diagnostic;
  return j;
}

std::string spectrum_csv(const Eigen::VectorXd& vals) {
  std::ostringstream os;
  os << "index,eigenvalue\n";
  for (Eigen::Index i = 0; i < vals.size(); ++i)
    os << i + 1 << "," << fmt_double(vals[i]) << "\n";
  return os.str();
}

std::string scan_csv(const lowerbound::ScanResult& scan, const std::string& grid_name) {
  std::ostringstream os;
  if (scan.slope) os << "# slope=" << fmt_double(*scan.slope) << "\n";
  os << grid_name << ",value\n";
  for (const auto& row : scan.rows)
    os << fmt_double(row.grid) << "," << fmt_double(row.value) << "\n";
  return os.str();
}

int dispatch(int argc, char** argv) {
  CLI::App app{"trajlearn: multi-trajectory linear regression toolkit"};
  app.require_subcommand(1);

  // --- generate ---------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "sample a trajectory batch to CSV");
  std::string g_kind = "lds", g_A = "identity", g_B = "identity", g_desc, g_out;
  std::string g_noise, g_Wstar;
  int g_n = 0, g_m = 1, g_T = 1;
  double g_sigma_xi = 1.0;
  std::uint64_t g_seed = 0;
  bool g_seed_set = false;
  gen->add_option("--kind", g_kind, "process kind (lds, iid_gauss, copies, ...)");
  gen->add_option("--A", g_A, "transition matrix: identity, inline JSON, or @file");
  gen->add_option("--B", g_B, "input matrix: identity, inline JSON, or @file");
  gen->add_option("--descriptor", g_desc, "full process descriptor (inline JSON or @file)");
  gen->add_option("--n", g_n, "state dimension");
  gen->add_option("--m", g_m, "trajectory count")->required();
  gen->add_option("--T", g_T, "horizon")->required();
  gen->add_option("--seed", g_seed, "master seed")->each([&](const std::string&) { g_seed_set = true; });
  gen->add_option("--noise", g_noise, "attach labels: sysid or gaussian");
  gen->add_option("--W-star", g_Wstar, "truth matrix for gaussian labels (JSON/@file/identity)");
  gen->add_option("--sigma-xi", g_sigma_xi, "noise scale for gaussian labels");
  gen->add_option("--out,-o", g_out, "output path (default stdout)");

  // --- fit --------------------------------------------------------------
  auto* fit = app.add_subcommand("fit", "ordinary least squares on a labeled batch CSV");
  std::string f_in, f_out;
  fit->add_option("--input,-i", f_in, "batch CSV from generate")->required();
  fit->add_option("--out,-o", f_out, "output path (default stdout)");

  // --- certify ----------------------------------------------------------
  auto* cert = app.add_subcommand("certify", "small-ball certification");
  std::string c_desc, c_mode = "full", c_out;
  int c_T = 0, c_k = 1, c_trials = 2000, c_dirs = 16, c_prefix = 8;
  double c_alpha = 0.5, c_beta = 0.5;
  std::vector<double> c_eps;
  std::uint64_t c_seed = 0;
  bool c_seed_set = false;
  cert->add_option("--descriptor", c_desc, "process descriptor (inline JSON or @file)")->required();
  cert->add_option("--T", c_T, "horizon")->required();
  cert->add_option("--k", c_k, "excitation window");
  cert->add_option("--mode", c_mode, "full, weak, or avg2block");
  cert->add_option("--eps", c_eps, "scale grid for full certification");
  cert->add_option("--alpha", c_alpha, "scale for weak/avg2block modes");
  cert->add_option("--beta", c_beta, "probability for weak/avg2block modes");
  cert->add_option("--trials", c_trials, "Monte Carlo trials");
  cert->add_option("--directions", c_dirs, "sampled unit directions");
  cert->add_option("--prefixes", c_prefix, "stratification prefixes for later blocks");
  cert->add_option("--seed", c_seed, "master seed")->each([&](const std::string&) { c_seed_set = true; });
  cert->add_option("--out,-o", c_out, "output path (default stdout)");

  // --- lowerbound -------------------------------------------------------
  auto* lb = app.add_subcommand("lowerbound", "stylized-problem and trace-inverse numerics");
  std::string l_mode = "stylized", l_desc, l_out;
  int l_q = 0, l_n = 0, l_m = 1, l_T = 1, l_Tprime = -1, l_trials = 1000;
  unsigned l_threads = 1;
  std::uint64_t l_seed = 0;
  bool l_seed_set = false;
  lb->add_option("--mode", l_mode, "stylized or trace-mc");
  lb->add_option("--q", l_q, "ambient dimension for stylized identity instance");
  lb->add_option("--n", l_n, "subspace dimension for the stylized problem");
  lb->add_option("--descriptor", l_desc, "process descriptor for trace-mc");
  lb->add_option("--m", l_m, "trajectory count (trace-mc)");
  lb->add_option("--T", l_T, "horizon (trace-mc)");
  lb->add_option("--Tprime", l_Tprime, "evaluation horizon (default T)");
  lb->add_option("--trials", l_trials, "Monte Carlo trials");
  lb->add_option("--threads", l_threads, "worker threads");
  lb->add_option("--seed", l_seed, "master seed")->each([&](const std::string&) { l_seed_set = true; });
  lb->add_option("--out,-o", l_out, "output path (default stdout)");

  // --- spectrum ---------------------------------------------------------
  auto* spec = app.add_subcommand("spectrum", "eigenvalues of S_T or Theta matrices");
  bool s_smatrix = false;
  int s_T = 0, s_r = 1, s_Tprime = -1;
  bool s_theta = false;
  std::string s_out;
  spec->add_flag("--s-matrix", s_smatrix, "spectrum of S_T");
  spec->add_flag("--theta", s_theta, "spectrum of Theta_{r,T,T'}");
  spec->add_option("--T", s_T, "horizon")->required();
  spec->add_option("--r", s_r, "Jordan block size for --theta");
  spec->add_option("--Tprime", s_Tprime, "evaluation horizon for --theta (default T)");
  spec->add_option("--out,-o", s_out, "output path (default stdout)");

  // --- experiment -------------------------------------------------------
  auto* exp = app.add_subcommand("experiment", "Monte Carlo experiment harness");
  std::string e_config, e_kind, e_family, e_out;
  int e_trials = -1, e_n = -1;
  long long e_seed = -1;
  unsigned e_threads = 0;
  exp->add_option("--config", e_config, "JSON experiment config");
  exp->add_option("--kind", e_kind, "risk_ratio, rate_scan, or lower_vs_ols");
  exp->add_option("--family", e_family, "rate_scan family");
  exp->add_option("--trials", e_trials, "override trials");
  exp->add_option("--n", e_n, "override n");
  exp->add_option("--seed", e_seed, "override master seed");
  exp->add_option("--threads", e_threads, "worker threads");
  exp->add_option("--out,-o", e_out, "output path (default stdout)");

  // --- slopes -----------------------------------------------------------
  auto* slopes = app.add_subcommand("slopes", "lower-bound scaling scans");
  int sl_figure = 3, sl_r = 1, sl_m = 1, sl_k = 5;
  std::vector<int> sl_n_grid;
  std::vector<double> sl_alpha_grid;
  std::string sl_out;
  slopes->add_option("--figure", sl_figure, "3 (stylized scaling) or 4 (ulam scaling)");
  slopes->add_option("--r", sl_r, "Jordan block size");
  slopes->add_option("--m", sl_m, "trajectory count (figure 3)");
  slopes->add_option("--k", sl_k, "base horizon (figure 4)");
  slopes->add_option("--n-grid", sl_n_grid, "n grid (figure 3)");
  slopes->add_option("--alpha-grid", sl_alpha_grid, "horizon ratio grid (figure 4)");
  slopes->add_option("--out,-o", sl_out, "output path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_name() == "CallForHelp" ? 0 : 2;
  }

  auto load_desc = [](const std::string& d) {
    if (!d.empty() && d[0] == '@') return load_json_file(d.substr(1));
    return json::parse(d);
  };

  if (gen->parsed()) {
    if (!g_seed_set) throw std::invalid_argument("generate: --seed is required");
    TrajectoryBatch batch;
    json desc;
    if (!g_desc.empty()) {
      desc = load_desc(g_desc);
    } else if (g_kind == "lds") {
      desc["kind"] = "lds";
      desc["A"] = matrix_to_json(parse_matrix(g_A, g_n));
      desc["B"] = matrix_to_json(parse_matrix(g_B, g_n));
    } else {
      throw std::invalid_argument("generate: non-lds kinds need --descriptor");
    }
    if (desc.at("kind") == "lds") {
      DynamicsPair dyn(matrix_from_json(desc.at("A")), matrix_from_json(desc.at("B")));
      batch = gen_lds(dyn, g_m, g_T, g_seed);
    } else {
      batch = gen_batch(*make_process(desc, g_T), g_m, g_T, g_seed);
    }
    std::ostringstream os;
    if (!g_noise.empty()) {
      NoiseKind nk = g_noise == "sysid" ? NoiseKind::sysid_coupled
                                        : NoiseKind::gaussian_decoupled;
      Eigen::MatrixXd W = nk == NoiseKind::sysid_coupled
                              ? *batch.lds_A
                              : parse_matrix(g_Wstar, batch.n);
      LabeledBatch lab = label_batch(std::move(batch), W, nk, g_sigma_xi, g_seed);
      io::write_batch_csv(os, lab);
    } else {
      io::write_batch_csv(os, batch);
    }
    emit(g_out, os.str());
    return 0;
  }

  if (fit->parsed()) {
    std::ifstream is(f_in);
    if (!is) throw std::invalid_argument("fit: cannot open " + f_in);
    io::BatchCsv bc = io::read_batch_csv(is);
    if (bc.p == 0) throw std::invalid_argument("fit: input has no labels");
    Eigen::MatrixXd X(bc.batch.m * bc.batch.T, bc.batch.n);
    Eigen::MatrixXd Y(bc.batch.m * bc.batch.T, bc.p);
    for (int i = 0; i < bc.batch.m; ++i) {
      X.middleRows(i * bc.batch.T, bc.batch.T) = bc.batch.x[i];
      Y.middleRows(i * bc.batch.T, bc.batch.T) = bc.y[i];
    }
    OlsFit of = ols_fit_xy(X, Y);
    json j;
    j["W_hat"] = matrix_to_json(of.W_hat);
    j["rank"] = of.rank;
    j["min_eig"] = of.min_eig;
    j["rank_deficient"] = of.rank_deficient;
    emit(f_out, j.dump(2) + "\n");
    if (of.rank_deficient) {
      std::cerr << "fit: gram matrix is rank deficient\n";
      return 3;
    }
    return 0;
  }

  if (cert->parsed()) {
    if (!c_seed_set) throw std::invalid_argument("certify: --seed is required");
    json desc = load_desc(c_desc);
    auto proc = make_process(desc, c_T);
    // Default Psi_j: the analytic (or estimated) Gamma over the block,
    // replicated; processes with an analytic per-block covariance could be
    // given explicit Psi lists through the library API.
    std::vector<Eigen::MatrixXd> psis;
    if (auto g = proc->gamma(c_T)) {
      psis.push_back(*g);
    } else {
      psis.push_back(estimate_gamma(*proc, c_T, 2000, c_seed ^ 0x515ca11ULL).gamma);
    }
    if (c_mode == "full") {
      if (c_eps.empty()) c_eps = {1e-4, 1e-3, 1e-2, 1e-1};
      auto certificate = smallball::certify(*proc, c_T, c_k, psis, c_eps, c_dirs,
                                            c_trials, c_seed, c_prefix);
      emit(c_out, certificate_to_json(certificate).dump(2) + "\n");
      if (certificate.refused) {
        std::cerr << "certify: refused: " << certificate.diagnostic << "\n";
        return 3;
      }
      return 0;
    }
    if (c_mode == "weak") {
      auto wc = smallball::certify_weak(*proc, c_T, c_k, psis, c_alpha, c_beta,
                                        psis[0], c_trials, c_seed, c_prefix);
      emit(c_out, weak_to_json(wc).dump(2) + "\n");
      if (wc.refused) {
        std::cerr << "certify: refused: " << wc.diagnostic << "\n";
        return 3;
      }
      return 0;
    }
    if (c_mode == "avg2block") {
      auto rep = smallball::check_avg_to_block(*proc, c_T, c_k, psis, c_alpha,
                                               c_beta, c_trials, c_seed);
      json j;
      j["alpha"] = rep.alpha;
      j["beta"] = rep.beta;
      j["premise_max"] = rep.premise_max;
      j["premise_holds"] = rep.premise_holds;
      j["eps"] = rep.eps;
      j["block_prob"] = rep.block_prob;
      j["bound"] = rep.bound;
      j["implication_holds"] = rep.implication_holds;
      emit(c_out, j.dump(2) + "\n");
      return 0;
    }
    throw std::invalid_argument("certify: unknown mode " + c_mode);
  }

  if (lb->parsed()) {
    if (l_mode == "stylized") {
      if (l_q < 1 || l_n < 1)
        throw std::invalid_argument("lowerbound stylized: --q and --n required");
      auto sol = lowerbound::solve_stylized(
          lowerbound::eig_list(Eigen::VectorXd::Ones(l_q)), l_n);
      json j;
      j["xbar_sqrt_n"] = sol.xbar * std::sqrt(static_cast<double>(l_n));
      j["sp_value"] = sol.sp_value;
      j["residual"] = sol.residual;
      j["iterations"] = sol.iterations;
      emit(l_out, j.dump(2) + "\n");
      return 0;
    }
    if (l_mode == "trace-mc") {
      if (!l_seed_set) throw std::invalid_argument("lowerbound trace-mc: --seed is required");
      if (l_desc.empty()) throw std::invalid_argument("lowerbound trace-mc: --descriptor required");
      json desc = load_desc(l_desc);
      auto proc = make_process(desc, l_T);
      int tp = l_Tprime > 0 ? l_Tprime : l_T;
      Eigen::MatrixXd gamma;
      if (auto g = proc->gamma(tp)) gamma = *g;
      else gamma = estimate_gamma(*proc, tp, 2000, l_seed ^ 0x9a33aULL).gamma;
      auto est = lowerbound::expected_trace_inverse_mc(*proc, l_m, l_T, gamma,
                                                       l_trials, l_seed, l_threads);
      json j;
      j["mean"] = est.mean;
      j["se"] = est.se;
      j["trials"] = est.trials;
      j["rank_failures"] = est.rank_failures;
      emit(l_out, j.dump(2) + "\n");
      return 0;
    }
    throw std::invalid_argument("lowerbound: unknown mode " + l_mode);
  }

  if (spec->parsed()) {
    if (s_smatrix == s_theta)
      throw std::invalid_argument("spectrum: pass exactly one of --s-matrix, --theta");
    Eigen::VectorXd vals;
    if (s_smatrix) {
      vals = lowerbound::s_matrix_spectrum(s_T);
    } else {
      auto theta = lowerbound::build_theta(s_r, s_T, s_Tprime > 0 ? s_Tprime : s_T);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(theta.theta);
      vals = es.eigenvalues();
    }
    emit(s_out, spectrum_csv(vals));
    return 0;
  }

  if (exp->parsed()) {
    json cj = e_config.empty() ? json::object() : load_json_file(e_config);
    // Flags override the config document.
    if (!e_kind.empty()) cj["kind"] = e_kind;
    if (!e_family.empty()) cj["family"] = e_family;
    if (e_trials > 0) cj["trials"] = e_trials;
    if (e_n > 0) cj["n"] = e_n;
    if (e_seed >= 0) cj["seed"] = static_cast<std::uint64_t>(e_seed);
    experiments::ExperimentConfig cfg = experiments::ExperimentConfig::from_json(cj);
    if (e_threads > 0) cfg.threads = e_threads;
    cfg.validate();
    experiments::ResultTable table = experiments::run_experiment(cfg);
    emit(e_out.empty() ? cfg.output : e_out, table.to_csv());
    return 0;
  }

  if (slopes->parsed()) {
    if (sl_figure == 3) {
      if (sl_n_grid.empty()) sl_n_grid = {16, 32, 64, 128, 256};
      auto scan = lowerbound::figure3_scan(sl_r, sl_n_grid, sl_m);
      emit(sl_out, scan_csv(scan, "n"));
      return 0;
    }
    if (sl_figure == 4) {
      if (sl_alpha_grid.empty()) sl_alpha_grid = {2, 4, 8, 16, 32, 64};
      auto scan = lowerbound::figure4_scan(sl_r, sl_k, sl_alpha_grid);
      emit(sl_out, scan_csv(scan, "alpha"));
      return 0;
    }
    throw std::invalid_argument("slopes: --figure must be 3 or 4");
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const CLI::ParseError&) {
    return 2;  // CLI11_PARSE already handled; defensive
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return 3;
  } catch (const Refusal& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
