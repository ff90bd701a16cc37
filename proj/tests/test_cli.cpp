#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "trajlearn/io.hpp"
#include "trajlearn/regression.hpp"

using namespace trajlearn;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("TRAJLEARN_CLI");
  REQUIRE(p != nullptr);
  return p;
}

fs::path scratch() {
  fs::path d = fs::temp_directory_path() / "trajlearn_cli_test";
  fs::create_directories(d);
  return d;
}

// Runs the binary, captures stdout into `out`, returns the exit code.
int run(const std::string& args, const fs::path& out) {
  std::string cmd = cli_path() + " " + args + " > " + out.string() + " 2>/dev/null";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int count_data_rows(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  int rows = 0;
  bool past_header = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!past_header) {
      past_header = true;
      continue;
    }
    ++rows;
  }
  return rows;
}

}  // namespace

TEST_CASE("generate emits a deterministic labeled csv") {
  fs::path d = scratch();
  fs::path a = d / "gen_a.csv", b = d / "gen_b.csv";
  std::string args =
      "generate --kind lds --A identity --B identity --n 3 --m 2 --T 4 --seed 7";
  CHECK(run(args, a) == 0);
  CHECK(run(args, b) == 0);
  std::string csv = slurp(a);
  CHECK(csv == slurp(b));
  CHECK(count_data_rows(csv) == 8);  // m * T
  CHECK(csv.find("# seed=7") != std::string::npos);
  CHECK(csv.find("# m=2") != std::string::npos);
  CHECK(csv.find("i,t,x_1,x_2,x_3") != std::string::npos);

  // A different seed changes the data.
  fs::path c = d / "gen_c.csv";
  CHECK(run("generate --kind lds --A identity --B identity --n 3 --m 2 --T 4 --seed 8",
            c) == 0);
  CHECK(slurp(c) != csv);
}

TEST_CASE("generate then fit matches the in-process estimator") {
  fs::path d = scratch();
  fs::path data = d / "labeled.csv", fitov = d / "fit.json";
  CHECK(run("generate --kind lds --A identity --B identity --n 3 --m 4 --T 6 "
            "--seed 11 --noise gaussian --W-star identity --sigma-xi 0.5",
            data) == 0);
  CHECK(run("fit --input " + data.string(), fitov) == 0);
  json fit = json::parse(slurp(fitov));
  CHECK_FALSE(fit.at("rank_deficient").get<bool>());
  CHECK(fit.at("rank").get<int>() == 3);

  // Re-fit from the very same CSV in process: identical coefficients.
  std::ifstream is(data);
  io::BatchCsv bc = io::read_batch_csv(is);
  Eigen::MatrixXd X(bc.batch.m * bc.batch.T, bc.batch.n);
  Eigen::MatrixXd Y(bc.batch.m * bc.batch.T, bc.p);
  for (int i = 0; i < bc.batch.m; ++i) {
    X.middleRows(i * bc.batch.T, bc.batch.T) = bc.batch.x[i];
    Y.middleRows(i * bc.batch.T, bc.batch.T) = bc.y[i];
  }
  OlsFit of = ols_fit_xy(X, Y);
  auto w = fit.at("W_hat");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(w.at(r).at(c).get<double>() == of.W_hat(r, c));
}

TEST_CASE("csv round trip is bit exact") {
  DynamicsPair dyn{0.5 * Eigen::MatrixXd::Identity(2, 2),
                   Eigen::MatrixXd::Identity(2, 2)};
  TrajectoryBatch b = gen_lds(dyn, 3, 5, 101);
  std::ostringstream os;
  io::write_batch_csv(os, b);
  std::istringstream is(os.str());
  io::BatchCsv back = io::read_batch_csv(is);
  CHECK(back.batch.m == 3);
  CHECK(back.batch.T == 5);
  CHECK(back.p == 0);
  for (int i = 0; i < 3; ++i) CHECK(back.batch.x[i] == b.x[i]);
  std::ostringstream os2;
  io::write_batch_csv(os2, back.batch);
  CHECK(os2.str() == os.str());
}

TEST_CASE("exit codes") {
  fs::path d = scratch();
  fs::path sink = d / "sink.txt";
  // Missing required seed: usage error.
  CHECK(run("generate --kind lds --A identity --B identity --n 2 --m 1 --T 3", sink) == 2);
  // Missing required option entirely: parse error.
  CHECK(run("generate --kind lds --A identity --B identity --n 2 --seed 1", sink) == 2);
  // Contradictory spectrum flags: usage error.
  CHECK(run("spectrum --s-matrix --theta --T 4", sink) == 2);
  CHECK(run("spectrum --T 4", sink) == 2);
  // Numerical refusal: ill-conditioned whitening in Theta.
  CHECK(run("spectrum --theta --r 30 --T 4 --Tprime 60", sink) == 3);

  // Rank-deficient fit refuses with exit 3 but still reports the min-norm fit.
  fs::path thin = d / "thin.csv";
  CHECK(run("generate --descriptor "
            "'{\"kind\":\"copies\",\"Sigma\":[[1,0,0],[0,1,0],[0,0,1]]}' "
            "--m 1 --T 4 --seed 3 --noise gaussian --W-star identity --sigma-xi 0",
            thin) == 0);
  fs::path fitout = d / "thin_fit.json";
  CHECK(run("fit --input " + thin.string(), fitout) == 3);
  json fit = json::parse(slurp(fitout));
  CHECK(fit.at("rank_deficient").get<bool>());
  CHECK(fit.at("rank").get<int>() == 1);
}

TEST_CASE("spectrum and stylized lowerbound values") {
  fs::path d = scratch();
  fs::path spec = d / "spec.csv";
  CHECK(run("spectrum --s-matrix --T 16", spec) == 0);
  std::string csv = slurp(spec);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line == "index,eigenvalue");
  double prev = -1.0;
  int rows = 0;
  while (std::getline(is, line)) {
    double v = std::stod(line.substr(line.find(',') + 1));
    CHECK(v > 0.0);
    CHECK(v < 4.0);
    CHECK(v >= prev);
    prev = v;
    ++rows;
  }
  CHECK(rows == 16);

  fs::path sty = d / "stylized.json";
  CHECK(run("lowerbound --mode stylized --q 50 --n 5", sty) == 0);
  json j = json::parse(slurp(sty));
  CHECK(j.at("sp_value").get<double>() == doctest::Approx(45.0).epsilon(1e-9));
  CHECK(j.at("xbar_sqrt_n").get<double>() == doctest::Approx(5.0 / 45.0).epsilon(1e-9));
  CHECK(j.at("residual").get<double>() < 1e-9);
}

TEST_CASE("certify, slopes, and experiment subcommands") {
  fs::path d = scratch();
  fs::path weak = d / "weak.json";
  std::string iid_desc =
      "'{\"kind\":\"iid_gauss\",\"n\":2,"
      "\"params\":{\"rule\":\"scaled_identity\",\"scale\":1.0,\"growth\":1.0}}'";
  CHECK(run("certify --mode weak --descriptor " + iid_desc +
            " --T 4 --k 2 --alpha 0.1 --beta 0.5 --trials 300 --seed 21",
            weak) == 0);
  json wj = json::parse(slurp(weak));
  CHECK(wj.at("passed").get<bool>());
  CHECK(wj.at("C_S").get<double>() == doctest::Approx(1.0).epsilon(1e-9));

  fs::path slopes = d / "fig4.csv";
  CHECK(run("slopes --figure 4 --r 1 --k 8 --alpha-grid 2 --alpha-grid 4 "
            "--alpha-grid 8",
            slopes) == 0);
  std::string scsv = slurp(slopes);
  CHECK(scsv.find("# slope=") != std::string::npos);
  CHECK(count_data_rows(scsv) == 3);

  fs::path cfg = d / "cfg.json";
  {
    std::ofstream os(cfg);
    os << R"({"kind":"risk_ratio","n":3,"T_rule":"9","rho_grid":[0.5],
              "m_grid":[3],"trials":30,"seed":77})";
  }
  fs::path expa = d / "exp_a.csv", expb = d / "exp_b.csv";
  CHECK(run("experiment --config " + cfg.string(), expa) == 0);
  CHECK(run("experiment --config " + cfg.string() + " --threads 4", expb) == 0);
  CHECK(slurp(expa) == slurp(expb));
  CHECK(count_data_rows(slurp(expa)) == 1);
  // Flag overrides beat the config document.
  fs::path expc = d / "exp_c.csv";
  CHECK(run("experiment --config " + cfg.string() + " --trials 40", expc) == 0);
  CHECK(slurp(expc).find("\"trials\":40") != std::string::npos);
}
