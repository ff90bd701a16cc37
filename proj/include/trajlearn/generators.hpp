#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "trajlearn/covkit.hpp"
#include "trajlearn/rng.hpp"
#include "trajlearn/util.hpp"

namespace trajlearn {

using json = nlohmann::json;

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw std::invalid_argument("matrix_from_json: expected array of rows");
  Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = static_cast<Eigen::Index>(j[0].size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (static_cast<Eigen::Index>(j[i].size()) != cols)
      throw std::invalid_argument("matrix_from_json: ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

// Stepwise trajectory sampler. clone() snapshots the internal state, which is
// what the small-ball stratified resampling uses to freeze a prefix and
// redraw the suffix.
class Sampler {
 public:
  virtual ~Sampler() = default;
  virtual Eigen::VectorXd step(RngStream& rs) = 0;
  virtual std::unique_ptr<Sampler> clone() const = 0;
};

class Process {
 public:
  virtual ~Process() = default;
  virtual Eigen::Index dim() const = 0;
  virtual std::unique_ptr<Sampler> start(int T) const = 0;
  virtual json descriptor() const = 0;

  // Analytic per-step covariance, when the process admits one.
  virtual std::optional<Eigen::MatrixXd> sigma(int /*t*/) const { return std::nullopt; }

  virtual std::optional<Eigen::MatrixXd> gamma(int t) const {
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(dim(), dim());
    for (int s = 1; s <= t; ++s) {
      auto st = sigma(s);
      if (!st) return std::nullopt;
      acc += *st;
    }
    return acc / static_cast<double>(t);
  }

  // Full-trajectory draw; processes with a non-causal sampling recipe
  // (the joint-Gaussian process) override this.
  virtual Eigen::MatrixXd sample_full(int T, RngStream& rs) const {
    auto s = start(T);
    Eigen::MatrixXd x(T, dim());
    for (int t = 0; t < T; ++t) x.row(t) = s->step(rs).transpose();
    return x;
  }
};

// --- Linear dynamical system: x_t = A x_{t-1} + B w_t, x_0 = 0 -------------

class LdsSampler final : public Sampler {
 public:
  LdsSampler(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B)
      : A_(A), B_(B), x_(Eigen::VectorXd::Zero(A.rows())) {}

  Eigen::VectorXd step(RngStream& rs) override {
    last_w_ = rs.gauss_vector(B_.cols());
    x_ = A_ * x_ + B_ * last_w_;
    return x_;
  }

  std::unique_ptr<Sampler> clone() const override {
    return std::make_unique<LdsSampler>(*this);
  }

  const Eigen::VectorXd& last_w() const { return last_w_; }
  const Eigen::VectorXd& state() const { return x_; }

 private:
  Eigen::MatrixXd A_, B_;
  Eigen::VectorXd x_;
  Eigen::VectorXd last_w_;
};

class LdsProcess final : public Process {
 public:
  explicit LdsProcess(DynamicsPair dyn) : dyn_(std::move(dyn)) {}

  Eigen::Index dim() const override { return dyn_.state_dim(); }

  std::unique_ptr<Sampler> start(int) const override {
    return std::make_unique<LdsSampler>(dyn_.A, dyn_.B);
  }

  json descriptor() const override {
    return {{"kind", "lds"},
            {"A", matrix_to_json(dyn_.A)},
            {"B", matrix_to_json(dyn_.B)}};
  }

  std::optional<Eigen::MatrixXd> sigma(int t) const override {
    return covkit::state_covariance(dyn_, t);
  }

  std::optional<Eigen::MatrixXd> gamma(int t) const override {
    return covkit::avg_covariance(dyn_, t);
  }

  const DynamicsPair& dynamics() const { return dyn_; }

 private:
  DynamicsPair dyn_;
};

// --- Independent Gaussians: x_t ~ N(0, Sigma_t), independent across t ------

class IidGaussProcess final : public Process {
 public:
  // Explicit covariance schedule; entry t-1 is used for step t, and the last
  // entry is reused past the end of the list.
  explicit IidGaussProcess(std::vector<Eigen::MatrixXd> sigmas)
      : sigmas_(std::move(sigmas)) {
    if (sigmas_.empty()) throw std::invalid_argument("IidGaussProcess: empty covariance list");
    n_ = sigmas_[0].rows();
    for (const auto& s : sigmas_)
      if (s.rows() != n_ || s.cols() != n_)
        throw std::invalid_argument("IidGaussProcess: inconsistent covariance dimensions");
  }

  // Geometric rule Sigma_t = scale * growth^t * I_n.
  static IidGaussProcess scaled_identity(Eigen::Index n, double scale, double growth, int T) {
    std::vector<Eigen::MatrixXd> sigmas;
    sigmas.reserve(T);
    double c = scale;
    for (int t = 1; t <= T; ++t) {
      c = scale * std::pow(growth, t);
      sigmas.push_back(c * Eigen::MatrixXd::Identity(n, n));
    }
    IidGaussProcess p(std::move(sigmas));
    p.rule_ = json{{"rule", "scaled_identity"}, {"scale", scale}, {"growth", growth}};
    return p;
  }

  // Ind-LDS-LS covariates: independent draws from the marginals of an LDS.
  static IidGaussProcess lds_marginals(const DynamicsPair& dyn, int T) {
    std::vector<Eigen::MatrixXd> sigmas;
    sigmas.reserve(T);
    Eigen::MatrixXd bbt = dyn.B * dyn.B.transpose();
    Eigen::MatrixXd s = bbt;
    sigmas.push_back(s);
    for (int t = 2; t <= T; ++t) {
      s = dyn.A * s * dyn.A.transpose() + bbt;
      s = ((s + s.transpose()) / 2.0).eval();
      sigmas.push_back(s);
    }
    IidGaussProcess p(std::move(sigmas));
    p.rule_ = json{{"rule", "lds_marginals"},
                   {"A", matrix_to_json(dyn.A)},
                   {"B", matrix_to_json(dyn.B)}};
    return p;
  }

  Eigen::Index dim() const override { return n_; }

  std::unique_ptr<Sampler> start(int T) const override;

  json descriptor() const override {
    json d{{"kind", "iid_gauss"}};
    if (!rule_.is_null()) {
      d["params"] = rule_;
    } else {
      json list = json::array();
      for (const auto& s : sigmas_) list.push_back(matrix_to_json(s));
      d["sigmas"] = std::move(list);
    }
    return d;
  }

  std::optional<Eigen::MatrixXd> sigma(int t) const override {
    return sigma_at(t);
  }

  const Eigen::MatrixXd& sigma_at(int t) const {
    std::size_t idx = std::min<std::size_t>(t - 1, sigmas_.size() - 1);
    return sigmas_[idx];
  }

 private:
  std::vector<Eigen::MatrixXd> sigmas_;
  Eigen::Index n_ = 0;
  json rule_;
};

class IidGaussSampler final : public Sampler {
 public:
  IidGaussSampler(const IidGaussProcess* proc) : proc_(proc) {}

  Eigen::VectorXd step(RngStream& rs) override {
    ++t_;
    Eigen::MatrixXd sqrt = covkit::psd_sqrt(proc_->sigma_at(t_));
    return sqrt * rs.gauss_vector(sqrt.cols());
  }

  std::unique_ptr<Sampler> clone() const override {
    return std::make_unique<IidGaussSampler>(*this);
  }

 private:
  const IidGaussProcess* proc_;
  int t_ = 0;
};

inline std::unique_ptr<Sampler> IidGaussProcess::start(int) const {
  return std::make_unique<IidGaussSampler>(this);
}

// --- Copies of a Gaussian draw: x_1 ~ N(0, Sigma), x_t = x_{t-1} -----------

class CopiesSampler final : public Sampler {
 public:
  explicit CopiesSampler(Eigen::MatrixXd sqrt) : sqrt_(std::move(sqrt)) {}

  Eigen::VectorXd step(RngStream& rs) override {
    if (!drawn_) {
      x_ = sqrt_ * rs.gauss_vector(sqrt_.cols());
      drawn_ = true;
    }
    return x_;
  }

  std::unique_ptr<Sampler> clone() const override {
    return std::make_unique<CopiesSampler>(*this);
  }

 private:
  Eigen::MatrixXd sqrt_;
  Eigen::VectorXd x_;
  bool drawn_ = false;
};

class CopiesProcess final : public Process {
 public:
  explicit CopiesProcess(Eigen::MatrixXd sigma)
      : sigma_(std::move(sigma)), sqrt_(covkit::psd_sqrt(sigma_)) {}

  Eigen::Index dim() const override { return sigma_.rows(); }

  std::unique_ptr<Sampler> start(int) const override {
    return std::make_unique<CopiesSampler>(sqrt_);
  }

  json descriptor() const override {
    return {{"kind", "copies"}, {"Sigma", matrix_to_json(sigma_)}};
  }

  std::optional<Eigen::MatrixXd> sigma(int) const override { return sigma_; }

 private:
  Eigen::MatrixXd sigma_;
  Eigen::MatrixXd sqrt_;
};

// --- Gaussian process indexed by time --------------------------------------

// Joint Gaussian over the stacked trajectory vector (T blocks of dimension n).
// Full draws use the symmetric-eigendecomposition square root of the block
// covariance (clipped; rank-deficient block covariances are legitimate).
// Stepwise draws use exact sequential Gaussian conditioning so that frozen
// prefixes carry the correct conditional law.
class GaussianProcessSampler;

class GaussianProcessProcess final : public Process {
 public:
  GaussianProcessProcess(Eigen::MatrixXd block_cov, Eigen::Index n)
      : cov_(std::move(block_cov)), n_(n) {
    if (cov_.rows() != cov_.cols()) throw std::invalid_argument("gaussian_process: covariance not square");
    if (cov_.rows() % n_ != 0) throw std::invalid_argument("gaussian_process: size not a multiple of n");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((cov_ + cov_.transpose()) / 2.0);
    double lmax = std::max(es.eigenvalues().maxCoeff(), 0.0);
    if (es.eigenvalues().minCoeff() < -1e-8 * std::max(lmax, 1.0))
      throw std::domain_error("gaussian_process: block covariance is not PSD");
    sqrt_ = covkit::psd_sqrt(cov_);
  }

  Eigen::Index dim() const override { return n_; }
  int horizon() const { return static_cast<int>(cov_.rows() / n_); }

  std::unique_ptr<Sampler> start(int T) const override;

  Eigen::MatrixXd sample_full(int T, RngStream& rs) const override {
    if (T != horizon()) throw std::invalid_argument("gaussian_process: T does not match block covariance");
    Eigen::VectorXd z = rs.gauss_vector(cov_.rows());
    Eigen::VectorXd flat = sqrt_ * z;
    Eigen::MatrixXd x(T, n_);
    for (int t = 0; t < T; ++t) x.row(t) = flat.segment(t * n_, n_).transpose();
    return x;
  }

  json descriptor() const override {
    return {{"kind", "gaussian_process"}, {"n", n_}, {"block_cov", matrix_to_json(cov_)}};
  }

  std::optional<Eigen::MatrixXd> sigma(int t) const override {
    if (t > horizon()) return std::nullopt;
    return cov_.block((t - 1) * n_, (t - 1) * n_, n_, n_);
  }

  const Eigen::MatrixXd& block_cov() const { return cov_; }

 private:
  Eigen::MatrixXd cov_;
  Eigen::Index n_;
  Eigen::MatrixXd sqrt_;
};

class GaussianProcessSampler final : public Sampler {
 public:
  explicit GaussianProcessSampler(const GaussianProcessProcess* proc) : proc_(proc) {}

  Eigen::VectorXd step(RngStream& rs) override {
    const Eigen::MatrixXd& cov = proc_->block_cov();
    Eigen::Index n = proc_->dim();
    Eigen::Index s = static_cast<Eigen::Index>(prefix_.size());
    if ((s + 1) * n > cov.rows())
      throw std::out_of_range("gaussian_process sampler: past the covariance horizon");
    Eigen::MatrixXd c22 = cov.block(s * n, s * n, n, n);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
    Eigen::MatrixXd cond = c22;
    if (s > 0) {
      Eigen::MatrixXd c11 = cov.topLeftCorner(s * n, s * n);
      Eigen::MatrixXd c21 = cov.block(s * n, 0, n, s * n);
      // Pseudo-inverse via clipped eigendecomposition: prefix blocks may be
      // singular (e.g. copies-style couplings).
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es((c11 + c11.transpose()) / 2.0);
      double cutoff = std::max(es.eigenvalues().maxCoeff(), 0.0) * covkit::kEigClipRel;
      Eigen::VectorXd inv = es.eigenvalues();
      for (Eigen::Index i = 0; i < inv.size(); ++i)
        inv[i] = inv[i] > cutoff ? 1.0 / inv[i] : 0.0;
      Eigen::MatrixXd pinv = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
      Eigen::VectorXd xp(s * n);
      for (Eigen::Index t = 0; t < s; ++t) xp.segment(t * n, n) = prefix_[t];
      mean = c21 * pinv * xp;
      cond = c22 - c21 * pinv * c21.transpose();
    }
    Eigen::MatrixXd csqrt = covkit::psd_sqrt(cond);
    Eigen::VectorXd x = mean + csqrt * rs.gauss_vector(n);
    prefix_.push_back(x);
    return x;
  }

  std::unique_ptr<Sampler> clone() const override {
    return std::make_unique<GaussianProcessSampler>(*this);
  }

 private:
  const GaussianProcessProcess* proc_;
  std::vector<Eigen::VectorXd> prefix_;
};

inline std::unique_ptr<Sampler> GaussianProcessProcess::start(int T) const {
  if (T > horizon()) throw std::invalid_argument("gaussian_process: T exceeds block covariance horizon");
  return std::make_unique<GaussianProcessSampler>(this);
}

namespace detail {

// Uniform on the unit sphere of the coordinate subspace selected by `mask`.
inline Eigen::VectorXd sphere_in_subspace(const std::vector<int>& coords,
                                          Eigen::Index n, RngStream& rs) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  double norm2 = 0.0;
  Eigen::VectorXd g(coords.size());
  do {
    for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = rs.next_gauss();
    norm2 = g.norm();
  } while (norm2 < 1e-12);
  g /= norm2;
  for (std::size_t i = 0; i < coords.size(); ++i) x[coords[i]] = g[i];
  return x;
}

}  // namespace detail

// --- Alternating halfspaces -------------------------------------------------

class AlternatingHalfspacesSampler final : public Sampler {
 public:
  AlternatingHalfspacesSampler(Eigen::Index n) : n_(n) {}

  Eigen::VectorXd step(RngStream& rs) override {
    if (i_ < 0) {
      i_ = static_cast<int>(rs.next_below(2));
    } else {
      i_ = (i_ + 1) % 2;
    }
    std::vector<int> coords;
    for (Eigen::Index c = i_ * (n_ / 2); c < (i_ + 1) * (n_ / 2); ++c)
      coords.push_back(static_cast<int>(c));
    return detail::sphere_in_subspace(coords, n_, rs);
  }

  std::unique_ptr<Sampler> clone() const override {
    return std::make_unique<AlternatingHalfspacesSampler>(*this);
  }

 private:
  Eigen::Index n_;
  int i_ = -1;
};

class AlternatingHalfspacesProcess final : public Process {
 public:
  explicit AlternatingHalfspacesProcess(Eigen::Index n) : n_(n) {
    if (n < 4 || n % 2 != 0)
      throw std::domain_error("alternating_halfspaces: n must be even and >= 4");
  }

  Eigen::Index dim() const override { return n_; }

  std::unique_ptr<Sampler> start(int) const override {
    return std::make_unique<AlternatingHalfspacesSampler>(n_);
  }

  json descriptor() const override {
    return {{"kind", "alternating_halfspaces"}, {"n", n_}};
  }

  std::optional<Eigen::MatrixXd> sigma(int) const override {
    return Eigen::MatrixXd::Identity(n_, n_) / static_cast<double>(n_);
  }

 private:
  Eigen::Index n_;
};

// --- Normal subspaces Markov chain ------------------------------------------

class NormalSubspacesSampler final : public Sampler {
 public:
  explicit NormalSubspacesSampler(Eigen::Index n) : n_(n) {}

  Eigen::VectorXd step(RngStream& rs) override {
    if (i_ < 0) {
      i_ = static_cast<int>(rs.next_below(n_));
    } else {
      // Uniform over {0..n-1} \ {i_}.
      int j = static_cast<int>(rs.next_below(n_ - 1));
      i_ = j < i_ ? j : j + 1;
    }
    std::vector<int> coords;
    for (int c = 0; c < n_; ++c)
      if (c != i_) coords.push_back(c);
    return detail::sphere_in_subspace(coords, n_, rs);
  }

  std::unique_ptr<Sampler> clone() const override {
    return std::make_unique<NormalSubspacesSampler>(*this);
  }

  int chain_state() const { return i_; }

 private:
  Eigen::Index n_;
  int i_ = -1;
};

class NormalSubspacesProcess final : public Process {
 public:
  explicit NormalSubspacesProcess(Eigen::Index n) : n_(n) {
    if (n < 3) throw std::domain_error("normal_subspaces: n must be >= 3");
  }

  Eigen::Index dim() const override { return n_; }

  std::unique_ptr<Sampler> start(int) const override {
    return std::make_unique<NormalSubspacesSampler>(n_);
  }

  json descriptor() const override {
    return {{"kind", "normal_subspaces"}, {"n", n_}};
  }

  std::optional<Eigen::MatrixXd> sigma(int) const override {
    return Eigen::MatrixXd::Identity(n_, n_) / static_cast<double>(n_);
  }

  // Transition matrix of the index chain (uniform over the complement).
  static Eigen::MatrixXd transition_matrix(Eigen::Index n) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n - 1));
    p.diagonal().setZero();
    return p;
  }

 private:
  Eigen::Index n_;
};

// Closed-form mixing time of the normal-subspaces index chain:
// inf{ k : (n-1)^{-k} <= 2 eps / (1 - 1/n) }.
inline int mixing_time_formula(int n, double eps) {
  if (n < 2) throw std::invalid_argument("mixing_time_formula: n must be >= 2");
  if (!(eps > 0.0 && eps < 1.0)) throw std::invalid_argument("mixing_time_formula: eps must be in (0,1)");
  double target = 2.0 * eps / (1.0 - 1.0 / static_cast<double>(n));
  double pw = 1.0;
  int k = 0;
  while (pw > target) {
    pw /= static_cast<double>(n - 1);
    ++k;
    if (k > 4096) throw std::runtime_error("mixing_time_formula: did not converge");
  }
  return k;
}

// --- Volterra series ---------------------------------------------------------

struct VolterraTerm {
  std::vector<int> idx;  // lag indices i_1..i_d, each >= 0
  double value = 0.0;
};

// Per-coordinate truncated Volterra expansion over a private iid Gaussian
// stream (coefficients stored sparse).
class VolterraProcess final : public Process {
 public:
  // General degree-D mode.
  VolterraProcess(std::vector<std::vector<VolterraTerm>> coeffs, int degree)
      : coeffs_(std::move(coeffs)), degree_(degree) {
    if (coeffs_.empty()) throw std::invalid_argument("volterra: no coordinates");
    for (const auto& terms : coeffs_)
      for (const auto& t : terms) {
        if (t.idx.empty() || static_cast<int>(t.idx.size()) > degree_)
          throw std::invalid_argument("volterra: term degree out of range");
        for (int i : t.idx)
          if (i < 0) throw std::invalid_argument("volterra: negative lag index");
      }
  }

  // Degree-2 mode: terms are (i, j) pairs with i <= j, validated to be
  // symmetric, traceless, and non-degenerate.
  static VolterraProcess degree_two(std::vector<std::vector<VolterraTerm>> coeffs) {
    for (const auto& terms : coeffs) {
      bool any_nonzero = false;
      for (const auto& t : terms) {
        if (t.idx.size() != 2)
          throw std::domain_error("volterra degree-2: terms must have two indices");
        if (t.idx[0] > t.idx[1])
          throw std::domain_error("volterra degree-2: store terms with i <= j");
        if (t.idx[0] == t.idx[1] && t.value != 0.0)
          throw std::domain_error("volterra degree-2: array must be traceless");
        if (t.value != 0.0) any_nonzero = true;
      }
      if (!any_nonzero)
        throw std::domain_error("volterra degree-2: array must be non-degenerate");
    }
    VolterraProcess p(std::move(coeffs), 2);
    p.degree_two_mode_ = true;
    return p;
  }

  Eigen::Index dim() const override { return static_cast<Eigen::Index>(coeffs_.size()); }

  std::unique_ptr<Sampler> start(int) const override;

  json descriptor() const override {
    json per_coord = json::array();
    for (const auto& terms : coeffs_) {
      json list = json::array();
      for (const auto& t : terms) list.push_back({{"idx", t.idx}, {"value", t.value}});
      per_coord.push_back(std::move(list));
    }
    return {{"kind", "volterra"},
            {"degree", degree_},
            {"degree_two_mode", degree_two_mode_},
            {"coeffs", std::move(per_coord)}};
  }

  const std::vector<std::vector<VolterraTerm>>& coeffs() const { return coeffs_; }

 private:
  std::vector<std::vector<VolterraTerm>> coeffs_;
  int degree_;
  bool degree_two_mode_ = false;
};

class VolterraSampler final : public Sampler {
 public:
  explicit VolterraSampler(const VolterraProcess* proc) : proc_(proc) {}

  Eigen::VectorXd step(RngStream& rs) override {
    Eigen::Index n = proc_->dim();
    // Emit x_t for t = history size + 1; it depends on w_0..w_{t-1}.
    std::vector<double> w_new(n);
    for (Eigen::Index l = 0; l < n; ++l) w_new[l] = rs.next_gauss();
    w_.push_back(std::move(w_new));
    int t = static_cast<int>(w_.size());
    Eigen::VectorXd x(n);
    for (Eigen::Index l = 0; l < n; ++l) {
      double acc = 0.0;
      for (const auto& term : proc_->coeffs()[l]) {
        double prod = term.value;
        bool in_range = true;
        for (int lag : term.idx) {
          if (lag > t - 1) { in_range = false; break; }
          prod *= w_[t - lag - 1][l];
        }
        if (in_range) acc += prod;
      }
      x[l] = acc;
    }
    return x;
  }

  std::unique_ptr<Sampler> clone() const override {
    return std::make_unique<VolterraSampler>(*this);
  }

 private:
  const VolterraProcess* proc_;
  std::vector<std::vector<double>> w_;  // w_[s][l] = w_s^{(l)}, s = 0,1,...
};

inline std::unique_ptr<Sampler> VolterraProcess::start(int) const {
  return std::make_unique<VolterraSampler>(this);
}

// --- Batches -----------------------------------------------------------------

// Role tags for substream derivation; keeps covariate, continuation, and
// observation-noise draws on disjoint streams.
enum : std::uint64_t {
  kStreamTrajectory = 1,
  kStreamNoise = 2,
};

struct TrajectoryBatch {
  std::vector<Eigen::MatrixXd> x;  // m matrices, each T x n
  json descriptor;
  std::uint64_t seed = 0;
  int m = 0;
  int T = 0;
  int n = 0;
  // LDS extras enabling the system-identification labels y_t = x_{t+1}.
  std::optional<Eigen::MatrixXd> next_state;  // m x n, the (T+1)-th state
  std::optional<Eigen::MatrixXd> lds_A;
  std::optional<Eigen::MatrixXd> lds_B;
};

// Samples m independent trajectories from any process; trajectory i uses the
// substream (seed, kStreamTrajectory, i).
inline TrajectoryBatch gen_batch(const Process& proc, int m, int T, std::uint64_t seed) {
  if (m < 1 || T < 1) throw std::invalid_argument("gen_batch: m and T must be >= 1");
  TrajectoryBatch b;
  b.m = m;
  b.T = T;
  b.n = static_cast<int>(proc.dim());
  b.seed = seed;
  b.descriptor = proc.descriptor();
  b.x.resize(m);
  for (int i = 0; i < m; ++i) {
    RngStream rs = RngStream::from_path(seed, {kStreamTrajectory, static_cast<std::uint64_t>(i)});
    b.x[i] = proc.sample_full(T, rs);
  }
  return b;
}

// LDS batch that also simulates the (T+1)-th state on each trajectory's own
// stream, so that sysid labels reconstruct xi_t = B w_{t+1} exactly.
inline TrajectoryBatch gen_lds(const DynamicsPair& dyn, int m, int T, std::uint64_t seed) {
  if (m < 1 || T < 1) throw std::invalid_argument("gen_lds: m and T must be >= 1");
  LdsProcess proc(dyn);
  TrajectoryBatch b;
  b.m = m;
  b.T = T;
  b.n = static_cast<int>(proc.dim());
  b.seed = seed;
  b.descriptor = proc.descriptor();
  b.x.resize(m);
  Eigen::MatrixXd next(m, b.n);
  for (int i = 0; i < m; ++i) {
    RngStream rs = RngStream::from_path(seed, {kStreamTrajectory, static_cast<std::uint64_t>(i)});
    auto s = proc.start(T);
    Eigen::MatrixXd x(T, b.n);
    for (int t = 0; t < T; ++t) x.row(t) = s->step(rs).transpose();
    next.row(i) = s->step(rs).transpose();
    b.x[i] = std::move(x);
  }
  b.next_state = std::move(next);
  b.lds_A = dyn.A;
  b.lds_B = dyn.B;
  return b;
}

inline TrajectoryBatch gen_iid_gauss(const IidGaussProcess& proc, int m, int T, std::uint64_t seed) {
  return gen_batch(proc, m, T, seed);
}

inline TrajectoryBatch gen_copies(const Eigen::MatrixXd& Sigma, int m, int T, std::uint64_t seed) {
  return gen_batch(CopiesProcess(Sigma), m, T, seed);
}

inline TrajectoryBatch gen_gaussian_process(const Eigen::MatrixXd& block_cov, Eigen::Index n,
                                            int m, std::uint64_t seed) {
  GaussianProcessProcess proc(block_cov, n);
  return gen_batch(proc, m, proc.horizon(), seed);
}

inline TrajectoryBatch gen_alternating_halfspaces(Eigen::Index n, int m, int T, std::uint64_t seed) {
  if (T < 2) throw std::domain_error("gen_alternating_halfspaces: T must be >= 2");
  return gen_batch(AlternatingHalfspacesProcess(n), m, T, seed);
}

inline TrajectoryBatch gen_normal_subspaces(Eigen::Index n, int m, int T, std::uint64_t seed) {
  if (T < 2) throw std::domain_error("gen_normal_subspaces: T must be >= 2");
  return gen_batch(NormalSubspacesProcess(n), m, T, seed);
}

inline TrajectoryBatch gen_volterra(const VolterraProcess& proc, int m, int T, std::uint64_t seed) {
  return gen_batch(proc, m, T, seed);
}

// --- Labels -------------------------------------------------------------------

enum class NoiseKind { gaussian_decoupled, sysid_coupled };

struct LabeledBatch {
  TrajectoryBatch batch;
  std::vector<Eigen::MatrixXd> y;  // m matrices, each T x p
  Eigen::MatrixXd W_star;          // p x n
  NoiseKind noise = NoiseKind::gaussian_decoupled;
  double sigma_xi = 0.0;
  int p = 0;
};

// Attaches responses y_t = W* x_t + xi_t. For gaussian_decoupled, xi is iid
// N(0, sigma_xi^2 I_p) on the (seed, kStreamNoise, i) substreams. For
// sysid_coupled the batch must come from gen_lds with W* = A; responses are
// the next states and xi_t = B w_{t+1} by construction.
inline LabeledBatch label_batch(TrajectoryBatch batch, const Eigen::MatrixXd& W_star,
                                NoiseKind noise, double sigma_xi, std::uint64_t seed) {
  LabeledBatch lb;
  lb.noise = noise;
  lb.sigma_xi = sigma_xi;
  lb.p = static_cast<int>(W_star.rows());
  if (W_star.cols() != batch.n)
    throw std::invalid_argument("label_batch: W_star column count must equal covariate dimension");
  lb.y.resize(batch.m);
  if (noise == NoiseKind::sysid_coupled) {
    if (!batch.next_state || !batch.lds_A)
      throw std::domain_error("label_batch: sysid_coupled requires an LDS batch with retained continuation");
    if (W_star.rows() != batch.n || (W_star - *batch.lds_A).norm() != 0.0)
      throw std::domain_error("label_batch: sysid_coupled requires W_star == A");
    for (int i = 0; i < batch.m; ++i) {
      Eigen::MatrixXd y(batch.T, batch.n);
      if (batch.T > 1) y.topRows(batch.T - 1) = batch.x[i].bottomRows(batch.T - 1);
      y.row(batch.T - 1) = batch.next_state->row(i);
      lb.y[i] = std::move(y);
    }
  } else {
    for (int i = 0; i < batch.m; ++i) {
      RngStream rs = RngStream::from_path(seed, {kStreamNoise, static_cast<std::uint64_t>(i)});
      Eigen::MatrixXd y = batch.x[i] * W_star.transpose();
      if (sigma_xi != 0.0) y += sigma_xi * rs.gauss_matrix(batch.T, lb.p);
      lb.y[i] = std::move(y);
    }
  }
  lb.W_star = W_star;
  lb.batch = std::move(batch);
  return lb;
}

// --- Monte Carlo covariance estimate -------------------------------------------

struct GammaEstimate {
  Eigen::MatrixXd gamma;
  double se = 0.0;  // max over entries of the entrywise standard error
  int trials = 0;
};

// Monte Carlo estimate of Gamma_t = (1/t) sum_s E x_s x_s^T over `trials`
// independent trajectories; symmetric by construction.
inline GammaEstimate estimate_gamma(const Process& proc, int t, int trials, std::uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("estimate_gamma: trials must be >= 1");
  Eigen::Index n = proc.dim();
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd sumsq = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < trials; ++i) {
    RngStream rs = RngStream::from_path(seed, {kStreamTrajectory, static_cast<std::uint64_t>(i)});
    Eigen::MatrixXd x = proc.sample_full(t, rs);
    Eigen::MatrixXd g = x.transpose() * x / static_cast<double>(t);
    g = ((g + g.transpose()) / 2.0).eval();
    sum += g;
    sumsq += g.cwiseProduct(g);
  }
  GammaEstimate est;
  est.trials = trials;
  est.gamma = sum / static_cast<double>(trials);
  if (trials >= 2) {
    Eigen::MatrixXd var =
        (sumsq - est.gamma.cwiseProduct(est.gamma) * static_cast<double>(trials)) /
        static_cast<double>(trials - 1);
    est.se = std::sqrt(var.cwiseMax(0.0).maxCoeff() / static_cast<double>(trials));
  }
  return est;
}

// Factory from a descriptor (the inverse of Process::descriptor()).
inline std::unique_ptr<Process> make_process(const json& desc, int T_hint = 0) {
  const std::string kind = desc.at("kind").get<std::string>();
  if (kind == "lds") {
    return std::make_unique<LdsProcess>(
        DynamicsPair(matrix_from_json(desc.at("A")), matrix_from_json(desc.at("B"))));
  }
  if (kind == "iid_gauss") {
    if (desc.contains("params")) {
      const json& p = desc.at("params");
      const std::string rule = p.at("rule").get<std::string>();
      if (rule == "scaled_identity") {
        if (T_hint < 1) throw std::invalid_argument("make_process: iid_gauss rule needs a horizon");
        Eigen::Index n = desc.contains("n") ? desc.at("n").get<Eigen::Index>()
                                            : p.at("n").get<Eigen::Index>();
        return std::make_unique<IidGaussProcess>(IidGaussProcess::scaled_identity(
            n, p.at("scale").get<double>(), p.at("growth").get<double>(), T_hint));
      }
      if (rule == "lds_marginals") {
        if (T_hint < 1) throw std::invalid_argument("make_process: iid_gauss rule needs a horizon");
        DynamicsPair dyn(matrix_from_json(p.at("A")), matrix_from_json(p.at("B")));
        return std::make_unique<IidGaussProcess>(IidGaussProcess::lds_marginals(dyn, T_hint));
      }
      throw std::invalid_argument("make_process: unknown iid_gauss rule " + rule);
    }
    std::vector<Eigen::MatrixXd> sigmas;
    for (const auto& s : desc.at("sigmas")) sigmas.push_back(matrix_from_json(s));
    return std::make_unique<IidGaussProcess>(std::move(sigmas));
  }
  if (kind == "copies") {
    return std::make_unique<CopiesProcess>(matrix_from_json(desc.at("Sigma")));
  }
  if (kind == "gaussian_process") {
    return std::make_unique<GaussianProcessProcess>(matrix_from_json(desc.at("block_cov")),
                                                    desc.at("n").get<Eigen::Index>());
  }
  if (kind == "alternating_halfspaces") {
    return std::make_unique<AlternatingHalfspacesProcess>(desc.at("n").get<Eigen::Index>());
  }
  if (kind == "normal_subspaces") {
    return std::make_unique<NormalSubspacesProcess>(desc.at("n").get<Eigen::Index>());
  }
  if (kind == "volterra") {
    std::vector<std::vector<VolterraTerm>> coeffs;
    for (const auto& per_coord : desc.at("coeffs")) {
      std::vector<VolterraTerm> terms;
      for (const auto& t : per_coord) {
        VolterraTerm vt;
        vt.idx = t.at("idx").get<std::vector<int>>();
        vt.value = t.at("value").get<double>();
        terms.push_back(std::move(vt));
      }
      coeffs.push_back(std::move(terms));
    }
    int degree = desc.at("degree").get<int>();
    if (desc.value("degree_two_mode", false))
      return std::make_unique<VolterraProcess>(VolterraProcess::degree_two(std::move(coeffs)));
    return std::make_unique<VolterraProcess>(std::move(coeffs), degree);
  }
  throw std::invalid_argument("make_process: unknown kind " + kind);
}

}  // namespace trajlearn
