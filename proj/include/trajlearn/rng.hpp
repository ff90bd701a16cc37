#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

#include <Eigen/Dense>

namespace trajlearn {

namespace detail {

// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based stream: output block i is a stateless function of (key, i).
// Substreams are derived by folding a path of indices into the key, so that
// e.g. trajectory i's stream is independent of how many draws trajectory
// i-1 consumed. Gaussians come from Box-Muller on the uniform output, which
// keeps results bit-identical across platforms and thread counts.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : key_(key) {}

  static RngStream from_path(std::uint64_t master,
                             std::initializer_list<std::uint64_t> path) {
    return RngStream(derive_seed(master, path));
  }

  // The key-folding behind from_path, exposed so callers can hand derived
  // seeds to APIs that take a master seed.
  static std::uint64_t derive_seed(std::uint64_t master,
                                   std::initializer_list<std::uint64_t> path) {
    std::uint64_t k = detail::mix64(master ^ 0x6a09e667f3bcc909ULL);
    for (std::uint64_t p : path) {
      k = detail::mix64(k ^ detail::mix64(p + 0x243f6a8885a308d3ULL));
    }
    return k;
  }

  std::uint64_t next_u64() { return detail::mix64(key_ + 0x9e3779b97f4a7c15ULL * (++ctr_)); }

  // Uniform on (0, 1); never returns 0, so log() below is safe.
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double next_gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  Eigen::VectorXd gauss_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = next_gauss();
    return v;
  }

  Eigen::MatrixXd gauss_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = next_gauss();
    return m;
  }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection sampling on the top bits to avoid modulo bias.
    std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace trajlearn
