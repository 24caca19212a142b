// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace localist {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Deterministic random stream. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the real-valued transforms below are
/// implemented here rather than through <random> distributions, which are
/// implementation-defined.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "mt19937_64";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal();
  /// Unbiased integer in [0, n). n must be positive.
  std::size_t index(std::size_t n);

  /// Seed for an independent child stream, e.g. one per sweep grid point.
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

  /// Engine state as text; restore() reproduces the stream position exactly.
  std::string state() const;
  void restore(std::uint64_t seed, const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng);

bool all_finite(const Matrix& m);

/// Row-wise softmax of M / tau with max subtraction.
Matrix softmax_rows(const Matrix& m, double tau);

/// Softmax of a single vector of logits already divided by the temperature.
Vector softmax(const Vector& logits);

double frobenius(const Matrix& m);

/// Largest singular value by power iteration on M^T M.
double spectral_norm(const Matrix& m, double tol = 1e-12, int max_iterations = 10000);

using ScalarFunction = std::function<double(const Matrix&)>;

/// Central-difference check of an analytic gradient. Returns the largest
/// coordinate error |fd - an| relative to the largest gradient entry, so
/// rounding noise on near-zero coordinates does not dominate.
double grad_check(const ScalarFunction& f, const Matrix& analytic_grad, const Matrix& at,
                  double step = 1e-5);

}  // namespace localist
