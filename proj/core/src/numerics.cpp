// SPDX-License-Identifier: Apache-2.0
#include "localist/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "localist/error.hpp"

namespace localist {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidParameter: return "invalid-parameter";
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kNumericFailure: return "numeric-failure";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kInfeasible: return "infeasible";
    case ErrorKind::kParse: return "parse-error";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kCompile: return "compile-error";
    case ErrorKind::kChecksumMismatch: return "checksum-mismatch";
    case ErrorKind::kIo: return "io-error";
  }
  return "unknown";
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw Error(ErrorKind::kInvalidParameter, "Rng::index requires n > 0");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t draw = engine_();
  while (draw >= limit) draw = engine_();
  return static_cast<std::size_t>(draw % bound);
}

std::uint64_t Rng::derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::restore(std::uint64_t seed, const std::string& state) {
  std::istringstream in(state);
  std::mt19937_64 engine;
  in >> engine;
  if (in.fail()) throw Error(ErrorKind::kInvalidInput, "malformed rng state");
  seed_ = seed;
  engine_ = engine;
}

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

Matrix softmax_rows(const Matrix& m, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw Error(ErrorKind::kInvalidParameter, "softmax temperature must be positive");
  if (!m.allFinite()) throw Error(ErrorKind::kInvalidInput, "softmax input is not finite");
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (m.cols() == 0) continue;
    const double peak = m.row(r).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out(r, c) = std::exp((m(r, c) - peak) / tau);
      total += out(r, c);
    }
    out.row(r) /= total;
  }
  return out;
}

Vector softmax(const Vector& logits) {
  if (!logits.allFinite()) throw Error(ErrorKind::kInvalidInput, "softmax input is not finite");
  Vector out(logits.size());
  if (logits.size() == 0) return out;
  const double peak = logits.maxCoeff();
  out = (logits.array() - peak).exp();
  out /= out.sum();
  return out;
}

double frobenius(const Matrix& m) {
  if (!m.allFinite()) throw Error(ErrorKind::kInvalidInput, "frobenius input is not finite");
  return m.norm();
}

double spectral_norm(const Matrix& m, double tol, int max_iterations) {
  if (!m.allFinite()) throw Error(ErrorKind::kInvalidInput, "spectral_norm input is not finite");
  if (m.size() == 0) return 0.0;
  const Matrix gram = m.transpose() * m;
  // Fixed pseudo-random start keeps the result reproducible and avoids the
  // all-ones vector being orthogonal to the top eigenvector.
  Rng start_rng(0x5eed);
  Vector v(gram.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = 1.0 + 0.5 * start_rng.uniform();
  v.normalize();

  double estimate = 0.0;
  for (int it = 1; it <= max_iterations; ++it) {
    Vector w = gram * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = v.dot(w);  // Rayleigh quotient of the Gram matrix
    v = w / norm;
    if (it > 1 && std::abs(next - estimate) <= tol * std::max(next, 1e-300)) {
      return std::sqrt(std::max(next, 0.0));
    }
    estimate = next;
  }
  throw Error(ErrorKind::kNumericFailure,
              "spectral_norm did not converge after " + std::to_string(max_iterations) +
                  " iterations");
}

double grad_check(const ScalarFunction& f, const Matrix& analytic_grad, const Matrix& at,
                  double step) {
  if (analytic_grad.rows() != at.rows() || analytic_grad.cols() != at.cols())
    throw Error(ErrorKind::kInvalidInput, "grad_check: gradient shape mismatch");
  if (!(step > 0.0)) throw Error(ErrorKind::kInvalidParameter, "grad_check: step must be positive");
  Matrix probe = at;
  Matrix numeric(at.rows(), at.cols());
  for (Eigen::Index i = 0; i < at.rows(); ++i) {
    for (Eigen::Index j = 0; j < at.cols(); ++j) {
      const double original = probe(i, j);
      probe(i, j) = original + step;
      const double up = f(probe);
      probe(i, j) = original - step;
      const double down = f(probe);
      probe(i, j) = original;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw Error(ErrorKind::kNumericFailure, "grad_check: non-finite objective at coordinate (" +
                                                    std::to_string(i) + ", " + std::to_string(j) +
                                                    ")");
      }
      numeric(i, j) = (up - down) / (2.0 * step);
    }
  }
  if (at.size() == 0) return 0.0;
  const double scale = std::max({numeric.cwiseAbs().maxCoeff(), analytic_grad.cwiseAbs().maxCoeff(), 1e-12});
  return (numeric - analytic_grad).cwiseAbs().maxCoeff() / scale;
}

}  // namespace localist
