// SPDX-License-Identifier: Apache-2.0
#include "diet/tensor.hpp"

#include <algorithm>

namespace diet {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

template <typename Solver>
void check_converged(const Solver& solver, const Eigen::Ref<const Matrix>& m) {
  if (solver.info() != Eigen::Success) {
    throw NumericError("svd: Jacobi sweeps did not converge on " + shape_str(m) + " input");
  }
}

}  // namespace

Vector singular_values(const Eigen::Ref<const Matrix>& m) {
  if (m.size() == 0) return Vector();
  require_finite(m, "singular_values");
  Eigen::JacobiSVD<Matrix> solver(m);
  check_converged(solver, m);
  return solver.singularValues();
}

Svd svd(const Eigen::Ref<const Matrix>& m) {
  require_finite(m, "svd");
  Eigen::JacobiSVD<Matrix> solver(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  check_converged(solver, m);
  return {solver.matrixU(), solver.singularValues(), solver.matrixV()};
}

Index numerical_rank(const Eigen::Ref<const Matrix>& m, double rel_tol) {
  if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw ConfigError("numerical_rank: rel_tol must lie in (0, 1)");
  const Vector s = singular_values(m);
  if (s.size() == 0 || s(0) == 0.0) return 0;
  const double cutoff = rel_tol * s(0);
  return static_cast<Index>((s.array() > cutoff).count());
}

double truncation_error(const Eigen::Ref<const Matrix>& m, Index rank) {
  const Vector s = singular_values(m);
  if (rank >= s.size()) return 0.0;
  return s.tail(s.size() - rank).norm();
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& word : state_) word = splitmix64(x);
}

Rng::result_type Rng::operator()() {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

Rng Rng::split(std::uint64_t stream) const {
  std::uint64_t x = seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  return Rng(splitmix64(x));
}

double Rng::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

double Rng::normal(double mean, double stddev) {
  // Box-Muller; no cached second variate, so copies of an Rng stay in lockstep.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  return mean + stddev * z;
}

std::uint64_t Rng::below(std::uint64_t bound) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * bound) >> 64);
}

Matrix randn_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  if (stddev < 0.0) throw ConfigError("randn_matrix: stddev must be non-negative");
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) out(i, j) = rng.normal(0.0, stddev);
  }
  return out;
}

Matrix randn_matrix(Index rows, Index cols, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  return randn_matrix(rows, cols, stddev, rng);
}

}  // namespace diet
