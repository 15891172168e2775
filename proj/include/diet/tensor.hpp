// SPDX-License-Identifier: Apache-2.0
//
// Dense linear algebra helpers on top of Eigen. Everything in the library is
// computed in double precision; the templates exist so the helpers compose
// with arbitrary Eigen expressions.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "diet/errors.hpp"

namespace diet {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;

/// Relative singular-value threshold used for every rank computation.
inline constexpr double kDefaultRankTol = 1e-8;

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
  if (!all_finite(m)) throw NumericError(std::string(what) + ": non-finite entry");
}

/// Checked product. Throws DimensionError naming both shapes on mismatch.
template <typename A, typename B>
MatrixX<typename A::Scalar> matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a) + " by " + shape_str(b));
  }
  MatrixX<typename A::Scalar> out = a * b;
  require_finite(out, "matmul");
  return out;
}

/// Row-wise softmax of a / scale, stabilised by subtracting each row maximum.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& a,
                                               typename Derived::Scalar scale = 1) {
  using Scalar = typename Derived::Scalar;
  if (!(scale > 0)) throw ConfigError("softmax_rows: scale must be positive");
  MatrixX<Scalar> out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const Scalar row_max = a.row(i).maxCoeff();
    Scalar total = 0;
    for (Index j = 0; j < a.cols(); ++j) {
      const Scalar e = std::exp((a(i, j) - row_max) / scale);
      out(i, j) = e;
      total += e;
    }
    out.row(i) /= total;
  }
  return out;
}

/// Singular values in decreasing order.
Vector singular_values(const Eigen::Ref<const Matrix>& m);

/// Thin SVD factors; reconstruction u * s.asDiagonal() * v^T.
struct Svd {
  Matrix u;
  Vector s;
  Matrix v;
};
Svd svd(const Eigen::Ref<const Matrix>& m);

/// Number of singular values above rel_tol * sigma_max. Zero for the zero matrix.
Index numerical_rank(const Eigen::Ref<const Matrix>& m, double rel_tol = kDefaultRankTol);

/// Frobenius error of the best rank-k approximation (Eckart-Young).
double truncation_error(const Eigen::Ref<const Matrix>& m, Index rank);

/// xoshiro256** seeded through splitmix64. Satisfies UniformRandomBitGenerator.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()();

  /// Independent child stream keyed by `stream`; the parent is not advanced.
  Rng split(std::uint64_t stream) const;

  double normal(double mean = 0.0, double stddev = 1.0);
  double uniform();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_[4];
};

/// rows x cols matrix with entries drawn from normal(0, stddev^2).
Matrix randn_matrix(Index rows, Index cols, double stddev, std::uint64_t seed);
Matrix randn_matrix(Index rows, Index cols, double stddev, Rng& rng);

}  // namespace diet
