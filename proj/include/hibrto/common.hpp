#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace hibrto {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using RowSparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;
inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Argument outside the mathematical domain of an operation (γ ≤ 0, non-finite input, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// The RTO map lost invertibility at a point: det(∇Θ) ≤ 0.
class DiffeomorphismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical factorization or solve could not be completed.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LikelihoodKind { gaussian, poisson };

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw DomainError(std::string(what) + " contains non-finite entries");
}

inline void require_size(const Vector& v, Index n, const char* what) {
  if (v.size() != n) {
    throw std::invalid_argument(std::string(what) + ": expected length " + std::to_string(n) +
                                ", got " + std::to_string(v.size()));
  }
}

/// a·log(x) with the convention 0·log(0) = 0.
inline double xlogy(double a, double x) {
  if (a == 0.0) return 0.0;
  return a * std::log(x);
}

/// log Σ exp(v_i), stable under max subtraction. Returns -inf for an empty or all -inf input.
template <typename Range>
double log_sum_exp(const Range& values) {
  double hi = -kInf;
  for (double v : values) hi = std::max(hi, v);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double v : values) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

template <typename Range>
double log_mean_exp(const Range& values) {
  const auto count = static_cast<double>(std::distance(std::begin(values), std::end(values)));
  if (count == 0) return -kInf;
  return log_sum_exp(values) - std::log(count);
}

/// log|det A| and sign(det A) of a square dense matrix via partial-pivot LU.
struct SignedLogDet {
  double log_abs = 0.0;
  int sign = 1;
};

inline SignedLogDet signed_log_det(const Matrix& a) {
  SignedLogDet out;
  if (a.rows() == 0) return out;
  Eigen::PartialPivLU<Matrix> lu(a);
  const Matrix& packed = lu.matrixLU();
  out.sign = static_cast<int>(lu.permutationP().determinant());
  for (Index i = 0; i < packed.rows(); ++i) {
    const double d = packed(i, i);
    if (d == 0.0) {
      out.sign = 0;
      out.log_abs = -kInf;
      return out;
    }
    if (d < 0) out.sign = -out.sign;
    out.log_abs += std::log(std::abs(d));
  }
  return out;
}

}  // namespace hibrto
