#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>

#include "hibrto/common.hpp"
#include "hibrto/grid.hpp"
#include "hibrto/random.hpp"

namespace hibrto {

/// Lumped mass, stiffness and the spectrum of M̄⁻¹K for the SPDE prior.
class PriorOperators {
 public:
  /// Clamp threshold for the smallest generalized eigenvalues, relative to max(1, χ_max).
  static constexpr double kEigenTolerance = 1e-10;

  explicit PriorOperators(const Grid& grid) {
    if (grid.dimension() == 1) {
      assemble_1d(grid);
      beta_ = 1;
    } else {
      assemble_2d(grid);
      beta_ = 2;
    }
    compute_spectrum();
  }

  /// Operators supplied directly, e.g. M̄ = I and K = 0 for unstructured test problems.
  PriorOperators(Vector lumped_mass, SparseMatrix stiffness, int beta)
      : mass_(std::move(lumped_mass)), stiffness_(std::move(stiffness)), beta_(beta) {
    if (beta_ != 1 && beta_ != 2) throw std::invalid_argument("PriorOperators: beta must be 1 or 2");
    if (stiffness_.rows() != mass_.size() || stiffness_.cols() != mass_.size()) {
      throw std::invalid_argument("PriorOperators: stiffness/mass size mismatch");
    }
    if ((mass_.array() <= 0).any()) throw std::invalid_argument("PriorOperators: lumped mass must be positive");
    stiffness_.makeCompressed();
    compute_spectrum();
  }

  Index size() const { return mass_.size(); }
  int beta() const { return beta_; }
  const Vector& lumped_mass() const { return mass_; }
  const SparseMatrix& stiffness() const { return stiffness_; }
  /// Ascending eigenvalues χ of M̄⁻¹K.
  const Vector& eigenvalues() const { return chi_; }
  double log_det_mass() const { return log_det_mass_; }

  SparseMatrix precision(double gamma) const {
    check_gamma(gamma);
    const Index n = size();
    SparseMatrix mbar(n, n);
    mbar.reserve(Eigen::VectorXi::Constant(n, 1));
    for (Index i = 0; i < n; ++i) mbar.insert(i, i) = mass_[i];
    SparseMatrix p;
    if (beta_ == 1) {
      p = gamma * mbar + stiffness_;
    } else {
      const Vector inv_mass = mass_.cwiseInverse();
      SparseMatrix kmk = stiffness_ * (inv_mass.asDiagonal() * stiffness_);
      p = (gamma * gamma) * mbar + (2.0 * gamma) * stiffness_ + kmk;
    }
    p.makeCompressed();
    return p;
  }

  /// log det P_γ from the cached spectrum, O(n).
  double log_det(double gamma) const {
    check_gamma(gamma);
    return log_det_mass_ + beta_ * eigen_log_sum(gamma);
  }

  /// Σ log(χ_i + γ).
  double eigen_log_sum(double gamma) const {
    double s = 0.0;
    for (Index i = 0; i < chi_.size(); ++i) {
      const double v = chi_[i] + gamma;
      if (!(v > 0)) throw DomainError("prior log-determinant: chi + gamma <= 0");
      s += std::log(v);
    }
    return s;
  }

  double mass_quadratic(const Vector& v) const { return v.dot(mass_.cwiseProduct(v)); }
  double stiffness_quadratic(const Vector& v) const { return v.dot(stiffness_ * v); }

  /// vᵀ P_γ v without assembling P_γ.
  double precision_quadratic(const Vector& v, double gamma) const {
    if (beta_ == 1) return gamma * mass_quadratic(v) + stiffness_quadratic(v);
    const Vector kv = stiffness_ * v;
    return gamma * gamma * mass_quadratic(v) + 2.0 * gamma * v.dot(kv) + kv.dot(mass_.cwiseInverse().cwiseProduct(kv));
  }

 private:
  static void check_gamma(double gamma) {
    if (!(gamma > 0) || !std::isfinite(gamma)) {
      throw DomainError("prior correlation parameter gamma must be positive and finite, got " + std::to_string(gamma));
    }
  }

  void assemble_1d(const Grid& grid) {
    const auto& x = grid.axis();
    const Index n = grid.size();
    mass_ = Vector::Zero(n);
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(static_cast<std::size_t>(4 * n));
    for (Index e = 0; e + 1 < n; ++e) {
      const double h = x[e + 1] - x[e];
      if (!(h > 0)) throw std::invalid_argument("assemble: degenerate element " + std::to_string(e));
      mass_[e] += 0.5 * h;
      mass_[e + 1] += 0.5 * h;
      t.emplace_back(e, e, 1.0 / h);
      t.emplace_back(e + 1, e + 1, 1.0 / h);
      t.emplace_back(e, e + 1, -1.0 / h);
      t.emplace_back(e + 1, e, -1.0 / h);
    }
    stiffness_.resize(n, n);
    stiffness_.setFromTriplets(t.begin(), t.end());
    stiffness_.makeCompressed();
  }

  void assemble_2d(const Grid& grid) {
    static constexpr double ke[4][4] = {
        {4, -1, -2, -1}, {-1, 4, -1, -2}, {-2, -1, 4, -1}, {-1, -2, -1, 4}};
    const double h = grid.cell_width();
    if (!(h > 0)) throw std::invalid_argument("assemble: degenerate cell");
    const Index n = grid.size();
    mass_ = Vector::Zero(n);
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(static_cast<std::size_t>(16 * grid.element_count()));
    for (Index e = 0; e < grid.element_count(); ++e) {
      const auto nodes = grid.element(e);
      for (int a = 0; a < 4; ++a) {
        mass_[nodes[a]] += 0.25 * h * h;
        for (int b = 0; b < 4; ++b) t.emplace_back(nodes[a], nodes[b], ke[a][b] / 6.0);
      }
    }
    stiffness_.resize(n, n);
    stiffness_.setFromTriplets(t.begin(), t.end());
    stiffness_.makeCompressed();
  }

  void compute_spectrum() {
    const Index n = size();
    log_det_mass_ = mass_.array().log().sum();
    const Vector s = mass_.cwiseSqrt().cwiseInverse();
    if (is_tridiagonal()) {
      Vector diag(n), sub(n > 1 ? n - 1 : 0);
      for (Index i = 0; i < n; ++i) diag[i] = stiffness_.coeff(i, i) * s[i] * s[i];
      for (Index i = 0; i + 1 < n; ++i) sub[i] = stiffness_.coeff(i + 1, i) * s[i] * s[i + 1];
      Eigen::SelfAdjointEigenSolver<Matrix> es;
      es.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);
      if (es.info() != Eigen::Success) throw NumericalError("prior eigenvalue solve failed");
      chi_ = es.eigenvalues();
    } else {
      Matrix a = s.asDiagonal() * Matrix(stiffness_) * s.asDiagonal();
      Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
      if (es.info() != Eigen::Success) throw NumericalError("prior eigenvalue solve failed");
      chi_ = es.eigenvalues();
    }
    const double scale = std::max(1.0, chi_.size() ? std::abs(chi_[chi_.size() - 1]) : 1.0);
    for (Index i = 0; i < chi_.size(); ++i) {
      if (chi_[i] < -kEigenTolerance * scale) {
        throw NumericalError("stiffness matrix is not positive semidefinite (eigenvalue " +
                             std::to_string(chi_[i]) + ")");
      }
      if (chi_[i] < kEigenTolerance * scale) chi_[i] = std::max(chi_[i], 0.0);
    }
  }

  bool is_tridiagonal() const {
    for (Index k = 0; k < stiffness_.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(stiffness_, k); it; ++it) {
        if (std::abs(it.row() - it.col()) > 1 && it.value() != 0.0) return false;
      }
    }
    return true;
  }

  Vector mass_;
  SparseMatrix stiffness_;
  Vector chi_;
  double log_det_mass_ = 0.0;
  int beta_ = 1;
};

/// Gaussian prior N(m, (δ P_γ)⁻¹) with a cached sparse Cholesky factor of P_γ.
///
/// The whitening operator is R = √δ Lᵀ where P_γ = L Lᵀ, so δP_γ = RᵀR.
class PriorModel {
 public:
  using Factor = Eigen::SimplicialLLT<SparseMatrix, Eigen::Lower, Eigen::NaturalOrdering<int>>;

  PriorModel(std::shared_ptr<const PriorOperators> ops, Vector mean, double delta, double gamma)
      : ops_(std::move(ops)), mean_(std::move(mean)), delta_(delta), gamma_(gamma) {
    if (!ops_) throw std::invalid_argument("PriorModel: null operators");
    require_size(mean_, ops_->size(), "prior mean");
    if (!(delta > 0) || !std::isfinite(delta)) throw DomainError("prior precision delta must be positive");
    precision_ = ops_->precision(gamma);
    auto f = std::make_shared<Factor>(precision_);
    if (f->info() != Eigen::Success) {
      throw NumericalError("sparse Cholesky of the prior precision failed for gamma = " + std::to_string(gamma));
    }
    factor_ = std::move(f);
    log_det_p_ = ops_->log_det(gamma);
  }

  /// Same γ (and factor), different δ.
  PriorModel with_delta(double delta) const {
    if (!(delta > 0) || !std::isfinite(delta)) throw DomainError("prior precision delta must be positive");
    PriorModel copy(*this);
    copy.delta_ = delta;
    return copy;
  }

  Index size() const { return mean_.size(); }
  double delta() const { return delta_; }
  double gamma() const { return gamma_; }
  const Vector& mean() const { return mean_; }
  const PriorOperators& operators() const { return *ops_; }
  std::shared_ptr<const PriorOperators> operators_ptr() const { return ops_; }
  const SparseMatrix& precision() const { return precision_; }
  /// log det P_γ (not including δ).
  double log_det_precision() const { return log_det_p_; }

  /// ‖v‖²_{P_γ}
  double quadratic(const Vector& v) const { return v.dot(precision_ * v); }

  double log_pdf(const Vector& u) const {
    require_size(u, size(), "prior_logpdf");
    require_finite(u, "prior_logpdf argument");
    const double n = static_cast<double>(size());
    return -0.5 * n * kLog2Pi + 0.5 * n * std::log(delta_) + 0.5 * log_det_p_ - 0.5 * delta_ * quadratic(u - mean_);
  }

  Vector sample(Rng& rng) const { return mean_ + solve_r(standard_normal(size(), rng)); }

  /// R v
  Vector apply_r(const Vector& v) const {
    return std::sqrt(delta_) * (factor_->matrixU() * v);
  }
  /// R⁻¹ v
  Vector solve_r(const Vector& v) const { return factor_->matrixU().solve(v) / std::sqrt(delta_); }
  /// R⁻ᵀ V
  Matrix solve_rt(const Matrix& v) const { return factor_->matrixL().solve(v) / std::sqrt(delta_); }
  Vector solve_rt(const Vector& v) const { return factor_->matrixL().solve(v) / std::sqrt(delta_); }
  /// Rᵀ V
  Matrix apply_rt(const Matrix& v) const { return std::sqrt(delta_) * (factor_->matrixL() * v); }
  /// (δ P_γ)⁻¹ V
  Matrix solve_precision(const Matrix& v) const { return factor_->solve(v) / delta_; }
  Vector solve_precision(const Vector& v) const { return factor_->solve(v) / delta_; }

 private:
  std::shared_ptr<const PriorOperators> ops_;
  Vector mean_;
  double delta_;
  double gamma_;
  SparseMatrix precision_;
  std::shared_ptr<const Factor> factor_;
  double log_det_p_ = 0.0;
};

}  // namespace hibrto
