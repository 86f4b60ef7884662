#pragma once

#include <string>

#include "hibrto/common.hpp"

namespace hibrto {

/// Parameter-to-observable map F: Rⁿ → Rᵐ with its Jacobian.
///
/// Implementations override `jacobian_times` when products with a thin block of
/// directions are cheaper than forming J. The `log_*` family is the map log F,
/// which is what the Poisson surrogate linearizes.
class ForwardModel {
 public:
  struct Linearization {
    Vector value;
    Matrix jv;
  };

  virtual ~ForwardModel() = default;

  virtual Index parameter_dim() const = 0;
  virtual Index output_dim() const = 0;
  /// True if every output is strictly positive (required for Poisson data).
  virtual bool positive_output() const { return false; }

  virtual Vector evaluate(const Vector& u) const = 0;
  virtual Matrix jacobian(const Vector& u) const = 0;

  virtual Matrix jacobian_times(const Vector& u, const Matrix& v) const { return jacobian(u) * v; }

  virtual Linearization linearize(const Vector& u, const Matrix& v) const {
    return {evaluate(u), jacobian_times(u, v)};
  }

  virtual Vector log_evaluate(const Vector& u) const {
    Vector f = evaluate(u);
    check_positive(f);
    return f.array().log().matrix();
  }

  virtual Matrix log_jacobian(const Vector& u) const {
    Vector f = evaluate(u);
    check_positive(f);
    return f.cwiseInverse().asDiagonal() * jacobian(u);
  }

  virtual Linearization log_linearize(const Vector& u, const Matrix& v) const {
    Linearization lin = linearize(u, v);
    check_positive(lin.value);
    lin.jv = lin.value.cwiseInverse().asDiagonal() * lin.jv;
    lin.value = lin.value.array().log().matrix();
    return lin;
  }

 protected:
  void check_input(const Vector& u) const {
    require_size(u, parameter_dim(), "forward model input");
    require_finite(u, "forward model input");
  }

  static void check_positive(const Vector& f) {
    if (!(f.array() > 0).all()) throw DomainError("forward model output is not strictly positive");
  }
};

/// F(u) = A u + b.
class LinearModel final : public ForwardModel {
 public:
  explicit LinearModel(Matrix a, Vector b = Vector()) : a_(std::move(a)), b_(std::move(b)) {
    if (b_.size() == 0) b_ = Vector::Zero(a_.rows());
    require_size(b_, a_.rows(), "LinearModel offset");
  }

  Index parameter_dim() const override { return a_.cols(); }
  Index output_dim() const override { return a_.rows(); }
  Vector evaluate(const Vector& u) const override {
    check_input(u);
    return a_ * u + b_;
  }
  Matrix jacobian(const Vector& u) const override {
    check_input(u);
    return a_;
  }
  Matrix jacobian_times(const Vector& u, const Matrix& v) const override {
    check_input(u);
    return a_ * v;
  }
  const Matrix& matrix() const { return a_; }
  const Vector& offset() const { return b_; }

 private:
  Matrix a_;
  Vector b_;
};

}  // namespace hibrto
