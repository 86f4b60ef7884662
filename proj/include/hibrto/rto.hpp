#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/QR>
#include <Eigen/SVD>

#include "hibrto/parallel.hpp"
#include "hibrto/posterior.hpp"
#include "hibrto/random.hpp"

namespace hibrto {

namespace detail {

struct ThinSvd {
  Matrix u;
  Vector s;
  Matrix v;
};

/// Thin SVD; tall inputs go through a Householder QR first.
inline ThinSvd thin_svd(const Matrix& a) {
  ThinSvd out;
  if (a.cols() == 0 || a.rows() == 0) {
    out.u.resize(a.rows(), 0);
    out.v.resize(a.cols(), 0);
    return out;
  }
  if (a.rows() > 2 * a.cols()) {
    Eigen::HouseholderQR<Matrix> qr(a);
    const Matrix r = qr.matrixQR().topRows(a.cols()).triangularView<Eigen::Upper>();
    Eigen::BDCSVD<Matrix> svd(r, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.u = qr.householderQ() * (Matrix::Identity(a.rows(), a.cols()) * svd.matrixU());
    out.s = svd.singularValues();
    out.v = svd.matrixV();
  } else {
    Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.u = svd.matrixU();
    out.s = svd.singularValues();
    out.v = svd.matrixV();
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reference point

struct MapOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;
};

struct MapResult {
  Vector u;
  bool converged = false;
  int iterations = 0;
  double objective = kNaN;
  double grad_norm = kNaN;
  std::vector<double> history;
};

namespace detail {

struct MapLinearization {
  double objective;
  Vector grad;
  Matrix jac;     // ∂G/∂u
  Vector weight;  // Gauss-Newton weights on G
  Vector output;  // F(u), or log F(u) for Poisson
};

inline double map_objective(const BayesProblem& p, const PriorModel& prior, double lambda, const Vector& u) {
  return -p.log_likelihood(u, lambda) + 0.5 * prior.delta() * prior.quadratic(u - prior.mean());
}

inline MapLinearization map_linearize(const BayesProblem& p, const PriorModel& prior, double lambda, const Vector& u) {
  MapLinearization out;
  const Vector du = u - prior.mean();
  const Vector pdu = prior.delta() * (prior.precision() * du);
  Vector dgdG;
  if (p.kind() == LikelihoodKind::gaussian) {
    const Vector f = p.model().evaluate(u);
    out.output = f;
    out.jac = p.model().jacobian(u);
    out.weight = lambda * p.noise_variance().cwiseInverse();
    dgdG = out.weight.cwiseProduct(f - p.data());
    out.objective = -p.log_likelihood_output(f, lambda) + 0.5 * du.dot(pdu);
  } else {
    const Vector xi = p.model().log_evaluate(u);
    out.output = xi;
    out.jac = p.model().log_jacobian(u);
    const Vector mu = lambda * xi.array().exp().matrix();
    out.weight = mu;
    dgdG = mu - p.data();
    out.objective = -p.log_likelihood_log_output(xi, lambda) + 0.5 * du.dot(pdu);
  }
  out.grad = out.jac.transpose() * dgdG + pdu;
  return out;
}

/// Objective at u + s minus objective at u, formed from differences so that it stays
/// accurate when the change is far below the rounding of the objective itself.
inline double map_objective_change(const BayesProblem& p, const PriorModel& prior, double lambda, const Vector& u,
                                   const MapLinearization& lin, const Vector& s) {
  const Vector ps = prior.precision() * s;
  const double dprior = prior.delta() * (ps.dot(u - prior.mean()) + 0.5 * ps.dot(s));
  if (p.kind() == LikelihoodKind::gaussian) {
    const Vector f1 = p.model().evaluate(u + s);
    if (!f1.allFinite()) return kNaN;
    const Vector d = f1 - lin.output;
    const Vector sum = f1 + lin.output - 2.0 * p.data();
    return 0.5 * lambda * (d.array() * sum.array() / p.noise_variance().array()).sum() + dprior;
  }
  const Vector xi1 = p.model().log_evaluate(u + s);
  if (!xi1.allFinite()) return kNaN;
  double dl = 0.0;
  for (Index i = 0; i < xi1.size(); ++i) {
    const double dx = xi1[i] - lin.output[i];
    dl += lambda * std::exp(lin.output[i]) * std::expm1(dx) - p.data()[i] * dx;
  }
  return dl + dprior;
}

}  // namespace detail

/// Gauss-Newton with Armijo backtracking on −log f(u | y, θ). The normal
/// equations are solved in prior-whitened coordinates with a Cholesky factor of order min(m, n).
inline MapResult find_map(const BayesProblem& problem, const PriorModel& prior, double lambda, Vector u0,
                          MapOptions opt = {}) {
  require_size(u0, problem.n(), "find_map start");
  require_finite(u0, "find_map start");
  MapResult res;
  res.u = std::move(u0);
  // The history is the first objective plus the accurately formed changes; recomputing the
  // objective at each iterate would add noise that hides the last few decreases.
  double tracked = kNaN;
  for (int it = 0; it < opt.max_iterations; ++it) {
    const auto lin = detail::map_linearize(problem, prior, lambda, res.u);
    res.objective = lin.objective;
    res.grad_norm = lin.grad.norm();
    if (it == 0) tracked = lin.objective;
    res.history.push_back(tracked);
    res.iterations = it;
    if (res.grad_norm <= opt.tolerance * (1.0 + std::abs(lin.objective))) {
      res.converged = true;
      return res;
    }
    // (δP + Jᵀ W J) s = −g in whitened coordinates, where the Hessian is I + B Bᵀ with
    // B = R⁻ᵀ Jᵀ W^{1/2}; the m x m Woodbury form is used when m < n.
    const Matrix b = prior.solve_rt(Matrix(lin.jac.transpose() * lin.weight.cwiseSqrt().asDiagonal()));
    const Vector c = prior.solve_rt(lin.grad);
    Vector z;
    if (b.cols() < b.rows()) {
      Matrix small = b.transpose() * b;
      small.diagonal().array() += 1.0;
      z = c - b * small.llt().solve(Vector(b.transpose() * c));
    } else {
      Matrix h = b * b.transpose();
      h.diagonal().array() += 1.0;
      z = h.llt().solve(c);
    }
    const Vector step = prior.solve_r(-z);
    const double slope = lin.grad.dot(step);
    if (!(slope < 0)) break;
    double alpha = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls, alpha *= 0.5) {
      double change;
      try {
        change = detail::map_objective_change(problem, prior, lambda, res.u, lin, alpha * step);
      } catch (const std::exception&) {
        continue;
      }
      if (std::isfinite(change) && change <= 1e-4 * alpha * slope) {
        res.u += alpha * step;
        tracked += change;
        accepted = true;
        break;
      }
      // Forward-solve rounding puts a floor of roughly 1e-12 relative under any measured
      // change. Once the whole predicted decrease is below it, the full step is judged by
      // the gradient and credited with the model decrease g·s/2.
      const double floor = 1e-12 * (1.0 + std::abs(lin.objective));
      if (ls == 0 && -slope <= floor && std::abs(change) <= floor &&
          detail::map_linearize(problem, prior, lambda, res.u + step).grad.norm() < 0.5 * res.grad_norm) {
        res.u += step;
        tracked += 0.5 * slope;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    res.iterations = it + 1;
  }
  const auto lin = detail::map_linearize(problem, prior, lambda, res.u);
  res.objective = lin.objective;
  res.grad_norm = lin.grad.norm();
  res.converged = res.grad_norm <= opt.tolerance * (1.0 + std::abs(lin.objective));
  if (res.history.size() <= static_cast<std::size_t>(res.iterations)) res.history.push_back(tracked);
  return res;
}

// ---------------------------------------------------------------------------
// Trust-region warp

struct TrustRegion {
  bool enabled = false;
  /// Radius ε̃; a value <= 0 means 5√r for the map's rank r.
  double epsilon = 0.0;
  double tau = 0.1;
};

inline double trust_region_psi(double r, double eps, double tau) {
  if (r < eps * (1 - tau)) return r;
  if (r < eps * (1 + tau)) return eps - 0.25 * tau * eps + 0.5 * (r - eps) - (r - eps) * (r - eps) / (4 * tau * eps);
  return eps;
}

inline double trust_region_dpsi(double r, double eps, double tau) {
  if (r < eps * (1 - tau)) return 1.0;
  if (r < eps * (1 + tau)) return 0.5 - (r - eps) / (2 * tau * eps);
  return 0.0;
}

inline Vector trust_region_transform(const Vector& u_r, const Vector& m_r, double eps, double tau) {
  const Vector w = u_r - m_r;
  const double r = w.norm();
  if (r < eps * (1 - tau)) return u_r;
  return m_r + (trust_region_psi(r, eps, tau) / r) * w;
}

/// ∇Ψ = (ψ' − ψ/r) Q + (ψ/r) I with Q the projector onto u_r − m_r.
inline Matrix trust_region_jacobian(const Vector& u_r, const Vector& m_r, double eps, double tau) {
  const Index k = u_r.size();
  const Vector w = u_r - m_r;
  const double r = w.norm();
  if (r < eps * (1 - tau)) return Matrix::Identity(k, k);
  const double ratio = trust_region_psi(r, eps, tau) / r;
  const Vector q = w / r;
  Matrix out = (trust_region_dpsi(r, eps, tau) - ratio) * (q * q.transpose());
  out.diagonal().array() += ratio;
  return out;
}

// ---------------------------------------------------------------------------
// RTO map

struct SolverOptions {
  int max_iterations = 100;
  double tolerance = 1e-10;
  double damping = 1e-3;
};

struct RtoSample {
  Vector u;
  Vector u_r;
  /// Complement u − m − X u_r, (δP_γ)-orthogonal to range(X).
  Vector u_perp;
  Vector theta;
  double log_det_d = kNaN;
  double log_likelihood = kNaN;
  double log_weight = -kInf;
  bool converged = false;
  double residual = kInf;
  int iterations = 0;
  std::string status;

  /// Converged with a positive Jacobian determinant, so the weight is defined.
  bool usable() const { return converged && std::isfinite(log_weight); }
};


/// Randomize-then-optimize map for fixed θ, built from the linearization at u*.
///
/// With R = √δ Lᵀ the prior whitening and W = diag(√prec) ∇G(u*) R⁻¹ = Φ_L S Φ_Rᵀ,
/// the factors are X = R⁻¹Φ_R and Y = diag(√prec) Φ_L. The problem must outlive the map.
class RtoMap {
 public:
  static constexpr double kTruncation = 1e-10;

  RtoMap(const BayesProblem& problem, const HyperParams& theta, Vector u_star,
         std::shared_ptr<const PriorModel> prior = nullptr, TrustRegion tr = {}, SolverOptions solver = {})
      : problem_(&problem), theta_(theta), u_star_(std::move(u_star)), tr_(tr), solver_(solver) {
    require_size(u_star_, problem.n(), "reference point");
    require_finite(u_star_, "reference point");
    if (!(theta.lambda > 0)) throw DomainError("RtoMap: lambda must be positive");
    if (prior && (prior->delta() != theta.delta || prior->gamma() != theta.gamma)) {
      throw std::invalid_argument("RtoMap: prior does not match hyperparameters");
    }
    prior_ = prior ? std::move(prior) : std::make_shared<const PriorModel>(problem.prior(theta));

    const ForwardModel& model = problem.model();
    Matrix jac;
    if (problem.kind() == LikelihoodKind::poisson) {
      g_star_ = model.log_evaluate(u_star_);
      jac = model.log_jacobian(u_star_);
    } else {
      g_star_ = model.evaluate(u_star_);
      jac = model.jacobian(u_star_);
    }
    ls_ = problem.least_squares(theta.lambda, g_star_);
    sqrt_prec_ = ls_.precision.cwiseSqrt();

    const Matrix wt = prior_->solve_rt(Matrix(jac.transpose() * sqrt_prec_.asDiagonal()));
    const detail::ThinSvd svd = detail::thin_svd(wt);
    Index r = 0;
    const double smax = svd.s.size() ? svd.s[0] : 0.0;
    while (r < svd.s.size() && smax > 0 && svd.s[r] >= kTruncation * smax) ++r;
    s_ = svd.s.head(r);
    phi_r_ = svd.u.leftCols(r);
    yt_ = (sqrt_prec_.asDiagonal() * svd.v.leftCols(r)).transpose();
    x_.resize(problem.n(), r);
    for (Index k = 0; k < r; ++k) x_.col(k) = prior_->solve_r(Vector(phi_r_.col(k)));
    xtdp_ = prior_->apply_rt(phi_r_).transpose();
    s2p1_ = s_.cwiseAbs2().array() + 1.0;
    isq_ = s2p1_.cwiseSqrt().cwiseInverse();
    m_r_ = xtdp_ * (u_star_ - prior_->mean());
    c_star_ = s_.cwiseProduct(yt_ * (g_star_ - ls_.target));
    half_log_det_s2p1_ = 0.5 * s2p1_.array().log().sum();
    if (tr_.enabled) {
      if (tr_.epsilon <= 0) tr_.epsilon = 5.0 * std::sqrt(static_cast<double>(std::max<Index>(r, 1)));
      if (!(tr_.tau > 0 && tr_.tau < 1)) throw std::invalid_argument("trust region tau must lie in (0,1)");
    }
  }

  Index rank() const { return s_.size(); }
  const HyperParams& theta() const { return theta_; }
  const Vector& u_star() const { return u_star_; }
  const Matrix& x() const { return x_; }
  Matrix y() const { return yt_.transpose(); }
  const Vector& s() const { return s_; }
  const Vector& m_r() const { return m_r_; }
  const PriorModel& prior() const { return *prior_; }
  std::shared_ptr<const PriorModel> prior_ptr() const { return prior_; }
  const LeastSquaresForm& least_squares() const { return ls_; }
  const TrustRegion& trust_region() const { return tr_; }
  const BayesProblem& problem() const { return *problem_; }

  /// Reduced coordinates u_r = Xᵀ(δP_γ)(u − m).
  Vector reduce(const Vector& u) const { return xtdp_ * (u - prior_->mean()); }

  /// Θ(u_r; u⊥) of the unmodified map.
  Vector theta_eval(const Vector& u_r, const Vector& u_perp) const {
    return theta_at(u_r, g_value(point(u_r, u_perp)));
  }

  Vector theta_linear(const Vector& u_r) const {
    return isq_.cwiseProduct(s2p1_.cwiseProduct(u_r) + c_star_ - s_.cwiseAbs2().cwiseProduct(m_r_));
  }

  Vector theta_remainder(const Vector& u_r, const Vector& u_perp) const {
    return theta_eval(u_r, u_perp) - theta_linear(u_r);
  }

  /// Θ̃ = Θ_L(u_r) + Θ_R(Ψ(u_r); u⊥); equals Θ when the trust region is off.
  Vector theta_modified(const Vector& u_r, const Vector& u_perp) const {
    if (!tr_.enabled) return theta_eval(u_r, u_perp);
    const Vector v = psi(u_r);
    return theta_linear(u_r) + theta_remainder(v, u_perp);
  }

  /// D = (S²+I)^{1/2} ∇Θ̃ at u_r, together with Θ̃.
  struct Evaluation {
    Vector theta;
    Matrix d;
  };

  Evaluation evaluate(const Vector& u_r, const Vector& u_perp) const {
    const Vector v = tr_.enabled ? psi(u_r) : u_r;
    const auto lin = g_linearize(point(v, u_perp));
    Evaluation e;
    e.theta = theta_at(v, lin.value);
    Matrix inner = s_.asDiagonal() * (yt_ * lin.jv);
    if (!tr_.enabled) {
      inner.diagonal().array() += 1.0;
      e.d = std::move(inner);
      return e;
    }
    e.theta += theta_linear(u_r) - theta_linear(v);
    inner.diagonal() -= s_.cwiseAbs2();
    e.d = inner * trust_region_jacobian(u_r, m_r_, tr_.epsilon, tr_.tau);
    e.d.diagonal() += s2p1_;
    return e;
  }

  /// Solves Θ̃(u_r; u⊥) = Φ_Rᵀξ for a whitened reference draw ξ ~ N(0, I_n).
  RtoSample solve(const Vector& xi) const {
    require_size(xi, problem_->n(), "reference draw");
    const Vector b = phi_r_.transpose() * xi;
    RtoSample out;
    out.u_perp = prior_->solve_r(xi - phi_r_ * b);
    Vector x = m_r_;
    const double tol = solver_.tolerance * std::max(1.0, b.norm());
    double mu = solver_.damping;
    Evaluation e;
    try {
      e = evaluate(x, out.u_perp);
    } catch (const std::exception& ex) {
      out.status = std::string("evaluation failed: ") + ex.what();
      return out;
    }
    Vector res = e.theta - b;
    double cost = res.squaredNorm();
    int it = 0;
    for (; it < solver_.max_iterations && std::sqrt(cost) > tol; ++it) {
      const Matrix jac = isq_.asDiagonal() * e.d;
      bool accepted = false;
      // The system is square, so an undamped Newton step is tried before the damped normal equations.
      const Eigen::PartialPivLU<Matrix> lu(jac);
      const Vector newton = x - lu.solve(res);
      if (newton.allFinite()) {
        try {
          const double c = (theta_only(newton, out.u_perp) - b).squaredNorm();
          if (std::isfinite(c) && c < cost) {
            x = newton;
            e = evaluate(x, out.u_perp);
            res = e.theta - b;
            cost = res.squaredNorm();
            accepted = true;
          }
        } catch (const std::exception&) {
        }
      }
      if (accepted) continue;
      const Matrix a = jac.transpose() * jac;
      const Vector g = jac.transpose() * res;
      while (!accepted && mu < 1e16) {
        Matrix damped = a;
        damped.diagonal() += mu * a.diagonal().cwiseMax(1e-12);
        const Vector step = -damped.ldlt().solve(g);
        const Vector trial = x + step;
        try {
          Vector tr = theta_only(trial, out.u_perp) - b;
          const double c = tr.squaredNorm();
          if (std::isfinite(c) && c < cost) {
            x = trial;
            e = evaluate(x, out.u_perp);
            res = e.theta - b;
            cost = res.squaredNorm();
            mu = std::max(mu / 10.0, 1e-15);
            accepted = true;
            break;
          }
        } catch (const std::exception&) {
        }
        mu *= 10.0;
      }
      if (!accepted) break;
    }
    out.iterations = it;
    out.residual = std::sqrt(cost);
    out.u_r = x;
    out.u = point(x, out.u_perp);
    out.theta = e.theta;
    out.converged = out.residual <= tol;
    if (!out.converged) {
      out.status = "not converged";
      return out;
    }
    finish(out, e.d);
    return out;
  }

  /// Solve for ζ ~ N(0, (δP_γ)⁻¹) given in parameter units.
  RtoSample solve_zeta(const Vector& zeta) const { return solve(prior_->apply_r(zeta)); }

  RtoSample draw(Rng& rng) const { return solve(standard_normal(problem_->n(), rng)); }

  /// Coordinates, Θ̃, determinant and weight of an arbitrary parameter vector under this map.
  RtoSample assess(const Vector& u) const {
    require_size(u, problem_->n(), "assess");
    RtoSample out;
    out.u = u;
    out.u_r = reduce(u);
    out.u_perp = u - prior_->mean() - x_ * out.u_r;
    const Evaluation e = evaluate(out.u_r, out.u_perp);
    out.theta = e.theta;
    out.converged = true;
    out.residual = 0.0;
    finish(out, e.d);
    return out;
  }

  /// log p_RTO(u | θ). Throws DiffeomorphismError if det ∇Θ̃ ≤ 0.
  double log_density(const RtoSample& s) const {
    if (!std::isfinite(s.log_det_d)) throw DiffeomorphismError("RTO map is not invertible at this point");
    const double nd = static_cast<double>(problem_->n());
    const double perp = prior_->apply_r(s.u_perp).squaredNorm();
    return -0.5 * nd * kLog2Pi + 0.5 * nd * std::log(prior_->delta()) + 0.5 * prior_->log_det_precision() +
           s.log_det_d - half_log_det_s2p1_ - 0.5 * s.theta.squaredNorm() - 0.5 * perp;
  }

  /// log w = log L(y|u,λ) + ½ log det(S²+I) − log det D − ½‖u_r‖² + ½‖Θ̃‖².
  double log_weight(const RtoSample& s) const {
    if (!std::isfinite(s.log_det_d)) throw DiffeomorphismError("RTO map is not invertible at this point");
    return s.log_likelihood + half_log_det_s2p1_ - s.log_det_d - 0.5 * s.u_r.squaredNorm() +
           0.5 * s.theta.squaredNorm();
  }

 private:
  Vector point(const Vector& u_r, const Vector& u_perp) const { return prior_->mean() + x_ * u_r + u_perp; }

  Vector psi(const Vector& u_r) const { return trust_region_transform(u_r, m_r_, tr_.epsilon, tr_.tau); }

  Vector g_value(const Vector& z) const {
    return ls_.log_map ? problem_->model().log_evaluate(z) : problem_->model().evaluate(z);
  }

  ForwardModel::Linearization g_linearize(const Vector& z) const {
    return ls_.log_map ? problem_->model().log_linearize(z, x_) : problem_->model().linearize(z, x_);
  }

  Vector theta_at(const Vector& u_r, const Vector& g) const {
    return isq_.cwiseProduct(u_r + s_.cwiseProduct(yt_ * (g - ls_.target)));
  }

  Vector theta_only(const Vector& u_r, const Vector& u_perp) const { return theta_modified(u_r, u_perp); }

  void finish(RtoSample& out, const Matrix& d) const {
    const SignedLogDet ld = signed_log_det(d);
    if (ld.sign <= 0) {
      out.status = "non-positive Jacobian determinant";
      out.log_det_d = kNaN;
      out.log_weight = -kInf;
      return;
    }
    out.log_det_d = ld.log_abs;
    out.log_likelihood = ls_.log_map ? problem_->log_likelihood_log_output(problem_->model().log_evaluate(out.u),
                                                                           theta_.lambda)
                                     : problem_->log_likelihood_output(problem_->model().evaluate(out.u),
                                                                       theta_.lambda);
    out.log_weight = log_weight(out);
  }

  const BayesProblem* problem_;
  HyperParams theta_;
  Vector u_star_;
  std::shared_ptr<const PriorModel> prior_;
  TrustRegion tr_;
  SolverOptions solver_;
  LeastSquaresForm ls_;
  Vector g_star_, sqrt_prec_;
  Matrix phi_r_, x_, xtdp_, yt_;
  Vector s_, s2p1_, isq_, m_r_, c_star_;
  double half_log_det_s2p1_ = 0.0;
};

/// N independent RTO draws; draw i uses substream (seed, i) so results do not depend on `workers`.
inline std::vector<RtoSample> sample_rto_batch(const RtoMap& map, std::size_t count, std::uint64_t seed,
                                               unsigned workers = 1) {
  std::vector<RtoSample> out(count);
  parallel_for(count, workers, [&](std::size_t i) {
    Rng rng = substream(seed, i);
    out[i] = map.draw(rng);
  });
  return out;
}

}  // namespace hibrto
