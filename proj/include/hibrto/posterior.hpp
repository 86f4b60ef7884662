#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "hibrto/forward_model.hpp"
#include "hibrto/spde_prior.hpp"

namespace hibrto {

/// θ = (λ, δ, γ).
struct HyperParams {
  double lambda = 1.0;
  double delta = 1.0;
  double gamma = 1.0;
};

/// Gamma(α, β) hyper-priors on λ and δ (shape/rate), and a Beta-type prior
/// (γ − γ_L)^{α_γ} (γ_R − γ)^{β_γ} on [γ_L, γ_R]. All unnormalized.
struct HyperPrior {
  double alpha_lambda = 1.0;
  double beta_lambda = 1e-4;
  double alpha_delta = 1.0;
  double beta_delta = 1e-4;
  double alpha_gamma = 0.0;
  double beta_gamma = 4.0;
  double gamma_lo = 1e-5;
  double gamma_hi = 10.0;

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (!(alpha_lambda >= 0)) errs.push_back("hyperprior.alpha_lambda must be >= 0");
    if (!(alpha_delta >= 0)) errs.push_back("hyperprior.alpha_delta must be >= 0");
    if (!(alpha_gamma >= 0)) errs.push_back("hyperprior.alpha_gamma must be >= 0");
    if (!(beta_lambda > 0)) errs.push_back("hyperprior.beta_lambda must be > 0");
    if (!(beta_delta > 0)) errs.push_back("hyperprior.beta_delta must be > 0");
    if (!(beta_gamma >= 0)) errs.push_back("hyperprior.beta_gamma must be >= 0");
    if (!(gamma_lo > 0)) errs.push_back("hyperprior.gamma_lo must be > 0");
    if (!(gamma_lo < gamma_hi)) errs.push_back("hyperprior.gamma_lo must be < gamma_hi");
    return errs;
  }

  double log_lambda(double lambda) const { return gamma_term(lambda, alpha_lambda, beta_lambda); }
  double log_delta(double delta) const { return gamma_term(delta, alpha_delta, beta_delta); }

  double log_gamma(double gamma) const {
    if (!(gamma >= gamma_lo && gamma <= gamma_hi)) return -kInf;
    return xlogy(alpha_gamma, gamma - gamma_lo) + xlogy(beta_gamma, gamma_hi - gamma);
  }

  bool in_support(const HyperParams& t) const {
    return t.lambda > 0 && t.delta > 0 && t.gamma >= gamma_lo && t.gamma <= gamma_hi && std::isfinite(t.lambda) &&
           std::isfinite(t.delta);
  }

  double log_pdf(const HyperParams& t) const {
    return log_lambda(t.lambda) + log_delta(t.delta) + log_gamma(t.gamma);
  }

 private:
  static double gamma_term(double x, double a, double b) {
    if (!(x > 0) || !std::isfinite(x)) return -kInf;
    return xlogy(a - 1.0, x) - b * x;
  }
};

/// Gaussian stand-in for a Poisson likelihood around u*: data y* = log(y/λ) and
/// weights Σ*⁻¹ = diag F(u*). Zero counts are clamped to ½ here only.
struct SurrogateTerms {
  Vector target;
  Vector weight;
};

inline SurrogateTerms surrogate_gaussian_terms(const Vector& y, const Vector& f_star, double lambda) {
  require_size(f_star, y.size(), "surrogate F(u*)");
  if (!(lambda > 0)) throw DomainError("surrogate: lambda must be positive");
  if (!(f_star.array() > 0).all()) throw DomainError("surrogate: F(u*) must be positive");
  SurrogateTerms s;
  s.target = y.unaryExpr([lambda](double v) { return std::log((v > 0 ? v : 0.5) / lambda); });
  s.weight = f_star;
  return s;
}

/// Weighted least-squares view of the (possibly surrogate) likelihood used to
/// linearize: misfit ½ Σ precision_i (G_i(u) − target_i)² with G = F or log F.
struct LeastSquaresForm {
  bool log_map = false;
  Vector target;
  Vector precision;
};

/// Forward model, SPDE prior operators, hyper-prior and data.
class BayesProblem {
 public:
  BayesProblem(std::shared_ptr<const ForwardModel> model, std::shared_ptr<const PriorOperators> ops, Vector prior_mean,
               HyperPrior hyperprior, Vector data, LikelihoodKind kind, Vector noise_variance = Vector())
      : model_(std::move(model)),
        ops_(std::move(ops)),
        mean_(std::move(prior_mean)),
        hp_(hyperprior),
        y_(std::move(data)),
        kind_(kind),
        noise_var_(std::move(noise_variance)) {
    if (!model_ || !ops_) throw std::invalid_argument("BayesProblem: null model or operators");
    if (model_->parameter_dim() != ops_->size()) {
      throw std::invalid_argument("BayesProblem: model and prior dimensions differ");
    }
    require_size(mean_, ops_->size(), "prior mean");
    require_size(y_, model_->output_dim(), "data");
    require_finite(y_, "data");
    if (const auto errs = hp_.validate(); !errs.empty()) throw std::invalid_argument(errs.front());
    if (noise_var_.size() == 0) noise_var_ = Vector::Ones(y_.size());
    require_size(noise_var_, y_.size(), "noise variance");
    if ((noise_var_.array() <= 0).any()) throw std::invalid_argument("noise variance must be positive");
    if (kind_ == LikelihoodKind::poisson) {
      if (!model_->positive_output()) throw std::invalid_argument("Poisson data need a positive forward model");
      log_factorial_sum_ = 0.0;
      for (Index i = 0; i < y_.size(); ++i) {
        if (y_[i] < 0 || y_[i] != std::floor(y_[i])) {
          throw std::invalid_argument("Poisson data must be nonnegative integers (entry " + std::to_string(i) + ")");
        }
        log_factorial_sum_ += std::lgamma(y_[i] + 1.0);
      }
    }
    sum_y_ = y_.sum();
    log_det_sigma_ = noise_var_.array().log().sum();
  }

  const ForwardModel& model() const { return *model_; }
  std::shared_ptr<const ForwardModel> model_ptr() const { return model_; }
  const PriorOperators& operators() const { return *ops_; }
  std::shared_ptr<const PriorOperators> operators_ptr() const { return ops_; }
  const Vector& prior_mean() const { return mean_; }
  const HyperPrior& hyperprior() const { return hp_; }
  const Vector& data() const { return y_; }
  const Vector& noise_variance() const { return noise_var_; }
  LikelihoodKind kind() const { return kind_; }
  Index n() const { return mean_.size(); }
  Index m() const { return y_.size(); }
  double sum_data() const { return sum_y_; }

  PriorModel prior(const HyperParams& t) const { return PriorModel(ops_, mean_, t.delta, t.gamma); }

  /// Gaussian: ‖F − y‖²_{Σ⁻¹}. Poisson: Σ F_i.
  double data_statistic(const Vector& f) const {
    if (kind_ == LikelihoodKind::gaussian) return (f - y_).cwiseAbs2().cwiseQuotient(noise_var_).sum();
    return f.sum();
  }

  double log_likelihood(const Vector& u, double lambda) const {
    if (kind_ == LikelihoodKind::poisson) return log_likelihood_log_output(model_->log_evaluate(u), lambda);
    return log_likelihood_output(model_->evaluate(u), lambda);
  }

  /// Likelihood from model output F(u).
  double log_likelihood_output(const Vector& f, double lambda) const {
    if (!(lambda > 0)) throw DomainError("likelihood: lambda must be positive");
    if (kind_ == LikelihoodKind::gaussian) {
      const double md = static_cast<double>(m());
      return -0.5 * md * kLog2Pi + 0.5 * md * std::log(lambda) - 0.5 * log_det_sigma_ - 0.5 * lambda * data_statistic(f);
    }
    if (!(f.array() > 0).all()) throw DomainError("Poisson likelihood: forward output must be positive");
    return log_likelihood_log_output(f.array().log().matrix(), lambda);
  }

  /// Poisson likelihood from ξ = log F(u); avoids underflow of F.
  double log_likelihood_log_output(const Vector& xi, double lambda) const {
    if (kind_ == LikelihoodKind::gaussian) return log_likelihood_output(xi.array().exp().matrix(), lambda);
    if (!(lambda > 0)) throw DomainError("likelihood: lambda must be positive");
    double s = xlogy(sum_y_, lambda) - log_factorial_sum_;
    for (Index i = 0; i < xi.size(); ++i) s += (y_[i] == 0 ? 0.0 : y_[i] * xi[i]) - lambda * std::exp(xi[i]);
    return s;
  }

  /// Log prior density N(m, (δP_γ)⁻¹) without factorizing P_γ.
  double prior_logpdf(const Vector& u, double delta, double gamma) const {
    require_size(u, n(), "prior_logpdf");
    require_finite(u, "prior_logpdf argument");
    const double nd = static_cast<double>(n());
    return -0.5 * nd * kLog2Pi + 0.5 * nd * std::log(delta) + 0.5 * ops_->log_det(gamma) -
           0.5 * delta * ops_->precision_quadratic(u - mean_, gamma);
  }

  double hyperprior_logpdf(const HyperParams& t) const { return hp_.log_pdf(t); }

  /// log p(u, θ | y) + log p(y).
  double joint_log_posterior(const Vector& u, const HyperParams& t) const {
    const double hp = hyperprior_logpdf(t);
    if (!std::isfinite(hp)) return -kInf;
    return log_likelihood(u, t.lambda) + prior_logpdf(u, t.delta, t.gamma) + hp;
  }

  SurrogateTerms surrogate(const Vector& f_star, double lambda) const {
    if (kind_ != LikelihoodKind::poisson) throw std::logic_error("surrogate terms apply to Poisson data only");
    return surrogate_gaussian_terms(y_, f_star, lambda);
  }

  /// Least-squares view at θ. For Poisson data the surrogate is centred at G(u*) = log F(u*).
  LeastSquaresForm least_squares(double lambda, const Vector& g_star) const {
    LeastSquaresForm ls;
    if (kind_ == LikelihoodKind::gaussian) {
      ls.log_map = false;
      ls.target = y_;
      ls.precision = lambda * noise_var_.cwiseInverse();
    } else {
      const SurrogateTerms s = surrogate(g_star.array().exp().matrix(), lambda);
      ls.log_map = true;
      ls.target = s.target;
      ls.precision = lambda * s.weight;
    }
    return ls;
  }

 private:
  std::shared_ptr<const ForwardModel> model_;
  std::shared_ptr<const PriorOperators> ops_;
  Vector mean_;
  HyperPrior hp_;
  Vector y_;
  LikelihoodKind kind_;
  Vector noise_var_;
  double log_factorial_sum_ = 0.0;
  double log_det_sigma_ = 0.0;
  double sum_y_ = 0.0;
};

}  // namespace hibrto
