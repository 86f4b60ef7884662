#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hibrto/rto.hpp"

namespace hibrto {

/// Settings shared by every sampler that builds RTO maps.
struct MapSettings {
  MapOptions map;
  TrustRegion trust_region;
  SolverOptions solver;
  unsigned workers = 1;
};

/// Reference point and RTO map for one θ.
struct BuiltMap {
  MapResult reference;
  std::shared_ptr<const RtoMap> map;
};

/// Finds u*(θ) from `start` and builds the map there.
inline BuiltMap build_map(const BayesProblem& problem, const HyperParams& theta, const Vector& start,
                          const MapSettings& settings) {
  auto prior = std::make_shared<const PriorModel>(problem.prior(theta));
  BuiltMap out;
  out.reference = find_map(problem, *prior, theta.lambda, start, settings.map);
  out.map = std::make_shared<const RtoMap>(problem, theta, out.reference.u, std::move(prior), settings.trust_region,
                                           settings.solver);
  return out;
}

/// log of the independence-sampler MH ratio w(u_prop)/w(u_cur).
inline double rto_mh_log_ratio(double log_w_current, double log_w_proposal) {
  if (!std::isfinite(log_w_proposal)) return -kInf;
  if (!std::isfinite(log_w_current)) return kInf;
  return log_w_proposal - log_w_current;
}

inline bool mh_accept(double log_ratio, Rng& rng) {
  if (log_ratio >= 0) return true;
  if (!(log_ratio > -kInf)) return false;
  return std::log(uniform01(rng)) < log_ratio;
}

/// Weight of an existing state under a (possibly new) map; −inf if the map is not invertible there.
inline double current_log_weight(const RtoMap& map, const Vector& u) {
  try {
    const RtoSample s = map.assess(u);
    return s.usable() ? s.log_weight : -kInf;
  } catch (const DiffeomorphismError&) {
    return -kInf;
  } catch (const DomainError&) {
    return -kInf;
  }
}

// ---------------------------------------------------------------------------
// Fixed-θ samplers

struct RtoMhResult {
  Matrix chain;  // (N+1) x n, row 0 is the initial state
  std::vector<double> log_weights;
  std::size_t accepted = 0;
  std::size_t failed = 0;
  double acceptance_rate = 0.0;
  MapResult reference;
};

/// Independence MH with RTO proposals for fixed θ. Proposals are solved in parallel, then accepted serially.
inline RtoMhResult rto_mh(const BayesProblem& problem, const HyperParams& theta, std::size_t steps, std::uint64_t seed,
                          const MapSettings& settings = {}, std::optional<Vector> start = std::nullopt) {
  if (steps < 1) throw std::invalid_argument("rto_mh: need at least one step");
  Rng rng(seed);
  const BuiltMap built = build_map(problem, theta, start ? *start : problem.prior_mean(), settings);
  const RtoMap& map = *built.map;
  const auto draws = sample_rto_batch(map, steps + 1, draw_seed(rng), settings.workers);

  RtoMhResult out;
  out.reference = built.reference;
  out.chain.resize(static_cast<Index>(steps + 1), problem.n());
  out.log_weights.resize(steps + 1);
  std::size_t first = 0;
  while (first < draws.size() && !draws[first].usable()) ++first;
  if (first == draws.size()) throw NumericalError("rto_mh: no usable RTO sample");
  Vector cur = draws[first].u;
  double cur_lw = draws[first].log_weight;
  out.chain.row(0) = cur.transpose();
  out.log_weights[0] = cur_lw;
  for (std::size_t i = 1; i <= steps; ++i) {
    const RtoSample& prop = draws[i];
    if (!prop.usable()) ++out.failed;
    const double lr = prop.usable() ? rto_mh_log_ratio(cur_lw, prop.log_weight) : -kInf;
    if (mh_accept(lr, rng)) {
      cur = prop.u;
      cur_lw = prop.log_weight;
      ++out.accepted;
    }
    out.chain.row(static_cast<Index>(i)) = cur.transpose();
    out.log_weights[i] = cur_lw;
  }
  out.acceptance_rate = static_cast<double>(out.accepted) / static_cast<double>(steps);
  return out;
}

struct MarginalLikelihoodEstimate {
  double log_value = kNaN;
  /// Delta-method standard error of log L_N, sd(w) / (√N mean(w)).
  double log_std_error = kNaN;
  std::size_t used = 0;
  std::size_t failed = 0;
};

/// log-mean-exp of a set of log-weights with its delta-method standard error.
inline MarginalLikelihoodEstimate summarize_log_weights(const std::vector<double>& log_w) {
  MarginalLikelihoodEstimate est;
  std::vector<double> ok;
  for (double v : log_w) {
    if (std::isfinite(v)) ok.push_back(v);
    else ++est.failed;
  }
  est.used = ok.size();
  if (ok.empty()) return est;
  est.log_value = log_mean_exp(ok);
  if (ok.size() >= 2) {
    double s2 = 0.0;
    for (double v : ok) {
      const double r = std::exp(v - est.log_value) - 1.0;
      s2 += r * r;
    }
    s2 /= static_cast<double>(ok.size() - 1);
    est.log_std_error = std::sqrt(s2 / static_cast<double>(ok.size()));
  }
  return est;
}

/// Importance-sampling estimate of log L(y|θ) from N RTO draws.
inline MarginalLikelihoodEstimate estimate_marginal_likelihood(const BayesProblem& problem, const HyperParams& theta,
                                                               std::size_t count, std::uint64_t seed,
                                                               const MapSettings& settings = {}) {
  if (count < 1) throw std::invalid_argument("estimate_marginal_likelihood: need at least one sample");
  const BuiltMap built = build_map(problem, theta, problem.prior_mean(), settings);
  const auto draws = sample_rto_batch(*built.map, count, seed, settings.workers);
  std::vector<double> lw;
  lw.reserve(count);
  for (const auto& d : draws) lw.push_back(d.usable() ? d.log_weight : -kInf);
  auto est = summarize_log_weights(lw);
  if (est.used == 0) throw NumericalError("estimate_marginal_likelihood: every RTO solve failed");
  return est;
}

// ---------------------------------------------------------------------------
// Gibbs blocks

struct GammaShapeRate {
  double shape;
  double rate;
};

struct LambdaDeltaConditional {
  GammaShapeRate lambda;
  GammaShapeRate delta;
};

/// Conjugate Gamma conditionals of λ and δ given u and γ (shape/rate).
inline LambdaDeltaConditional lambda_delta_conditional(const BayesProblem& problem, const Vector& u, double gamma) {
  const HyperPrior& hp = problem.hyperprior();
  const Vector f = problem.model().evaluate(u);
  LambdaDeltaConditional c;
  if (problem.kind() == LikelihoodKind::gaussian) {
    c.lambda = {hp.alpha_lambda + 0.5 * static_cast<double>(problem.m()), hp.beta_lambda + 0.5 * problem.data_statistic(f)};
  } else {
    c.lambda = {hp.alpha_lambda + problem.sum_data(), hp.beta_lambda + problem.data_statistic(f)};
  }
  const double q = problem.operators().precision_quadratic(u - problem.prior_mean(), gamma);
  c.delta = {hp.alpha_delta + 0.5 * static_cast<double>(problem.n()), hp.beta_delta + 0.5 * q};
  return c;
}

inline std::pair<double, double> sample_lambda_delta(const BayesProblem& problem, const Vector& u, double gamma,
                                                     Rng& rng) {
  const auto c = lambda_delta_conditional(problem, u, gamma);
  const double lambda = gamma_shape_rate(c.lambda.shape, c.lambda.rate, rng);
  const double delta = gamma_shape_rate(c.delta.shape, c.delta.rate, rng);
  return {lambda, delta};
}

/// log p(γ | y, u, λ, δ) up to a γ-independent constant, from cached quadratic forms.
class GammaConditional {
 public:
  GammaConditional(const BayesProblem& problem, const Vector& u, double delta)
      : ops_(&problem.operators()), hp_(&problem.hyperprior()), delta_(delta) {
    const Vector du = u - problem.prior_mean();
    mass_q_ = ops_->mass_quadratic(du);
    stiff_q_ = ops_->stiffness_quadratic(du);
  }

  double operator()(double gamma) const { return with_eigen_sum(gamma, ops_->eigen_log_sum(gamma)); }

  /// Same value given a precomputed Σ log(χ_i + γ).
  double with_eigen_sum(double gamma, double eigen_sum) const {
    const double lp = hp_->log_gamma(gamma);
    if (!std::isfinite(lp)) return -kInf;
    if (ops_->beta() == 1) return lp + 0.5 * eigen_sum - 0.5 * delta_ * gamma * mass_q_;
    return lp + eigen_sum - 0.5 * delta_ * gamma * gamma * mass_q_ - gamma * delta_ * stiff_q_;
  }

 private:
  const PriorOperators* ops_;
  const HyperPrior* hp_;
  double delta_;
  double mass_q_ = 0.0;
  double stiff_q_ = 0.0;
};

inline double gamma_conditional_logpdf(const BayesProblem& problem, double gamma, const Vector& u, double delta) {
  return GammaConditional(problem, u, delta)(gamma);
}

/// Uniform ρ = log γ grid on [log γ_L, log γ_R] with Σ log(χ_i + e^ρ) cached per node.
class GammaGrid {
 public:
  static constexpr Index kDefaultPoints = 1000;

  explicit GammaGrid(const BayesProblem& problem, Index points = kDefaultPoints)
      : lo_(std::log(problem.hyperprior().gamma_lo)), hi_(std::log(problem.hyperprior().gamma_hi)) {
    if (points < 2) throw std::invalid_argument("GammaGrid: need at least two points");
    rho_ = Vector::LinSpaced(points, lo_, hi_);
    eig_.resize(points);
    for (Index k = 0; k < points; ++k) eig_[k] = problem.operators().eigen_log_sum(std::exp(rho_[k]));
  }

  const Vector& rho() const { return rho_; }
  const Vector& eigen_sums() const { return eig_; }
  double lower() const { return lo_; }
  double upper() const { return hi_; }
  double spacing() const { return (hi_ - lo_) / static_cast<double>(rho_.size() - 1); }

 private:
  double lo_, hi_;
  Vector rho_, eig_;
};

/// Piecewise-linear density g̃ on a uniform grid, its piecewise-quadratic CDF and analytic inverse.
class InverseCdf {
 public:
  /// `log_g` holds log g(ρ_k) at the grid nodes.
  InverseCdf(Vector rho, const Vector& log_g) : rho_(std::move(rho)) {
    require_size(log_g, rho_.size(), "InverseCdf density");
    if (rho_.size() < 2) throw std::invalid_argument("InverseCdf: need at least two nodes");
    h_ = (rho_[rho_.size() - 1] - rho_[0]) / static_cast<double>(rho_.size() - 1);
    const double top = log_g.maxCoeff();
    if (!std::isfinite(top)) throw NumericalError("inverse CDF: density vanishes on the whole grid");
    g_ = (log_g.array() - top).exp().matrix();
    cum_.resize(rho_.size());
    cum_[0] = 0.0;
    for (Index k = 0; k + 1 < rho_.size(); ++k) cum_[k + 1] = cum_[k] + 0.5 * h_ * (g_[k] + g_[k + 1]);
    total_ = cum_[cum_.size() - 1];
    if (!(total_ > 0)) throw NumericalError("inverse CDF: zero total mass");
    g_ /= total_;
    cum_ /= total_;
  }

  /// ρ with G̃(ρ) = ξ.
  double inverse(double xi) const {
    xi = std::clamp(xi, 0.0, 1.0);
    const Index n = rho_.size();
    Index k = static_cast<Index>(std::upper_bound(cum_.data(), cum_.data() + n, xi) - cum_.data()) - 1;
    k = std::clamp<Index>(k, 0, n - 2);
    const double c = xi - cum_[k];
    const double a = 0.5 * (g_[k + 1] - g_[k]) / h_;
    const double b = g_[k];
    const double disc = std::max(0.0, b * b + 4.0 * a * c);
    const double denom = b + std::sqrt(disc);
    const double s = denom > 0 ? 2.0 * c / denom : 0.0;
    return rho_[k] + std::clamp(s, 0.0, h_);
  }

  /// Normalized g̃(ρ); zero outside the grid.
  double density(double rho) const {
    const Index n = rho_.size();
    if (!(rho >= rho_[0] && rho <= rho_[n - 1])) return 0.0;
    const double t = (rho - rho_[0]) / h_;
    const Index k = std::min<Index>(static_cast<Index>(t), n - 2);
    const double f = t - static_cast<double>(k);
    return (1.0 - f) * g_[k] + f * g_[k + 1];
  }

  double cdf(double rho) const {
    const Index n = rho_.size();
    if (rho <= rho_[0]) return 0.0;
    if (rho >= rho_[n - 1]) return 1.0;
    const double t = (rho - rho_[0]) / h_;
    const Index k = std::min<Index>(static_cast<Index>(t), n - 2);
    const double s = rho - rho_[k];
    return cum_[k] + g_[k] * s + 0.5 * (g_[k + 1] - g_[k]) / h_ * s * s;
  }

  const Vector& nodes() const { return rho_; }
  const Vector& normalized_density() const { return g_; }

 private:
  Vector rho_, g_, cum_;
  double h_ = 0.0;
  double total_ = 0.0;
};

/// Approximate conditional p̃(γ) = g̃(log γ)/γ built from the exact conditional on the ρ grid.
class GammaProposal {
 public:
  GammaProposal(const GammaGrid& grid, const GammaConditional& cond) : cdf_(grid.rho(), log_g(grid, cond)) {}

  double sample(Rng& rng) const { return std::exp(cdf_.inverse(uniform01(rng))); }

  double log_density(double gamma) const {
    if (!(gamma > 0)) return -kInf;
    return std::log(cdf_.density(std::log(gamma))) - std::log(gamma);
  }

  const InverseCdf& cdf() const { return cdf_; }

 private:
  static Vector log_g(const GammaGrid& grid, const GammaConditional& cond) {
    Vector v(grid.rho().size());
    for (Index k = 0; k < v.size(); ++k) {
      const double rho = grid.rho()[k];
      v[k] = rho + cond.with_eigen_sum(std::exp(rho), grid.eigen_sums()[k]);
    }
    return v;
  }

  InverseCdf cdf_;
};

/// log of [p(γ♯) p̃(γ)] / [p(γ) p̃(γ♯)].
inline double gamma_mh_log_ratio(const GammaConditional& cond, const GammaProposal& q, double current,
                                 double proposal) {
  const double lp_prop = cond(proposal);
  if (!std::isfinite(lp_prop)) return -kInf;
  const double lp_cur = cond(current);
  const double lq_cur = q.log_density(current);
  const double lq_prop = q.log_density(proposal);
  if (!std::isfinite(lq_prop)) return -kInf;
  if (!std::isfinite(lp_cur) || !std::isfinite(lq_cur)) return kInf;
  return (lp_prop - lp_cur) + (lq_cur - lq_prop);
}

struct GammaStep {
  double gamma;
  double proposal;
  bool accepted;
};

inline GammaStep gamma_update(const BayesProblem& problem, const GammaGrid& grid, const Vector& u, double delta,
                              double gamma, Rng& rng) {
  const GammaConditional cond(problem, u, delta);
  const GammaProposal q(grid, cond);
  GammaStep step{gamma, q.sample(rng), false};
  if (mh_accept(gamma_mh_log_ratio(cond, q, gamma, step.proposal), rng)) {
    step.gamma = step.proposal;
    step.accepted = true;
  }
  return step;
}

// ---------------------------------------------------------------------------
// Chain output

struct ChainRecord {
  std::vector<HyperParams> theta;
  /// Per-step acceptance: fraction of inner u moves (Gibbs), γ move (Gibbs), θ move (PM). NaN if not applicable.
  std::vector<double> accept_u, accept_gamma, accept_theta;
  /// Gibbs: log L(y | u_i, λ_i). PM: current log L_K.
  std::vector<double> log_lk;
  /// u at `probe_index` after each step, NaN if no probe.
  std::vector<double> u_probe;
  std::vector<Vector> u_draws;
  std::vector<std::size_t> u_steps;
  std::uint64_t seed = 0;
  std::size_t burn_in = 0;
  std::size_t failed_solves = 0;
  std::size_t failed_steps = 0;
  double seconds = 0.0;

  std::size_t size() const { return theta.size(); }

  std::vector<double> column(double HyperParams::*field, std::size_t skip = 0) const {
    std::vector<double> out;
    for (std::size_t i = skip; i < theta.size(); ++i) out.push_back(theta[i].*field);
    return out;
  }
  std::vector<double> lambda(std::size_t skip = 0) const { return column(&HyperParams::lambda, skip); }
  std::vector<double> delta(std::size_t skip = 0) const { return column(&HyperParams::delta, skip); }
  std::vector<double> gamma(std::size_t skip = 0) const { return column(&HyperParams::gamma, skip); }
  std::vector<double> probe(std::size_t skip = 0) const {
    return std::vector<double>(u_probe.begin() + static_cast<std::ptrdiff_t>(std::min(skip, u_probe.size())),
                               u_probe.end());
  }

  double mean_of(const std::vector<double>& v, std::size_t skip) const {
    double s = 0.0;
    std::size_t c = 0;
    for (std::size_t i = skip; i < v.size(); ++i) {
      if (std::isnan(v[i])) continue;
      s += v[i];
      ++c;
    }
    return c ? s / static_cast<double>(c) : kNaN;
  }
};

// ---------------------------------------------------------------------------
// RTO-within-Gibbs

struct GibbsOptions {
  std::size_t steps = 1000;
  std::size_t inner_steps = 1;
  std::size_t burn_in = 0;
  /// Store u every `u_thin` steps; 0 disables storage.
  std::size_t u_thin = 0;
  Index probe_index = -1;
  Index gamma_grid_points = GammaGrid::kDefaultPoints;
  MapSettings map;
};

/// Builds the map at θ from a warm start; on failure retries once from the prior mean.
inline BuiltMap build_map_with_retry(const BayesProblem& problem, const HyperParams& theta, const Vector& warm,
                                     const MapSettings& settings, std::size_t step) {
  try {
    return build_map(problem, theta, warm, settings);
  } catch (const std::exception&) {
  }
  try {
    return build_map(problem, theta, problem.prior_mean(), settings);
  } catch (const std::exception& e) {
    throw NumericalError("map build failed at step " + std::to_string(step) + " (lambda=" + std::to_string(theta.lambda) +
                         ", delta=" + std::to_string(theta.delta) + ", gamma=" + std::to_string(theta.gamma) +
                         "): " + e.what());
  }
}

inline ChainRecord rto_within_gibbs(const BayesProblem& problem, HyperParams theta, Vector u, const GibbsOptions& opt,
                                    std::uint64_t seed) {
  if (opt.steps < 1 || opt.inner_steps < 1) throw std::invalid_argument("rto_within_gibbs: steps must be >= 1");
  if (!problem.hyperprior().in_support(theta)) throw std::invalid_argument("rto_within_gibbs: initial theta outside support");
  require_size(u, problem.n(), "initial u");
  const auto t0 = std::chrono::steady_clock::now();
  const GammaGrid grid(problem, opt.gamma_grid_points);
  Rng rng(seed);
  ChainRecord rec;
  rec.seed = seed;
  rec.burn_in = opt.burn_in;
  Vector warm = u;
  for (std::size_t i = 0; i < opt.steps; ++i) {
    // u-block: RTO-MH with the map at θ_{i-1}.
    const BuiltMap built = build_map_with_retry(problem, theta, warm, opt.map, i);
    warm = built.reference.u;
    const RtoMap& map = *built.map;
    double cur_lw = current_log_weight(map, u);
    const auto props = sample_rto_batch(map, opt.inner_steps, draw_seed(rng), opt.map.workers);
    std::size_t acc = 0;
    for (const auto& p : props) {
      if (!p.usable()) {
        ++rec.failed_solves;
        continue;
      }
      if (mh_accept(rto_mh_log_ratio(cur_lw, p.log_weight), rng)) {
        u = p.u;
        cur_lw = p.log_weight;
        ++acc;
      }
    }
    // (λ, δ) | u, γ
    const auto [lambda, delta] = sample_lambda_delta(problem, u, theta.gamma, rng);
    theta.lambda = lambda;
    theta.delta = delta;
    // γ | u, λ, δ
    const GammaStep gs = gamma_update(problem, grid, u, theta.delta, theta.gamma, rng);
    theta.gamma = gs.gamma;

    rec.theta.push_back(theta);
    rec.accept_u.push_back(static_cast<double>(acc) / static_cast<double>(opt.inner_steps));
    rec.accept_gamma.push_back(gs.accepted ? 1.0 : 0.0);
    rec.accept_theta.push_back(kNaN);
    rec.log_lk.push_back(problem.log_likelihood(u, theta.lambda));
    rec.u_probe.push_back(opt.probe_index >= 0 ? u[opt.probe_index] : kNaN);
    if (opt.u_thin > 0 && (i + 1) % opt.u_thin == 0) {
      rec.u_draws.push_back(u);
      rec.u_steps.push_back(i);
    }
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---------------------------------------------------------------------------
// Pseudo-marginal

struct PmState {
  HyperParams theta;
  std::vector<Vector> samples;
  std::vector<double> log_weights;
  /// log L_K over the converged members.
  double log_lk = -kInf;
  /// log L_K + log p₀(θ).
  double log_target = -kInf;
  std::size_t failed = 0;
  Vector u_star;
};

/// Draws K RTO samples at θ and forms the pseudo-marginal. Throws NumericalError when more than half fail.
inline PmState pseudo_marginal_logdensity(const BayesProblem& problem, const HyperParams& theta, std::size_t k,
                                          std::uint64_t seed, const MapSettings& settings = {},
                                          std::optional<Vector> warm = std::nullopt) {
  if (k < 1) throw std::invalid_argument("pseudo_marginal_logdensity: K must be >= 1");
  PmState st;
  st.theta = theta;
  const double lp = problem.hyperprior_logpdf(theta);
  if (!std::isfinite(lp)) throw DomainError("pseudo_marginal_logdensity: theta outside hyper-prior support");
  const BuiltMap built = build_map(problem, theta, warm ? *warm : problem.prior_mean(), settings);
  st.u_star = built.reference.u;
  const auto draws = sample_rto_batch(*built.map, k, seed, settings.workers);
  for (const auto& d : draws) {
    if (!d.usable()) {
      ++st.failed;
      continue;
    }
    st.samples.push_back(d.u);
    st.log_weights.push_back(d.log_weight);
  }
  if (2 * st.failed > k) {
    throw NumericalError("pseudo-marginal estimate: " + std::to_string(st.failed) + " of " + std::to_string(k) +
                         " RTO solves failed");
  }
  st.log_lk = log_mean_exp(st.log_weights);
  st.log_target = st.log_lk + lp;
  return st;
}

/// Index drawn from the categorical distribution defined by the state's weights.
inline std::size_t categorical_draw(const PmState& s, Rng& rng) {
  if (s.log_weights.empty()) throw std::logic_error("categorical_draw: empty sample set");
  std::vector<double> p(s.log_weights.size());
  const double top = *std::max_element(s.log_weights.begin(), s.log_weights.end());
  for (std::size_t j = 0; j < p.size(); ++j) p[j] = std::exp(s.log_weights[j] - top);
  std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
  return pick(rng);
}

/// Unconstrained coordinates z = (log λ, log δ, logit((γ − γ_L)/(γ_R − γ_L))).
struct ThetaTransform {
  double gamma_lo;
  double gamma_hi;

  explicit ThetaTransform(const HyperPrior& hp) : gamma_lo(hp.gamma_lo), gamma_hi(hp.gamma_hi) {}

  Vector forward(const HyperParams& t) const {
    const double s = (t.gamma - gamma_lo) / (gamma_hi - gamma_lo);
    return (Vector(3) << std::log(t.lambda), std::log(t.delta), std::log(s) - std::log1p(-s)).finished();
  }

  HyperParams inverse(const Vector& z) const {
    const double s = 1.0 / (1.0 + std::exp(-z[2]));
    return {std::exp(z[0]), std::exp(z[1]), gamma_lo + (gamma_hi - gamma_lo) * s};
  }

  /// log |dθ/dz|.
  double log_jacobian(const HyperParams& t) const {
    const double w = gamma_hi - gamma_lo;
    const double s = (t.gamma - gamma_lo) / w;
    if (!(s > 0 && s < 1)) return -kInf;
    return std::log(t.lambda) + std::log(t.delta) + std::log(w) + std::log(s) + std::log1p(-s);
  }
};

/// log α_K for a symmetric random walk in z: target ratio times the Jacobian ratio.
inline double pm_log_ratio(const PmState& current, const PmState& proposal, const ThetaTransform& tf) {
  const double jp = tf.log_jacobian(proposal.theta);
  if (!std::isfinite(proposal.log_target) || !std::isfinite(jp)) return -kInf;
  const double jc = tf.log_jacobian(current.theta);
  return (proposal.log_target + jp) - (current.log_target + jc);
}

/// Adaptive Metropolis covariance: scale 2.38²/d times the running covariance plus jitter.
class AdaptiveProposal {
 public:
  AdaptiveProposal(Matrix initial_cov, std::size_t adapt_start, double jitter = 1e-10)
      : cov0_(std::move(initial_cov)), adapt_start_(adapt_start), jitter_(jitter) {
    const Index d = cov0_.rows();
    scale_ = 2.38 * 2.38 / static_cast<double>(d);
    mean_ = Vector::Zero(d);
    m2_ = Matrix::Zero(d, d);
    refresh(cov0_);
  }

  void observe(const Vector& z) {
    ++count_;
    const Vector d = z - mean_;
    mean_ += d / static_cast<double>(count_);
    m2_ += d * (z - mean_).transpose();
    if (adapting_ && count_ > adapt_start_) {
      Matrix c = scale_ * (m2_ / static_cast<double>(count_ - 1));
      c.diagonal().array() += scale_ * jitter_;
      refresh(c);
    }
  }

  void freeze() { adapting_ = false; }
  bool adapting() const { return adapting_; }

  Vector propose(const Vector& z, Rng& rng) const { return z + chol_ * standard_normal(z.size(), rng); }

  const Matrix& covariance() const { return cov_; }

 private:
  void refresh(const Matrix& c) {
    Eigen::LLT<Matrix> llt(c);
    if (llt.info() != Eigen::Success) return;
    cov_ = c;
    chol_ = llt.matrixL();
  }

  Matrix cov0_, cov_, chol_, m2_;
  Vector mean_;
  std::size_t adapt_start_;
  std::size_t count_ = 0;
  double jitter_;
  double scale_;
  bool adapting_ = true;
};

struct PmOptions {
  std::size_t steps = 1000;
  std::size_t samples_per_step = 1;  // K
  std::size_t burn_in = 0;
  /// Steps before the covariance starts adapting.
  std::size_t adapt_start = 100;
  double initial_variance = 0.01;
  /// Emit a categorical draw from 𝒰 every `u_thin` steps; 0 disables.
  std::size_t u_thin = 0;
  Index probe_index = -1;
  MapSettings map;
};

inline ChainRecord rto_pm(const BayesProblem& problem, const HyperParams& theta0, const PmOptions& opt,
                          std::uint64_t seed) {
  if (opt.steps < 1 || opt.samples_per_step < 1) throw std::invalid_argument("rto_pm: steps and K must be >= 1");
  if (!problem.hyperprior().in_support(theta0)) throw std::invalid_argument("rto_pm: initial theta outside support");
  const auto t0 = std::chrono::steady_clock::now();
  const ThetaTransform tf(problem.hyperprior());
  Rng rng(seed);
  ChainRecord rec;
  rec.seed = seed;
  rec.burn_in = opt.burn_in;
  PmState cur = pseudo_marginal_logdensity(problem, theta0, opt.samples_per_step, draw_seed(rng), opt.map);
  rec.failed_solves += cur.failed;
  Vector z = tf.forward(cur.theta);
  AdaptiveProposal q(opt.initial_variance * Matrix::Identity(3, 3), opt.adapt_start);
  if (opt.burn_in == 0) q.freeze();
  for (std::size_t i = 0; i < opt.steps; ++i) {
    if (i == opt.burn_in) q.freeze();
    const Vector z_prop = q.propose(z, rng);
    const HyperParams t_prop = tf.inverse(z_prop);
    const std::uint64_t step_seed = draw_seed(rng);
    bool accepted = false;
    if (problem.hyperprior().in_support(t_prop) && std::isfinite(tf.log_jacobian(t_prop))) {
      try {
        PmState prop = pseudo_marginal_logdensity(problem, t_prop, opt.samples_per_step, step_seed, opt.map, cur.u_star);
        rec.failed_solves += prop.failed;
        if (mh_accept(pm_log_ratio(cur, prop, tf), rng)) {
          cur = std::move(prop);
          z = z_prop;
          accepted = true;
        }
      } catch (const std::exception&) {
        ++rec.failed_steps;
      }
    }
    if (q.adapting()) q.observe(z);
    rec.theta.push_back(cur.theta);
    rec.accept_u.push_back(kNaN);
    rec.accept_gamma.push_back(kNaN);
    rec.accept_theta.push_back(accepted ? 1.0 : 0.0);
    rec.log_lk.push_back(cur.log_lk);
    const bool store = opt.u_thin > 0 && (i + 1) % opt.u_thin == 0;
    if (opt.probe_index >= 0 || store) {
      const Vector& u = cur.samples[categorical_draw(cur, rng)];
      rec.u_probe.push_back(opt.probe_index >= 0 ? u[opt.probe_index] : kNaN);
      if (store) {
        rec.u_draws.push_back(u);
        rec.u_steps.push_back(i);
      }
    } else {
      rec.u_probe.push_back(kNaN);
    }
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

/// Sample standard deviation of log L_K over `reps` independent estimates at fixed θ.
inline double log_pm_std(const BayesProblem& problem, const HyperParams& theta, std::size_t k, std::size_t reps,
                         std::uint64_t seed, const MapSettings& settings = {}) {
  if (reps < 2) throw std::invalid_argument("log_pm_std: need at least two replications");
  const BuiltMap built = build_map(problem, theta, problem.prior_mean(), settings);
  const auto draws = sample_rto_batch(*built.map, k * reps, seed, settings.workers);
  std::vector<double> est;
  for (std::size_t r = 0; r < reps; ++r) {
    std::vector<double> lw;
    for (std::size_t j = 0; j < k; ++j) {
      const auto& d = draws[r * k + j];
      if (d.usable()) lw.push_back(d.log_weight);
    }
    if (2 * lw.size() < k) continue;
    est.push_back(log_mean_exp(lw));
  }
  if (est.size() < 2) throw NumericalError("log_pm_std: too few valid replications");
  double mean = 0.0;
  for (double v : est) mean += v;
  mean /= static_cast<double>(est.size());
  double s2 = 0.0;
  for (double v : est) s2 += (v - mean) * (v - mean);
  return std::sqrt(s2 / static_cast<double>(est.size() - 1));
}

}  // namespace hibrto
