#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "hibrto/forward_model.hpp"
#include "hibrto/grid.hpp"
#include "hibrto/random.hpp"

namespace hibrto {

/// Reference log-diffusion coefficient for the 1D elliptic benchmark.
inline double elliptic_truth(double s) {
  return std::min(1.0, 1.0 - 0.5 * std::sin(2.0 * std::numbers::pi * (s - 0.25)));
}

/// Reference log-density for the PET benchmark on [-15,15]^2.
inline double pet_truth(double s1, double s2) {
  const double k = 0.1 * std::numbers::pi;
  return std::max(0.0, 0.5 * std::numbers::pi * std::sin(k * (s1 - 15.0)) * std::sin(k * (s2 - 15.0)));
}

inline Vector truth_on_grid(const Grid& grid) {
  Vector u(grid.size());
  for (Index k = 0; k < grid.size(); ++k) {
    const auto p = grid.point(k);
    u[k] = grid.dimension() == 1 ? elliptic_truth(p[0]) : pet_truth(p[0], p[1]);
  }
  return u;
}

struct SyntheticData {
  LikelihoodKind kind = LikelihoodKind::gaussian;
  Vector y;
  Vector noise_free;
  double lambda_true = 0.0;
};

/// Noise precision giving the requested signal-to-noise ratio ‖F‖ / (σ √m) = snr.
inline double snr_precision(const Vector& signal, double snr) {
  const double sigma = signal.norm() / (snr * std::sqrt(static_cast<double>(signal.size())));
  if (!(sigma > 0)) throw DomainError("snr_precision: zero signal");
  return 1.0 / (sigma * sigma);
}

/// y = F(u) + ε, ε ~ N(0, λ⁻¹ I). λ = +inf gives noise-free data.
inline SyntheticData generate_gaussian(const ForwardModel& model, const Vector& u_true, double lambda_true, Rng& rng) {
  if (!(lambda_true > 0)) throw DomainError("generate_gaussian: lambda must be positive");
  SyntheticData d;
  d.kind = LikelihoodKind::gaussian;
  d.lambda_true = lambda_true;
  d.noise_free = model.evaluate(u_true);
  d.y = d.noise_free;
  if (std::isfinite(lambda_true)) d.y += standard_normal(d.y.size(), rng) / std::sqrt(lambda_true);
  return d;
}

/// y_i ~ Poisson(λ F_i(u)).
inline SyntheticData generate_poisson(const ForwardModel& model, const Vector& u_true, double lambda_true, Rng& rng) {
  SyntheticData d;
  d.kind = LikelihoodKind::poisson;
  d.lambda_true = lambda_true;
  d.noise_free = lambda_true * model.evaluate(u_true);
  d.y.resize(d.noise_free.size());
  for (Index i = 0; i < d.y.size(); ++i) {
    const double mu = d.noise_free[i];
    if (!(mu > 0) || !std::isfinite(mu)) {
      throw DomainError("generate_poisson: expected count " + std::to_string(i) + " is not positive and finite");
    }
    d.y[i] = static_cast<double>(std::poisson_distribution<long long>(mu)(rng));
  }
  return d;
}

}  // namespace hibrto
