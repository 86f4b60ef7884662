#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "hibrto/common.hpp"

namespace hibrto {

/// ρ̂(j) = C(j)/C(0), C(j) = (N−j)⁻¹ Σ_k (x_k − x̄)(x_{k+j} − x̄), for j = 0..maxlag.
inline std::vector<double> acf(const std::vector<double>& x, std::size_t maxlag) {
  const std::size_t n = x.size();
  if (maxlag < 1 || n <= maxlag) throw std::invalid_argument("acf: need chain length > maxlag >= 1");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  std::vector<double> d(n);
  for (std::size_t k = 0; k < n; ++k) d[k] = x[k] - mean;
  std::vector<double> c(maxlag + 1);
  for (std::size_t j = 0; j <= maxlag; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k + j < n; ++k) s += d[k] * d[k + j];
    c[j] = s / static_cast<double>(n - j);
  }
  const double scale = std::max(1.0, mean * mean);
  if (!(c[0] > 1e-24 * scale)) throw DomainError("acf: chain has zero variance");
  std::vector<double> rho(maxlag + 1);
  rho[0] = 1.0;
  for (std::size_t j = 1; j <= maxlag; ++j) rho[j] = c[j] / c[0];
  return rho;
}

/// Lag at which the IACT sum stops: the first j with ρ̂(j) < 0.05, or N/50.
inline std::size_t iact_window(std::size_t n) { return std::max<std::size_t>(1, n / 50); }

/// τ = 1 + 2 Σ_{j=1..M} ρ̂(j), M the first lag with ρ̂(M) < 0.05 (included) or N/50.
inline double iact(const std::vector<double>& x) {
  const std::size_t cap = iact_window(x.size());
  if (x.size() <= cap) throw std::invalid_argument("iact: chain too short");
  const auto rho = acf(x, cap);
  double tau = 1.0;
  for (std::size_t j = 1; j <= cap; ++j) {
    tau += 2.0 * rho[j];
    if (rho[j] < 0.05) break;
  }
  return tau;
}

/// Empirical quantile with linear interpolation between order statistics (type 7).
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile: empty sample");
  if (!(p >= 0 && p <= 1)) throw std::invalid_argument("quantile: level outside [0,1]");
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> x, double p) {
  std::sort(x.begin(), x.end());
  return quantile_sorted(x, p);
}

struct CredibleInterval {
  double lo;
  double median;
  double hi;
};

inline CredibleInterval credible_interval(std::vector<double> x, double level = 0.95) {
  if (!(level > 0 && level < 1)) throw std::invalid_argument("credible_interval: level must lie in (0,1)");
  std::sort(x.begin(), x.end());
  return {quantile_sorted(x, 0.5 * (1 - level)), quantile_sorted(x, 0.5), quantile_sorted(x, 0.5 * (1 + level))};
}

/// Per-component bands over a set of draws (rows of `draws` are samples).
inline std::vector<CredibleInterval> credible_bands(const std::vector<Vector>& draws, double level = 0.95) {
  if (draws.empty()) throw std::invalid_argument("credible_bands: no draws");
  const Index n = draws.front().size();
  std::vector<CredibleInterval> out;
  out.reserve(static_cast<std::size_t>(n));
  std::vector<double> col(draws.size());
  for (Index i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < draws.size(); ++k) col[k] = draws[k][i];
    out.push_back(credible_interval(col, level));
  }
  return out;
}

struct ChainStats {
  std::size_t count = 0;
  double mean = kNaN;
  double variance = kNaN;
  double iact = kNaN;
  double ess = kNaN;
  CredibleInterval interval{kNaN, kNaN, kNaN};
  std::vector<double> acf;
};

/// Summary of one scalar chain; the ACF is reported up to `maxlag` (clipped to N − 1).
inline ChainStats chain_stats(const std::vector<double>& x, std::size_t maxlag = 200) {
  ChainStats s;
  s.count = x.size();
  if (x.size() < 2) throw std::invalid_argument("chain_stats: need at least two values");
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double v2 = 0.0;
  for (double v : x) v2 += (v - m) * (v - m);
  s.mean = m;
  s.variance = v2 / static_cast<double>(x.size() - 1);
  s.acf = acf(x, std::min(maxlag, x.size() - 1));
  s.iact = iact(x);
  s.ess = static_cast<double>(x.size()) / s.iact;
  s.interval = credible_interval(x);
  return s;
}

/// Monte Carlo standard error of the chain mean, √(var τ / N).
inline double mc_standard_error(const std::vector<double>& x) {
  const ChainStats s = chain_stats(x, 1);
  return std::sqrt(s.variance * std::max(1.0, s.iact) / static_cast<double>(x.size()));
}

}  // namespace hibrto
