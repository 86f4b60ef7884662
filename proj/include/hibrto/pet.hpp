#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "hibrto/forward_model.hpp"
#include "hibrto/grid.hpp"

namespace hibrto {

struct Ray {
  std::array<double, 2> from;
  std::array<double, 2> to;
};

/// Fan-beam layout: sources equally spaced on an arc of a circle around the
/// origin, each firing a fan of rays at detectors on the opposite side.
struct PetGeometry {
  double radius = 25.0;
  int sources = 10;
  int rays_per_source = 40;
  /// Angular span of the source arc and the direction of its centre, degrees.
  double arc_deg = 120.0;
  double arc_centre_deg = 90.0;
  /// Detector angles are source + 180° + t with t evenly spread over ±fan_deg/2.
  double fan_deg = 140.0;

  void validate(double half_width) const {
    if (sources < 1 || rays_per_source < 1) throw std::invalid_argument("PET geometry: need sources and rays");
    if (!(radius > half_width * std::numbers::sqrt2)) {
      throw std::invalid_argument("PET geometry: source circle must enclose the domain");
    }
    if (!(fan_deg > 0 && fan_deg < 360) || !(arc_deg >= 0 && arc_deg < 360)) {
      throw std::invalid_argument("PET geometry: invalid angles");
    }
  }

  std::vector<Ray> rays() const {
    std::vector<Ray> out;
    out.reserve(static_cast<std::size_t>(sources * rays_per_source));
    const double deg = std::numbers::pi / 180.0;
    for (int s = 0; s < sources; ++s) {
      const double frac = sources == 1 ? 0.5 : static_cast<double>(s) / (sources - 1);
      const double phi = (arc_centre_deg - 0.5 * arc_deg + frac * arc_deg) * deg;
      const std::array<double, 2> src{radius * std::cos(phi), radius * std::sin(phi)};
      for (int k = 0; k < rays_per_source; ++k) {
        const double t = rays_per_source == 1 ? 0.0 : -0.5 * fan_deg + fan_deg * k / (rays_per_source - 1);
        const double psi = phi + std::numbers::pi + t * deg;
        out.push_back({src, {radius * std::cos(psi), radius * std::sin(psi)}});
      }
    }
    return out;
  }
};

/// Exact lengths of the segment `ray` inside each cell of the N x N grid on [lo, hi]^2.
/// Cell (i, j) has index i + N*j, i along the first axis.
inline std::vector<std::pair<Index, double>> trace_ray(double lo, double hi, Index cells, const Ray& ray) {
  const double dx = ray.to[0] - ray.from[0], dy = ray.to[1] - ray.from[1];
  double t0 = 0.0, t1 = 1.0;
  const auto clip = [&](double p, double q) {
    if (p == 0.0) return q >= 0.0;
    const double r = q / p;
    if (p < 0) t0 = std::max(t0, r);
    else t1 = std::min(t1, r);
    return true;
  };
  if (!clip(-dx, ray.from[0] - lo) || !clip(dx, hi - ray.from[0]) || !clip(-dy, ray.from[1] - lo) ||
      !clip(dy, hi - ray.from[1]) || !(t1 > t0)) {
    return {};
  }
  const double h = (hi - lo) / static_cast<double>(cells);
  std::vector<double> ts{t0, t1};
  for (Index i = 0; i <= cells; ++i) {
    const double line = lo + static_cast<double>(i) * h;
    if (dx != 0.0) {
      const double t = (line - ray.from[0]) / dx;
      if (t > t0 && t < t1) ts.push_back(t);
    }
    if (dy != 0.0) {
      const double t = (line - ray.from[1]) / dy;
      if (t > t0 && t < t1) ts.push_back(t);
    }
  }
  std::sort(ts.begin(), ts.end());
  const double len = std::hypot(dx, dy);
  std::vector<std::pair<Index, double>> out;
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const double dt = ts[k + 1] - ts[k];
    if (dt * len <= 1e-14 * (hi - lo)) continue;
    const double tm = 0.5 * (ts[k] + ts[k + 1]);
    const auto cell = [&](double c) {
      return std::clamp(static_cast<Index>(std::floor((c - lo) / h)), Index{0}, cells - 1);
    };
    const Index idx = cell(ray.from[0] + tm * dx) + cells * cell(ray.from[1] + tm * dy);
    if (!out.empty() && out.back().first == idx) out.back().second += dt * len;
    else out.emplace_back(idx, dt * len);
  }
  return out;
}

struct PetSystem {
  RowSparseMatrix matrix;
  /// Rays that miss the domain entirely (their rows are zero).
  std::vector<Index> empty_rays;
};

/// Ray/cell intersection lengths in domain units.
inline PetSystem pet_system_matrix(const PetGeometry& geometry, const Grid& grid) {
  if (grid.dimension() != 2) throw std::invalid_argument("pet_system_matrix: needs a 2D grid");
  geometry.validate(0.5 * (grid.upper() - grid.lower()));
  const auto rays = geometry.rays();
  std::vector<Eigen::Triplet<double>> t;
  PetSystem out;
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const auto hits = trace_ray(grid.lower(), grid.upper(), grid.side(), rays[r]);
    if (hits.empty()) out.empty_rays.push_back(static_cast<Index>(r));
    for (const auto& [j, len] : hits) t.emplace_back(static_cast<Index>(r), j, len);
  }
  out.matrix.resize(static_cast<Index>(rays.size()), grid.size());
  out.matrix.setFromTriplets(t.begin(), t.end());
  out.matrix.makeCompressed();
  return out;
}

/// Beer's-law transmission F(u) = exp(−B e^u).
class PetModel2D final : public ForwardModel {
 public:
  /// Path lengths are multiplied by `length_unit` so attenuations stay O(1) on the [-15,15]^2 domain.
  static constexpr double kDefaultLengthUnit = 1.0 / 30.0;

  PetModel2D(const Grid& grid, const PetGeometry& geometry, double length_unit = kDefaultLengthUnit) {
    PetSystem sys = pet_system_matrix(geometry, grid);
    if (!sys.empty_rays.empty()) {
      throw std::invalid_argument("PET geometry: " + std::to_string(sys.empty_rays.size()) +
                                  " rays miss the domain");
    }
    b_ = sys.matrix * length_unit;
  }

  explicit PetModel2D(RowSparseMatrix b) : b_(std::move(b)) {
    for (Index k = 0; k < b_.outerSize(); ++k) {
      for (RowSparseMatrix::InnerIterator it(b_, k); it; ++it) {
        if (it.value() < 0) throw std::invalid_argument("PET system matrix must be nonnegative");
      }
    }
  }

  Index parameter_dim() const override { return b_.cols(); }
  Index output_dim() const override { return b_.rows(); }
  bool positive_output() const override { return true; }
  const RowSparseMatrix& system() const { return b_; }

  Vector evaluate(const Vector& u) const override { return (-attenuation(u)).array().exp().matrix(); }

  Matrix jacobian(const Vector& u) const override {
    const Vector eu = density(u);
    const Vector f = (-(b_ * eu)).array().exp().matrix();
    return -(f.asDiagonal() * (b_ * eu.asDiagonal()).toDense());
  }

  Matrix jacobian_times(const Vector& u, const Matrix& v) const override {
    const Vector eu = density(u);
    const Vector f = (-(b_ * eu)).array().exp().matrix();
    return -(f.asDiagonal() * (b_ * (eu.asDiagonal() * v)));
  }

  Linearization linearize(const Vector& u, const Matrix& v) const override {
    const Vector eu = density(u);
    const Vector f = (-(b_ * eu)).array().exp().matrix();
    return {f, -(f.asDiagonal() * (b_ * (eu.asDiagonal() * v)))};
  }

  Vector log_evaluate(const Vector& u) const override { return -attenuation(u); }

  Matrix log_jacobian(const Vector& u) const override {
    const Vector eu = density(u);
    return -(b_ * eu.asDiagonal()).toDense();
  }

  Linearization log_linearize(const Vector& u, const Matrix& v) const override {
    const Vector eu = density(u);
    return {-(b_ * eu), -(b_ * (eu.asDiagonal() * v))};
  }

 private:
  Vector density(const Vector& u) const {
    check_input(u);
    if ((u.array() > 700.0).any()) throw DomainError("PET log-density above 700 overflows exp(u)");
    return u.array().exp().matrix();
  }
  Vector attenuation(const Vector& u) const { return b_ * density(u); }

  RowSparseMatrix b_;
};

}  // namespace hibrto
