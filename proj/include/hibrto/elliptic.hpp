#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "hibrto/forward_model.hpp"
#include "hibrto/grid.hpp"

namespace hibrto {

namespace detail {

/// Factored symmetric tridiagonal matrix (Thomas algorithm), reusable across right-hand sides.
class Tridiagonal {
 public:
  Tridiagonal() = default;
  Tridiagonal(Vector diag, Vector off) : off_(std::move(off)) {
    const Index q = diag.size();
    denom_.resize(q);
    cp_.resize(q);
    for (Index k = 0; k < q; ++k) {
      const double d = k == 0 ? diag[0] : diag[k] - off_[k - 1] * cp_[k - 1];
      if (!(d > 0) || !std::isfinite(d)) throw NumericalError("tridiagonal stiffness is singular or indefinite");
      denom_[k] = d;
      cp_[k] = k + 1 < q ? off_[k] / d : 0.0;
    }
  }

  Index size() const { return denom_.size(); }

  void solve_in_place(double* r) const {
    const Index q = size();
    if (q == 0) return;
    r[0] /= denom_[0];
    for (Index k = 1; k < q; ++k) r[k] = (r[k] - off_[k - 1] * r[k - 1]) / denom_[k];
    for (Index k = q - 2; k >= 0; --k) r[k] -= cp_[k] * r[k + 1];
  }

 private:
  Vector off_, denom_, cp_;
};

}  // namespace detail

/// −(e^u x')' = f on [0,1], x(0) = x(1) = 0, linear elements, observed at interior stations
/// for two point loads. Outputs are stacked [H x₁; H x₂].
class EllipticModel1D final : public ForwardModel {
 public:
  struct Options {
    int stations = 63;
    double load = 1000.0;
    std::array<double, 2> load_points{1.0 / 3.0, 2.0 / 3.0};
  };

  explicit EllipticModel1D(Index n) : EllipticModel1D(Grid::interval(n), Options{}) {}
  EllipticModel1D(Index n, Options opt) : EllipticModel1D(Grid::interval(n), opt) {}

  EllipticModel1D(Grid grid, Options opt) : grid_(std::move(grid)), opt_(opt) {
    if (grid_.dimension() != 1) throw std::invalid_argument("EllipticModel1D: needs a 1D grid");
    const Index n = grid_.size();
    if (n < 4) throw std::invalid_argument("EllipticModel1D: need at least 4 nodes");
    const auto& x = grid_.axis();
    inv_h_.resize(n - 1);
    for (Index e = 0; e + 1 < n; ++e) inv_h_[e] = 1.0 / (x[e + 1] - x[e]);
    for (int f = 0; f < 2; ++f) {
      const double s = opt_.load_points[f];
      Index best = 1;
      for (Index i = 1; i + 1 < n; ++i) {
        if (std::abs(x[i] - s) < std::abs(x[best] - s)) best = i;
      }
      load_node_[f] = best;
    }
    for (int k = 1; k <= opt_.stations; ++k) {
      const double s = static_cast<double>(k) / static_cast<double>(opt_.stations + 1);
      stations_.push_back(grid_.interpolation_weights({s, 0.0}));
    }
  }

  Index parameter_dim() const override { return grid_.size(); }
  Index output_dim() const override { return 2 * static_cast<Index>(stations_.size()); }
  const Grid& grid() const { return grid_; }
  Index load_node(int which) const { return load_node_[which]; }

  /// Full nodal solution (boundary zeros included) for load `which`.
  Vector state(const Vector& u, int which) const {
    check_input(u);
    const Solution s = solve(u);
    return s.x[which];
  }

  Vector evaluate(const Vector& u) const override {
    check_input(u);
    const Solution s = solve(u);
    return stack(s.x[0], s.x[1]);
  }

  Matrix jacobian(const Vector& u) const override {
    check_input(u);
    const Solution s = solve(u);
    const Index n = grid_.size(), ns = static_cast<Index>(stations_.size());
    Matrix j = Matrix::Zero(2 * ns, n);
    std::array<Vector, 2> g{element_flux(s, 0), element_flux(s, 1)};
    Vector w(n);
    for (Index k = 0; k < ns; ++k) {
      w.setZero();
      for (const auto& [node, weight] : stations_[k]) {
        if (node > 0 && node < n - 1) w[node] += weight;
      }
      s.factor.solve_in_place(w.data() + 1);
      w[0] = w[n - 1] = 0.0;
      for (int f = 0; f < 2; ++f) {
        auto row = j.row(k + f * ns);
        for (Index e = 0; e + 1 < n; ++e) {
          const double v = 0.5 * g[f][e] * (w[e] - w[e + 1]);
          row[e] -= v;
          row[e + 1] -= v;
        }
      }
    }
    return j;
  }

  Matrix jacobian_times(const Vector& u, const Matrix& v) const override {
    check_input(u);
    const Solution s = solve(u);
    return tangent(s, v);
  }

  Linearization linearize(const Vector& u, const Matrix& v) const override {
    check_input(u);
    const Solution s = solve(u);
    return {stack(s.x[0], s.x[1]), tangent(s, v)};
  }

 private:
  struct Solution {
    Vector coef;  // κ_e / h_e
    detail::Tridiagonal factor;
    std::array<Vector, 2> x;
  };

  Solution solve(const Vector& u) const {
    const Index n = grid_.size();
    Solution s;
    s.coef.resize(n - 1);
    for (Index e = 0; e + 1 < n; ++e) s.coef[e] = std::exp(0.5 * (u[e] + u[e + 1])) * inv_h_[e];
    if (!s.coef.allFinite()) throw NumericalError("elliptic coefficient overflow");
    Vector diag(n - 2), off(n - 3);
    for (Index i = 1; i + 1 < n; ++i) diag[i - 1] = s.coef[i - 1] + s.coef[i];
    for (Index i = 1; i + 2 < n; ++i) off[i - 1] = -s.coef[i];
    s.factor = detail::Tridiagonal(std::move(diag), std::move(off));
    for (int f = 0; f < 2; ++f) {
      Vector x = Vector::Zero(n);
      x[load_node_[f]] = opt_.load;
      s.factor.solve_in_place(x.data() + 1);
      s.x[f] = std::move(x);
    }
    return s;
  }

  /// g_e = κ_e (x_a − x_b) / h_e for the given load.
  Vector element_flux(const Solution& s, int f) const {
    const Index n = grid_.size();
    Vector g(n - 1);
    for (Index e = 0; e + 1 < n; ++e) g[e] = s.coef[e] * (s.x[f][e] - s.x[f][e + 1]);
    return g;
  }

  Vector observe(const Vector& x) const {
    Vector out(static_cast<Index>(stations_.size()));
    for (std::size_t k = 0; k < stations_.size(); ++k) {
      double v = 0.0;
      for (const auto& [node, weight] : stations_[k]) v += weight * x[node];
      out[static_cast<Index>(k)] = v;
    }
    return out;
  }

  Vector stack(const Vector& x1, const Vector& x2) const {
    const Index ns = static_cast<Index>(stations_.size());
    Vector out(2 * ns);
    out.head(ns) = observe(x1);
    out.tail(ns) = observe(x2);
    return out;
  }

  Matrix tangent(const Solution& s, const Matrix& v) const {
    if (v.rows() != grid_.size()) throw std::invalid_argument("elliptic tangent: direction length mismatch");
    const Index n = grid_.size(), ns = static_cast<Index>(stations_.size());
    std::array<Vector, 2> g{element_flux(s, 0), element_flux(s, 1)};
    Matrix out(2 * ns, v.cols());
    Vector rhs(n);
    for (Index c = 0; c < v.cols(); ++c) {
      for (int f = 0; f < 2; ++f) {
        rhs.setZero();
        for (Index e = 0; e + 1 < n; ++e) {
          const double t = 0.5 * (v(e, c) + v(e + 1, c)) * g[f][e];
          rhs[e] -= t;
          rhs[e + 1] += t;
        }
        s.factor.solve_in_place(rhs.data() + 1);
        rhs[0] = rhs[n - 1] = 0.0;
        out.col(c).segment(f * ns, ns) = observe(rhs);
      }
    }
    return out;
  }

  Grid grid_;
  Options opt_;
  Vector inv_h_;
  std::array<Index, 2> load_node_{};
  std::vector<std::vector<std::pair<Index, double>>> stations_;
};

}  // namespace hibrto
