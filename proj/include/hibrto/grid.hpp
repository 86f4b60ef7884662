#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hibrto/common.hpp"

namespace hibrto {

/// Nodes of a 1D interval mesh or a 2D regular tensor grid.
///
/// In 2D the square [lo, hi]^2 is split into N x N cells and the nodes sit at
/// cell centres, so node k = i + N*j is also the index of cell (i, j). The
/// bilinear elements connect neighbouring centres.
class Grid {
 public:
  static Grid interval(Index n, double lo = 0.0, double hi = 1.0) {
    if (n < 2) throw std::invalid_argument("Grid::interval: need at least 2 nodes");
    std::vector<double> x(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) x[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return interval(std::move(x));
  }

  static Grid interval(std::vector<double> nodes) {
    if (nodes.size() < 2) throw std::invalid_argument("Grid::interval: need at least 2 nodes");
    for (std::size_t i = 1; i < nodes.size(); ++i) {
      if (!(nodes[i] > nodes[i - 1])) {
        throw std::invalid_argument("Grid::interval: degenerate element " + std::to_string(i - 1) +
                                    " (nodes must be strictly increasing)");
      }
    }
    Grid g;
    g.dim_ = 1;
    g.lo_ = nodes.front();
    g.hi_ = nodes.back();
    g.x_ = std::move(nodes);
    g.cells_ = static_cast<Index>(g.x_.size());
    return g;
  }

  static Grid square(Index cells_per_side, double lo = -15.0, double hi = 15.0) {
    if (cells_per_side < 2) throw std::invalid_argument("Grid::square: need at least 2 cells per side");
    if (!(hi > lo)) throw std::invalid_argument("Grid::square: degenerate domain");
    Grid g;
    g.dim_ = 2;
    g.lo_ = lo;
    g.hi_ = hi;
    g.cells_ = cells_per_side;
    const double h = (hi - lo) / static_cast<double>(cells_per_side);
    g.x_.resize(static_cast<std::size_t>(cells_per_side));
    for (Index i = 0; i < cells_per_side; ++i) g.x_[i] = lo + (static_cast<double>(i) + 0.5) * h;
    return g;
  }

  int dimension() const { return dim_; }
  Index size() const { return dim_ == 1 ? static_cast<Index>(x_.size()) : cells_ * cells_; }
  /// Cells per side (2D) or node count (1D).
  Index side() const { return cells_; }
  double lower() const { return lo_; }
  double upper() const { return hi_; }
  /// 1D node coordinates, or the 2D per-axis centre coordinates.
  const std::vector<double>& axis() const { return x_; }
  double cell_width() const { return (hi_ - lo_) / static_cast<double>(cells_); }

  std::array<double, 2> point(Index k) const {
    if (dim_ == 1) return {x_[k], 0.0};
    return {x_[k % cells_], x_[k / cells_]};
  }

  Index element_count() const { return dim_ == 1 ? size() - 1 : (cells_ - 1) * (cells_ - 1); }

  /// Element e as node indices. 1D: {a, b}. 2D: counterclockwise {sw, se, ne, nw}.
  std::array<Index, 4> element(Index e) const {
    if (dim_ == 1) return {e, e + 1, -1, -1};
    const Index i = e % (cells_ - 1), j = e / (cells_ - 1);
    const Index sw = i + cells_ * j;
    return {sw, sw + 1, sw + 1 + cells_, sw + cells_};
  }

  /// Weights of the piecewise (bi)linear interpolant at `p`, clamped to the node hull.
  std::vector<std::pair<Index, double>> interpolation_weights(std::array<double, 2> p) const {
    if (dim_ == 1) {
      const auto [k, t] = locate(p[0]);
      return {{k, 1.0 - t}, {k + 1, t}};
    }
    const auto [i, tx] = locate(p[0]);
    const auto [j, ty] = locate(p[1]);
    const Index sw = i + cells_ * j;
    return {{sw, (1 - tx) * (1 - ty)}, {sw + 1, tx * (1 - ty)}, {sw + cells_, (1 - tx) * ty},
            {sw + cells_ + 1, tx * ty}};
  }

  double interpolate(const Vector& u, std::array<double, 2> p) const {
    double v = 0.0;
    for (const auto& [k, w] : interpolation_weights(p)) v += w * u[k];
    return v;
  }

  /// Reference point for the scalar summary u_mid: s = 0.5 in 1D, the origin in 2D.
  std::array<double, 2> midpoint() const {
    return dim_ == 1 ? std::array<double, 2>{0.5 * (lo_ + hi_), 0.0} : std::array<double, 2>{0.0, 0.0};
  }

 private:
  std::pair<Index, double> locate(double s) const {
    const Index n = static_cast<Index>(x_.size());
    if (s <= x_.front()) return {0, 0.0};
    if (s >= x_.back()) return {n - 2, 1.0};
    const auto it = std::upper_bound(x_.begin(), x_.end(), s);
    const Index k = static_cast<Index>(it - x_.begin()) - 1;
    return {k, (s - x_[k]) / (x_[k + 1] - x_[k])};
  }

  int dim_ = 1;
  double lo_ = 0.0, hi_ = 1.0;
  Index cells_ = 0;
  std::vector<double> x_;
};

}  // namespace hibrto
