#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "hibrto/elliptic.hpp"
#include "hibrto/pet.hpp"
#include "hibrto/synthetic.hpp"

using namespace hibrto;

namespace {

Vector smooth_field(Index n, Rng& rng, double amplitude) {
  Vector u(n);
  const Vector noise = standard_normal(n, rng);
  for (Index i = 0; i < n; ++i) {
    u[i] = amplitude * std::sin(3.0 * static_cast<double>(i) / static_cast<double>(n)) + 0.2 * noise[i];
  }
  return u;
}

// Directional central differences against J v, relative to ‖J v‖.
double worst_fd_error(const ForwardModel& model, const Vector& u, int directions, double step, Rng& rng,
                      bool log_map = false) {
  const Matrix j = log_map ? model.log_jacobian(u) : model.jacobian(u);
  double worst = 0.0;
  for (int d = 0; d < directions; ++d) {
    Vector v = standard_normal(u.size(), rng);
    v /= v.norm();
    const auto eval = [&](const Vector& x) { return log_map ? model.log_evaluate(x) : model.evaluate(x); };
    const Vector fd = (eval(u + step * v) - eval(u - step * v)) / (2 * step);
    const Vector jv = j * v;
    worst = std::max(worst, (fd - jv).norm() / jv.norm());
  }
  return worst;
}

// Length of the segment inside [lo,hi]^2, by intersecting the supporting line with the four edges.
double square_chord(const Ray& ray, double lo, double hi) {
  const double dx = ray.to[0] - ray.from[0], dy = ray.to[1] - ray.from[1];
  std::vector<double> ts;
  for (double edge : {lo, hi}) {
    if (dx != 0) {
      const double t = (edge - ray.from[0]) / dx, y = ray.from[1] + t * dy;
      if (y >= lo && y <= hi) ts.push_back(t);
    }
    if (dy != 0) {
      const double t = (edge - ray.from[1]) / dy, x = ray.from[0] + t * dx;
      if (x >= lo && x <= hi) ts.push_back(t);
    }
  }
  if (ts.size() < 2) return 0.0;
  double a = *std::min_element(ts.begin(), ts.end()), b = *std::max_element(ts.begin(), ts.end());
  a = std::clamp(a, 0.0, 1.0);
  b = std::clamp(b, 0.0, 1.0);
  return (b - a) * std::hypot(dx, dy);
}

}  // namespace

TEST(Elliptic, PointLoadGreenFunction) {
  const EllipticModel1D model(3073);
  const Vector x = model.state(Vector::Zero(3073), 0);
  const Index node = model.load_node(0);
  EXPECT_EQ(node, 1024);
  EXPECT_NEAR(x[node], 1000.0 / 3.0 * 2.0 / 3.0, 1e-8);
}

TEST(Elliptic, ConstantShiftScalesOutput) {
  const EllipticModel1D model(100);
  const Vector f0 = model.evaluate(Vector::Zero(100));
  const Vector fc = model.evaluate(Vector::Constant(100, 0.7));
  EXPECT_LT((fc - f0 * std::exp(-0.7)).norm(), 1e-12 * f0.norm());
  EXPECT_EQ(f0.size(), 126);
}

TEST(Elliptic, MirrorSymmetry) {
  const EllipticModel1D model(193);
  const Vector f = model.evaluate(Vector::Zero(193));
  for (Index k = 0; k < 63; ++k) EXPECT_NEAR(f[63 + k], f[62 - k], 1e-10 * f.maxCoeff());
}

TEST(Elliptic, JacobianFiniteDifferences) {
  Rng rng(1);
  for (Index n : {64, 257}) {
    const EllipticModel1D model(n);
    const Vector u = smooth_field(n, rng, 0.8);
    EXPECT_LE(worst_fd_error(model, u, 10, 1e-5, rng), 1e-5) << n;
  }
}

TEST(Elliptic, TangentProductsMatchJacobian) {
  Rng rng(2);
  const EllipticModel1D model(80);
  const Vector u = smooth_field(80, rng, 1.0);
  const Matrix v = Matrix::Random(80, 7);
  const Matrix j = model.jacobian(u);
  const Matrix jv = model.jacobian_times(u, v);
  EXPECT_LT((j * v - jv).norm(), 1e-10 * jv.norm());
  const auto lin = model.linearize(u, v);
  EXPECT_LT((lin.value - model.evaluate(u)).norm(), 1e-14 * lin.value.norm());
  EXPECT_LT((lin.jv - jv).norm(), 1e-14 * jv.norm());
}

TEST(Elliptic, JacobianOnesDirection) {
  Rng rng(3);
  const EllipticModel1D model(50);
  for (const Vector& u : {Vector(Vector::Constant(50, 0.3)), smooth_field(50, rng, 1.0)}) {
    const Vector j1 = model.jacobian(u) * Vector::Ones(50);
    const Vector f = model.evaluate(u);
    EXPECT_LT((j1 + f).norm(), 1e-10 * f.norm());
  }
}

TEST(Elliptic, FiniteRowsForBoundedInput) {
  Rng rng(4);
  const EllipticModel1D model(64);
  for (int rep = 0; rep < 5; ++rep) {
    Vector u = 5.0 * Vector::Random(64);
    EXPECT_TRUE(model.jacobian(u).allFinite());
    u.setConstant(rep % 2 ? 5.0 : -5.0);
    EXPECT_TRUE(model.jacobian(u).allFinite());
  }
}

TEST(Elliptic, MaximumPrincipleAndNonFinite) {
  Rng rng(5);
  const EllipticModel1D model(128);
  const Vector u = smooth_field(128, rng, 2.0);
  for (int f = 0; f < 2; ++f) EXPECT_GE(model.state(u, f).minCoeff(), 0.0);
  Vector bad = u;
  bad[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(model.evaluate(bad), DomainError);
}

TEST(Elliptic, GridRefinementConverges) {
  const EllipticModel1D coarse(1024), fine(8192);
  const Vector fc = coarse.evaluate(truth_on_grid(coarse.grid()));
  const Vector ff = fine.evaluate(truth_on_grid(fine.grid()));
  EXPECT_LT((fc - ff).norm() / ff.norm(), 5e-3);
}

TEST(PetRay, HorizontalThroughUnitCell) {
  const auto hits = trace_ray(0.0, 1.0, 1, {{-1.0, 0.5}, {2.0, 0.5}});
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].first, 0);
  EXPECT_NEAR(hits[0].second, 1.0, 1e-14);
}

TEST(PetRay, DiagonalOfUnitCell) {
  for (const Ray& r : {Ray{{0.0, 0.0}, {1.0, 1.0}}, Ray{{-1.0, -1.0}, {2.0, 2.0}}}) {
    const auto hits = trace_ray(0.0, 1.0, 1, r);
    ASSERT_EQ(hits.size(), 1u);
    EXPECT_NEAR(hits[0].second, std::sqrt(2.0), 1e-14);
  }
}

TEST(PetRay, MissingRayIsEmpty) {
  EXPECT_TRUE(trace_ray(0.0, 1.0, 4, {{-1.0, 2.0}, {3.0, 2.5}}).empty());
}

TEST(PetSystemMatrix, RowSumsAreChords) {
  for (Index cells : {10, 20, 37}) {
    const Grid grid = Grid::square(cells);
    const PetGeometry geom;
    const PetSystem sys = pet_system_matrix(geom, grid);
    EXPECT_TRUE(sys.empty_rays.empty());
    ASSERT_EQ(sys.matrix.rows(), 400);
    const auto rays = geom.rays();
    for (Index r = 0; r < 400; ++r) {
      double sum = 0.0;
      for (RowSparseMatrix::InnerIterator it(sys.matrix, r); it; ++it) {
        EXPECT_GE(it.value(), 0.0);
        sum += it.value();
      }
      EXPECT_NEAR(sum, square_chord(rays[r], -15, 15), 1e-10) << r;
      EXPECT_GT(sum, 0.0);
    }
  }
}

TEST(PetSystemMatrix, SourcesOnArc) {
  const PetGeometry geom;
  const auto rays = geom.rays();
  ASSERT_EQ(rays.size(), 400u);
  const double first = std::atan2(rays.front().from[1], rays.front().from[0]) * 180 / std::numbers::pi;
  const double last = std::atan2(rays.back().from[1], rays.back().from[0]) * 180 / std::numbers::pi;
  EXPECT_NEAR(first, 30.0, 1e-10);
  EXPECT_NEAR(last, 150.0, 1e-10);
  for (const auto& r : rays) EXPECT_NEAR(std::hypot(r.to[0], r.to[1]), 25.0, 1e-10);
}

TEST(Pet, EmptyPathTransmitsEverything) {
  RowSparseMatrix b(3, 4);
  const PetModel2D model(b);
  EXPECT_EQ(model.evaluate(Vector::Random(4)), Vector::Ones(3));
}

TEST(Pet, OneCellScalarCalculus) {
  RowSparseMatrix b(1, 1);
  b.insert(0, 0) = 0.8;
  const PetModel2D model(b);
  const Vector u = Vector::Zero(1);
  EXPECT_NEAR(model.evaluate(u)[0], std::exp(-0.8), 1e-15);
  EXPECT_NEAR(model.jacobian(u)(0, 0), -0.8 * std::exp(-0.8), 1e-15);
  EXPECT_NEAR(model.log_evaluate(u)[0], -0.8, 1e-15);
}

TEST(Pet, JacobianFiniteDifferences) {
  Rng rng(6);
  const Grid grid = Grid::square(12);
  const PetModel2D model(grid, PetGeometry{});
  const Vector u = 0.5 * standard_normal(grid.size(), rng);
  EXPECT_LE(worst_fd_error(model, u, 10, 1e-6, rng), 1e-6);
  EXPECT_LE(worst_fd_error(model, u, 10, 1e-6, rng, true), 1e-6);
  const Matrix v = Matrix::Random(grid.size(), 5);
  EXPECT_LT((model.jacobian(u) * v - model.jacobian_times(u, v)).norm(), 1e-12 * model.jacobian_times(u, v).norm());
  const auto lin = model.log_linearize(u, v);
  EXPECT_LT((lin.jv - model.log_jacobian(u) * v).norm(), 1e-12 * lin.jv.norm());
}

TEST(Pet, OutputsInUnitInterval) {
  Rng rng(7);
  const Grid grid = Grid::square(20);
  const PetModel2D model(grid, PetGeometry{});
  for (int rep = 0; rep < 5; ++rep) {
    const Vector f = model.evaluate(2.0 * standard_normal(grid.size(), rng));
    EXPECT_GT(f.minCoeff(), 0.0);
    EXPECT_LE(f.maxCoeff(), 1.0);
  }
  Vector big = Vector::Zero(grid.size());
  big[5] = 701.0;
  EXPECT_THROW(model.evaluate(big), DomainError);
}

TEST(Synthetic, NoiseFreeLimit) {
  const EllipticModel1D model(65);
  Rng rng(8);
  const auto d = generate_gaussian(model, truth_on_grid(model.grid()), std::numeric_limits<double>::infinity(), rng);
  EXPECT_EQ(d.y, d.noise_free);
}

TEST(Synthetic, SnrRule) {
  const Vector s = Vector::Constant(4, 3.0);
  EXPECT_NEAR(snr_precision(s, 100.0), 1.0 / (0.03 * 0.03), 1e-6);
}

TEST(Synthetic, PoissonMeanAndDeterminism) {
  RowSparseMatrix b(1, 1);
  const PetModel2D model(b);
  Rng rng(9);
  const int reps = 10000;
  double sum = 0.0;
  for (int i = 0; i < reps; ++i) {
    const auto d = generate_poisson(model, Vector::Zero(1), 100.0, rng);
    EXPECT_EQ(d.y[0], std::round(d.y[0]));
    sum += d.y[0];
  }
  EXPECT_LT(std::abs(sum / reps - 100.0), 3.0 * std::sqrt(100.0 / reps));
  Rng a(10), c(10);
  const Grid grid = Grid::square(10);
  const PetModel2D pet(grid, PetGeometry{});
  EXPECT_EQ(generate_poisson(pet, truth_on_grid(grid), 1e4, a).y, generate_poisson(pet, truth_on_grid(grid), 1e4, c).y);
}

TEST(Synthetic, TruthProfiles) {
  EXPECT_DOUBLE_EQ(elliptic_truth(0.0), 1.0);
  EXPECT_NEAR(elliptic_truth(0.5), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(pet_truth(-15.0, 0.0), 0.0);
  EXPECT_NEAR(pet_truth(-10.0, -10.0), 0.5 * std::numbers::pi, 1e-12);
  EXPECT_DOUBLE_EQ(pet_truth(0.0, -10.0), 0.0);
}
