#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numbers>

#include "hibrto/elliptic.hpp"
#include "hibrto/rto.hpp"
#include "hibrto/synthetic.hpp"

using namespace hibrto;

namespace {

// F(u) = u + c u³, monotone for c ≥ 0.
class CubicModel final : public ForwardModel {
 public:
  explicit CubicModel(double c) : c_(c) {}
  Index parameter_dim() const override { return 1; }
  Index output_dim() const override { return 1; }
  Vector evaluate(const Vector& u) const override {
    check_input(u);
    return Vector::Constant(1, u[0] + c_ * u[0] * u[0] * u[0]);
  }
  Matrix jacobian(const Vector& u) const override {
    check_input(u);
    return Matrix::Constant(1, 1, 1.0 + 3.0 * c_ * u[0] * u[0]);
  }

 private:
  double c_;
};

std::shared_ptr<const PriorOperators> unit_ops(Index n) {
  return std::make_shared<const PriorOperators>(Vector::Ones(n), SparseMatrix(n, n), 1);
}

BayesProblem scalar_problem(std::shared_ptr<const ForwardModel> model, double y) {
  return BayesProblem(std::move(model), unit_ops(1), Vector::Zero(1), HyperPrior{}, Vector::Constant(1, y),
                      LikelihoodKind::gaussian);
}

BayesProblem identity_problem(double y) {
  return scalar_problem(std::make_shared<LinearModel>(Matrix::Identity(1, 1)), y);
}

struct EllipticFixture {
  Grid grid;
  std::shared_ptr<EllipticModel1D> model;
  std::shared_ptr<const PriorOperators> ops;
  double lambda_true;
  BayesProblem problem;

  static EllipticFixture make(Index n, std::uint64_t seed) {
    Grid grid = Grid::interval(n);
    auto model = std::make_shared<EllipticModel1D>(n);
    auto ops = std::make_shared<const PriorOperators>(grid);
    const Vector truth = truth_on_grid(grid);
    const double lam = snr_precision(model->evaluate(truth), 100.0);
    Rng rng(seed);
    const SyntheticData d = generate_gaussian(*model, truth, lam, rng);
    BayesProblem p(model, ops, Vector::Zero(n), HyperPrior{}, d.y, LikelihoodKind::gaussian);
    return {grid, model, ops, lam, std::move(p)};
  }
};

Matrix dense_precision(const PriorModel& prior) { return prior.delta() * Matrix(prior.precision()); }

// Whitened full-space construction with a symmetric square root of δP and an independent SVD.
double whitened_log_density(const BayesProblem& p, const HyperParams& t, const Vector& u_star, const Vector& u) {
  const PriorModel prior = p.prior(t);
  const Index n = p.n();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(dense_precision(prior));
  const Vector ev = eig.eigenvalues();
  const Matrix sq = eig.eigenvectors() * ev.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
  const Matrix isq = eig.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  const Vector w = (t.lambda * p.noise_variance().cwiseInverse()).cwiseSqrt();
  Eigen::JacobiSVD<Matrix> svd(w.asDiagonal() * p.model().jacobian(u_star) * isq,
                               Eigen::ComputeThinU | Eigen::ComputeThinV);
  Index r = 0;
  while (r < svd.singularValues().size() && svd.singularValues()[r] >= 1e-10 * svd.singularValues()[0]) ++r;
  const Matrix pl = svd.matrixU().leftCols(r), pr = svd.matrixV().leftCols(r);
  const Vector s = svd.singularValues().head(r);
  const Vector c = (s.cwiseAbs2().array() + 1.0).sqrt().inverse().matrix();
  const Vector v = sq * (u - p.prior_mean());
  const Vector g = w.cwiseProduct(p.model().evaluate(u) - p.data());
  const Matrix proj = pr * pr.transpose();
  const Vector tv = pr * c.cwiseProduct(pr.transpose() * v + s.cwiseProduct(pl.transpose() * g)) + v - proj * v;
  const Matrix grad_g = w.asDiagonal() * p.model().jacobian(u) * isq;
  const Matrix grad_t = pr * c.asDiagonal() * (pr.transpose() + s.asDiagonal() * pl.transpose() * grad_g) +
                        Matrix::Identity(n, n) - proj;
  const double ld = grad_t.partialPivLu().determinant();
  return -0.5 * n * kLog2Pi + std::log(std::abs(ld)) - 0.5 * tv.squaredNorm() + 0.5 * ev.array().log().sum();
}

}  // namespace

TEST(FindMap, IdentityRidge) {
  const BayesProblem p = identity_problem(0.8);
  const auto res = find_map(p, p.prior({}), 1.0, Vector::Zero(1));
  EXPECT_TRUE(res.converged);
  EXPECT_NEAR(res.u[0], 0.4, 1e-12);
}

TEST(FindMap, EllipticMonotoneAndWarmStart) {
  const auto fx = EllipticFixture::make(64, 11);
  const HyperParams t{fx.lambda_true, 1.0, 1.0};
  const PriorModel prior = fx.problem.prior(t);
  const auto res = find_map(fx.problem, prior, t.lambda, Vector::Zero(64));
  EXPECT_TRUE(res.converged);
  EXPECT_LE(res.grad_norm, 1e-6);
  for (std::size_t k = 1; k < res.history.size(); ++k) EXPECT_LE(res.history[k], res.history[k - 1]);
  const auto warm = find_map(fx.problem, prior, t.lambda, res.u);
  EXPECT_TRUE(warm.converged);
  EXPECT_LE(warm.iterations, 2);
}

TEST(MapFactors, IdentityWhitening) {
  const BayesProblem p = identity_problem(0.3);
  const RtoMap map(p, {}, Vector::Constant(1, 0.15));
  ASSERT_EQ(map.rank(), 1);
  EXPECT_NEAR(std::abs(map.x()(0, 0)), 1.0, 1e-14);
  EXPECT_NEAR(std::abs(map.y()(0, 0)), 1.0, 1e-14);
  EXPECT_NEAR(map.s()[0], 1.0, 1e-14);
}

TEST(MapFactors, OrthogonalityAndReconstruction) {
  const auto fx = EllipticFixture::make(64, 12);
  const HyperParams t{fx.lambda_true, 2.0, 0.5};
  const RtoMap map(fx.problem, t, truth_on_grid(fx.grid));
  const Matrix dp = dense_precision(map.prior());
  const Matrix y = map.y(), x = map.x();
  const Index r = map.rank();
  EXPECT_LE(r, 63);
  EXPECT_LE((y.transpose() * y / t.lambda - Matrix::Identity(r, r)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((x.transpose() * dp * x - Matrix::Identity(r, r)).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix j = fx.model->jacobian(map.u_star());
  const Matrix lhs = (t.lambda / t.delta) * j * Matrix(map.prior().precision()).inverse();
  const Matrix rhs = y * map.s().asDiagonal() * x.transpose();
  EXPECT_LE((lhs - rhs).norm() / lhs.norm(), 1e-8);
  for (Index k = 0; k < r; ++k) EXPECT_GE(map.s()[k], RtoMap::kTruncation * map.s()[0]);
}

TEST(MapFactors, ZeroJacobianGivesPriorSampling) {
  auto model = std::make_shared<LinearModel>(Matrix::Zero(2, 3));
  const BayesProblem p(model, unit_ops(3), Vector::Zero(3), HyperPrior{}, Vector::Ones(2), LikelihoodKind::gaussian);
  const HyperParams t{1.0, 2.0, 1.5};
  const RtoMap map(p, t, Vector::Zero(3));
  EXPECT_EQ(map.rank(), 0);
  Rng rng(3);
  for (int k = 0; k < 5; ++k) {
    const RtoSample s = map.draw(rng);
    ASSERT_TRUE(s.usable());
    EXPECT_NEAR(map.log_density(s), p.prior_logpdf(s.u, t.delta, t.gamma), 1e-12);
  }
}

TEST(Coupling, LinearModelHasNoRemainder) {
  Rng rng(4);
  const Matrix a = Matrix::Random(5, 4);
  auto model = std::make_shared<LinearModel>(a);
  const BayesProblem p(model, unit_ops(4), Vector::Zero(4), HyperPrior{}, standard_normal(5, rng),
                       LikelihoodKind::gaussian);
  const RtoMap map(p, {3.0, 0.5, 1.2}, standard_normal(4, rng));
  for (int k = 0; k < 10; ++k) {
    const RtoSample s = map.assess(standard_normal(4, rng));
    EXPECT_LE(map.theta_remainder(s.u_r, s.u_perp).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((map.theta_eval(s.u_r, s.u_perp) - map.theta_linear(s.u_r)).norm(), 1e-12);
  }
}

TEST(Coupling, RemainderVanishesAtReference) {
  const auto fx = EllipticFixture::make(32, 5);
  const Vector u_star = 0.5 * truth_on_grid(fx.grid);
  const RtoMap map(fx.problem, {fx.lambda_true, 1.0, 1.0}, u_star);
  const Vector ur = map.reduce(u_star);
  const Vector perp = u_star - fx.problem.prior_mean() - map.x() * ur;
  EXPECT_LE((ur - map.m_r()).norm(), 1e-10);
  const double scale = map.theta_linear(ur).norm();
  EXPECT_LE(map.theta_remainder(ur, perp).norm(), 1e-10 * std::max(1.0, scale));
}

TEST(Coupling, LinearPartGradient) {
  const auto fx = EllipticFixture::make(32, 6);
  const Vector u_star = truth_on_grid(fx.grid);
  const RtoMap map(fx.problem, {fx.lambda_true, 1.0, 1.0}, u_star);
  const Index r = map.rank();
  // Identity S Yᵀ J(u*) X = S².
  const Matrix sjx = map.s().asDiagonal() * map.y().transpose() * fx.model->jacobian(u_star) * map.x();
  const Matrix s2 = map.s().cwiseAbs2().asDiagonal();
  EXPECT_LE((sjx - s2).cwiseAbs().maxCoeff(), 1e-8 * std::max(1.0, s2.maxCoeff()));
  Rng rng(7);
  const Vector ur = map.m_r() + standard_normal(r, rng);
  const double h = 1e-3;
  for (Index k = 0; k < r; ++k) {
    const Vector e = Vector::Unit(r, k) * h;
    Vector col = (map.theta_linear(ur + e) - map.theta_linear(ur - e)) / (2 * h);
    const double expected = std::sqrt(1.0 + map.s()[k] * map.s()[k]);
    EXPECT_NEAR(col[k], expected, 1e-8 * expected);
    col[k] = 0.0;
    EXPECT_LE(col.cwiseAbs().maxCoeff(), 1e-8 * expected);
  }
}

TEST(TrustRegionPsi, Branches) {
  const double eps = 2.0, tau = 0.1;
  const double inner = eps * (1 - tau) / 2;
  EXPECT_DOUBLE_EQ(trust_region_psi(inner, eps, tau), inner);
  EXPECT_NEAR(trust_region_psi(eps, eps, tau), eps * (1 - tau / 4), 1e-15);
  EXPECT_DOUBLE_EQ(trust_region_psi(2 * eps * (1 + tau), eps, tau), eps);
  const Vector m = (Vector(2) << 0.5, -1.0).finished();
  const Vector far = m + (Vector(2) << 3.0, 4.0).finished() * (2 * eps * (1 + tau) / 5.0);
  EXPECT_NEAR((trust_region_transform(far, m, eps, tau) - m).norm(), eps, 1e-14);
  EXPECT_EQ(trust_region_transform(m, m, eps, tau), m);
  // Continuity across both branch points.
  for (double b : {eps * (1 - tau), eps * (1 + tau)}) {
    EXPECT_NEAR(trust_region_psi(b * (1 - 1e-12), eps, tau), trust_region_psi(b * (1 + 1e-12), eps, tau), 1e-10);
    EXPECT_NEAR(trust_region_dpsi(b * (1 - 1e-12), eps, tau), trust_region_dpsi(b * (1 + 1e-12), eps, tau), 1e-10);
  }
}

TEST(TrustRegionPsi, JacobianSymmetricWithUnitIntervalSpectrum) {
  Rng rng(8);
  const double eps = 1.5, tau = 0.2;
  const Vector m = standard_normal(4, rng);
  for (double radius : {0.5, 1.3, 1.5, 1.7, 2.5, 10.0}) {
    for (int rep = 0; rep < 3; ++rep) {
      const Vector dir = standard_normal(4, rng).normalized();
      const Vector ur = m + radius * dir;
      Matrix fd(4, 4);
      const double h = 1e-5;
      for (int k = 0; k < 4; ++k) {
        const Vector e = Vector::Unit(4, k) * h;
        fd.col(k) = (trust_region_transform(ur + e, m, eps, tau) - trust_region_transform(ur - e, m, eps, tau)) / (2 * h);
      }
      EXPECT_LE((fd - fd.transpose()).cwiseAbs().maxCoeff(), 1e-8);
      EXPECT_LE((fd - trust_region_jacobian(ur, m, eps, tau)).cwiseAbs().maxCoeff(), 1e-8);
      const Vector ev = Eigen::SelfAdjointEigenSolver<Matrix>(0.5 * (fd + fd.transpose())).eigenvalues();
      EXPECT_GE(ev.minCoeff(), -1e-10);
      EXPECT_LE(ev.maxCoeff(), 1 + 1e-10);
      EXPECT_LE((trust_region_transform(ur, m, eps, tau) - m).norm(), eps + 1e-14);
      if (radius < eps * (1 - tau)) {
        EXPECT_EQ(trust_region_transform(ur, m, eps, tau), ur);
      }
    }
  }
}

TEST(TrustRegionMap, ModifiedEqualsOriginalInsideInnerBall) {
  const auto fx = EllipticFixture::make(24, 9);
  TrustRegion tr;
  tr.enabled = true;
  tr.epsilon = 1.0;
  const Vector u_star = truth_on_grid(fx.grid);
  const RtoMap map(fx.problem, {fx.lambda_true, 1.0, 1.0}, u_star, nullptr, tr);
  Rng rng(10);
  const Vector perp = map.assess(u_star + 0.1 * standard_normal(24, rng)).u_perp;
  const Index r = map.rank();
  for (int k = 0; k < 5; ++k) {
    const Vector ur = map.m_r() + 0.8 * uniform01(rng) * standard_normal(r, rng).normalized();
    EXPECT_LE((map.theta_modified(ur, perp) - map.theta_eval(ur, perp)).norm(), 1e-10 * map.theta_eval(ur, perp).norm());
  }
}

TEST(TrustRegionMap, DeterminantMatchesFiniteDifferences) {
  const auto fx = EllipticFixture::make(16, 13);
  TrustRegion tr;
  tr.enabled = true;
  tr.epsilon = 0.5;
  const RtoMap map(fx.problem, {fx.lambda_true, 1.0, 1.0}, truth_on_grid(fx.grid), nullptr, tr);
  Rng rng(14);
  const Index r = map.rank();
  for (double radius : {0.2, 0.5, 2.0}) {
    const RtoSample base = map.assess(truth_on_grid(fx.grid) + 0.05 * standard_normal(16, rng));
    const Vector ur = map.m_r() + radius * standard_normal(r, rng).normalized();
    const auto ev = map.evaluate(ur, base.u_perp);
    Matrix fd(r, r);
    const double h = 1e-6;
    for (Index k = 0; k < r; ++k) {
      const Vector e = Vector::Unit(r, k) * h;
      fd.col(k) = (map.theta_modified(ur + e, base.u_perp) - map.theta_modified(ur - e, base.u_perp)) / (2 * h);
    }
    const Vector sq = (map.s().cwiseAbs2().array() + 1.0).sqrt().matrix();
    const Matrix d_fd = sq.asDiagonal() * fd;
    EXPECT_LE((d_fd - ev.d).norm() / ev.d.norm(), 1e-6) << "radius " << radius;
    EXPECT_LE((ev.theta - map.theta_modified(ur, base.u_perp)).norm(), 1e-12 * std::max(1.0, ev.theta.norm()));
  }
}

TEST(Solve, ScalarIdentityClosedForm) {
  const double y = 0.9;
  const BayesProblem p = identity_problem(y);
  const RtoMap map(p, {}, Vector::Constant(1, y / 2));
  for (double zeta : {-1.3, 0.0, 0.4, 2.2}) {
    const RtoSample s = map.solve_zeta(Vector::Constant(1, zeta));
    ASSERT_TRUE(s.usable());
    EXPECT_NEAR(s.u[0], (std::sqrt(2.0) * zeta + y) / 2, 1e-10);
  }
  EXPECT_NEAR(map.solve_zeta(Vector::Zero(1)).u[0], y / 2, 1e-14);
}

TEST(Solve, PlugBackAndDecomposition) {
  const auto fx = EllipticFixture::make(64, 15);
  const HyperParams t{fx.lambda_true, 1.0, 1.0};
  const PriorModel prior = fx.problem.prior(t);
  const Vector u_star = find_map(fx.problem, prior, t.lambda, Vector::Zero(64)).u;
  const RtoMap map(fx.problem, t, u_star);
  const Matrix dp = dense_precision(map.prior());
  const Matrix proj = map.x() * map.x().transpose() * dp;
  Rng rng(16);
  for (int k = 0; k < 20; ++k) {
    const Vector zeta = map.prior().solve_r(standard_normal(64, rng));
    const RtoSample s = map.solve_zeta(zeta);
    ASSERT_TRUE(s.converged) << s.status;
    const Vector rhs = map.x().transpose() * dp * zeta;
    EXPECT_LE((map.theta_eval(s.u_r, s.u_perp) - rhs).norm(), 1e-8);
    EXPECT_LE((s.u_perp - (zeta - proj * zeta)).norm(), 1e-10 * std::max(1.0, zeta.norm()));
    EXPECT_LE((map.x() * s.u_r + s.u_perp + fx.problem.prior_mean() - s.u).norm(), 1e-10);
    EXPECT_LE((map.x().transpose() * dp * s.u_perp).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Density, IdentityMatchesAnalyticPosterior) {
  const double y = 0.7;
  const BayesProblem p = identity_problem(y);
  const RtoMap map(p, {}, Vector::Constant(1, y / 2));
  for (double u : {-1.0, 0.0, 0.35, 2.0}) {
    const double expected = -0.5 * std::log(2 * std::numbers::pi * 0.5) - (u - y / 2) * (u - y / 2);
    EXPECT_NEAR(map.log_density(map.assess(Vector::Constant(1, u))), expected, 1e-10);
  }
}

TEST(Density, ScalarQuadratureNormalizes) {
  const BayesProblem p = scalar_problem(std::make_shared<CubicModel>(0.3), 1.2);
  const HyperParams t{4.0, 1.0, 1.0};
  const Vector u_star = find_map(p, p.prior(t), t.lambda, Vector::Zero(1)).u;
  const RtoMap map(p, t, u_star);
  const double lo = -8, hi = 8;
  const int cells = 20000;
  const double h = (hi - lo) / cells;
  double sum = 0;
  for (int k = 0; k <= cells; ++k) {
    const double w = (k == 0 || k == cells) ? 0.5 : 1.0;
    sum += w * std::exp(map.log_density(map.assess(Vector::Constant(1, lo + k * h))));
  }
  EXPECT_NEAR(sum * h, 1.0, 1e-6);
}

TEST(Density, WhitenedConstructionAgrees) {
  const auto fx = EllipticFixture::make(16, 17);
  const HyperParams t{fx.lambda_true, 3.0, 0.7};
  const Vector u_star = find_map(fx.problem, fx.problem.prior(t), t.lambda, Vector::Zero(16)).u;
  const RtoMap map(fx.problem, t, u_star);
  Rng rng(18);
  for (int k = 0; k < 10; ++k) {
    const RtoSample s = map.draw(rng);
    ASSERT_TRUE(s.usable()) << s.status;
    const double ours = map.log_density(s);
    EXPECT_NEAR(ours, whitened_log_density(fx.problem, t, u_star, s.u), 1e-8 * std::max(1.0, std::abs(ours)));
  }
}

TEST(Weights, IdentityZeroDataConstant) {
  const BayesProblem p = identity_problem(0.0);
  const RtoMap map(p, {}, Vector::Zero(1));
  Rng rng(19);
  for (int k = 0; k < 20; ++k) {
    const RtoSample s = map.draw(rng);
    EXPECT_NEAR(std::exp(s.log_weight), 1.0 / (2.0 * std::sqrt(std::numbers::pi)), 1e-12);
  }
}

TEST(Weights, LinearModelConstantAcrossSamples) {
  Rng rng(20);
  auto model = std::make_shared<LinearModel>(Matrix::Random(6, 4), Vector::Random(6));
  const BayesProblem p(model, std::make_shared<const PriorOperators>(Grid::interval(4)), Vector::Constant(4, 0.2),
                       HyperPrior{}, standard_normal(6, rng), LikelihoodKind::gaussian);
  const RtoMap map(p, {2.0, 0.5, 3.0}, Vector::Zero(4));
  const auto samples = sample_rto_batch(map, 100, 21);
  double lo = kInf, hi = -kInf;
  for (const auto& s : samples) {
    ASSERT_TRUE(s.usable());
    lo = std::min(lo, s.log_weight);
    hi = std::max(hi, s.log_weight);
  }
  EXPECT_LT(hi - lo, 1e-8);
}

TEST(Weights, ConsistentWithDensity) {
  const auto fx = EllipticFixture::make(32, 22);
  const HyperParams t{fx.lambda_true, 1.0, 1.0};
  const Vector u_star = find_map(fx.problem, fx.problem.prior(t), t.lambda, Vector::Zero(32)).u;
  for (bool enabled : {false, true}) {
    TrustRegion tr;
    tr.enabled = enabled;
    tr.epsilon = 1.0;
    const RtoMap map(fx.problem, t, u_star, nullptr, tr);
    double lo = kInf, hi = -kInf;
    for (const auto& s : sample_rto_batch(map, 30, 23)) {
      if (!s.usable()) continue;
      const double c = s.log_weight + map.log_density(s) - fx.problem.log_likelihood(s.u, t.lambda) -
                       fx.problem.prior_logpdf(s.u, t.delta, t.gamma);
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    EXPECT_LT(hi - lo, 1e-8) << "trust region " << enabled;
    EXPECT_NEAR(hi, 0.0, 1e-8);
  }
}

TEST(Weights, SecondMomentExponentIsNonPositive) {
  const auto fx = EllipticFixture::make(64, 24);
  const HyperParams t{fx.lambda_true, 1.0, 1.0};
  const Vector u_star = find_map(fx.problem, fx.problem.prior(t), t.lambda, Vector::Zero(64)).u;
  const RtoMap map(fx.problem, t, u_star);
  const Matrix y = map.y();
  const Vector s = map.s();
  const Vector s2p1 = s.cwiseAbs2().array() + 1.0;
  const Matrix d1 = s.cwiseAbs2().cwiseQuotient(s2p1).asDiagonal();
  Matrix d2 = 2.0 * t.lambda * fx.problem.noise_variance().cwiseInverse().asDiagonal();
  d2 -= y * s.cwiseAbs2().cwiseQuotient(s2p1).asDiagonal() * y.transpose();
  const Eigen::LLT<Matrix> d2f(d2);
  ASSERT_EQ(d2f.info(), Eigen::Success);
  int checked = 0;
  for (const auto& smp : sample_rto_batch(map, 50, 25)) {
    if (!smp.usable()) continue;
    ++checked;
    const Vector res = fx.model->evaluate(smp.u) - fx.problem.data();
    const double q = -t.lambda * res.squaredNorm() - 0.5 * smp.u_r.squaredNorm() + 0.5 * smp.theta.squaredNorm();
    // Cross term Y S (S²+I)⁻¹ u_r; completing the square in the D2 metric.
    const Vector cross = y * s.cwiseProduct(smp.u_r.cwiseQuotient(s2p1));
    const Vector g = d2f.solve(cross);
    const Vector rg = res - g;
    const double via = -0.5 * smp.u_r.dot(d1 * smp.u_r) - 0.5 * rg.dot(d2 * rg) + 0.5 * g.dot(d2 * g);
    EXPECT_NEAR(q, via, 1e-8 * std::abs(q));
    // gᵀD2g = u_rᵀ S²(S²+I)⁻¹(S²+2I)⁻¹ u_r, leaving D3 = D1 − that = S²(S²+2I)⁻¹.
    const Vector s2p2 = s.cwiseAbs2().array() + 2.0;
    const Matrix dg = s.cwiseAbs2().cwiseQuotient(s2p1.cwiseProduct(s2p2)).asDiagonal();
    const Matrix d3 = s.cwiseAbs2().cwiseQuotient(s2p2).asDiagonal();
    EXPECT_LE((d1 - dg - d3).cwiseAbs().maxCoeff(), 1e-12);
    const double gdg = smp.u_r.dot(dg * smp.u_r);
    EXPECT_NEAR(g.dot(d2 * g), gdg, 1e-8 * std::max(1.0, gdg));
    EXPECT_LE(q, 1e-10);
    EXPECT_NEAR(q, -0.5 * smp.u_r.dot(d3 * smp.u_r) - 0.5 * rg.dot(d2 * rg), 1e-8 * std::abs(q));
  }
  EXPECT_GT(checked, 45);
}

TEST(Batch, WorkerCountInvariance) {
  const auto fx = EllipticFixture::make(32, 26);
  const HyperParams t{fx.lambda_true, 1.0, 1.0};
  const RtoMap map(fx.problem, t, truth_on_grid(fx.grid));
  const auto a = sample_rto_batch(map, 16, 27, 1);
  const auto b = sample_rto_batch(map, 16, 27, 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].u, b[i].u);
    EXPECT_EQ(a[i].log_weight, b[i].log_weight);
  }
}

TEST(Batch, EllipticConvergenceRate) {
  const auto fx = EllipticFixture::make(64, 28);
  const HyperParams t{fx.lambda_true, 1.0, 1.0};
  const Vector u_star = find_map(fx.problem, fx.problem.prior(t), t.lambda, Vector::Zero(64)).u;
  const RtoMap map(fx.problem, t, u_star);
  const auto samples = sample_rto_batch(map, 400, 29);
  int failed = 0;
  for (const auto& s : samples) failed += s.converged ? 0 : 1;
  EXPECT_LT(failed, 4);
}

TEST(Batch, LinearExactness) {
  Rng rng(30);
  const Matrix a = Matrix::Random(4, 3);
  auto model = std::make_shared<LinearModel>(a);
  auto ops = std::make_shared<const PriorOperators>(Grid::interval(3));
  const Vector y = standard_normal(4, rng);
  const BayesProblem p(model, ops, Vector::Zero(3), HyperPrior{}, y, LikelihoodKind::gaussian);
  const HyperParams t{2.0, 1.5, 0.8};
  const RtoMap map(p, t, Vector::Zero(3));
  const Matrix post_prec = t.lambda * a.transpose() * a + dense_precision(map.prior());
  const Matrix cov = post_prec.inverse();
  const Vector mean = cov * (t.lambda * a.transpose() * y);
  const auto samples = sample_rto_batch(map, 10000, 31);
  Vector sm = Vector::Zero(3);
  for (const auto& s : samples) sm += s.u;
  sm /= 10000.0;
  Matrix sc = Matrix::Zero(3, 3);
  for (const auto& s : samples) sc += (s.u - sm) * (s.u - sm).transpose();
  sc /= 9999.0;
  const double scale = cov.diagonal().cwiseSqrt().maxCoeff();
  for (Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(sm[i], mean[i], 0.05 * std::max(std::abs(mean[i]), scale));
    for (Index j = 0; j < 3; ++j) {
      EXPECT_NEAR(sc(i, j), cov(i, j), 0.05 * std::sqrt(cov(i, i) * cov(j, j)));
    }
  }
}
