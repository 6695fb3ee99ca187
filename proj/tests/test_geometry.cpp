#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "chordmorse/geometry.hpp"

using namespace chordmorse;

namespace {

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}
Vec v3(double a, double b, double c) {
  Vec v(3);
  v << a, b, c;
  return v;
}

// Point on the unit sphere from polar angle theta (from +z) and azimuth phi.
Vec sph(double theta, double phi) { return v3(std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)); }

ManifoldModel bumpy_torus() {
  std::vector<Bump> bumps = {{v2(0.2, 0.3), 0.4, 1.0}, {v2(0.7, 0.6), 0.35, -0.8}, {v2(0.45, 0.9), 0.42, 0.6}};
  return ManifoldModel::unit_torus(2).with_bumps(0, 0.05, bumps);
}

ManifoldModel bumpy_sphere() {
  std::vector<Bump> bumps = {{sph(0.7, 0.2), 0.5, 1.0}, {sph(2.0, 2.5), 0.6, -0.7}};
  return ManifoldModel::ellipsoid(Eigen::Vector3d(1.0, 1.02, 1.05)).with_bumps(0, 0.04, bumps);
}

}  // namespace

TEST(Metric, FlatTorusIdentity) {
  auto M = ManifoldModel::unit_torus(2);
  ChartPoint p{0, v2(0.3, 0.7)};
  EXPECT_TRUE(M.metric_at(p).isApprox(Mat::Identity(2, 2)));
}

TEST(Metric, ZeroPerturbationIsBitExact) {
  auto M = ManifoldModel::unit_torus(2);
  auto P = M.with_random_perturbation(0.0, 12345);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    ChartPoint p{0, v2(uniform01(rng), uniform01(rng))};
    Mat a = M.metric_at(p), b = P.metric_at(p);
    EXPECT_EQ(a, b);
  }
}

TEST(Metric, SphereNorthChartOrigin) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d::Ones());
  // stereographic chart: 4 / (1 + |u|^2)^2 times the identity
  EXPECT_TRUE(M.metric_at({0, v2(0, 0)}).isApprox(4.0 * Mat::Identity(2, 2), 1e-14));
  Mat g = M.metric_at({1, v2(0.3, -0.4)});
  double f = 4.0 / std::pow(1.0 + 0.25, 2);
  EXPECT_NEAR(g(0, 0), f, 1e-13);
  EXPECT_NEAR(g(0, 1), 0.0, 1e-13);
  EXPECT_THROW(M.metric_at({2, v2(0, 0)}), DomainError);
}

TEST(Metric, ChartRoundTrip) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d(1.0, 1.02, 1.05));
  Vec x = M.project(v3(0.3, -0.5, 0.8));
  for (int c = 0; c < 2; ++c) {
    Vec u = M.chart_coords(c, x);
    EXPECT_LT((M.embed({c, u}) - x).norm(), 1e-14);
  }
}

TEST(Metric, ChartSecondDerivativesMatchFiniteDifferences) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d(1.0, 1.02, 1.05));
  ChartPoint p{1, v2(0.2, -0.35)};
  auto H = M.chart_hessians(p);
  const double h = 1e-5;
  for (int a = 0; a < 2; ++a) {
    ChartPoint pp = p, pm = p;
    pp.u[a] += h;
    pm.u[a] -= h;
    Mat dJ = (M.chart_jacobian(pp) - M.chart_jacobian(pm)) / (2 * h);
    for (int r = 0; r < 3; ++r)
      for (int b = 0; b < 2; ++b) EXPECT_NEAR(H[r](b, a), dJ(r, b), 1e-8);
  }
}

TEST(Geodesic, FlatSegment) {
  auto M = ManifoldModel::unit_torus(2);
  auto g = M.minimal_geodesic(v2(0, 0), v2(0.3, 0));
  EXPECT_NEAR(g.length, 0.3, 1e-15);
  EXPECT_LT(M.geodesic_residual(g), 1e-12);
}

TEST(Geodesic, WrapsToNearestImage) {
  auto M = ManifoldModel::unit_torus(2);
  EXPECT_NEAR(M.distance(v2(0.1, 0.1), v2(0.9, 0.95)), std::hypot(0.2, 0.15), 1e-14);
}

TEST(Geodesic, InjectivityBoundaryIsExcluded) {
  auto M = ManifoldModel::unit_torus(2);
  EXPECT_THROW(M.minimal_geodesic(v2(0, 0), v2(0.5, 0)), AdmissibilityError);
}

TEST(Geodesic, SphereMeridian) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d::Ones());
  auto g = M.minimal_geodesic(sph(0.4, 0.3), sph(0.9, 0.3));
  EXPECT_NEAR(g.length, 0.5, 1e-11);
  EXPECT_LT(M.geodesic_residual(g), 1e-8);
  // samples lie on the meridian plane
  for (const auto& x : g.x) EXPECT_NEAR(x[0] * std::sin(0.3) - x[1] * std::cos(0.3), 0.0, 1e-11);
}

TEST(Geodesic, GreatCircleArcGeneric) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d::Ones());
  Vec a = sph(1.1, -0.4), b = sph(2.2, 1.9);
  double oracle = std::acos(a.dot(b));
  EXPECT_NEAR(M.distance(a, b), oracle, 1e-11);
}

TEST(Geodesic, PerturbedResidualAndSymmetry) {
  for (const auto& M : {bumpy_torus(), bumpy_sphere()}) {
    std::mt19937_64 rng(11);
    for (int k = 0; k < 6; ++k) {
      Vec a(M.ambient_dim()), b(M.ambient_dim()), c(M.ambient_dim());
      for (int i = 0; i < M.ambient_dim(); ++i) {
        a[i] = uniform01(rng) - 0.5;
        b[i] = a[i] + 0.4 * (uniform01(rng) - 0.5);
        c[i] = a[i] + 0.4 * (uniform01(rng) - 0.5);
      }
      a = M.project(a);
      b = M.project(b);
      c = M.project(c);
      auto g = M.minimal_geodesic(a, b);
      EXPECT_LT(M.geodesic_residual(g), 1e-8);
      double dab = g.length, dba = M.distance(b, a);
      EXPECT_NEAR(dab, dba, 1e-9);
      EXPECT_LE(dab, M.distance(a, c) + M.distance(c, b) + 1e-9);
    }
  }
}

TEST(Injrad, Presets) {
  EXPECT_DOUBLE_EQ(ManifoldModel::unit_torus(2).injectivity_radius_bound(), 0.5);
  EXPECT_DOUBLE_EQ(ManifoldModel::ellipsoid(Eigen::Vector3d::Ones()).injectivity_radius_bound(), M_PI);
  EXPECT_DOUBLE_EQ(ManifoldModel::unit_torus(2).with_random_perturbation(0.0, 5).injectivity_radius_bound(), 0.5);
  auto P = bumpy_torus();
  double r = P.injectivity_radius_bound();
  EXPECT_GT(r, 0.0);
  EXPECT_LT(r, 0.5);
  Mat L(2, 2);
  L << 1, 0.5, 0, 2;
  EXPECT_DOUBLE_EQ(ManifoldModel::flat_torus(L).injectivity_radius_bound(), 0.5);
  EXPECT_THROW(ManifoldModel::unit_torus(2).with_random_perturbation(0.2, 1).injectivity_radius_bound(), ConfigError);
}

TEST(Jacobi, FlatFields) {
  auto M = ManifoldModel::unit_torus(2);
  auto g = M.minimal_geodesic(v2(0, 0), v2(0.3, 0.1), 11);
  auto J = M.jacobi_field(g, v2(0.2, -0.1), v2(0, 0));
  for (const auto& e : J.eta) EXPECT_LT((e - v2(0.2, -0.1)).norm(), 1e-14);
  auto K = M.jacobi_field(g, v2(0, 0), v2(0.5, 0.25));
  for (std::size_t i = 0; i < K.t.size(); ++i) EXPECT_LT((K.eta[i] - K.t[i] * v2(0.5, 0.25)).norm(), 1e-14);
}

TEST(Jacobi, UnitSphereMeridian) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d::Ones());
  Vec a = sph(0.3, 0.0), b = sph(0.3 + M_PI / 2, 0.0);
  auto g = M.minimal_geodesic(a, b, 21);
  ASSERT_NEAR(g.length, M_PI / 2, 1e-11);
  Vec eperp = v3(0, 1, 0);
  auto J = M.jacobi_field(g, Vec::Zero(3), eperp);
  for (std::size_t i = 0; i < J.t.size(); ++i) {
    Vec oracle = std::sin(J.t[i] * M_PI / 2) * (2 / M_PI) * eperp;  // e_perp is parallel along the meridian
    EXPECT_LT((J.eta[i] - oracle).norm(), 1e-10) << "t=" << J.t[i];
  }
}

TEST(Jacobi, Linearity) {
  auto M = bumpy_sphere();
  Vec a = M.project(v3(0.2, 0.1, 0.9)), b = M.project(v3(0.6, -0.3, 0.6));
  auto g = M.minimal_geodesic(a, b, 9);
  Mat T = M.tangent_frame(a);
  Vec u0 = T.col(0), u1 = T.col(1) * 0.3, w0 = T.col(1), w1 = T.col(0) - T.col(1);
  auto Ju = M.jacobi_field(g, u0, u1);
  auto Jw = M.jacobi_field(g, w0, w1);
  auto Jc = M.jacobi_field(g, 2.0 * u0 - 0.7 * w0, 2.0 * u1 - 0.7 * w1);
  for (std::size_t i = 0; i < Jc.t.size(); ++i) EXPECT_LT((Jc.eta[i] - 2.0 * Ju.eta[i] + 0.7 * Jw.eta[i]).norm(), 1e-8);
}

TEST(Submanifold, PointAndSubtorus) {
  auto M = ManifoldModel::unit_torus(2);
  SubmanifoldPart p;
  p.kind = SubmanifoldPart::Kind::subtorus;
  p.base = v2(0, 0);
  p.directions = v2(1, 0);
  SubmanifoldModel N(M, {p});
  EXPECT_EQ(N.dim(), 1);
  EXPECT_LT(N.residual(M, N.embed(Vec::Constant(1, 0.37))), 1e-15);
  EXPECT_EQ(N.tangent_basis().cols(), 1);
  p.directions = Mat::Identity(2, 2);
  EXPECT_THROW(SubmanifoldModel(M, {p}), ConfigError);
  auto S = ManifoldModel::ellipsoid(Eigen::Vector3d(1, 1.02, 1.05));
  auto Q = SubmanifoldModel::point(S, v3(0, 0, 2));
  EXPECT_NEAR(Q.basepoint()[2], 1.05, 1e-15);
}

// ---------------------------------------------------------------- path space

#include "chordmorse/pathspace.hpp"

namespace {

SubmanifoldModel horizontal_circle(const ManifoldModel& M) {
  SubmanifoldPart p;
  p.kind = SubmanifoldPart::Kind::subtorus;
  p.base = v2(0, 0);
  p.directions = v2(1, 0);
  return SubmanifoldModel(M, {p});
}

PathSpace torus_point_space(const ManifoldModel& M) {
  auto N = SubmanifoldModel::point(M, v2(0, 0));
  return PathSpace(M, N, N);
}

BrokenPath straight(const PathSpace& X, int K, const Vec& w) {
  auto c = [&](double t) { return Vec(t * w); };
  return X.sample_curve(K, Vec(0), c, Vec(0), w);
}

// Random path near a straight vertical chord on the circle model.
BrokenPath wiggly_vertical(const PathSpace& X, int K, std::mt19937_64& rng) {
  std::vector<Vec> interior;
  for (int j = 1; j < K; ++j) interior.push_back(v2(0.3 + 0.05 * (uniform01(rng) - 0.5), double(j) / K + 0.03 * (uniform01(rng) - 0.5)));
  Vec s0 = Vec::Constant(1, 0.3 + 0.02 * uniform01(rng)), sK = Vec::Constant(1, 0.3 - 0.02 * uniform01(rng));
  return X.make_path(K, s0, interior, sK, v2(0, 1));
}

// Path on the ellipsoid between two points along a perturbed great circle.
BrokenPath wiggly_arc(const PathSpace& X, int K, double total_angle, std::mt19937_64& rng) {
  std::vector<Vec> interior;
  for (int j = 1; j < K; ++j) {
    double th = 0.3 + total_angle * j / K;
    interior.push_back(sph(th, 0.1 + 0.1 * (uniform01(rng) - 0.5)) + 0.02 * v3(uniform01(rng), uniform01(rng), uniform01(rng)));
  }
  return X.make_path(K, Vec(0), interior, Vec(0), Vec::Zero(3));
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12}); }

void check_derivatives(const PathSpace& X, const BrokenPath& p, std::mt19937_64& rng) {
  auto ev = X.evaluate(p, 2);
  const int d = X.dof(p.K);
  EXPECT_LT((ev.hessian - ev.hessian.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  for (int trial = 0; trial < 3; ++trial) {
    Vec dir(d);
    for (int i = 0; i < d; ++i) dir[i] = uniform01(rng) - 0.5;
    const double h = 1e-5;
    double fd = (X.energy(X.retract(p, h * dir)) - X.energy(X.retract(p, -h * dir))) / (2 * h);
    EXPECT_LT(rel_err(fd, ev.gradient.dot(dir)), 1e-5);
    const double h2 = 1e-5;
    Vec gfd = (X.energy_gradient(X.retract(p, h2 * dir)) - X.energy_gradient(X.retract(p, -h2 * dir))) / (2 * h2);
    Vec hd = ev.hessian * dir;
    EXPECT_LT((gfd - hd).norm() / std::max(hd.norm(), 1e-12), 1e-4);
  }
}

}  // namespace

TEST(PathEnergy, ConstantPathIsZero) {
  auto X = torus_point_space(ManifoldModel::unit_torus(2));
  auto p = X.constant_path(4);
  auto ev = X.evaluate(p, 2);
  EXPECT_EQ(ev.energy, 0.0);
  EXPECT_EQ(ev.gradient.norm(), 0.0);
  Eigen::SelfAdjointEigenSolver<Mat> es(ev.hessian);
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
}

TEST(PathEnergy, StraightTorusLift) {
  auto X = torus_point_space(ManifoldModel::unit_torus(2));
  auto p = straight(X, 4, v2(1, 0));
  EXPECT_NEAR(X.energy(p), 1.0, 1e-15);
  EXPECT_LT(X.energy_gradient(p).norm(), 1e-13);
}

TEST(PathEnergy, SphereMeridianHalfCircle) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d::Ones());
  auto X = PathSpace(M, SubmanifoldModel::point(M, sph(0.0, 0)), SubmanifoldModel::point(M, sph(M_PI, 0)));
  auto p = X.sample_curve(8, Vec(0), [](double t) { return sph(M_PI * t, 0.0); }, Vec(0), Vec::Zero(3));
  EXPECT_NEAR(X.energy(p), M_PI * M_PI, 1e-6);
  EXPECT_LT(X.energy_gradient(p).norm(), 1e-8);
}

TEST(PathEnergy, DisplacedNodeGradientIsVelocityJump) {
  auto X = torus_point_space(ManifoldModel::unit_torus(2));
  auto p = straight(X, 4, v2(1, 0));
  for (double delta : {1e-2, 5e-3}) {
    auto q = X.retract(p, [&] {
      Vec dz = Vec::Zero(X.dof(4));
      dz[2 * 1 + 1] = delta;  // node 2, y coordinate
      return dz;
    }());
    Vec g = X.energy_gradient(q);
    // jump of velocities at node 2: 2K (v_in - v_out) = 2K * (2 delta) in y
    EXPECT_NEAR(g[3], 2 * 4 * 2 * delta, 1e-12);
    EXPECT_NEAR(g[1], -2 * 4 * delta, 1e-12);
  }
}

TEST(PathEnergy, DerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(101);
  {
    auto M = bumpy_torus();
    auto N = horizontal_circle(M);
    PathSpace X(M, N, N);
    check_derivatives(X, wiggly_vertical(X, 8, rng), rng);
  }
  {
    auto M = bumpy_sphere();
    PathSpace X(M, SubmanifoldModel::point(M, sph(0.3, 0.1)), SubmanifoldModel::point(M, sph(2.9, 0.1)));
    check_derivatives(X, wiggly_arc(X, 6, 2.6, rng), rng);
  }
  {
    auto M = ManifoldModel::ellipsoid(Eigen::Vector3d(1.0, 1.02, 1.05));
    PathSpace X(M, SubmanifoldModel::point(M, sph(0.3, 0.1)), SubmanifoldModel::point(M, sph(2.9, 0.1)));
    check_derivatives(X, wiggly_arc(X, 12, 2 * M_PI + 2.6, rng), rng);
  }
  {
    auto M = ManifoldModel::product(ManifoldModel::unit_torus(1), bumpy_sphere());
    Vec a(4), b(4);
    a << 0.0, sph(0.4, 0.2);
    b << 0.0, sph(1.5, 0.9);
    PathSpace X(M, SubmanifoldModel::point(M, a), SubmanifoldModel::point(M, b));
    std::vector<Vec> interior;
    for (int j = 1; j < 5; ++j) {
      Vec x = ((5 - j) * a + j * b) / 5.0;
      x[0] = 0.2 * j + 0.05 * uniform01(rng);
      interior.push_back(x);
    }
    Vec off = Vec::Zero(4);
    off[0] = 1;
    check_derivatives(X, X.make_path(5, Vec(0), interior, Vec(0), off), rng);
  }
}

TEST(PathSpaceOps, RefinePreservesEnergy) {
  std::mt19937_64 rng(5);
  auto M = bumpy_torus();
  auto N = horizontal_circle(M);
  PathSpace X(M, N, N);
  auto p = wiggly_vertical(X, 4, rng);
  double e = X.energy(p);
  auto p2 = X.refine(p, 2);
  EXPECT_EQ(p2.K, 8);
  EXPECT_NEAR(X.energy(p2), e, 1e-11);
  EXPECT_EQ(X.refine(p, 1).nodes, p.nodes);
  auto a = X.refine(X.refine(p, 2), 3), b = X.refine(p, 6);
  for (int j = 0; j <= 24; ++j) EXPECT_LT((a.nodes[j] - b.nodes[j]).norm(), 1e-11);
  auto Y = torus_point_space(ManifoldModel::unit_torus(2));
  EXPECT_NEAR(Y.energy(Y.refine(straight(Y, 4, v2(1, 0)), 2)), 1.0, 1e-15);
}

TEST(PathSpaceOps, Admissibility) {
  auto X = torus_point_space(ManifoldModel::unit_torus(2));
  ApproximationSpec s{16, 1.9};
  EXPECT_TRUE(X.is_admissible(s, {1.0, std::sqrt(2.0)}, 3.0).admissible);
  s.length_bound = 2.1;
  auto r = X.is_admissible(s, {1.0, std::sqrt(2.0), 2.0}, 3.0);
  EXPECT_FALSE(r.admissible);
  EXPECT_EQ(r.binding, "injectivity");
  s.length_bound = 1e-3;
  EXPECT_TRUE(X.is_admissible(s, {}, 1.0).admissible);
  s.length_bound = 1.0005;
  s.K = 16;
  EXPECT_EQ(X.is_admissible(s, {1.0}, 3.0).binding, "regular-value");
  EXPECT_THROW(X.is_admissible(s, {1.0}, 1.0), InsufficientDataError);
}

TEST(PathSpaceOps, LabelsAndDeckAction) {
  auto M = ManifoldModel::unit_torus(2);
  auto N = horizontal_circle(M);
  PathSpace X(M, N, N);
  EXPECT_EQ(X.group_rank(), 1);
  std::mt19937_64 rng(9);
  auto p = wiggly_vertical(X, 6, rng);
  EXPECT_EQ(X.label(p), (GroupElement{0, 1}));
  auto q = X.translate(p, {3});
  EXPECT_NEAR(X.energy(q), X.energy(p), 1e-14);
  EXPECT_EQ(X.label(q), X.label(p));
  GroupElement g;
  auto c = X.canonical(q, &g);
  EXPECT_EQ(g, GroupElement{-3});
  EXPECT_LT(X.difference(c, p).norm(), 1e-12);
  // moving the end parameter by a full turn is the same path
  BrokenPath r = q;
  r.sK[0] += 1;
  r.end_offset[0] -= 1;
  EXPECT_EQ(X.label(r), X.label(p));
}

TEST(PathSpaceOps, JsonRoundTrip) {
  auto M = ManifoldModel::ellipsoid(Eigen::Vector3d(1.0, 1.02, 1.05));
  PathSpace X(M, SubmanifoldModel::point(M, sph(0.3, 0.1)), SubmanifoldModel::point(M, sph(2.9, 0.1)));
  std::mt19937_64 rng(2);
  auto p = wiggly_arc(X, 5, 2.6, rng);
  auto q = X.from_json(X.to_json(p));
  for (int j = 0; j <= 5; ++j) EXPECT_LT((p.nodes[j] - q.nodes[j]).norm(), 1e-15);
}

TEST(PathSpaceOps, CompactnessLemma) {
  std::mt19937_64 rng(4);
  auto M = bumpy_torus();
  auto N = horizontal_circle(M);
  PathSpace X(M, N, N);
  for (int k = 0; k < 5; ++k) {
    auto ev = X.evaluate(wiggly_vertical(X, 8, rng), 0);
    EXPECT_TRUE(PathSpace::compactness_holds(ev, 8, 0.9 * M.injectivity_radius_bound()));
  }
}
