#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "chordmorse/config.hpp"

using namespace chordmorse;

namespace {

Vec v2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

ApproximationSpec spec(int K, double ell) {
  ApproximationSpec s;
  s.K = K;
  s.length_bound = ell;
  return s;
}

PathSpace flat_torus_point() {
  auto M = ManifoldModel::unit_torus(2);
  auto N = SubmanifoldModel::point(M, v2(0, 0));
  return PathSpace(M, N, N);
}

RunConfig shipped(const std::string& name) { return load_config(std::string(CHORD_MORSE_SOURCE_DIR) + "/configs/" + name); }

// The perturbed torus complex is expensive; build it once for the suite.
class PerturbedTorus : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new RunConfig(shipped("perturbed_torus_circle.json"));
    complex_ = new MorseComplex(build_complex(cfg_->space(), cfg_->system(), cfg_->spec, cfg_->controls));
  }
  static void TearDownTestSuite() {
    delete complex_;
    delete cfg_;
  }
  static RunConfig* cfg_;
  static MorseComplex* complex_;
};
RunConfig* PerturbedTorus::cfg_ = nullptr;
MorseComplex* PerturbedTorus::complex_ = nullptr;

std::multiset<std::tuple<int, int, int, GroupElement>> lines_of(const std::vector<FlowLine>& ls) {
  std::multiset<std::tuple<int, int, int, GroupElement>> out;
  for (const auto& l : ls) out.emplace(l.x, l.y, l.sign, l.g);
  return out;
}

}  // namespace

TEST(Flow, ReturnsToMinimumMonotonically) {
  PathSpace X = flat_torus_point();
  auto s = find_chords(X, spec(16, 1.5));
  FlowField F(X, s.chords, MorseControls{});
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  for (int c : {0, 5}) {
    const auto& ch = s.chords[c];
    Vec dz(X.dof(16));
    for (auto& e : dz) e = n01(rng);
    dz *= 0.02 * ch.length / dz.norm();
    FlowResult r = F.flow(X.retract(ch.path, dz));
    EXPECT_EQ(r.status, FlowStatus::converged) << flow_status_name(r.status);
    EXPECT_EQ(r.chord, c);
    EXPECT_TRUE(r.monotone);
    for (std::size_t i = 1; i < r.energies.size(); ++i) EXPECT_LT(r.energies[i], r.energies[i - 1]);
  }
}

TEST(Flow, ShortLoopsAreAbsorbed) {
  PathSpace X = flat_torus_point();
  auto s = find_chords(X, spec(16, 1.5));
  FlowField F(X, s.chords, MorseControls{});
  BrokenPath p = X.constant_path(16);
  Vec dz = Vec::Zero(X.dof(16));
  dz[3] = 0.01;
  dz[8] = -0.02;
  FlowResult r = F.flow(X.retract(p, dz));
  EXPECT_EQ(r.status, FlowStatus::absorbed);
  EXPECT_LT(r.energies.back(), F.absorption_energy());
}

TEST(UnstableSphere, SampleSets) {
  GeodesicChord c;
  c.index = 0;
  EXPECT_TRUE(unstable_sphere(c, 16).empty());
  c.index = 1;
  auto s0 = unstable_sphere(c, 16);
  ASSERT_EQ(s0.size(), 2u);
  EXPECT_EQ(s0[0].v[0], 1.0);
  EXPECT_EQ(s0[1].v[0], -1.0);
  c.index = 2;
  auto s1 = unstable_sphere(c, 24);
  ASSERT_EQ(s1.size(), 24u);
  for (std::size_t i = 0; i < s1.size(); ++i) {
    EXPECT_NEAR(s1[i].v.norm(), 1.0, 1e-15);
    // counterclockwise
    if (i > 0) EXPECT_GT(s1[i - 1].v[0] * s1[i].v[1] - s1[i - 1].v[1] * s1[i].v[0], 0.0);
  }
  c.index = 4;
  EXPECT_THROW(unstable_sphere(c, 16), ResolutionError);
}

TEST(UnstableSphere, MeshIsClosedOrientedSphere) {
  for (int target : {6, 20, 64, 128, 300}) {
    SphereMesh m = sphere_mesh(target);
    std::map<std::pair<int, int>, int> edges;
    for (const auto& f : m.faces) {
      Eigen::Vector3d A = m.vertices[f[0]], B = m.vertices[f[1]], C = m.vertices[f[2]];
      EXPECT_GT((B - A).cross(C - A).dot(A + B + C), 0.0) << target;
      for (int e = 0; e < 3; ++e) ++edges[{f[e], f[(e + 1) % 3]}];
    }
    for (const auto& [e, count] : edges) {
      EXPECT_EQ(count, 1);
      EXPECT_EQ(edges.count({e.second, e.first}), 1u) << "edge without its reverse";
    }
    const long V = static_cast<long>(m.vertices.size()), E = static_cast<long>(edges.size() / 2), Fc = static_cast<long>(m.faces.size());
    EXPECT_EQ(V - E + Fc, 2) << target;
    for (const auto& v : m.vertices) EXPECT_NEAR(v.norm(), 1.0, 1e-14);
  }
}

TEST(Complex, FlatTorusHasZeroDifferential) {
  PathSpace X = flat_torus_point();
  auto mc = build_complex(X, LocalSystem::trivial(X.group()), spec(16, 1.5));
  ASSERT_EQ(mc.by_degree.size(), 1u);
  EXPECT_EQ(mc.by_degree[0].size(), 8u);
  EXPECT_TRUE(mc.flow_lines.empty());
  auto h = homology_over_Z(mc.chain());
  EXPECT_EQ(h.ranks(), std::vector<long long>{8});
}

TEST(Complex, InadmissibleApproximationIsRejected) {
  PathSpace X = flat_torus_point();
  // ell^2 < K * injrad^2 fails for K = 8 at ell = 1.5 on the unit torus
  EXPECT_THROW(build_complex(X, LocalSystem::trivial(X.group()), spec(8, 1.5)), AdmissibilityError);
}

TEST(Complex, DegenerateFamilyIsRejected) {
  auto M = ManifoldModel::unit_torus(2);
  SubmanifoldPart p;
  p.kind = SubmanifoldPart::Kind::subtorus;
  p.base = v2(0, 0);
  p.directions = v2(1, 0);
  SubmanifoldModel N(M, {p});
  PathSpace X(M, N, N);
  EXPECT_THROW(build_complex(X, free_system(X.group()), spec(8, 1.2)), DegeneracyError);
}

TEST_F(PerturbedTorus, DifferentialIsOneMinusT) {
  const MorseComplex& mc = *complex_;
  ASSERT_EQ(mc.by_degree.size(), 2u);
  ASSERT_EQ(mc.by_degree[0].size(), 2u);
  ASSERT_EQ(mc.by_degree[1].size(), 2u);
  const Laurent one(1, BigInt(1)), t = Laurent::variable(1, 0);
  const RingMatrix& d = mc.differential[1];
  for (std::size_t j = 0; j < d.cols; ++j) {
    int nonzero = 0;
    for (std::size_t i = 0; i < d.rows; ++i) {
      const Laurent& e = d(i, j);
      if (e.is_zero()) continue;
      ++nonzero;
      EXPECT_TRUE(e == one - t || e == t - one) << e.str();
      EXPECT_EQ(mc.chords[mc.generators[mc.by_degree[0][i]].chord].label, mc.chords[mc.generators[mc.by_degree[1][j]].chord].label);
    }
    EXPECT_EQ(nonzero, 1);
  }
  // two lines per saddle, opposite signs, classes differing by the generator
  EXPECT_EQ(mc.flow_lines.size(), 4u);
  std::map<int, int> sign_sum;
  for (const auto& l : mc.flow_lines) sign_sum[l.x] += l.sign;
  for (const auto& [x, s] : sign_sum) EXPECT_EQ(s, 0);
}

TEST_F(PerturbedTorus, HomologyOverLaurentRing) {
  auto h = homology_rank_laurent(complex_->chain());
  ASSERT_EQ(h.degrees.size(), 2u);
  EXPECT_EQ(h.field_ranks(), (std::vector<long long>{0, 0}));
  EXPECT_EQ(h.degrees[0].certificate.status, ModuleCertificate::Status::nonzero);
  EXPECT_EQ(h.degrees[1].certificate.status, ModuleCertificate::Status::zero);
  // at t = 1 the differential vanishes
  auto z = homology_over_Z(augment(complex_->chain()));
  EXPECT_EQ(z.ranks(), (std::vector<long long>{2, 2}));
}

TEST_F(PerturbedTorus, CountsStableUnderEpsilonAndResolution) {
  const MorseComplex& mc = *complex_;
  FlowField F(mc.space, mc.chords, mc.controls);
  for (const auto& c : mc.chords) {
    if (c.index != 1) continue;
    auto base = lines_of(count_outgoing(F, c.id, mc.controls.epsilon, mc.controls.resolution).lines);
    auto half = lines_of(count_outgoing(F, c.id, mc.controls.epsilon / 2, mc.controls.resolution).lines);
    auto fine = lines_of(count_outgoing(F, c.id, mc.controls.epsilon, 2 * mc.controls.resolution).lines);
    EXPECT_EQ(base.size(), 2u);
    EXPECT_EQ(base, half);
    EXPECT_EQ(base, fine);
  }
}

TEST_F(PerturbedTorus, ReversingOrientationFlipsSigns) {
  const MorseComplex& mc = *complex_;
  FlowField F(mc.space, mc.chords, mc.controls);
  auto flipped = mc.chords;
  for (auto& c : flipped)
    if (c.index == 1) c.unstable = -c.unstable;
  FlowField G(mc.space, flipped, mc.controls);
  for (const auto& c : mc.chords) {
    if (c.index != 1) continue;
    auto a = count_outgoing(F, c.id, mc.controls.epsilon, mc.controls.resolution).lines;
    auto b = count_outgoing(G, c.id, mc.controls.epsilon, mc.controls.resolution).lines;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end(), [](const FlowLine& p, const FlowLine& q) {
      FlowLine pp = p, qq = q;
      pp.sign = -pp.sign;
      qq.sign = -qq.sign;
      return pp < qq;
    });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].y, b[i].y);
      EXPECT_EQ(a[i].g, b[i].g);
      EXPECT_EQ(a[i].sign, -b[i].sign);
    }
  }
}

TEST_F(PerturbedTorus, ContinuationUnderRefinementIsIdentity) {
  ApproximationSpec fine = cfg_->spec;
  fine.K *= 2;
  auto mc2 = build_complex(cfg_->space(), cfg_->system(), fine, cfg_->controls);
  auto r = continuation_matrix(*complex_, mc2);
  EXPECT_TRUE(r.chain_map);
  EXPECT_TRUE(r.unit_upper_triangular);
  EXPECT_EQ(r.matrix, RingMatrix::identity(1, 4));
}

TEST(Continuation, FlatTorusIdentityAndInclusion) {
  PathSpace X = flat_torus_point();
  auto sys = LocalSystem::trivial(X.group());
  auto a = build_complex(X, sys, spec(16, 1.5));
  auto b = build_complex(X, sys, spec(32, 1.5));
  auto c = build_complex(X, sys, spec(32, 2.5));
  auto same = continuation_matrix(a, a);
  EXPECT_EQ(same.matrix, RingMatrix::identity(0, 8));
  auto refine = continuation_matrix(a, b);
  EXPECT_TRUE(refine.unit_upper_triangular);
  EXPECT_EQ(refine.matrix, RingMatrix::identity(0, 8));
  auto grow = continuation_matrix(b, c);
  EXPECT_TRUE(grow.chain_map);
  ASSERT_EQ(grow.matrix.rows, 20u);
  ASSERT_EQ(grow.matrix.cols, 8u);
  // basis inclusion: each generator goes to the generator with its label
  for (std::size_t j = 0; j < 8; ++j)
    for (std::size_t i = 0; i < 20; ++i) {
      bool same_label = c.generators[i].label == b.generators[j].label;
      EXPECT_TRUE(grow.matrix(i, j) == Laurent(0, BigInt(same_label ? 1 : 0))) << i << "," << j;
    }
  EXPECT_THROW(continuation_matrix(c, b), DomainError);
}

TEST(Continuation, UnitriangularInverseOnRandomMatrices) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> coef(-3, 3), size(1, 7), power(-2, 2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = size(rng), nvars = trial % 2;
    RingMatrix m = RingMatrix::identity(nvars, n);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) {
        Laurent e(nvars, BigInt(coef(rng)));
        if (nvars == 1) e = e * Laurent::monomial({power(rng)});
        m(i, j) = e;
      }
    RingMatrix inv = unitriangular_inverse(m);
    EXPECT_EQ(inv * m, RingMatrix::identity(nvars, n));
    EXPECT_EQ(m * inv, RingMatrix::identity(nvars, n));
  }
}
