#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "chordmorse/filtration.hpp"
#include "chordmorse/homology.hpp"
#include "chordmorse/laurent.hpp"
#include "chordmorse/localsys.hpp"

using namespace chordmorse;

namespace {

IntMatrix random_int_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, int lo = -9, int hi = 9) {
  std::uniform_int_distribution<int> d(lo, hi);
  IntMatrix m(r, std::vector<BigInt>(c));
  for (auto& row : m)
    for (auto& x : row) x = d(rng);
  return m;
}

// Bareiss determinant, independent of the library's elimination.
BigInt bareiss_det(IntMatrix a) {
  const std::size_t n = a.size();
  if (n == 0) return 1;
  BigInt sign = 1, prev = 1;
  for (std::size_t k = 0; k + 1 < n; ++k) {
    if (a[k][k] == 0) {
      std::size_t p = k + 1;
      while (p < n && a[p][k] == 0) ++p;
      if (p == n) return 0;
      std::swap(a[k], a[p]);
      sign = -sign;
    }
    for (std::size_t i = k + 1; i < n; ++i)
      for (std::size_t j = k + 1; j < n; ++j) a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
    prev = a[k][k];
  }
  return sign * a[n - 1][n - 1];
}

BigInt gcd_big(BigInt a, BigInt b) {
  if (a < 0) a = -a;
  if (b < 0) b = -b;
  while (b != 0) {
    BigInt t = a % b;
    a = b;
    b = t;
  }
  return a;
}

// Determinantal divisors: gcd of all k x k minors (brute force over subsets).
std::vector<BigInt> determinantal_divisors(const IntMatrix& A) {
  const std::size_t m = A.size(), n = m ? A[0].size() : 0;
  std::vector<BigInt> out;
  for (std::size_t k = 1; k <= std::min(m, n); ++k) {
    BigInt g = 0;
    std::vector<bool> rs(m, false), cs(n, false);
    std::fill(rs.begin(), rs.begin() + k, true);
    do {
      std::fill(cs.begin(), cs.end(), false);
      std::fill(cs.begin(), cs.begin() + k, true);
      do {
        IntMatrix sub;
        for (std::size_t i = 0; i < m; ++i) {
          if (!rs[i]) continue;
          std::vector<BigInt> row;
          for (std::size_t j = 0; j < n; ++j)
            if (cs[j]) row.push_back(A[i][j]);
          sub.push_back(row);
        }
        g = gcd_big(g, bareiss_det(sub));
      } while (std::prev_permutation(cs.begin(), cs.end()));
    } while (std::prev_permutation(rs.begin(), rs.end()));
    out.push_back(g);
  }
  return out;
}

std::size_t rational_rank_oracle(const IntMatrix& A) {
  std::vector<std::vector<BigRational>> a;
  for (const auto& row : A) {
    std::vector<BigRational> r;
    for (const auto& x : row) r.emplace_back(x);
    a.push_back(r);
  }
  std::size_t rank = 0;
  const std::size_t m = a.size(), n = m ? a[0].size() : 0;
  for (std::size_t c = 0; c < n && rank < m; ++c) {
    std::size_t p = rank;
    while (p < m && a[p][c] == 0) ++p;
    if (p == m) continue;
    std::swap(a[p], a[rank]);
    for (std::size_t i = 0; i < m; ++i) {
      if (i == rank || a[i][c] == 0) continue;
      BigRational f = a[i][c] / a[rank][c];
      for (std::size_t j = c; j < n; ++j) a[i][j] -= f * a[rank][j];
    }
    ++rank;
  }
  return rank;
}

RingMatrix to_ring(const IntMatrix& A, std::size_t cols) {
  RingMatrix m(0, A.size(), cols);
  for (std::size_t i = 0; i < A.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = Laurent(0, A[i][j]);
  return m;
}

Laurent t1() { return Laurent::variable(1, 0); }

CWModel circle_model() {
  CWModel m;
  m.name = "circle";
  m.group_rank = 1;
  m.cells = {{"v", 0, false, {}}, {"e", 1, false, {{"v", 1, {1}}, {"v", -1, {0}}}}};
  return m;
}

}  // namespace

// ------------------------------------------------------------------ Laurent ring

TEST(Laurent, ParsePrintRoundTrip) {
  for (std::string s : {"1-t1", "t1^-2+3*t2-5", "0", "-t1*t2^3", "7"}) {
    Laurent x = Laurent::parse(s, 2);
    EXPECT_EQ(Laurent::parse(x.str(), 2), x) << s;
  }
}

TEST(Laurent, ArithmeticAndUnits) {
  Laurent t = t1(), one(1, 1);
  Laurent a = one - t, b = one + t;
  EXPECT_EQ(a * b, one - t * t);
  EXPECT_EQ(exact_div(one - t * t, a), b);
  EXPECT_TRUE(t.is_unit());
  EXPECT_TRUE((-t).is_unit());
  EXPECT_FALSE(a.is_unit());
  EXPECT_FALSE(Laurent(1, 2).is_unit());
  EXPECT_EQ(a.evaluate_integer({1}), 0);
  EXPECT_EQ(a.evaluate_integer({-1}), 2);
}

// ------------------------------------------------------------------ local systems

TEST(LocalSystem, MonodromyExamples) {
  auto G = GroupModel::free_abelian(2);
  EXPECT_EQ(LocalSystem::trivial(G).monodromy({5, -2}), RingMatrix::identity(0, 1));
  nlohmann::json j = {{"group", "Z^2"}, {"rank", 1}, {"monodromy", {{"g1", {{-1}}}, {"g2", {{1}}}}}};
  auto L = local_system_from_json(j, G);
  EXPECT_EQ(L.monodromy({3, 5})(0, 0), Laurent(0, -1));
  EXPECT_EQ(L.monodromy({0, 0}), RingMatrix::identity(0, 1));
  auto F = free_system(G);
  EXPECT_TRUE(F.is_free());
  EXPECT_EQ(F.monodromy({1, 0})(0, 0), Laurent::variable(2, 0));
  EXPECT_EQ(F.monodromy({-2, 1})(0, 0), Laurent::monomial({-2, 1}));
  EXPECT_EQ(free_system(GroupModel::free_abelian(1)).monodromy({1})(0, 0), t1());
  EXPECT_FALSE(free_system(GroupModel::trivial()).over_laurent());
  EXPECT_THROW(free_system(GroupModel::finite_cyclic(3)), UnsupportedError);
}

TEST(LocalSystem, MonodromyIsHomomorphismOnRandomWords) {
  auto G = GroupModel::free_abelian(2);
  // rank-2 integer system: commuting unimodular matrices (powers of one matrix)
  RingMatrix A(0, 2, 2);
  A(0, 0) = Laurent(0, 2);
  A(0, 1) = Laurent(0, 1);
  A(1, 0) = Laurent(0, 1);
  A(1, 1) = Laurent(0, 1);
  LocalSystem L(G, 0, 2, {A, A * A}, false);
  auto F = free_system(G);
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> len(1, 10), gen(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    GroupElement total = G.identity();
    RingMatrix prodL = RingMatrix::identity(0, 2), prodF = RingMatrix::identity(2, 1);
    for (int k = len(rng); k > 0; --k) {
      int g = gen(rng);
      GroupElement e = G.identity();
      e[g / 2] = g % 2 ? -1 : 1;
      total = G.multiply(total, e);
      prodL = prodL * L.monodromy(e);
      prodF = prodF * F.monodromy(e);
    }
    EXPECT_EQ(prodL, L.monodromy(total));
    EXPECT_EQ(prodF, F.monodromy(total));
    EXPECT_TRUE(detail::determinant(L.monodromy(total)).is_unit());
  }
}

TEST(LocalSystem, ConfigValidation) {
  auto G = GroupModel::free_abelian(2);
  EXPECT_THROW(local_system_from_json({{"group", "Z^1"}, {"monodromy", {{"g1", {{1}}}}}}, G), ConfigError);
  EXPECT_THROW(local_system_from_json({{"monodromy", {{"g1", {{2}}}, {"g2", {{1}}}}}}, G), ConfigError);
  EXPECT_THROW(local_system_from_json({{"monodromy", {{"g1", {{1}}}}}}, G), ConfigError);
  auto L = local_system_from_json({{"monodromy", {{"g1", {{"t1"}}}, {"g2", {{1}}}}}}, G);
  EXPECT_TRUE(L.over_laurent());
  EXPECT_TRUE(local_system_from_json({{"free", true}}, G).is_free());
  EXPECT_FALSE(local_system_from_json({{"trivial", true}}, G).over_laurent());
  auto C = GroupModel::finite_cyclic(2);
  EXPECT_NO_THROW(LocalSystem(C, 0, 1, {[] {
                                RingMatrix m(0, 1, 1);
                                m(0, 0) = Laurent(0, -1);
                                return m;
                              }()},
                              false));
}

TEST(LocalSystem, PathClassAdditivityAndLifting) {
  Eigen::MatrixXd I = Eigen::MatrixXd::Identity(2, 2);
  auto loop = [](double a, double b, int steps) {
    std::vector<Eigen::VectorXd> p;
    for (int i = 0; i <= steps; ++i) {
      Eigen::VectorXd x(2);
      x << 0.1 + a * i / steps, 0.2 + b * i / steps;
      x = x.array() - x.array().floor();
      p.push_back(x);
    }
    return p;
  };
  auto l1 = loop(1, 0, 10), l2 = loop(0, 1, 10);
  EXPECT_EQ(path_class(l1, I, 0.5), (GroupElement{1, 0}));
  EXPECT_EQ(path_class(l2, I, 0.5), (GroupElement{0, 1}));
  auto cat = l1;
  cat.insert(cat.end(), l2.begin() + 1, l2.end());
  EXPECT_EQ(path_class(cat, I, 0.5), (GroupElement{1, 1}));
  // contractible square loop
  std::vector<Eigen::VectorXd> sq;
  for (auto [a, b] : {std::pair{0.1, 0.1}, {0.3, 0.1}, {0.3, 0.3}, {0.1, 0.3}, {0.1, 0.1}}) {
    Eigen::VectorXd x(2);
    x << a, b;
    sq.push_back(x);
  }
  EXPECT_EQ(path_class(sq, I, 0.5), (GroupElement{0, 0}));
  // a straight-line homotopy of the (2,0) loop keeps its class under refinement
  EXPECT_EQ(path_class(loop(2, 0, 9), I, 0.5), (GroupElement{2, 0}));
  EXPECT_EQ(path_class(loop(2, 0, 40), I, 0.5), (GroupElement{2, 0}));
  EXPECT_THROW(path_class(loop(2, 0, 6), I, 0.3), LiftingError);
}

// ------------------------------------------------------------------ Smith normal form

TEST(Smith, Examples) {
  auto f = smith_normal_form({{2, 4}, {6, 8}});
  ASSERT_EQ(f.invariants.size(), 2u);
  EXPECT_EQ(f.invariants[0], 2);
  EXPECT_EQ(f.invariants[1], 4);
  auto id = smith_normal_form(int_identity(3));
  EXPECT_EQ(id.S, int_identity(3));
  auto z = smith_normal_form(IntMatrix(2, std::vector<BigInt>(3, 0)));
  EXPECT_TRUE(z.invariants.empty());
  for (const auto& row : z.S)
    for (const auto& x : row) EXPECT_EQ(x, 0);
}

TEST(Smith, RandomMatricesSatisfyContract) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 8);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t r = dim(rng), c = dim(rng);
    IntMatrix A = random_int_matrix(rng, r, c);
    if (trial % 7 == 0) {  // low-rank inputs
      IntMatrix B = random_int_matrix(rng, r, 2), C = random_int_matrix(rng, 2, c);
      A = int_multiply(B, C, 2);
    }
    auto f = smith_normal_form(A);
    ASSERT_EQ(int_multiply(int_multiply(f.U, A, r), f.V, c), f.S) << "trial " << trial;
    BigInt du = bareiss_det(f.U), dv = bareiss_det(f.V);
    ASSERT_TRUE(du == 1 || du == -1);
    ASSERT_TRUE(dv == 1 || dv == -1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if (i != j) ASSERT_EQ(f.S[i][j], 0);
    for (std::size_t k = 0; k + 1 < f.invariants.size(); ++k) {
      ASSERT_GT(f.invariants[k], 0);
      ASSERT_EQ(f.invariants[k + 1] % f.invariants[k], 0);
    }
    ASSERT_EQ(f.rank(), rational_rank_oracle(A));
  }
}

TEST(Smith, InvariantsMatchDeterminantalDivisorsAndArePermutationFree) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> dim(1, 4);
  for (int trial = 0; trial < 150; ++trial) {
    std::size_t r = dim(rng), c = dim(rng);
    IntMatrix A = random_int_matrix(rng, r, c, -6, 6);
    auto f = smith_normal_form(A);
    auto dd = determinantal_divisors(A);
    BigInt prod = 1;
    for (std::size_t k = 0; k < dd.size(); ++k) {
      if (dd[k] == 0) {
        EXPECT_EQ(f.invariants.size(), k);
        break;
      }
      prod *= f.invariants.at(k);
      EXPECT_EQ(prod, dd[k]);
    }
    IntMatrix P = A;
    std::shuffle(P.begin(), P.end(), rng);
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (auto& row : P) {
      auto old = row;
      for (std::size_t j = 0; j < c; ++j) row[j] = old[perm[j]];
    }
    EXPECT_EQ(smith_normal_form(P).invariants, f.invariants);
  }
}

// ------------------------------------------------------------------ homology over Z

TEST(HomologyZ, StandardModels) {
  auto circle = ChainComplexData::zero(0, {1, 1});
  auto h = homology_over_Z(circle);
  EXPECT_EQ(h.ranks(), (std::vector<long long>{1, 1}));
  auto rel = ChainComplexData::zero(0, {0, 1});
  EXPECT_EQ(homology_over_Z(rel).ranks(), (std::vector<long long>{0, 1}));
  // RP^2 cellular: Z <-0- Z <-2- Z
  auto rp2 = ChainComplexData::zero(0, {1, 1, 1});
  rp2.boundary[2](0, 0) = Laurent(0, 2);
  auto hr = homology_over_Z(rp2);
  EXPECT_EQ(hr.ranks(), (std::vector<long long>{1, 0, 0}));
  ASSERT_EQ(hr.degrees[1].torsion.size(), 1u);
  EXPECT_EQ(hr.degrees[1].torsion[0], 2);
  auto bad = ChainComplexData::zero(0, {1, 1, 1});
  bad.boundary[1](0, 0) = Laurent(0, 1);
  bad.boundary[2](0, 0) = Laurent(0, 1);
  EXPECT_THROW(homology_over_Z(bad), ContractViolation);
}

TEST(HomologyZ, RandomThreeTermComplexesMatchOracle) {
  // d1 = A, d2 = V N with A V = 0 by construction: V spans part of ker A over Z.
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    std::size_t n0 = 2 + rng() % 3, n1 = 3 + rng() % 3, n2 = 1 + rng() % 3;
    IntMatrix A = random_int_matrix(rng, n0, n1, -3, 3);
    // kernel vectors of A from the SNF column transform
    auto f = smith_normal_form(A);
    std::size_t rk = f.rank();
    IntMatrix K(n1, std::vector<BigInt>(n1 - rk, 0));
    for (std::size_t i = 0; i < n1; ++i)
      for (std::size_t j = rk; j < n1; ++j) K[i][j - rk] = f.V[i][j];
    IntMatrix N = random_int_matrix(rng, n1 - rk, n2, -3, 3);
    IntMatrix B = n1 - rk ? int_multiply(K, N, n1 - rk) : IntMatrix(n1, std::vector<BigInt>(n2, 0));
    ChainComplexData c = ChainComplexData::zero(0, {n0, n1, n2});
    c.boundary[1] = to_ring(A, n1);
    c.boundary[2] = to_ring(B, n2);
    auto h = homology_over_Z(c);
    std::size_t ra = rational_rank_oracle(A), rb = rational_rank_oracle(B);
    EXPECT_EQ(h.degrees[0].rank, static_cast<long long>(n0 - ra));
    EXPECT_EQ(h.degrees[1].rank, static_cast<long long>(n1 - ra - rb));
    EXPECT_EQ(h.degrees[2].rank, static_cast<long long>(n2 - rb));
    // torsion of H1 = elementary divisors of B
    auto dd = determinantal_divisors(B);
    std::vector<BigInt> el;
    BigInt prev = 1;
    for (const auto& d : dd) {
      if (d == 0) break;
      el.push_back(d / prev);
      prev = d;
    }
    std::vector<BigInt> tors;
    for (const auto& e : el)
      if (e > 1) tors.push_back(e);
    EXPECT_EQ(h.degrees[1].torsion, tors);
    // Euler characteristic
    long long chi = 0, chi_cells = 0;
    for (const auto& d : h.degrees) chi += (d.degree % 2 ? -1 : 1) * d.rank;
    for (std::size_t k = 0; k < c.dims.size(); ++k) chi_cells += (k % 2 ? -1 : 1) * static_cast<long long>(c.dims[k]);
    EXPECT_EQ(chi, chi_cells);
  }
}

// ------------------------------------------------------------------ Laurent homology

TEST(HomologyLaurent, OneMinusT) {
  auto c = ChainComplexData::zero(1, {1, 1});
  c.boundary[1](0, 0) = Laurent(1, 1) - t1();
  auto h = homology_rank_laurent(c);
  EXPECT_EQ(h.field_ranks(), (std::vector<long long>{0, 0}));
  EXPECT_EQ(h.degrees[0].certificate.status, ModuleCertificate::Status::nonzero);
  EXPECT_NE(h.degrees[0].certificate.witness.find("1"), std::string::npos);
  EXPECT_EQ(h.degrees[1].certificate.status, ModuleCertificate::Status::zero);
  // specialization t -> 1 recovers the Z ranks of the circle
  EXPECT_EQ(homology_over_Z(augment(c)).ranks(), (std::vector<long long>{1, 1}));
  // a unit differential kills everything
  c.boundary[1](0, 0) = t1();
  EXPECT_EQ(homology_rank_laurent(c).degrees[0].certificate.status, ModuleCertificate::Status::zero);
}

TEST(HomologyLaurent, ZeroDifferentialAndSpecialization) {
  auto c = ChainComplexData::zero(2, {3, 2, 1});
  auto h = homology_rank_laurent(c);
  EXPECT_EQ(h.field_ranks(), (std::vector<long long>{3, 2, 1}));
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    // random Laurent matrix with small support
    RingMatrix m(2, 3, 3);
    for (auto& x : m.data) {
      int a = static_cast<int>(rng() % 5) - 2, e1 = static_cast<int>(rng() % 3) - 1, e2 = static_cast<int>(rng() % 3) - 1;
      x = Laurent::monomial({e1, e2}, a) + Laurent(2, static_cast<int>(rng() % 3) - 1);
    }
    if (trial % 3 == 0)
      for (std::size_t j = 0; j < 3; ++j) m(2, j) = m(0, j) * Laurent::variable(2, 1) + m(1, j);
    std::size_t fr = ring_rank(m);
    std::mt19937_64 r2(trial);
    std::size_t sr = 0;
    for (int att = 0; att < 3; ++att) {
      std::vector<BigRational> pt{BigRational(static_cast<long long>(r2() % 97) + 2, static_cast<long long>(r2() % 89) + 1),
                                  BigRational(static_cast<long long>(r2() % 97) + 2, static_cast<long long>(r2() % 89) + 1)};
      sr = std::max(sr, specialized_rank(m, pt));
    }
    EXPECT_EQ(fr, sr);
  }
}

TEST(Covering, CircleWithSignSystem) {
  auto G = GroupModel::free_abelian(1);
  RingMatrix s(0, 1, 1);
  s(0, 0) = Laurent(0, -1);
  LocalSystem L(G, 0, 1, {s}, false);
  auto c = covering_chain_oracle(circle_model(), L, CellSelection::absolute);
  auto h = homology_over_Z(c);
  EXPECT_EQ(h.ranks(), (std::vector<long long>{0, 0}));
  ASSERT_EQ(h.degrees[0].torsion.size(), 1u);
  EXPECT_EQ(h.degrees[0].torsion[0], 2);
  auto tz = homology_over_Z(covering_chain_oracle(circle_model(), LocalSystem::trivial(GroupModel::trivial()), CellSelection::absolute));
  EXPECT_EQ(tz.ranks(), (std::vector<long long>{1, 1}));
}

TEST(Covering, TorusKoszulComplex) {
  CWModel T;
  T.name = "torus";
  T.group_rank = 2;
  // one vertex, edges a, b, square face a b a^-1 b^-1 lifted to the plane
  T.cells = {{"v", 0, false, {}},
             {"a", 1, false, {{"v", 1, {1, 0}}, {"v", -1, {0, 0}}}},
             {"b", 1, false, {{"v", 1, {0, 1}}, {"v", -1, {0, 0}}}},
             {"f", 2, false, {{"a", 1, {0, 0}}, {"b", 1, {1, 0}}, {"a", -1, {0, 1}}, {"b", -1, {0, 0}}}}};
  auto F = free_system(GroupModel::free_abelian(2));
  auto c = covering_chain_oracle(T, F, CellSelection::absolute);
  auto h = homology_rank_laurent(c);
  EXPECT_EQ(h.field_ranks(), (std::vector<long long>{0, 0, 0}));
  EXPECT_EQ(h.degrees[0].certificate.status, ModuleCertificate::Status::nonzero);
  EXPECT_EQ(c.boundary[1](0, 0), Laurent::variable(2, 0) - Laurent(2, 1));
  // t -> 1 gives the ordinary torus
  EXPECT_EQ(homology_over_Z(augment(c)).ranks(), (std::vector<long long>{1, 2, 1}));
}

TEST(Hurewicz, DisconnectedNModelAndSimplyConnectedPair) {
  // S^1 model with N = two points: H0(N; L) has rank 2, H0(P; L) rank 0 after folding deck action
  PairModel P;
  P.cw.name = "circle-two-points";
  P.cw.group_rank = 1;
  P.cw.cells = {{"p", 0, true, {}}, {"q", 0, true, {}}, {"e1", 1, false, {{"q", 1, {0}}, {"p", -1, {0}}}},
                {"e2", 1, false, {{"p", 1, {1}}, {"q", -1, {0}}}}};
  DeclaredHomotopy d;
  d.path_components = 1;
  d.n_components = 2;
  d.pi0_surjective = true;
  d.pi1_relative_nontrivial = true;
  d.path_components_trivial_image = 0;
  d.n_components_trivial_image = 2;
  P.declared = d;
  auto rep = hurewicz_report(P, free_system(GroupModel::free_abelian(1)));
  for (const auto& c : rep.checks) EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
  EXPECT_EQ(rep.relative.degrees[1].certificate.status, ModuleCertificate::Status::nonzero);

  PairModel S;
  S.cw.name = "disk-rel-point";
  S.cw.cells = {{"p", 0, true, {}}, {"e", 1, false, {{"p", 1, {}}, {"p", -1, {}}}}, {"f", 2, false, {{"e", 1, {}}}}};
  DeclaredHomotopy ds;
  ds.n_components = 1;
  ds.path_components_trivial_image = 1;
  ds.n_components_trivial_image = 1;
  S.declared = ds;
  auto rs = hurewicz_report(S, free_system(GroupModel::trivial()));
  for (const auto& c : rs.checks) EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
  PairModel U = S;
  U.declared.reset();
  EXPECT_THROW(hurewicz_report(U, free_system(GroupModel::trivial())), UnsupportedError);
}

// ------------------------------------------------------------------ filtration

TEST(Filtration, WorkedSchedule) {
  FiltrationSchedule s;
  s.sigma = {1, 2};
  s.x = {0.5, 0.9, 1.1, 1.9, 2.1};
  s.delta = {0.1, 0.05, 0.05, 0.05, 0.05};
  EXPECT_TRUE(validate_schedule(s).empty());
  EXPECT_NEAR(chord_action(s, 3, 1.0), 0.105, 1e-12);
  EXPECT_THROW(chord_action(s, 1, 1.0), DomainError);
  auto t = s;
  t.x[2] += 1;
  auto v = validate_schedule(t);
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](const ScheduleViolation& x) { return x.quantity == "midpoint" && x.index == 1; }));
  auto w = s;
  w.delta[1] = 10;
  v = validate_schedule(w);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].quantity, "width");
  EXPECT_EQ(v[0].index, 2);
}

TEST(Filtration, BuilderExamples) {
  auto s = build_schedule({1, 2});
  EXPECT_TRUE(validate_schedule(s).empty());
  EXPECT_EQ(s.x.size(), 5u);
  auto one = build_schedule({1});
  EXPECT_EQ(one.x.size(), 3u);
  EXPECT_TRUE(validate_schedule(one).empty());
  EXPECT_TRUE(build_schedule({}).x.empty());
  EXPECT_THROW(build_schedule({1, 1}), DomainError);
  MarginPolicy strict;
  strict.min_half_width = 0.1;
  EXPECT_THROW(build_schedule({1, 1.05}, strict), DomainError);
}

TEST(Filtration, RandomSpectraProperties) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> gap(1e-3, 2.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> sig;
    double v = 0;
    for (int k = 1 + static_cast<int>(rng() % 12); k > 0; --k) sig.push_back(v += gap(rng));
    auto s = build_schedule(sig);
    ASSERT_TRUE(validate_schedule(s).empty()) << trial;
    for (double d : even_step_action_differences(s)) EXPECT_LT(d, 0.0);
    for (std::size_t k = 1; k <= sig.size(); ++k) {
      EXPECT_GT(s.x_at(2 * k + 1), sig[k - 1]);
      EXPECT_NEAR(0.5 * (s.x_at(2 * k) + s.x_at(2 * k + 1)), sig[k - 1], 1e-12);
    }
    auto back = FiltrationSchedule::from_json(s.to_json());
    EXPECT_EQ(back.x, s.x);
  }
}
