#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "chordmorse/homology.hpp"

namespace chordmorse {

// Finite CW models of sublevel pairs (P^ell, N) for the shipped example geometries. They are built from
// the classical pictures of the path spaces, not from computed chords.

inline std::string winding_name(const std::vector<long long>& w) {
  std::string s = "(";
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
  return s + ")";
}

// Flat torus R^n / Z^n with metric `gram`, N0 = N1 = a point. Every component of the loop space is
// contractible; those with a lattice vector of length <= ell contribute a point, the trivial class
// contains N.
inline PairModel torus_point_surrogate(const Eigen::MatrixXd& gram, double ell) {
  const int n = static_cast<int>(gram.rows());
  PairModel m;
  m.cw.name = "torus-point";
  m.cw.group_rank = 0;
  m.cw.cells.push_back({"n", 0, true, {}});
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  const int R = static_cast<int>(std::ceil(ell / std::sqrt(es.eigenvalues().minCoeff())));
  std::vector<long long> w(n, -R);
  int comps = 1;
  while (true) {
    Eigen::VectorXd v(n);
    bool zero = true;
    for (int i = 0; i < n; ++i) {
      v[i] = static_cast<double>(w[i]);
      zero = zero && w[i] == 0;
    }
    if (!zero && std::sqrt(v.dot(gram * v)) <= ell) {
      m.cw.cells.push_back({"v" + winding_name(w), 0, false, {}});
      ++comps;
    }
    int i = 0;
    while (i < n && w[i] == R) w[i++] = -R;
    if (i == n) break;
    ++w[i];
  }
  DeclaredHomotopy d;
  d.path_components = comps;
  d.n_components = 1;
  d.pi0_surjective = comps == 1;
  d.path_components_trivial_image = comps;
  d.n_components_trivial_image = 1;
  m.declared = d;
  return m;
}

// Unit torus T^2 with N0 = N1 = S^1 x {0}. The component of vertical winding m is a circle of chords
// sliding along N, with free deck action; m = 0 deformation retracts onto N itself.
inline PairModel torus_circle_surrogate(double ell) {
  PairModel m;
  m.cw.name = "torus-circle";
  m.cw.group_rank = 1;
  m.cw.cells.push_back({"n0", 0, true, {}});
  m.cw.cells.push_back({"n1", 1, true, {{"n0", 1, {1}}, {"n0", -1, {0}}}});
  const long long R = static_cast<long long>(std::floor(ell));
  int comps = 1;
  for (long long w = -R; w <= R; ++w) {
    if (w == 0) continue;
    std::string v = "v(" + std::to_string(w) + ")", e = "e(" + std::to_string(w) + ")";
    m.cw.cells.push_back({v, 0, false, {}});
    m.cw.cells.push_back({e, 1, false, {{v, 1, {1}}, {v, -1, {0}}}});
    ++comps;
  }
  DeclaredHomotopy d;
  d.path_components = comps;
  d.n_components = 1;
  d.pi0_surjective = comps == 1;
  d.pi1_relative_nontrivial = false;
  d.path_components_trivial_image = 0;
  d.n_components_trivial_image = 0;
  m.declared = d;
  return m;
}

// Round-sphere picture for paths between two points at angle `angle` (0 < angle < pi): the geodesics
// have lengths 2 pi j + angle and 2 pi (j+1) - angle with indices 0, 1, 2, ..., and the sublevel has
// one cell in each of those degrees with zero boundary.
inline int sphere_geodesic_count(double angle, double radius, double ell) {
  int n = 0;
  for (int k = 0;; ++k) {
    int j = k / 2;
    double len = radius * (k % 2 == 0 ? 2 * M_PI * j + angle : 2 * M_PI * (j + 1) - angle);
    if (len > ell) break;
    ++n;
  }
  return n;
}

inline PairModel sphere_two_point_surrogate(int cells) {
  PairModel m;
  m.cw.name = "sphere-two-point";
  m.cw.group_rank = 0;
  for (int k = 0; k < cells; ++k) m.cw.cells.push_back({"c" + std::to_string(k), k, false, {}});
  DeclaredHomotopy d;
  d.path_components = 1;
  d.n_components = 0;
  d.pi0_surjective = false;
  d.path_components_trivial_image = 1;
  d.n_components_trivial_image = 0;
  m.declared = d;
  return m;
}

}  // namespace chordmorse
