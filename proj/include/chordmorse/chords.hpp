#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "chordmorse/errors.hpp"
#include "chordmorse/geometry.hpp"
#include "chordmorse/parallel.hpp"
#include "chordmorse/pathspace.hpp"

namespace chordmorse {

struct ChordControls {
  std::uint64_t seed = 0;
  double degeneracy_threshold = 1e-6;
  double dedup_radius = 1e-4;
  int random_seeds = 8;
  int subtorus_grid = 16;
  int max_newton = 80;
  int threads = 1;
};

struct GeodesicChord {
  int id = 0;
  BrokenPath path;
  double energy = 0;
  double length = 0;
  int index = 0;
  double margin = 0;
  GroupElement label;
  double gradient_norm = 0;
  Vec eigenvalues;   // generalized eigenvalues of (Hessian, flow metric), ascending
  Mat eigenvectors;  // flow-metric orthonormal columns
  Mat unstable;      // oriented basis of the negative eigenspace (dof x index)
  bool degenerate = false;
  bool closes_smoothly = false;
};

struct SeedReport {
  std::string family;
  int seeds = 0;
  int converged = 0;
  int chords = 0;
};

struct ChordSpectrum {
  double cutoff = 0;
  int K = 0;
  std::vector<GeodesicChord> chords;  // by length, then label
  std::vector<double> values;         // distinct critical lengths
  std::vector<std::vector<int>> members;
  std::vector<SeedReport> coverage;
  std::vector<std::string> warnings;

  std::vector<double> lengths() const {
    std::vector<double> l;
    for (const auto& c : chords) l.push_back(c.length);
    return l;
  }
};

inline std::string label_string(const GroupElement& g) {
  std::string s = "(";
  for (std::size_t i = 0; i < g.size(); ++i) s += (i ? "," : "") + std::to_string(g[i]);
  return s + ")";
}

namespace detail {

struct FactorSeed {
  std::function<Vec(double)> curve;
  Vec s0, sK, offset;
  double length = 0;
  std::string family;
};

inline std::vector<FactorSeed> torus_factor_seeds(const Factor& f, const SubmanifoldPart& p0, const SubmanifoldPart& p1, double reach,
                                                  int grid) {
  std::vector<FactorSeed> out;
  const int n = f.n;
  const Mat& G = f.gram;
  const Mat B0 = p0.kind == SubmanifoldPart::Kind::subtorus ? p0.directions : Mat::Zero(n, 0);
  const Mat B1 = p1.kind == SubmanifoldPart::Kind::subtorus ? p1.directions : Mat::Zero(n, 0);
  const int k0 = static_cast<int>(B0.cols()), k1 = static_cast<int>(B1.cols());
  Eigen::SelfAdjointEigenSolver<Mat> es(G);
  const int R = static_cast<int>(std::ceil(reach / std::sqrt(es.eigenvalues().minCoeff()))) + 1;
  std::vector<Vec> starts;
  if (k0 == 0) {
    starts.push_back(Vec::Zero(0));
  } else {
    std::vector<int> c(k0, 0);
    while (true) {
      Vec s(k0);
      for (int i = 0; i < k0; ++i) s[i] = static_cast<double>(c[i]) / grid;
      starts.push_back(s);
      int i = 0;
      while (i < k0 && c[i] == grid - 1) c[i++] = 0;
      if (i == k0) break;
      ++c[i];
    }
  }
  std::set<std::vector<long long>> seen;
  std::vector<int> w(n, -R);
  while (true) {
    Vec wv(n);
    for (int i = 0; i < n; ++i) wv[i] = w[i];
    for (const Vec& s0 : starts) {
      Vec start = p0.base + (k0 ? Vec(B0 * s0) : Vec::Zero(n));
      Vec s1 = Vec::Zero(k1);
      if (k1) {
        Mat BtG = B1.transpose() * G;
        s1 = (BtG * B1).ldlt().solve(BtG * (start - p1.base - wv));
      }
      Vec end = p1.base + (k1 ? Vec(B1 * s1) : Vec::Zero(n)) + wv;
      Vec d = end - start;
      double len = std::sqrt(d.dot(G * d));
      if (len > reach) continue;
      std::vector<long long> key;
      for (int i = 0; i < n; ++i) key.push_back(std::llround(start[i] * 1e9));
      for (int i = 0; i < n; ++i) key.push_back(std::llround(d[i] * 1e9));
      if (!seen.insert(key).second) continue;
      FactorSeed fs;
      fs.curve = [start, d](double t) { return Vec(start + t * d); };
      fs.s0 = s0;
      fs.sK = s1;
      fs.offset = wv;
      fs.length = len;
      std::ostringstream os;
      os << "lattice(";
      for (int i = 0; i < n; ++i) os << (i ? "," : "") << w[i];
      os << ")";
      fs.family = os.str();
      out.push_back(fs);
    }
    int i = 0;
    while (i < n && w[i] == R) w[i++] = -R;
    if (i == n) break;
    ++w[i];
  }
  return out;
}

inline Eigen::Vector3d rotate(const Eigen::Vector3d& x, const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis) * x;
}

inline std::vector<FactorSeed> ellipsoid_factor_seeds(const Factor& f, const SubmanifoldPart& p0, const SubmanifoldPart& p1, double reach,
                                                      int random_seeds, std::mt19937_64& rng) {
  std::vector<FactorSeed> out;
  const Eigen::Vector3d D = f.axes;
  Eigen::Vector3d sp = p0.base.cwiseQuotient(Vec(D)).normalized();
  Eigen::Vector3d sq = p1.base.cwiseQuotient(Vec(D)).normalized();
  const double amin = D.minCoeff(), amax = D.maxCoeff();
  auto add_arc = [&](const Eigen::Vector3d& axis, double theta, const std::string& fam) {
    double approx = std::abs(theta) * amin;
    if (approx > reach) return;
    FactorSeed fs;
    fs.curve = [sp, axis, theta, D](double t) { return Vec(rotate(sp, axis, theta * t).cwiseProduct(D)); };
    fs.s0 = Vec::Zero(0);
    fs.sK = Vec::Zero(0);
    fs.offset = Vec::Zero(3);
    fs.length = std::abs(theta) * amin;
    fs.family = fam;
    out.push_back(fs);
  };
  Eigen::Vector3d cr = sp.cross(sq);
  const double d = std::atan2(cr.norm(), sp.dot(sq));
  const int J = static_cast<int>(std::ceil(reach / (2 * M_PI * amin))) + 1;
  if (cr.norm() > 1e-8) {
    Eigen::Vector3d axis = cr.normalized();
    for (int j = 0; j <= J; ++j) {
      add_arc(axis, d + 2 * M_PI * j, "arc+" + std::to_string(j));
      add_arc(axis, -(2 * M_PI - d) - 2 * M_PI * j, "arc-" + std::to_string(j));
    }
  } else {
    // coincident or antipodal ends: sample planes through sp
    Eigen::Vector3d e = std::abs(sp[0]) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
    Eigen::Vector3d u1 = (e - e.dot(sp) * sp).normalized(), u2 = sp.cross(u1);
    const int planes = std::max(4, random_seeds);
    for (int k = 0; k < planes; ++k) {
      double phi = M_PI * (k + 0.5 * uniform01(rng)) / planes;
      Eigen::Vector3d axis = std::cos(phi) * u1 + std::sin(phi) * u2;
      for (int j = 0; j <= J; ++j) {
        double base = sp.dot(sq) > 0 ? 2 * M_PI * j : M_PI + 2 * M_PI * j;
        if (base > 0) add_arc(axis, base, "plane" + std::to_string(k) + "+" + std::to_string(j));
        if (base > 0) add_arc(axis, -base, "plane" + std::to_string(k) + "-" + std::to_string(j));
      }
    }
  }
  // random two-leg curves through a via point
  for (int k = 0; k < random_seeds; ++k) {
    Eigen::Vector3d m;
    do {
      for (int i = 0; i < 3; ++i) m[i] = 2 * uniform01(rng) - 1;
    } while (m.norm() > 1 || m.norm() < 0.1);
    m.normalize();
    int wind = static_cast<int>(uniform01(rng) * (J + 1));
    auto leg = [](const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
      Eigen::Vector3d c = a.cross(b);
      double ang = std::atan2(c.norm(), a.dot(b));
      Eigen::Vector3d ax = c.norm() > 1e-12 ? Eigen::Vector3d(c.normalized()) : Eigen::Vector3d::UnitZ();
      return std::make_pair(ax, ang);
    };
    auto [ax1, a1] = leg(sp, m);
    auto [ax2, a2] = leg(m, sq);
    double extra = 2 * M_PI * wind;
    double total = a1 + a2 + extra;
    if (total * amin > reach) continue;
    FactorSeed fs;
    fs.curve = [=](double t) {
      double s = t * total;
      Eigen::Vector3d x;
      if (s <= a1 + extra) {
        x = rotate(sp, ax1, s);  // full extra turns on the first leg's great circle
      } else {
        x = rotate(m, ax2, s - a1 - extra);
      }
      return Vec(x.cwiseProduct(D));
    };
    fs.s0 = Vec::Zero(0);
    fs.sK = Vec::Zero(0);
    fs.offset = Vec::Zero(3);
    fs.length = total * amax;
    fs.family = "random";
    out.push_back(fs);
  }
  return out;
}

}  // namespace detail

struct ChordSeed {
  BrokenPath path;
  std::string family;
};

// Seeds per homotopy class: lattice classes on torus factors, structured great-circle arcs and
// random two-leg curves on ellipsoid factors; products take all combinations.
inline std::vector<ChordSeed> chord_seeds(const PathSpace& X, int K, double ell, const ChordControls& ctl) {
  const ManifoldModel& M = X.manifold();
  const double reach = ell * std::exp(M.perturbation_sup()) * 1.02 + 1e-9;
  std::mt19937_64 rng(ctl.seed);
  std::vector<std::vector<detail::FactorSeed>> per;
  for (std::size_t i = 0; i < M.factors().size(); ++i) {
    const Factor& f = M.factors()[i];
    const auto& p0 = X.source().parts()[i];
    const auto& p1 = X.target().parts()[i];
    if (f.kind == Factor::Kind::torus)
      per.push_back(detail::torus_factor_seeds(f, p0, p1, reach, ctl.subtorus_grid));
    else
      per.push_back(detail::ellipsoid_factor_seeds(f, p0, p1, reach, ctl.random_seeds, rng));
    // the factor may stay put while another factor moves
    if (f.kind == Factor::Kind::ellipsoid && (p0.base - p1.base).norm() < 1e-12) {
      detail::FactorSeed c;
      Vec b = p0.base;
      c.curve = [b](double) { return b; };
      c.s0 = Vec::Zero(0);
      c.sK = Vec::Zero(0);
      c.offset = Vec::Zero(3);
      c.family = "constant";
      per.back().push_back(c);
    }
  }
  std::vector<ChordSeed> out;
  std::vector<std::size_t> idx(per.size(), 0);
  if (std::any_of(per.begin(), per.end(), [](const auto& v) { return v.empty(); })) return out;
  while (true) {
    double len2 = 0;
    std::string fam;
    for (std::size_t i = 0; i < per.size(); ++i) {
      len2 += per[i][idx[i]].length * per[i][idx[i]].length;
      fam += (i ? "x" : "") + per[i][idx[i]].family;
    }
    if (len2 > 1e-18 && std::sqrt(len2) <= reach * 1.05) {
      Vec s0(X.source().dim()), sK(X.target().dim()), off = Vec::Zero(M.ambient_dim());
      for (std::size_t i = 0; i < per.size(); ++i) {
        const auto& fs = per[i][idx[i]];
        if (fs.s0.size()) s0.segment(X.source().part_offset(i), fs.s0.size()) = fs.s0;
        if (fs.sK.size()) sK.segment(X.target().part_offset(i), fs.sK.size()) = fs.sK;
        off.segment(M.factor_offset(i), fs.offset.size()) = fs.offset;
      }
      std::vector<Vec> interior;
      for (int j = 1; j < K; ++j) {
        Vec x(M.ambient_dim());
        for (std::size_t i = 0; i < per.size(); ++i) x.segment(M.factor_offset(i), M.factors()[i].m) = per[i][idx[i]].curve(double(j) / K);
        interior.push_back(x);
      }
      out.push_back({X.make_path(K, s0, interior, sK, off), fam});
    }
    std::size_t i = 0;
    while (i < per.size() && idx[i] + 1 == per[i].size()) idx[i++] = 0;
    if (i == per.size()) break;
    ++idx[i];
  }
  return out;
}

struct NewtonResult {
  bool converged = false;
  BrokenPath path;
  double gradient_norm = 0;
  int iterations = 0;
  std::string message;
};

// Levenberg-Marquardt on the residual g in the flow metric: (H P^-1 H + lambda P) step = -H P^-1 g,
// accepted when g^T P^-1 g decreases. Newton for small lambda, merit descent for large lambda.
inline NewtonResult newton_chord(const PathSpace& X, const BrokenPath& seed, const ChordControls& ctl) {
  NewtonResult r;
  const double inj = X.manifold().injectivity_radius_bound();
  BrokenPath p = seed;
  PathEvaluation ev;
  try {
    ev = X.evaluate(p, 2);
  } catch (const SolverError& e) {
    r.message = e.what();
    return r;
  }
  p.velocity_hint = ev.velocities();
  double lambda = 1e-3;
  int escapes = 0;
  for (r.iterations = 0; r.iterations < ctl.max_newton; ++r.iterations) {
    Mat P = X.flow_metric(p);
    Eigen::LDLT<Mat> Pl(P);
    const Vec& g = ev.gradient;
    double phi = g.dot(Pl.solve(g));
    r.gradient_norm = g.norm();
    const double scale = std::max(1.0, ev.energy);
    if (r.gradient_norm < 1e-11 * scale) break;
    const Mat& H = ev.hessian;
    const Mat PiH = Pl.solve(H);
    const Mat N = H * PiH;
    const Vec rhs = -(PiH.transpose() * g);
    bool accepted = false;
    for (int tries = 0; tries < 40 && !accepted; ++tries) {
      Mat A = N + lambda * P;
      Vec step = A.ldlt().solve(rhs);
      if (!step.allFinite()) {
        lambda *= 10;
        continue;
      }
      // keep steps inside the chart domains and the admissible arc length
      double pn = std::sqrt(step.dot(P * step));
      double cap = 0.5 * std::sqrt(scale);
      if (pn > cap) step *= cap / pn;
      BrokenPath q = X.rechart(X.retract(p, step));
      q.velocity_hint = p.velocity_hint;
      PathEvaluation eq;
      try {
        eq = X.evaluate(q, 2);
      } catch (const SolverError&) {
        lambda *= 10;
        continue;
      }
      double maxlen = 0;
      for (const auto& s : eq.segments) maxlen = std::max(maxlen, std::sqrt(s.energy));
      Mat Pq = X.flow_metric(q);
      double phq = eq.gradient.dot(Pq.ldlt().solve(eq.gradient));
      if (maxlen < 0.98 * inj && phq < phi) {
        p = q;
        ev = eq;
        p.velocity_hint = ev.velocities();
        lambda = std::max(lambda / 10, 1e-14);
        accepted = true;
      } else {
        lambda *= 10;
      }
    }
    if (!accepted) {
      // stalled at a critical point of the merit that is not a critical point of E: slide downhill
      if (escapes++ >= 4) break;
      Vec d = -Pl.solve(g);
      double dn = std::sqrt(d.dot(P * d));
      if (!(dn > 0)) break;
      bool moved = false;
      // expanding line search along the energy descent direction, keeps the lowest point
      BrokenPath best;
      PathEvaluation best_ev;
      double best_e = ev.energy;
      for (double len = 1e-3 * std::sqrt(scale); len < 0.5 * std::sqrt(scale); len *= 2) {
        BrokenPath q = X.rechart(X.retract(p, d * (len / dn)));
        q.velocity_hint = p.velocity_hint;
        try {
          PathEvaluation eq = X.evaluate(q, 2);
          double maxlen = 0;
          for (const auto& sg : eq.segments) maxlen = std::max(maxlen, std::sqrt(sg.energy));
          if (!(eq.energy < best_e) || maxlen >= 0.98 * inj) break;
          best = q;
          best_ev = eq;
          best_e = eq.energy;
          moved = true;
        } catch (const SolverError&) {
          break;
        }
      }
      if (moved) {
        p = best;
        ev = best_ev;
        p.velocity_hint = ev.velocities();
        lambda = 1e-3;
      }
      if (!moved) break;
    }
  }
  r.gradient_norm = ev.gradient.norm();
  r.path = p;
  r.converged = r.gradient_norm < 1e-8 * std::max(1.0, ev.energy);
  if (!r.converged) {
    std::ostringstream os;
    os << "Newton stagnated at gradient norm " << r.gradient_norm << " after " << r.iterations << " iterations";
    r.message = os.str();
  }
  return r;
}

// Orientation rule for negative eigenspaces: evaluate discrete cosine moments of the ambient node
// displacement and pick the best-conditioned set of them greedily; these functionals converge under
// subdivision, so the orientation is stable in K.
inline Mat orient_frame(const PathSpace& X, const BrokenPath& p, const Mat& frame) {
  const int k = static_cast<int>(frame.cols());
  if (k == 0) return frame;
  const int A = X.manifold().ambient_dim(), K = p.K;
  Mat J = X.coordinate_jacobian(p);
  Mat xi = J * frame;  // (K+1)A x k
  const int modes = 4;
  Mat Phi(modes * A, k);
  for (int i = 0; i < modes; ++i)
    for (int a = 0; a < A; ++a)
      for (int c = 0; c < k; ++c) {
        double s = 0;
        for (int j = 0; j <= K; ++j) s += std::cos(M_PI * i * double(j) / K) * xi(j * A + a, c);
        Phi(i * A + a, c) = s / (K + 1);
      }
  Eigen::ColPivHouseholderQR<Mat> qr(Phi.transpose());
  Mat sel(k, k);
  for (int r = 0; r < k; ++r) sel.row(r) = Phi.row(qr.colsPermutation().indices()[r]);
  Mat out = frame;
  if (sel.determinant() < 0) out.col(0) *= -1;
  return out;
}

inline bool closes_smoothly(const PathSpace& X, const BrokenPath& p, const PathEvaluation& ev) {
  if (X.source().dim() == 0 || !X.source().same_as(X.target())) return false;
  const ManifoldModel& M = X.manifold();
  Vec d = p.nodes[p.K] - p.nodes[0];
  for (std::size_t i = 0; i < M.factors().size(); ++i)
    if (M.factors()[i].kind == Factor::Kind::torus)
      for (int k = 0; k < M.factors()[i].m; ++k) {
        double& v = d[M.factor_offset(i) + k];
        v -= std::round(v);
      }
  if (d.norm() > 1e-6) return false;
  Vec v0 = ev.segments.front().va, v1 = ev.segments.back().vb;
  return (v1 - v0).norm() < 1e-6 * std::max(1.0, v0.norm());
}

inline GeodesicChord analyze_chord(const PathSpace& X, const BrokenPath& path, double threshold) {
  GeodesicChord c;
  c.path = X.canonical(path);
  PathEvaluation ev = X.evaluate(c.path, 2);
  c.path.velocity_hint = ev.velocities();
  c.energy = ev.energy;
  c.length = std::sqrt(ev.energy);
  c.gradient_norm = ev.gradient.norm();
  c.label = X.label(c.path);
  const int d = X.dof(c.path.K);
  if (d > 0) {
    Eigen::GeneralizedSelfAdjointEigenSolver<Mat> ges(ev.hessian, X.flow_metric(c.path));
    c.eigenvalues = ges.eigenvalues();
    c.eigenvectors = ges.eigenvectors();
    double mx = c.eigenvalues.cwiseAbs().maxCoeff();
    c.margin = mx > 0 ? c.eigenvalues.cwiseAbs().minCoeff() / mx : 0.0;
    c.index = 0;
    for (int i = 0; i < d; ++i)
      if (c.eigenvalues[i] < -threshold * mx) ++c.index;
    c.degenerate = !(c.margin > threshold);
    c.unstable = orient_frame(X, c.path, c.eigenvectors.leftCols(c.index));
  } else {
    c.margin = 1.0;
    c.eigenvalues = Vec(0);
    c.eigenvectors = Mat(0, 0);
    c.unstable = Mat(0, 0);
  }
  c.closes_smoothly = closes_smoothly(X, c.path, ev);
  return c;
}

inline int morse_index(const GeodesicChord& c, double threshold = 1e-6) {
  if (!(c.margin > threshold)) {
    std::ostringstream os;
    os << "chord " << c.id << " has an eigenvalue inside the degeneracy window (margin " << c.margin << ")";
    throw DegeneracyError(os.str());
  }
  return c.index;
}

// Sup-distance between two chords after moving b by the deck translation closest to a.
inline double chord_distance(const PathSpace& X, const BrokenPath& a, const BrokenPath& b) {
  if (a.K != b.K) return 1e300;
  GroupElement g = X.deck_offset(b, a);
  for (auto& x : g) x = -x;
  BrokenPath bt = X.translate(b, g);
  double d = 0;
  for (int j = 0; j <= a.K; ++j) d = std::max(d, (a.nodes[j] - bt.nodes[j]).cwiseAbs().maxCoeff());
  return d;
}

inline ChordSpectrum find_chords(const PathSpace& X, const ApproximationSpec& spec, const ChordControls& ctl = {}) {
  ChordSpectrum out;
  // search slightly past ell so that the regular-value gap can be checked
  out.cutoff = spec.length_bound * (1 + 2 * spec.gap_fraction);
  out.K = spec.K;
  auto seeds = chord_seeds(X, spec.K, out.cutoff, ctl);
  struct Outcome {
    std::optional<GeodesicChord> chord;
    std::string warning;
  };
  auto results = parallel_map<Outcome>(seeds.size(), ctl.threads, [&](std::size_t i) {
    Outcome o;
    NewtonResult nr = newton_chord(X, seeds[i].path, ctl);
    if (!nr.converged) {
      o.warning = "seed " + std::to_string(i) + " [" + seeds[i].family + "]: " + nr.message;
      return o;
    }
    o.chord = analyze_chord(X, nr.path, ctl.degeneracy_threshold);
    return o;
  });
  std::map<std::string, SeedReport> cov;
  std::vector<GeodesicChord> found;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    auto& rep = cov[seeds[i].family];
    rep.family = seeds[i].family;
    ++rep.seeds;
    if (!results[i].chord) {
      out.warnings.push_back(results[i].warning);
      log(LogLevel::debug, results[i].warning);
      continue;
    }
    ++rep.converged;
    GeodesicChord& c = *results[i].chord;
    if (c.energy < 1e-10) continue;
    if (c.length > out.cutoff) continue;
    bool dup = false;
    for (const auto& e : found) {
      if (e.label != c.label || std::abs(e.length - c.length) > 1e-6 * std::max(1.0, c.length)) continue;
      double dist = chord_distance(X, e.path, c.path);
      if (dist < ctl.dedup_radius) {
        dup = true;
        break;
      }
      if (dist < 10 * ctl.dedup_radius && !e.degenerate && !c.degenerate) {
        std::ostringstream os;
        os << "two chords of length " << c.length << " and label " << label_string(c.label) << " are " << dist
           << " apart, inside the ambiguity band; use a finer K";
        throw ResolutionError(os.str());
      }
    }
    if (dup) continue;
    ++rep.chords;
    found.push_back(std::move(c));
  }
  for (auto& [k, v] : cov) out.coverage.push_back(v);
  std::stable_sort(found.begin(), found.end(), [](const GeodesicChord& a, const GeodesicChord& b) {
    if (std::abs(a.length - b.length) > 1e-9 * std::max(1.0, a.length)) return a.length < b.length;
    if (a.label != b.label) return a.label < b.label;
    for (int i = 0; i < a.path.s0.size(); ++i)
      if (a.path.s0[i] != b.path.s0[i]) return a.path.s0[i] < b.path.s0[i];
    return false;
  });
  for (std::size_t i = 0; i < found.size(); ++i) found[i].id = static_cast<int>(i);
  out.chords = std::move(found);
  for (const auto& c : out.chords) {
    if (out.values.empty() || c.length - out.values.back() > 1e-7 * std::max(1.0, c.length)) {
      out.values.push_back(c.length);
      out.members.emplace_back();
    }
    out.members.back().push_back(c.id);
  }
  return out;
}

// ---------------------------------------------------------------- Jacobi cross-check

struct JacobiCrosscheck {
  int index = 0;
  int focal_count = 0;
  int boundary_index = 0;
  std::vector<double> focal_times;
};

namespace detail {

// Transports the columns (dx, dv) of initial variations along the factor geodesic (x0, v0), t in [0,1].
// Returns per-sample values and derivatives.
inline void transport_variations(const Factor& f, Vec x, Vec v, Mat ex, Mat ev, int samples, std::vector<Mat>& X, std::vector<Mat>& V,
                                 std::vector<Vec>& xs, std::vector<Vec>& vs) {
  const int m = f.m;
  const double dt = 1.0 / samples;
  X.assign(1, ex);
  V.assign(1, ev);
  xs.assign(1, x);
  vs.assign(1, v);
  for (int j = 0; j < samples; ++j) {
    FactorSegment s;
    s.a = x;
    s.va = v * dt;
    if (f.kind == Factor::Kind::torus && f.flat()) {
      s.Fxx = Mat::Identity(m, m);
      s.Fxv = Mat::Identity(m, m);
      s.Fvx = Mat::Zero(m, m);
      s.Fvv = Mat::Identity(m, m);
      s.b = x + s.va;
      s.vb = s.va;
    } else {
      s.steps = steps_for(f, ambient_speed(f, s.va)) + 2;
      dispatch_flow_jacobian(f, s);
    }
    Mat nx = s.Fxx * ex + s.Fxv * (ev * dt);
    Mat nv = (s.Fvx * ex + s.Fvv * (ev * dt)) / dt;
    ex = nx;
    ev = nv;
    x = s.b;
    v = s.vb / dt;
    X.push_back(ex);
    V.push_back(ev);
    xs.push_back(x);
    vs.push_back(v);
  }
}

}  // namespace detail

// Index via focal points of the source along the chord plus the index of the boundary form at the target.
inline JacobiCrosscheck jacobi_index_crosscheck(const PathSpace& X, const GeodesicChord& c, int samples_per_unit = 300) {
  const ManifoldModel& M = X.manifold();
  JacobiCrosscheck out;
  PathEvaluation ev = X.evaluate(c.path, 0);
  const int K = c.path.K;
  for (std::size_t i = 0; i < M.factors().size(); ++i) {
    const Factor& f = M.factors()[i];
    const int o = M.factor_offset(i), m = f.m, n = f.n;
    Vec x0 = c.path.nodes[0].segment(o, m);
    Vec v0 = K * ev.segments.front().va.segment(o, m);
    double speed = detail::ambient_speed(f, v0);
    const auto& p0 = X.source().parts()[i];
    const auto& p1 = X.target().parts()[i];
    if (speed < 1e-12) {
      // constant factor: no focal points; boundary form g(J', w) with J = t-linear fields is positive
      continue;
    }
    // Lagrangian family of source-normal variations
    Mat ex = Mat::Zero(m, n), evv = Mat::Zero(m, n);
    if (f.kind == Factor::Kind::torus) {
      Mat B0 = p0.kind == SubmanifoldPart::Kind::subtorus ? p0.directions : Mat::Zero(m, 0);
      const int k0 = static_cast<int>(B0.cols());
      ex.leftCols(k0) = B0;
      // G0-orthogonal complement of TN0
      Eigen::FullPivLU<Mat> lu(Mat(B0.transpose() * f.gram));
      Mat nu = k0 ? Mat(lu.kernel()) : Mat::Identity(m, m);
      evv.rightCols(n - k0) = nu;
    } else {
      evv = detail::tangent_frame(f, x0);
    }
    const int S = std::max(200, static_cast<int>(std::ceil(samples_per_unit * std::max(1.0, speed))));
    std::vector<Mat> U, Ud;
    std::vector<Vec> xs, vs;
    detail::transport_variations(f, x0, v0, ex, evv, S, U, Ud, xs, vs);
    auto det_at = [&](int j) {
      Mat Uj = U[j];
      double colscale = 1;
      for (int cidx = 0; cidx < Uj.cols(); ++cidx) colscale *= std::max(Uj.col(cidx).norm(), 1e-300);
      double dv;
      if (f.kind == Factor::Kind::torus) {
        dv = Uj.determinant();
      } else {
        Eigen::Vector3d e1 = Eigen::Vector3d(vs[j]).normalized();
        Eigen::Vector3d nn = detail::ellipsoid_normal(f, xs[j]).normalized();
        Eigen::Vector3d e2 = nn.cross(e1);
        Mat F(2, 3);
        F.row(0) = e1.transpose();
        F.row(1) = e2.transpose();
        dv = (F * Uj).determinant();
      }
      return std::make_pair(dv, dv / colscale);
    };
    auto [d1, rel1] = det_at(S);
    if (std::abs(rel1) < 1e-7) {
      std::ostringstream os;
      os << "focal point within tolerance of the chord end (relative det " << rel1 << ")";
      throw DegeneracyError(os.str());
    }
    double prev = det_at(1).first;
    int count = 0;
    for (int j = 2; j <= S; ++j) {
      double cur = det_at(j).first;
      if ((cur > 0) != (prev > 0)) {
        ++count;
        out.focal_times.push_back((j - 0.5) / S);
      }
      prev = cur;
    }
    out.focal_count += count;
    // boundary form on T N1
    if (p1.kind == SubmanifoldPart::Kind::subtorus && p1.directions.cols() > 0) {
      const Mat& B1 = p1.directions;
      const int k1 = static_cast<int>(B1.cols());
      Vec x1 = xs[S], v1 = vs[S];
      double fv;
      std::array<double, 8> gbuf{};
      detail::conformal(f, x1.data(), fv, gbuf.data());
      Vec grad = Eigen::Map<Vec>(gbuf.data(), m);
      const double e2 = std::exp(2 * fv);
      Mat coef = U[S].fullPivLu().solve(B1);
      Mat Q(k1, k1);
      for (int a = 0; a < k1; ++a) {
        Vec J = B1.col(a);
        Vec Jd = Ud[S] * coef.col(a);
        Vec cov = Jd + grad.dot(v1) * J + grad.dot(J) * v1 - v1.dot(f.gram * J) * (f.gram_inv * grad);
        for (int b = 0; b < k1; ++b) {
          Vec w = B1.col(b);
          Q(a, b) = e2 * cov.dot(f.gram * w) - e2 * J.dot(f.gram * w) * grad.dot(v1);
        }
      }
      Q = 0.5 * (Q + Q.transpose());
      Eigen::SelfAdjointEigenSolver<Mat> es(Q);
      double mx = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
      for (int a = 0; a < k1; ++a) {
        if (std::abs(es.eigenvalues()[a]) < 1e-9 * std::max(mx, speed * speed)) throw DegeneracyError("boundary form is degenerate");
        if (es.eigenvalues()[a] < 0) ++out.boundary_index;
      }
    }
  }
  out.index = out.focal_count + out.boundary_index;
  return out;
}

// ---------------------------------------------------------------- bumpy certificate

struct BumpyReport {
  bool passed = false;
  bool nondegenerate = true;
  bool no_orthogonal_closed = true;
  bool closed_check_enforced = false;
  std::vector<int> degenerate_ids;
  std::vector<int> closed_ids;
  double suggested_magnitude = 0;
  std::vector<std::string> notes;

  nlohmann::json to_json() const {
    return {{"passed", passed},
            {"nondegenerate", nondegenerate},
            {"no_orthogonal_closed_geodesic", no_orthogonal_closed},
            {"closed_check_enforced", closed_check_enforced},
            {"degenerate_chords", degenerate_ids},
            {"closed_chords", closed_ids},
            {"suggested_magnitude", suggested_magnitude},
            {"notes", notes}};
  }
};

inline BumpyReport bumpy_certificate(const PathSpace& X, const ChordSpectrum& s, double ell, double threshold = 1e-6) {
  if (s.cutoff < ell) {
    std::ostringstream os;
    os << "spectrum computed to " << s.cutoff << " < " << ell;
    throw InsufficientDataError(os.str());
  }
  BumpyReport r;
  r.closed_check_enforced = X.source().dim() >= 1 && X.source().same_as(X.target());
  for (const auto& c : s.chords) {
    if (c.length > ell) continue;
    if (!(c.margin > threshold)) {
      r.nondegenerate = false;
      r.degenerate_ids.push_back(c.id);
    }
    if (c.closes_smoothly) r.closed_ids.push_back(c.id);
  }
  if (r.closed_check_enforced) {
    r.no_orthogonal_closed = r.closed_ids.empty();
  } else if (!r.closed_ids.empty()) {
    r.notes.push_back("closed orthogonal geodesics through a point-like N are reported but not enforced");
  }
  if (!r.closed_check_enforced) r.notes.push_back("closed-geodesic sweep is informational when N is a point or the ends differ");
  r.passed = r.nondegenerate && r.no_orthogonal_closed;
  if (!r.passed) {
    double cur = X.manifold().perturbation_sup();
    r.suggested_magnitude = cur > 0 ? 2 * cur : 0.005;
  }
  return r;
}

struct BumpyResult {
  ManifoldModel manifold;
  double magnitude = 0;
  int rounds = 0;
  ChordSpectrum spectrum;
  BumpyReport report;
};

// Escalates a seeded bump perturbation geometrically (starting from the unperturbed input) until the
// certificate passes. The submanifolds are rebuilt on every candidate metric.
inline BumpyResult perturb_until_bumpy(const ManifoldModel& M, const SubmanifoldModel& N0, const SubmanifoldModel& N1,
                                       const ApproximationSpec& spec, std::uint64_t seed, const ChordControls& ctl = {},
                                       double start = 0.005, int bumps = 12) {
  std::vector<std::string> tried;
  for (int round = 0;; ++round) {
    double mag = round == 0 ? 0.0 : start * std::pow(2.0, round - 1);
    ManifoldModel cand = round == 0 ? M : M.with_random_perturbation(mag, seed, bumps);
    double sup = 0;
    for (const auto& f : cand.factors()) sup = std::max(sup, f.sup_f());
    if (sup > cand.max_perturbation()) {
      std::ostringstream os;
      os << "perturbation threshold " << cand.max_perturbation() << " reached without a bumpy certificate; tried";
      for (const auto& t : tried) os << " " << t;
      throw DegeneracyError(os.str());
    }
    double inj = cand.injectivity_radius_bound();
    if (!(spec.length_bound * spec.length_bound < spec.K * inj * inj)) {
      std::ostringstream os;
      os << "perturbation magnitude " << mag << " makes K=" << spec.K << " inadmissible (injrad bound " << inj << "); tried";
      for (const auto& t : tried) os << " " << t;
      throw DegeneracyError(os.str());
    }
    PathSpace X(cand, SubmanifoldModel(cand, N0.parts()), SubmanifoldModel(cand, N1.parts()));
    ChordSpectrum s = find_chords(X, spec, ctl);
    BumpyReport rep = bumpy_certificate(X, s, spec.length_bound, ctl.degeneracy_threshold);
    std::ostringstream t;
    t << mag << "(" << rep.degenerate_ids.size() << " degenerate, " << rep.closed_ids.size() << " closed)";
    tried.push_back(t.str());
    if (rep.passed) return {cand, mag, round, s, rep};
  }
}

// ---------------------------------------------------------------- export

inline std::string spectrum_csv(const ChordSpectrum& s) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << "length,index,label,margin\n";
  for (const auto& c : s.chords) os << c.length << "," << c.index << ",\"" << label_string(c.label) << "\"," << c.margin << "\n";
  return os.str();
}

inline nlohmann::json spectrum_json(const PathSpace& X, const ChordSpectrum& s, bool with_paths = false) {
  nlohmann::json chords = nlohmann::json::array();
  for (const auto& c : s.chords) {
    nlohmann::json o{{"id", c.id},       {"length", c.length}, {"energy", c.energy},           {"index", c.index},
                     {"margin", c.margin}, {"label", c.label}, {"gradient_norm", c.gradient_norm}, {"degenerate", c.degenerate}};
    if (with_paths) o["path"] = X.to_json(c.path);
    chords.push_back(o);
  }
  nlohmann::json cov = nlohmann::json::array();
  for (const auto& r : s.coverage) cov.push_back({{"family", r.family}, {"seeds", r.seeds}, {"converged", r.converged}, {"chords", r.chords}});
  return {{"cutoff", s.cutoff}, {"K", s.K}, {"values", s.values}, {"chords", chords}, {"coverage", cov}, {"warnings", s.warnings.size()}};
}

}  // namespace chordmorse
