#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chordmorse/chords.hpp"
#include "chordmorse/errors.hpp"
#include "chordmorse/homology.hpp"
#include "chordmorse/laurent.hpp"
#include "chordmorse/localsys.hpp"
#include "chordmorse/parallel.hpp"
#include "chordmorse/pathspace.hpp"

namespace chordmorse {

struct MorseControls {
  double epsilon = 1e-2;       // unstable sphere radius in units of sqrt(E(x))
  int resolution = 128;        // samples on S^1; target vertex count on S^2
  int bisection_rounds = 12;
  long max_steps = 100000;
  double tolerance = 1e-6;     // local error per step, units of sqrt(E)
  double level_offset = 5e-3;  // counting level E(y) + level_offset * E(y)
  double absorption = 0.05;    // absorbed once E < (absorption * sigma_1)^2
  double validation = 0.25;    // re-flowed crossing must get this much closer to y than the level hit
  int sphere_refinement = 2;   // extra subdivision depth for S^2 triangles straddling the near region
  int threads = 1;
  ChordControls chords;
};

enum class FlowStatus { converged, absorbed, level_reached, budget_exceeded, unidentified };

inline const char* flow_status_name(FlowStatus s) {
  switch (s) {
    case FlowStatus::converged: return "converged";
    case FlowStatus::absorbed: return "absorbed";
    case FlowStatus::level_reached: return "level-reached";
    case FlowStatus::budget_exceeded: return "budget-exceeded";
    case FlowStatus::unidentified: return "unidentified";
  }
  return "?";
}

struct FlowResult {
  FlowStatus status = FlowStatus::budget_exceeded;
  BrokenPath start, end;
  int chord = -1;               // terminal chord when converged
  GroupElement monodromy;       // deck element carrying the terminal chord's representative to the end point
  std::vector<double> energies;  // every accepted step
  std::vector<BrokenPath> trace;  // subsampled
  std::vector<std::optional<BrokenPath>> hits;  // crossings of the requested levels
  long steps = 0;
  bool monotone = true;
  double closest = std::numeric_limits<double>::infinity();  // to the watched chord
};

// One isolated flow line from x to y: sign of the two-step orientation map and its deck class.
struct FlowLine {
  int x = -1, y = -1;
  int sign = 0;
  GroupElement g;
  Vec sphere_point;  // point of S(x) in the oriented unstable frame
  double approach = 0;  // closest P-distance to y of the validation re-flow

  bool operator<(const FlowLine& o) const {
    if (x != o.x) return x < o.x;
    if (y != o.y) return y < o.y;
    if (g != o.g) return g < o.g;
    return sign < o.sign;
  }
};

struct CountReport {
  std::vector<FlowLine> lines;
  std::vector<std::string> discarded;
  std::vector<std::string> violations;  // flows from x ending at chords of index >= ind(x)
  long flows = 0;
};

// Local picture of a path near a chord: nearest deck translate, P-distance, unstable coordinates.
struct LocalCoords {
  GroupElement g;
  double distance = 0;
  Vec u;
};

class FlowField {
 public:
  FlowField(const PathSpace& X, std::vector<GeodesicChord> chords, const MorseControls& ctl)
      : X_(X), chords_(std::move(chords)), ctl_(ctl) {
    double s1 = std::numeric_limits<double>::infinity();
    for (const auto& c : chords_) {
      s1 = std::min(s1, c.length);
      Mat P = X_.flow_metric(c.path);
      metrics_.push_back(P);
      double lp = std::numeric_limits<double>::infinity();
      for (int i = 0; i < c.eigenvalues.size(); ++i)
        if (c.eigenvalues[i] > 0) lp = std::min(lp, c.eigenvalues[i]);
      min_positive_.push_back(std::isfinite(lp) ? lp : 1.0);
    }
    absorb_energy_ = std::isfinite(s1) ? std::pow(ctl_.absorption * s1, 2) : 0.0;
    inj_ = X_.manifold().injectivity_radius_bound();
  }

  const PathSpace& space() const { return X_; }
  const std::vector<GeodesicChord>& chords() const { return chords_; }
  const MorseControls& controls() const { return ctl_; }
  double absorption_energy() const { return absorb_energy_; }

  double level_offset(int y) const { return ctl_.level_offset * chords_[y].energy; }
  double near_radius(int y) const {
    double r = 3.0 * std::sqrt(2.0 * level_offset(y) / min_positive_[y]);
    return std::min(r, 0.3 * chords_[y].length);
  }

  LocalCoords local(int y, const BrokenPath& p) const {
    const auto& c = chords_[y];
    LocalCoords out;
    out.g = X_.deck_offset(p, c.path);
    BrokenPath yt = X_.translate(c.path, out.g);
    Vec d = X_.difference(X_.normalize_end(p), yt);
    const Mat& P = metrics_[y];
    Vec Pd = P * d;
    out.distance = std::sqrt(std::max(0.0, d.dot(Pd)));
    out.u = c.unstable.transpose() * Pd;
    return out;
  }

  // Nearest chord with the path's label within `radius` (P-distance, relative to the chord length).
  std::optional<std::pair<int, GroupElement>> identify(const BrokenPath& p, double energy, double radius, bool index_zero_only) const {
    GroupElement lab = X_.label(p);
    for (std::size_t i = 0; i < chords_.size(); ++i) {
      const auto& c = chords_[i];
      if (c.label != lab || c.path.K != p.K) continue;
      if (index_zero_only && c.index != 0) continue;
      if (std::abs(energy - c.energy) > 0.05 * c.energy + 1e-12) continue;
      LocalCoords lc = local(static_cast<int>(i), p);
      if (lc.distance < radius * c.length) return std::make_pair(static_cast<int>(i), lc.g);
    }
    return std::nullopt;
  }

  // Negative gradient flow with respect to the flow metric, Bogacki-Shampine 2(3) with step control.
  // `levels` must be descending; the state at each crossing is recorded. With stop_at_levels the flow
  // ends at the last level. `watch` tracks the closest approach to a chord and ends the flow once the
  // energy falls below watch_floor.
  FlowResult flow(const BrokenPath& start, const std::vector<double>& levels = {}, bool stop_at_levels = false,
                  int watch = -1, double watch_floor = -1) const {
    FlowResult r;
    r.start = start;
    r.hits.assign(levels.size(), std::nullopt);
    State s = eval(X_.rechart(start));
    r.energies.push_back(s.E);
    r.trace.push_back(s.p);
    std::size_t next_level = 0;
    while (next_level < levels.size() && s.E < levels[next_level]) {
      r.hits[next_level++] = s.p;
    }
    if (stop_at_levels && !levels.empty() && next_level == levels.size()) {
      r.status = FlowStatus::level_reached;
      r.end = s.p;
      return r;
    }
    auto watch_update = [&](const BrokenPath& p) {
      if (watch >= 0) r.closest = std::min(r.closest, local(watch, p).distance);
    };
    watch_update(s.p);
    double h = initial_step(s);
    int since_trace = 0;
    for (r.steps = 0; r.steps < ctl_.max_steps; ++r.steps) {
      double gn = std::sqrt(std::max(0.0, -s.g.dot(s.v)));
      double sq = std::sqrt(std::max(s.E, 1e-300));
      if (s.E < absorb_energy_) {
        r.status = FlowStatus::absorbed;
        break;
      }
      if (gn < 1e-3 * sq) {
        bool tight = gn < 1e-9 * sq;
        if (auto id = identify(s.p, s.E, tight ? 1e-3 : 2e-2, !tight)) {
          r.status = FlowStatus::converged;
          r.chord = id->first;
          r.monodromy = id->second;
          break;
        }
        if (tight) {
          r.status = FlowStatus::unidentified;
          break;
        }
      }
      if (watch >= 0 && s.E < watch_floor) {
        r.status = FlowStatus::level_reached;
        break;
      }
      // one adaptive step
      bool accepted = false;
      State n;
      Vec dz;
      for (int tries = 0; tries < 60 && !accepted; ++tries) {
        double vn = std::sqrt(std::max(0.0, s.v.dot(s.P * s.v)));
        double cap = 0.1 * sq;
        if (h * vn > cap) h = cap / vn;
        try {
          Vec k1 = s.v;
          State s2 = eval(X_.retract(s.p, 0.5 * h * k1));
          Vec k2 = s2.v;
          State s3 = eval(X_.retract(s.p, 0.75 * h * k2));
          Vec k3 = s3.v;
          dz = h * (2.0 / 9 * k1 + 1.0 / 3 * k2 + 4.0 / 9 * k3);
          n = eval(X_.retract(s.p, dz));
          Vec err = h * (-5.0 / 72 * k1 + 1.0 / 12 * k2 + 1.0 / 9 * k3 - 1.0 / 8 * n.v);
          double en = std::sqrt(std::max(0.0, err.dot(s.P * err)));
          double tol = ctl_.tolerance * sq;
          double fac = en > 0 ? 0.9 * std::cbrt(tol / en) : 5.0;
          if (en <= tol && n.E < s.E && n.admissible) {
            accepted = true;
            h *= std::clamp(fac, 0.2, 5.0);
          } else {
            h *= std::clamp(fac, 0.1, 0.5);
          }
        } catch (const SolverError&) {
          h *= 0.25;
        }
      }
      if (!accepted) {
        log(LogLevel::debug, "flow stalled: E=" + std::to_string(s.E) + " |g|=" + std::to_string(std::sqrt(std::max(0.0, -s.g.dot(s.v)))) + " h=" + std::to_string(h));
        // no admissible descent step left: either a critical point missing from the spectrum or a stall
        double gn = std::sqrt(std::max(0.0, -s.g.dot(s.v)));
        r.status = gn < 1e-5 * sq ? FlowStatus::unidentified : FlowStatus::budget_exceeded;
        break;
      }
      if (!(n.E < s.E)) r.monotone = false;
      while (next_level < levels.size() && n.E < levels[next_level]) {
        r.hits[next_level] = locate_level(s, dz, levels[next_level]);
        ++next_level;
      }
      BrokenPath q = X_.rechart(n.p);
      if (q.charts != n.p.charts) n = eval(q);
      s = std::move(n);
      r.energies.push_back(s.E);
      watch_update(s.p);
      if (++since_trace >= 20) {
        r.trace.push_back(s.p);
        since_trace = 0;
      }
      if (stop_at_levels && !levels.empty() && next_level == levels.size()) {
        r.status = FlowStatus::level_reached;
        break;
      }
    }
    r.end = s.p;
    if (since_trace > 0) r.trace.push_back(s.p);
    if (r.status == FlowStatus::level_reached && stop_at_levels && !levels.empty() && r.hits.back()) r.end = *r.hits.back();
    return r;
  }

  // Point of S(x): x + eps * sqrt(E) * (U v) for a unit vector v in the oriented unstable frame.
  BrokenPath sphere_point(int x, const Vec& v, double eps) const {
    const auto& c = chords_[x];
    Vec dz = c.unstable * v;
    return X_.rechart(X_.retract(c.path, (eps * c.length / std::max(1e-300, v.norm())) * dz));
  }

 private:
  struct State {
    BrokenPath p;
    double E = 0;
    Vec g, v;  // v = -P^{-1} g
    Mat P;
    bool admissible = true;
  };

  State eval(BrokenPath p) const {
    State s;
    PathEvaluation ev = X_.evaluate(p, 1);
    p.velocity_hint = ev.velocities();
    s.E = ev.energy;
    s.g = ev.gradient;
    s.P = X_.flow_metric(p);
    s.v = -s.P.ldlt().solve(s.g);
    for (const auto& sg : ev.segments)
      if (std::sqrt(sg.energy) >= 0.98 * inj_) s.admissible = false;
    s.p = std::move(p);
    return s;
  }

  double initial_step(const State& s) const {
    double vn = std::sqrt(std::max(0.0, s.v.dot(s.P * s.v)));
    double sq = std::sqrt(std::max(s.E, 1e-300));
    return vn > 0 ? std::min(1.0, 1e-2 * sq / vn) : 1.0;
  }

  // Crossing of E = level on the chord from s.p along dz (Illinois iteration).
  BrokenPath locate_level(const State& s, const Vec& dz, double level) const {
    double a = 0, fa = s.E - level, b = 1;
    BrokenPath pb = X_.retract(s.p, dz);
    double fb = X_.energy(pb) - level;
    if (!(fb < 0)) return pb;
    int side = 0;
    BrokenPath best = pb;
    for (int it = 0; it < 40; ++it) {
      double c = (a * fb - b * fa) / (fb - fa);
      BrokenPath pc = X_.retract(s.p, c * dz);
      pc.velocity_hint = s.p.velocity_hint;
      double fc = X_.energy(pc) - level;
      best = pc;
      if (std::abs(fc) < 1e-12 * std::max(1.0, level)) break;
      if (fc > 0) {
        a = c;
        fa = fc;
        if (side == -1) fb *= 0.5;
        side = -1;
      } else {
        b = c;
        fb = fc;
        if (side == 1) fa *= 0.5;
        side = 1;
      }
    }
    return best;
  }

  PathSpace X_;
  std::vector<GeodesicChord> chords_;
  MorseControls ctl_;
  std::vector<Mat> metrics_;
  std::vector<double> min_positive_;
  double absorb_energy_ = 0;
  double inj_ = 0;
};

// ---------------------------------------------------------------- unstable spheres

struct SphereSample {
  Vec v;             // unit vector in the oriented unstable frame
  double theta = 0;  // circle parameter (S^1 only)
};

struct SphereMesh {
  std::vector<Vec> vertices;                 // unit vectors in R^3
  std::vector<std::array<int, 3>> faces;     // outward oriented
};

// Latitude-longitude triangulation of S^2 with roughly `target` vertices.
inline SphereMesh sphere_mesh(int target) {
  SphereMesh m;
  int nlon = std::max(4, static_cast<int>(std::ceil(std::sqrt(2.0 * target))));
  int rings = std::max(1, static_cast<int>(std::ceil(double(target) / nlon)) - 1);
  auto at = [](double phi, double lam) {
    Vec v(3);
    v << std::sin(phi) * std::cos(lam), std::sin(phi) * std::sin(lam), std::cos(phi);
    return v;
  };
  m.vertices.push_back(at(0, 0));
  for (int i = 1; i <= rings; ++i)
    for (int j = 0; j < nlon; ++j) m.vertices.push_back(at(M_PI * i / (rings + 1), 2 * M_PI * (j + 0.5 * (i % 2)) / nlon));
  m.vertices.push_back(at(M_PI, 0));
  const int south = static_cast<int>(m.vertices.size()) - 1;
  auto idx = [&](int ring, int j) { return 1 + (ring - 1) * nlon + ((j % nlon) + nlon) % nlon; };
  auto add = [&](int a, int b, int c) {
    Eigen::Vector3d A = m.vertices[a], B = m.vertices[b], C = m.vertices[c];
    if ((B - A).cross(C - A).dot(A + B + C) < 0) std::swap(b, c);
    m.faces.push_back({a, b, c});
  };
  for (int j = 0; j < nlon; ++j) add(0, idx(1, j), idx(1, j + 1));
  for (int i = 1; i < rings; ++i)
    for (int j = 0; j < nlon; ++j) {
      // odd rings are shifted by half a cell
      int s = i % 2;
      add(idx(i, j), idx(i + 1, j - 1 + s), idx(i + 1, j + s));
      add(idx(i, j), idx(i + 1, j + s), idx(i, j + 1));
    }
  for (int j = 0; j < nlon; ++j) add(south, idx(rings, j), idx(rings, j + 1));
  return m;
}

// Sample set on S^{ind-1}: S^0 = {+e1, -e1}; S^1 counterclockwise in (e1, e2); S^2 vertices of sphere_mesh.
inline std::vector<SphereSample> unstable_sphere(const GeodesicChord& x, int resolution) {
  std::vector<SphereSample> out;
  const int k = x.index;
  if (k == 0) return out;
  if (k == 1) {
    for (double s : {1.0, -1.0}) {
      Vec v(1);
      v << s;
      out.push_back({v, s > 0 ? 0.0 : M_PI});
    }
  } else if (k == 2) {
    for (int i = 0; i < resolution; ++i) {
      double t = 2 * M_PI * i / resolution;
      Vec v(2);
      v << std::cos(t), std::sin(t);
      out.push_back({v, t});
    }
  } else if (k == 3) {
    for (const auto& v : sphere_mesh(resolution).vertices) out.push_back({v, 0});
  } else {
    throw ResolutionError("unstable spheres of dimension " + std::to_string(k - 1) + " are not supported");
  }
  return out;
}

// ---------------------------------------------------------------- flow-line counting

namespace detail {

struct Probe {
  bool hit = false;
  bool near = false;
  GroupElement g;
  Vec u;
  double distance = 0;
};

inline Probe probe(const FlowField& F, int y, const std::optional<BrokenPath>& hit) {
  Probe p;
  if (!hit) return p;
  p.hit = true;
  LocalCoords lc = F.local(y, *hit);
  p.g = lc.g;
  p.u = lc.u;
  p.distance = lc.distance;
  p.near = lc.distance < F.near_radius(y);
  return p;
}

inline bool same_cell(const Probe& a, const Probe& b) { return a.near && b.near && a.g == b.g; }

// Re-flows the crossing point and checks that it passes close to y.
inline bool validate(const FlowField& F, int y, const BrokenPath& start, double hit_distance, double* approach) {
  const auto& c = F.chords()[y];
  FlowResult r = F.flow(start, {}, false, y, c.energy - F.level_offset(y));
  *approach = r.closest;
  return r.closest < F.controls().validation * hit_distance;
}

}  // namespace detail

// Signed flow lines from x into chords of index ind(x) - 1, all candidate targets at once.
inline CountReport count_outgoing(const FlowField& F, int x, double eps, int resolution) {
  CountReport rep;
  const auto& chords = F.chords();
  const auto& cx = chords[x];
  const int k = cx.index;
  if (k == 0) return rep;
  const auto& ctl = F.controls();
  if (k == 1) {
    auto samples = unstable_sphere(cx, resolution);
    auto res = parallel_map<FlowResult>(samples.size(), ctl.threads, [&](std::size_t i) {
      return F.flow(F.sphere_point(x, samples[i].v, eps));
    });
    rep.flows += static_cast<long>(res.size());
    for (std::size_t i = 0; i < res.size(); ++i) {
      const auto& r = res[i];
      if (r.status == FlowStatus::budget_exceeded || r.status == FlowStatus::unidentified) {
        std::ostringstream os;
        os << "flow from chord " << x << " (" << flow_status_name(r.status) << ") after " << r.steps << " steps";
        throw ResolutionError(os.str());
      }
      if (r.status != FlowStatus::converged) continue;
      if (chords[r.chord].index >= k) {
        rep.violations.push_back("chord " + std::to_string(x) + " flows into chord " + std::to_string(r.chord) + " of index " +
                                 std::to_string(chords[r.chord].index));
        continue;
      }
      FlowLine l;
      l.x = x;
      l.y = r.chord;
      l.sign = samples[i].v[0] > 0 ? 1 : -1;
      l.g = r.monodromy;
      l.sphere_point = samples[i].v;
      rep.lines.push_back(l);
    }
    std::sort(rep.lines.begin(), rep.lines.end());
    return rep;
  }
  if (k > 3) throw ResolutionError("chord " + std::to_string(x) + ": unstable sphere of dimension " + std::to_string(k - 1) + " is not supported");

  std::vector<int> targets;
  for (std::size_t i = 0; i < chords.size(); ++i)
    if (chords[i].index == k - 1 && chords[i].label == cx.label && chords[i].energy < cx.energy) targets.push_back(static_cast<int>(i));
  if (targets.empty()) return rep;
  std::sort(targets.begin(), targets.end(), [&](int a, int b) { return chords[a].energy > chords[b].energy; });
  std::vector<double> levels;
  for (int y : targets) levels.push_back(chords[y].energy + F.level_offset(y));

  auto flow_probe = [&](const Vec& v, int only) {
    std::vector<double> lv = only < 0 ? levels : std::vector<double>{levels[only]};
    FlowResult r = F.flow(F.sphere_point(x, v, eps), lv, true);
    std::vector<detail::Probe> out;
    if (only < 0) {
      for (std::size_t t = 0; t < targets.size(); ++t) out.push_back(detail::probe(F, targets[t], r.hits[t]));
    } else {
      out.push_back(detail::probe(F, targets[only], r.hits[0]));
    }
    return out;
  };

  auto samples = unstable_sphere(cx, resolution);
  auto probes = parallel_map<std::vector<detail::Probe>>(samples.size(), ctl.threads, [&](std::size_t i) { return flow_probe(samples[i].v, -1); });
  rep.flows += static_cast<long>(samples.size());

  if (k == 2) {
    auto circle = [](double t) {
      Vec v(2);
      v << std::cos(t), std::sin(t);
      return v;
    };
    const int n = static_cast<int>(samples.size());
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const int y = targets[t];
      // intervals to examine: (theta_a, probe_a, theta_b, probe_b, depth)
      struct Interval {
        double a, b;
        detail::Probe pa, pb;
        int depth;
      };
      std::vector<Interval> work;
      for (int i = 0; i < n; ++i) {
        double a = samples[i].theta, b = i + 1 < n ? samples[i + 1].theta : 2 * M_PI;
        work.push_back({a, b, probes[i][t], probes[(i + 1) % n][t], 0});
      }
      while (!work.empty()) {
        Interval iv = work.back();
        work.pop_back();
        const auto &pa = iv.pa, &pb = iv.pb;
        if (detail::same_cell(pa, pb)) {
          if ((pa.u[0] < 0) == (pb.u[0] < 0)) continue;
          // isolate the crossing
          double a = iv.a, b = iv.b;
          detail::Probe qa = pa, qb = pb;
          bool lost = false;
          for (int r = 0; r < ctl.bisection_rounds; ++r) {
            double m = 0.5 * (a + b);
            detail::Probe qm = flow_probe(circle(m), static_cast<int>(t))[0];
            ++rep.flows;
            if (!detail::same_cell(qm, qa)) {
              lost = true;
              break;
            }
            if ((qm.u[0] < 0) == (qa.u[0] < 0)) {
              a = m;
              qa = qm;
            } else {
              b = m;
              qb = qm;
            }
          }
          if (lost) {
            std::ostringstream os;
            os << "unresolved cluster boundary between chords " << x << " and " << y << " near theta=" << 0.5 * (a + b);
            throw ResolutionError(os.str());
          }
          double m = a + (b - a) * qa.u[0] / (qa.u[0] - qb.u[0]);
          double approach = 0;
          ++rep.flows;
          if (!detail::validate(F, y, F.sphere_point(x, circle(m), eps), std::min(qa.distance, qb.distance), &approach)) {
            std::ostringstream os;
            os << "discarded sign change " << x << "->" << y << " at theta=" << m << " (closest approach " << approach << ")";
            rep.discarded.push_back(os.str());
            log(LogLevel::debug, os.str());
            continue;
          }
          FlowLine l;
          l.x = x;
          l.y = y;
          l.sign = qb.u[0] > qa.u[0] ? 1 : -1;
          l.g = qa.g;
          l.sphere_point = circle(m);
          l.approach = approach;
          rep.lines.push_back(l);
        } else if (!(!pa.near && !pb.near) && iv.depth < ctl.bisection_rounds) {
          // the near region starts or ends inside this interval; look for a hidden sign change
          double m = 0.5 * (iv.a + iv.b);
          detail::Probe pm = flow_probe(circle(m), static_cast<int>(t))[0];
          ++rep.flows;
          work.push_back({iv.a, m, pa, pm, iv.depth + 1});
          work.push_back({m, iv.b, pm, pb, iv.depth + 1});
        }
      }
    }
  } else {
    // S^2: degree count of the unstable-coordinate map over triangles inside the near region
    SphereMesh mesh = sphere_mesh(resolution);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const int y = targets[t];
      struct Tri {
        Vec v[3];
        detail::Probe p[3];
        int depth;
      };
      std::vector<Tri> work;
      for (const auto& f : mesh.faces) {
        Tri tr;
        for (int i = 0; i < 3; ++i) {
          tr.v[i] = mesh.vertices[f[i]];
          tr.p[i] = probes[f[i]][t];
        }
        tr.depth = 0;
        work.push_back(tr);
      }
      std::map<std::pair<std::vector<double>, int>, detail::Probe> cache;
      auto probe_at = [&](const Vec& v) {
        Vec w = v.normalized();
        std::vector<double> key(w.data(), w.data() + 3);
        for (auto& c : key) c = std::round(c * 1e12) / 1e12;
        auto it = cache.find({key, 0});
        if (it != cache.end()) return it->second;
        detail::Probe p = flow_probe(w, static_cast<int>(t))[0];
        ++rep.flows;
        cache[{key, 0}] = p;
        return p;
      };
      // zero of the affine interpolant, with a fixed tiny offset so that zeros on edges are counted once
      auto locate = [](const Tri& tr, double* alpha, double* beta) {
        Eigen::Vector2d a = tr.p[0].u, b = tr.p[1].u, c = tr.p[2].u;
        Eigen::Matrix2d Mt;
        Mt.col(0) = b - a;
        Mt.col(1) = c - a;
        double det = Mt.determinant();
        if (det == 0) return 0;
        double scale = std::max({a.norm(), b.norm(), c.norm()});
        Eigen::Vector2d target(1e-13 * scale, 3.1e-14 * scale);
        Eigen::Vector2d ab = Mt.inverse() * (target - a);
        *alpha = ab[0];
        *beta = ab[1];
        if (ab[0] < 0 || ab[1] < 0 || ab[0] + ab[1] > 1) return 0;
        return det > 0 ? 1 : -1;
      };
      while (!work.empty()) {
        Tri tr = work.back();
        work.pop_back();
        bool all_same = detail::same_cell(tr.p[0], tr.p[1]) && detail::same_cell(tr.p[0], tr.p[2]);
        if (!all_same) {
          bool any_near = tr.p[0].near || tr.p[1].near || tr.p[2].near;
          if (any_near && tr.depth < ctl.sphere_refinement) {
            Vec m01 = (tr.v[0] + tr.v[1]).normalized(), m12 = (tr.v[1] + tr.v[2]).normalized(), m20 = (tr.v[2] + tr.v[0]).normalized();
            detail::Probe q01 = probe_at(m01), q12 = probe_at(m12), q20 = probe_at(m20);
            work.push_back({{tr.v[0], m01, m20}, {tr.p[0], q01, q20}, tr.depth + 1});
            work.push_back({{m01, tr.v[1], m12}, {q01, tr.p[1], q12}, tr.depth + 1});
            work.push_back({{m20, m12, tr.v[2]}, {q20, q12, tr.p[2]}, tr.depth + 1});
            work.push_back({{m01, m12, m20}, {q01, q12, q20}, tr.depth + 1});
          }
          continue;
        }
        double al = 0, be = 0;
        int sg = locate(tr, &al, &be);
        if (sg == 0) continue;
        // shrink onto the zero: follow the sub-triangle containing it
        Tri cur = tr;
        bool lost = false;
        for (int r = 0; r < ctl.bisection_rounds / 2; ++r) {
          Vec m01 = (cur.v[0] + cur.v[1]).normalized(), m12 = (cur.v[1] + cur.v[2]).normalized(), m20 = (cur.v[2] + cur.v[0]).normalized();
          detail::Probe q01 = probe_at(m01), q12 = probe_at(m12), q20 = probe_at(m20);
          Tri subs[4] = {{{cur.v[0], m01, m20}, {cur.p[0], q01, q20}, 0},
                         {{m01, cur.v[1], m12}, {q01, cur.p[1], q12}, 0},
                         {{m20, m12, cur.v[2]}, {q20, q12, cur.p[2]}, 0},
                         {{m01, m12, m20}, {q01, q12, q20}, 0}};
          bool found = false;
          for (auto& s : subs) {
            if (!(detail::same_cell(s.p[0], s.p[1]) && detail::same_cell(s.p[0], s.p[2]))) {
              lost = true;
              break;
            }
            double a2, b2;
            if (locate(s, &a2, &b2) != 0) {
              cur = s;
              found = true;
              break;
            }
          }
          if (lost || !found) break;
        }
        if (lost) {
          std::ostringstream os;
          os << "unresolved cluster boundary between chords " << x << " and " << y;
          throw ResolutionError(os.str());
        }
        locate(cur, &al, &be);
        Vec z = (cur.v[0] + al * (cur.v[1] - cur.v[0]) + be * (cur.v[2] - cur.v[0])).normalized();
        double hd = std::min({cur.p[0].distance, cur.p[1].distance, cur.p[2].distance});
        double approach = 0;
        ++rep.flows;
        if (!detail::validate(F, y, F.sphere_point(x, z, eps), hd, &approach)) {
          std::ostringstream os;
          os << "discarded zero " << x << "->" << y << " (closest approach " << approach << ")";
          rep.discarded.push_back(os.str());
          log(LogLevel::debug, os.str());
          continue;
        }
        FlowLine l;
        l.x = x;
        l.y = y;
        l.sign = sg;
        l.g = tr.p[0].g;
        l.sphere_point = z;
        l.approach = approach;
        rep.lines.push_back(l);
      }
    }
  }
  std::sort(rep.lines.begin(), rep.lines.end());
  return rep;
}

inline std::vector<FlowLine> count_flow_lines(const FlowField& F, int x, int y, double eps, int resolution) {
  const auto& c = F.chords();
  if (c[y].index != c[x].index - 1) throw DomainError("count_flow_lines needs ind(y) = ind(x) - 1");
  if (c[x].degenerate || c[y].degenerate) throw DegeneracyError("count_flow_lines needs nondegenerate chords");
  auto rep = count_outgoing(F, x, eps, resolution);
  if (!rep.violations.empty()) throw ResolutionError("Morse-Smale check failed: " + rep.violations.front());
  std::vector<FlowLine> out;
  for (const auto& l : rep.lines)
    if (l.y == y) out.push_back(l);
  return out;
}

// ---------------------------------------------------------------- complexes

struct MorseGenerator {
  int chord = -1;
  int degree = 0;
  double length = 0;
  GroupElement label;
};

struct MorseComplex {
  PathSpace space;
  ApproximationSpec spec;
  LocalSystem system;
  MorseControls controls;
  std::vector<GeodesicChord> chords;      // all chords of length <= ell, spectrum order
  std::vector<MorseGenerator> generators;  // length order
  std::vector<std::vector<int>> by_degree;  // generator positions per degree
  std::vector<RingMatrix> differential;    // differential[k]: C_k -> C_{k-1}
  std::vector<FlowLine> flow_lines;
  std::vector<std::string> diagnostics;
  long flows = 0;

  int top_degree() const { return static_cast<int>(by_degree.size()) - 1; }
  int rank() const { return system.rank(); }
  int nvars() const { return system.ring_vars(); }

  ChainComplexData chain() const {
    ChainComplexData c;
    c.nvars = nvars();
    const int r = rank();
    for (int k = 0; k <= top_degree(); ++k) {
      c.dims.push_back(by_degree[k].size() * r);
      std::vector<std::string> labels;
      for (int gi : by_degree[k])
        for (int i = 0; i < r; ++i) {
          std::string s = "x" + std::to_string(generators[gi].chord);
          labels.push_back(r == 1 ? s : s + "#" + std::to_string(i));
        }
      c.labels.push_back(labels);
      c.boundary.push_back(differential[k]);
    }
    if (c.dims.empty()) {
      c.dims.push_back(0);
      c.labels.emplace_back();
      c.boundary.emplace_back(c.nvars, 0, 0);
    }
    return c;
  }

  // Differential on the whole generator list (length order), blocks of size rank.
  RingMatrix global_differential() const {
    const int r = rank();
    const std::size_t n = generators.size() * r;
    RingMatrix D(nvars(), n, n);
    for (int k = 1; k <= top_degree(); ++k)
      for (std::size_t j = 0; j < by_degree[k].size(); ++j)
        for (std::size_t i = 0; i < by_degree[k - 1].size(); ++i)
          for (int a = 0; a < r; ++a)
            for (int b = 0; b < r; ++b)
              D(by_degree[k - 1][i] * r + a, by_degree[k][j] * r + b) = differential[k](i * r + a, j * r + b);
    return D;
  }

  nlohmann::json to_json() const {
    nlohmann::json gens = nlohmann::json::array();
    for (std::size_t i = 0; i < generators.size(); ++i) {
      const auto& g = generators[i];
      gens.push_back({{"id", g.chord}, {"degree", g.degree}, {"length", g.length}, {"label", label_string(g.label)}});
    }
    nlohmann::json ds = nlohmann::json::array();
    for (int k = 1; k <= top_degree(); ++k) {
      std::vector<int> rows, cols;
      for (int gi : by_degree[k - 1]) rows.push_back(generators[gi].chord);
      for (int gi : by_degree[k]) cols.push_back(generators[gi].chord);
      ds.push_back({{"degree", k}, {"rows", rows}, {"cols", cols}, {"matrix", differential[k].strings()}});
    }
    nlohmann::json lines = nlohmann::json::array();
    for (const auto& l : flow_lines) lines.push_back({{"from", chords[l.x].id}, {"to", chords[l.y].id}, {"sign", l.sign}, {"class", l.g}});
    return {{"ring", system.ring_name()},
            {"K", spec.K},
            {"length_bound", spec.length_bound},
            {"generators", gens},
            {"differentials", ds},
            {"flow_lines", lines},
            {"flows", flows},
            {"diagnostics", diagnostics}};
  }
};

// Coefficient block sign * monodromy(g) added into d at block (row, col).
inline void add_block(RingMatrix& d, std::size_t row, std::size_t col, int sign, const RingMatrix& mono) {
  for (std::size_t a = 0; a < mono.rows; ++a)
    for (std::size_t b = 0; b < mono.cols; ++b) d(row * mono.rows + a, col * mono.cols + b) += Laurent(d.nvars, sign) * mono(a, b);
}

inline GroupElement system_element(const LocalSystem& sys, const GroupElement& g) {
  if (sys.group().kind == GroupModel::Kind::trivial) return {};
  return g;
}

// Assembles the complex from a certified spectrum.
inline MorseComplex build_complex(const PathSpace& X, const LocalSystem& system, const ChordSpectrum& spectrum,
                                  const ApproximationSpec& spec, const MorseControls& ctl = {}) {
  AdmissibilityReport adm = X.is_admissible(spec, spectrum.values, spectrum.cutoff);
  if (!adm.admissible) throw AdmissibilityError("approximation (K=" + std::to_string(spec.K) + ") is not admissible: " + adm.detail);
  BumpyReport cert = bumpy_certificate(X, spectrum, spec.length_bound, ctl.chords.degeneracy_threshold);
  if (!cert.passed) throw DegeneracyError("bumpy certificate failed; run perturb_until_bumpy first");
  if (system.group().kind == GroupModel::Kind::free_abelian && system.group().rank != X.group_rank())
    throw ConfigError("local system group rank " + std::to_string(system.group().rank) + " does not match the path space (" +
                      std::to_string(X.group_rank()) + ")");
  MorseComplex mc{X, spec, system, ctl, {}, {}, {}, {}, {}, {}, 0};
  for (const auto& c : spectrum.chords)
    if (c.length <= spec.length_bound) mc.chords.push_back(c);
  for (std::size_t i = 0; i < mc.chords.size(); ++i) mc.chords[i].id = static_cast<int>(i);
  int top = -1;
  for (const auto& c : mc.chords) top = std::max(top, c.index);
  mc.by_degree.assign(top + 1, {});
  for (const auto& c : mc.chords) {
    mc.by_degree[c.index].push_back(static_cast<int>(mc.generators.size()));
    mc.generators.push_back({c.id, c.index, c.length, c.label});
  }
  std::vector<int> position(mc.chords.size(), -1);  // chord -> index within its degree
  for (int k = 0; k <= top; ++k)
    for (std::size_t i = 0; i < mc.by_degree[k].size(); ++i) position[mc.generators[mc.by_degree[k][i]].chord] = static_cast<int>(i);

  const int r = system.rank();
  for (int k = 0; k <= top; ++k)
    mc.differential.emplace_back(system.ring_vars(), k == 0 ? 0 : mc.by_degree[k - 1].size() * r, mc.by_degree[k].size() * r);

  FlowField F(X, mc.chords, ctl);
  for (const auto& c : mc.chords) {
    if (c.index == 0) continue;
    bool any_target = false;
    for (const auto& y : mc.chords)
      if (y.index == c.index - 1 && y.label == c.label && y.energy < c.energy) any_target = true;
    if (!any_target) continue;
    CountReport rep = count_outgoing(F, c.id, ctl.epsilon, ctl.resolution);
    mc.flows += rep.flows;
    for (const auto& v : rep.violations) throw ResolutionError("Morse-Smale check failed: " + v);
    for (const auto& d : rep.discarded) mc.diagnostics.push_back(d);
    for (const auto& l : rep.lines) {
      if (!(mc.chords[l.y].length < mc.chords[l.x].length)) throw ContractViolation("flow line does not decrease length");
      add_block(mc.differential[c.index], position[l.y], position[l.x], l.sign, system.monodromy(system_element(system, l.g)));
      mc.flow_lines.push_back(l);
    }
  }
  for (int k = 2; k <= top; ++k) {
    RingMatrix dd = mc.differential[k - 1] * mc.differential[k];
    if (!dd.is_zero()) {
      std::ostringstream os;
      os << "d∘d != 0 in degree " << k << " (missed flow lines):";
      for (const auto& row : dd.strings()) {
        os << " [";
        for (const auto& e : row) os << " " << e;
        os << " ]";
      }
      throw ContractViolation(os.str());
    }
  }
  return mc;
}

inline MorseComplex build_complex(const PathSpace& X, const LocalSystem& system, const ApproximationSpec& spec,
                                  const MorseControls& ctl = {}) {
  return build_complex(X, system, find_chords(X, spec, ctl.chords), spec, ctl);
}

// Multiset of (x, y, sign, class) for stability comparisons.
inline std::vector<std::tuple<int, int, int, GroupElement>> flow_line_multiset(const MorseComplex& c) {
  std::vector<std::tuple<int, int, int, GroupElement>> out;
  for (const auto& l : c.flow_lines) out.emplace_back(l.x, l.y, l.sign, l.g);
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------- continuation

struct ContinuationResult {
  RingMatrix matrix;  // rows: c2 generators, cols: c1 generators, length order, rank-sized blocks
  bool chain_map = false;
  bool unit_upper_triangular = false;
  std::vector<std::string> notes;
};

namespace detail {

// Moves a path of c1's space into c2's space, subdividing each arc d times.
inline BrokenPath embed_path(const PathSpace& X1, const PathSpace& X2, const BrokenPath& p, int d) {
  BrokenPath q = X1.refine(p, d);
  std::vector<Vec> interior(q.nodes.begin() + 1, q.nodes.end() - 1);
  return X2.make_path(q.K, q.s0, interior, q.sK, q.end_offset);
}

inline bool unit_upper_triangular(const RingMatrix& m, int r) {
  if (m.rows != m.cols) return false;
  const std::size_t n = m.rows / r;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      for (int a = 0; a < r; ++a)
        for (int b = 0; b < r; ++b) {
          const Laurent& e = m(i * r + a, j * r + b);
          if (i == j) {
            if (!(e == Laurent(m.nvars, a == b ? 1 : 0))) return false;
          } else if (!e.is_zero()) {
            return false;
          }
        }
  return true;
}

}  // namespace detail

// Inverse of a unit-upper-triangular ring matrix by back substitution (1 - T + T^2 - ...).
inline RingMatrix unitriangular_inverse(const RingMatrix& m) {
  const std::size_t n = m.rows;
  RingMatrix T = m - RingMatrix::identity(m.nvars, n);
  RingMatrix inv = RingMatrix::identity(m.nvars, n), power = RingMatrix::identity(m.nvars, n);
  for (std::size_t k = 1; k <= n; ++k) {
    power = power * T;
    if (power.is_zero()) break;
    RingMatrix term = power;
    if (k % 2 == 1)
      for (auto& e : term.data) e = -e;
    inv = inv + term;
  }
  if (!(inv * m == RingMatrix::identity(m.nvars, n))) throw ContractViolation("continuation matrix is not invertible");
  return inv;
}

// Flows c1's generators, embedded by subdivision, under c2's pseudogradient. Local terms come from the
// embedded unstable frame against c2's frame; far terms of index <= 1 from sign changes along the flowed
// unstable disk.
inline ContinuationResult continuation_matrix(const MorseComplex& c1, const MorseComplex& c2) {
  if (c1.spec.length_bound > c2.spec.length_bound) throw DomainError("continuation needs ell <= ell'");
  if (c2.spec.K % c1.spec.K != 0) throw DomainError("continuation needs K' to be a multiple of K");
  if (c1.rank() != c2.rank() || c1.nvars() != c2.nvars()) throw DomainError("continuation needs the same local system");
  const int d = c2.spec.K / c1.spec.K;
  const int r = c1.rank();
  const PathSpace &X1 = c1.space, &X2 = c2.space;
  FlowField F2(X2, c2.chords, c2.controls);
  ContinuationResult out;
  out.matrix = RingMatrix(c1.nvars(), c2.generators.size() * r, c1.generators.size() * r);
  std::vector<int> gen_of2(c2.chords.size(), -1);
  for (std::size_t i = 0; i < c2.generators.size(); ++i) gen_of2[c2.generators[i].chord] = static_cast<int>(i);

  for (std::size_t j = 0; j < c1.generators.size(); ++j) {
    const auto& x = c1.chords[c1.generators[j].chord];
    BrokenPath e = detail::embed_path(X1, X2, x.path, d);
    PathEvaluation ev = X2.evaluate(e, 0);
    auto id = F2.identify(e, ev.energy, 5e-2, false);
    if (!id) {
      FlowResult fr = F2.flow(e);
      if (fr.status != FlowStatus::converged) throw ResolutionError("continuation: generator " + std::to_string(x.id) + " has no partner");
      id = std::make_pair(fr.chord, fr.monodromy);
    }
    const auto& y = c2.chords[id->first];
    if (y.index != x.index) throw ResolutionError("continuation: generator " + std::to_string(x.id) + " lands on a chord of another index");
    // local term: orientation of the embedded unstable frame against y's
    int sign = 1;
    if (x.index > 0) {
      BrokenPath yt = X2.translate(y.path, id->second);
      Mat P = X2.flow_metric(yt);
      Mat E(X2.dof(yt.K), x.index);
      const double h = 1e-6 * x.length;
      for (int c = 0; c < x.index; ++c) {
        BrokenPath ep = detail::embed_path(X1, X2, X1.retract(x.path, h * x.unstable.col(c)), d);
        BrokenPath em = detail::embed_path(X1, X2, X1.retract(x.path, -h * x.unstable.col(c)), d);
        E.col(c) = (X2.difference(X2.normalize_end(ep), yt) - X2.difference(X2.normalize_end(em), yt)) / (2 * h);
      }
      Mat M = y.unstable.transpose() * P * E;
      double det = M.determinant();
      if (!(std::abs(det) > 1e-3)) throw ResolutionError("continuation: embedded unstable frame is degenerate");
      sign = det > 0 ? 1 : -1;
    }
    add_block(out.matrix, gen_of2[y.id], j, sign, c1.system.monodromy(system_element(c1.system, id->second)));

    // far terms
    std::vector<int> same;
    for (const auto& g2 : c2.generators)
      if (g2.degree == x.index && g2.chord != y.id && g2.label == x.label && c2.chords[g2.chord].energy < x.energy) same.push_back(g2.chord);
    if (same.empty() || x.index == 0) continue;
    if (x.index >= 2) throw UnsupportedError("continuation far terms for index >= 2 are not implemented");
    const int n = std::max(16, c2.controls.resolution / 4);
    const double eps = c2.controls.epsilon;
    std::vector<double> levels;
    std::sort(same.begin(), same.end(), [&](int a, int b) { return c2.chords[a].energy > c2.chords[b].energy; });
    for (int yy : same) levels.push_back(c2.chords[yy].energy + F2.level_offset(yy));
    auto sample = [&](double t) {
      BrokenPath p = X1.retract(x.path, (t * eps * x.length) * x.unstable.col(0));
      FlowResult fr = F2.flow(detail::embed_path(X1, X2, p, d), levels, true);
      std::vector<detail::Probe> pr;
      for (std::size_t k = 0; k < same.size(); ++k) pr.push_back(detail::probe(F2, same[k], fr.hits[k]));
      return pr;
    };
    auto probes = parallel_map<std::vector<detail::Probe>>(n + 1, c2.controls.threads, [&](std::size_t i) { return sample(-1.0 + 2.0 * i / n); });
    for (std::size_t k = 0; k < same.size(); ++k)
      for (int i = 0; i < n; ++i) {
        const auto &pa = probes[i][k], &pb = probes[i + 1][k];
        if (!detail::same_cell(pa, pb) || (pa.u[0] < 0) == (pb.u[0] < 0)) continue;
        int s = pb.u[0] > pa.u[0] ? 1 : -1;
        add_block(out.matrix, gen_of2[same[k]], j, s, c1.system.monodromy(system_element(c1.system, pa.g)));
        out.notes.push_back("far term " + std::to_string(x.id) + " -> " + std::to_string(same[k]));
      }
  }
  RingMatrix D1 = c1.global_differential(), D2 = c2.global_differential();
  out.chain_map = D2 * out.matrix == out.matrix * D1;
  if (c1.spec.length_bound == c2.spec.length_bound) {
    out.unit_upper_triangular = detail::unit_upper_triangular(out.matrix, r);
    if (!out.unit_upper_triangular) throw ContractViolation("continuation matrix at equal ell is not unit upper triangular");
    unitriangular_inverse(out.matrix);
  }
  return out;
}

}  // namespace chordmorse
