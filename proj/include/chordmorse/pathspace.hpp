#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chordmorse/errors.hpp"
#include "chordmorse/geometry.hpp"
#include "chordmorse/localsys.hpp"

namespace chordmorse {

struct ApproximationSpec {
  int K = 16;
  double length_bound = 1.0;
  double gap_fraction = 1e-3;  // regular-value gap = gap_fraction * length_bound
  bool admissible = false;
};

// A point of the broken-geodesic model: endpoints on N0, N1 given by parameters, interior nodes
// by chart coordinates. Torus coordinates are lifts; the last node is N1(sK) + end_offset.
struct BrokenPath {
  int K = 1;
  Vec s0, sK;
  Vec end_offset;                 // ambient-sized, integer entries on torus coordinates
  std::vector<int> charts;        // per node (endpoints use the best chart, informational)
  std::vector<Vec> u;             // interior chart coordinates (empty at the endpoints)
  std::vector<Vec> nodes;         // ambient positions q_0..q_K
  std::vector<Vec> velocity_hint; // optional warm starts for the K arcs
};

struct PathEvaluation {
  double energy = 0;
  Vec gradient;
  Mat hessian;
  bool has_hessian = false;
  std::vector<Segment> segments;
  std::vector<Vec> ambient_gradient;  // per node covector

  std::vector<Vec> velocities() const {
    std::vector<Vec> v;
    for (const auto& s : segments) v.push_back(s.va);
    return v;
  }
};

struct AdmissibilityReport {
  bool admissible = false;
  std::string binding;  // "injectivity", "regular-value" or "none"
  double lhs = 0, rhs = 0;
  std::string detail;
};

class PathSpace {
 public:
  PathSpace() = default;
  PathSpace(ManifoldModel M, SubmanifoldModel N0, SubmanifoldModel N1)
      : M_(std::move(M)), N0_(std::move(N0)), N1_(std::move(N1)) {
    const int A = M_.ambient_dim();
    torus_coord_.assign(A, false);
    // deck translations: subtorus pieces shared by both ends
    std::vector<Vec> gens_amb, gens_s0, gens_sK;
    for (std::size_t i = 0; i < M_.factors().size(); ++i) {
      const auto& p0 = N0_.parts()[i];
      const auto& p1 = N1_.parts()[i];
      if (p0.kind != SubmanifoldPart::Kind::subtorus || p1.kind != SubmanifoldPart::Kind::subtorus) continue;
      if (p0.directions != p1.directions) continue;
      for (Eigen::Index c = 0; c < p0.directions.cols(); ++c) {
        Vec ga = Vec::Zero(A);
        ga.segment(M_.factor_offset(i), p0.directions.rows()) = p0.directions.col(c);
        Vec g0 = Vec::Zero(N0_.dim()), g1 = Vec::Zero(N1_.dim());
        g0[N0_.part_offset(i) + c] = 1;
        g1[N1_.part_offset(i) + c] = 1;
        gens_amb.push_back(ga);
        gens_s0.push_back(g0);
        gens_sK.push_back(g1);
      }
    }
    rank_ = static_cast<int>(gens_amb.size());
    deck_amb_ = Mat::Zero(A, rank_);
    deck_s0_ = Mat::Zero(N0_.dim(), rank_);
    deck_sK_ = Mat::Zero(N1_.dim(), rank_);
    for (int r = 0; r < rank_; ++r) {
      deck_amb_.col(r) = gens_amb[r];
      deck_s0_.col(r) = gens_s0[r];
      deck_sK_.col(r) = gens_sK[r];
    }
    for (std::size_t i = 0; i < M_.factors().size(); ++i)
      if (M_.factors()[i].kind == Factor::Kind::torus)
        for (int k = 0; k < M_.factors()[i].m; ++k) torus_coord_[M_.factor_offset(i) + k] = true;
  }

  const ManifoldModel& manifold() const { return M_; }
  const SubmanifoldModel& source() const { return N0_; }
  const SubmanifoldModel& target() const { return N1_; }
  int dof(int K) const { return N0_.dim() + (K - 1) * M_.dim() + N1_.dim(); }
  GroupModel group() const { return GroupModel::free_abelian(rank_); }
  int group_rank() const { return rank_; }
  const Mat& deck_ambient() const { return deck_amb_; }

  // ---- construction ----
  BrokenPath make_path(int K, const Vec& s0, const std::vector<Vec>& interior, const Vec& sK, const Vec& end_offset) const {
    if (K < 1) throw DomainError("K must be >= 1");
    if (static_cast<int>(interior.size()) != K - 1) throw DomainError("need K-1 interior nodes");
    BrokenPath p;
    p.K = K;
    p.s0 = s0;
    p.sK = sK;
    p.end_offset = end_offset.size() ? end_offset : Vec::Zero(M_.ambient_dim());
    p.charts.assign(K + 1, 0);
    p.u.assign(K + 1, Vec());
    p.nodes.assign(K + 1, Vec());
    for (int j = 1; j < K; ++j) {
      ChartPoint cp = M_.chart_point(M_.project(interior[j - 1]));
      p.charts[j] = cp.chart;
      // torus coordinates keep their lift
      p.u[j] = cp.u;
      p.nodes[j] = M_.embed(cp);
      keep_lift(p.nodes[j], interior[j - 1]);
      p.u[j] = M_.chart_coords(cp.chart, p.nodes[j]);
    }
    set_endpoints(p);
    return p;
  }

  // Constant path at the source basepoint (requires N0 and N1 to share it).
  BrokenPath constant_path(int K) const {
    Vec q = N0_.basepoint();
    return make_path(K, Vec::Zero(N0_.dim()), std::vector<Vec>(K - 1, q), Vec::Zero(N1_.dim()), Vec::Zero(M_.ambient_dim()));
  }

  // Samples a curve c: [0,1] -> ambient at t_j = j/K for interior nodes.
  template <class Curve>
  BrokenPath sample_curve(int K, const Vec& s0, const Curve& c, const Vec& sK, const Vec& end_offset) const {
    std::vector<Vec> interior;
    for (int j = 1; j < K; ++j) interior.push_back(c(static_cast<double>(j) / K));
    return make_path(K, s0, interior, sK, end_offset);
  }

  Vec coords(const BrokenPath& p) const {
    Vec z(dof(p.K));
    int o = 0;
    z.segment(o, N0_.dim()) = p.s0;
    o += N0_.dim();
    for (int j = 1; j < p.K; ++j) {
      z.segment(o, M_.dim()) = p.u[j];
      o += M_.dim();
    }
    z.segment(o, N1_.dim()) = p.sK;
    return z;
  }

  // Moves all coordinates by dz in the current charts.
  BrokenPath retract(const BrokenPath& p, const Vec& dz) const {
    if (dz.size() != dof(p.K)) throw DomainError("coordinate step has wrong dimension");
    BrokenPath q = p;
    int o = 0;
    q.s0 += dz.segment(o, N0_.dim());
    o += N0_.dim();
    for (int j = 1; j < p.K; ++j) {
      q.u[j] += dz.segment(o, M_.dim());
      o += M_.dim();
      q.nodes[j] = M_.embed({q.charts[j], q.u[j]});
    }
    q.sK += dz.segment(o, N1_.dim());
    set_endpoints(q);
    return q;
  }

  // Switches ellipsoid factors whose stereographic coordinate left the |u| <= 1.6 core.
  BrokenPath rechart(const BrokenPath& p) const {
    BrokenPath q = p;
    for (int j = 1; j < p.K; ++j) {
      auto c = M_.decode_chart(p.charts[j]);
      bool changed = false;
      for (std::size_t i = 0; i < M_.factors().size(); ++i) {
        if (M_.factors()[i].kind != Factor::Kind::ellipsoid) continue;
        int o = M_.factor_intrinsic_offset(i);
        if (p.u[j].segment(o, 2).norm() > 1.6) {
          c[i] = 1 - c[i];
          changed = true;
        }
      }
      if (!changed) continue;
      q.charts[j] = M_.encode_chart(c);
      q.u[j] = M_.chart_coords(q.charts[j], p.nodes[j]);
    }
    return q;
  }

  // ---- energy ----
  PathEvaluation evaluate(const BrokenPath& p, int order) const {
    check(p);
    const int K = p.K, A = M_.ambient_dim();
    PathEvaluation ev;
    ev.segments.reserve(K);
    ev.ambient_gradient.assign(K + 1, Vec::Zero(A));
    const bool second = order >= 2;
    for (int j = 1; j <= K; ++j) {
      const Vec* hint = static_cast<int>(p.velocity_hint.size()) == K ? &p.velocity_hint[j - 1] : nullptr;
      ev.segments.push_back(M_.solve_segment(p.nodes[j - 1], p.nodes[j], hint, second));
      ev.energy += ev.segments.back().energy;
    }
    ev.energy *= K;
    if (order < 1) return ev;
    for (int j = 1; j <= K; ++j) {
      const Segment& s = ev.segments[j - 1];
      Mat Wa = M_.ambient_metric(s.a), Wb = M_.ambient_metric(s.b);
      ev.ambient_gradient[j - 1] += -2.0 * K * (Wa * s.va);
      ev.ambient_gradient[j] += 2.0 * K * (Wb * s.vb);
    }
    Mat J = coordinate_jacobian(p);
    Vec gq(A * (K + 1));
    for (int j = 0; j <= K; ++j) gq.segment(j * A, A) = ev.ambient_gradient[j];
    ev.gradient = J.transpose() * gq;
    if (!second) return ev;
    Mat Hq = Mat::Zero(A * (K + 1), A * (K + 1));
    for (int j = 1; j <= K; ++j) {
      const Segment& s = ev.segments[j - 1];
      const int a = (j - 1) * A, b = j * A;
      Hq.block(a, a, A, A) += -2.0 * K * (s.Ca + s.Wa * s.Vaa);
      Hq.block(a, b, A, A) += -2.0 * K * (s.Wa * s.Vab);
      Hq.block(b, a, A, A) += 2.0 * K * (s.Wb * s.Vba);
      Hq.block(b, b, A, A) += 2.0 * K * (s.Cb + s.Wb * s.Vbb);
    }
    Mat H = J.transpose() * Hq * J;
    const int n = M_.dim();
    for (int j = 1; j < K; ++j) {
      auto D2 = M_.chart_hessians({p.charts[j], p.u[j]});
      const int o = N0_.dim() + (j - 1) * n;
      for (int r = 0; r < A; ++r) H.block(o, o, n, n) += ev.ambient_gradient[j][r] * D2[r];
    }
    ev.hessian = 0.5 * (H + H.transpose());
    ev.has_hessian = true;
    return ev;
  }

  double energy(const BrokenPath& p) const { return evaluate(p, 0).energy; }
  Vec energy_gradient(const BrokenPath& p) const { return evaluate(p, 1).gradient; }
  Mat energy_hessian(const BrokenPath& p) const { return evaluate(p, 2).hessian; }

  // Node-indexed covectors: endpoints restricted to TN (in N-parameters), interior in chart coordinates.
  std::vector<Vec> gradient_by_node(const BrokenPath& p, const Vec& g) const {
    std::vector<Vec> out;
    int o = 0;
    out.push_back(g.segment(o, N0_.dim()));
    o += N0_.dim();
    for (int j = 1; j < p.K; ++j) {
      out.push_back(g.segment(o, M_.dim()));
      o += M_.dim();
    }
    out.push_back(g.segment(o, N1_.dim()));
    return out;
  }

  // d(nodes)/dz, ambient (K+1)A x dof.
  Mat coordinate_jacobian(const BrokenPath& p) const {
    const int A = M_.ambient_dim(), n = M_.dim(), K = p.K;
    Mat J = Mat::Zero(A * (K + 1), dof(K));
    J.block(0, 0, A, N0_.dim()) = N0_.jacobian();
    for (int j = 1; j < K; ++j) J.block(j * A, N0_.dim() + (j - 1) * n, A, n) = M_.chart_jacobian({p.charts[j], p.u[j]});
    J.block(K * A, N0_.dim() + (K - 1) * n, A, N1_.dim()) = N1_.jacobian();
    return J;
  }

  // Flow metric: pullback of (1/K) sum |xi_j|^2 + K sum |xi_j - xi_{j-1}|^2 (ambient G0 norms).
  Mat flow_metric(const BrokenPath& p) const {
    const int A = M_.ambient_dim(), K = p.K;
    Mat G = M_.base_gram();
    Mat Q = Mat::Zero(A * (K + 1), A * (K + 1));
    for (int j = 0; j <= K; ++j) Q.block(j * A, j * A, A, A) += G / K;
    for (int j = 1; j <= K; ++j) {
      const int a = (j - 1) * A, b = j * A;
      Q.block(a, a, A, A) += K * G;
      Q.block(b, b, A, A) += K * G;
      Q.block(a, b, A, A) -= K * G;
      Q.block(b, a, A, A) -= K * G;
    }
    Mat J = coordinate_jacobian(p);
    Mat P = J.transpose() * Q * J;
    return 0.5 * (P + P.transpose());
  }

  // ---- comparison and group action ----
  // Coordinates of p expressed in ref's charts, minus ref's coordinates.
  Vec difference(const BrokenPath& p, const BrokenPath& ref) const {
    if (p.K != ref.K) throw DomainError("paths have different K");
    Vec z(dof(p.K));
    int o = 0;
    z.segment(o, N0_.dim()) = p.s0 - ref.s0;
    o += N0_.dim();
    for (int j = 1; j < p.K; ++j) {
      z.segment(o, M_.dim()) = M_.chart_coords(ref.charts[j], p.nodes[j]) - ref.u[j];
      o += M_.dim();
    }
    Vec sK = p.sK;
    Vec dz = p.end_offset - ref.end_offset;
    if (dz.cwiseAbs().maxCoeff() > 0.5 && N1_.dim() > 0) {
      Mat B = N1_.jacobian();
      sK += (B.transpose() * B).ldlt().solve(B.transpose() * dz);
    }
    z.segment(o, N1_.dim()) = sK - ref.sK;
    return z;
  }

  BrokenPath translate(const BrokenPath& p, const GroupElement& g) const {
    if (static_cast<int>(g.size()) != rank_) throw DomainError("group element has wrong rank");
    if (rank_ == 0) return p;
    Vec gv(rank_);
    for (int r = 0; r < rank_; ++r) gv[r] = static_cast<double>(g[r]);
    BrokenPath q = p;
    Vec shift = deck_amb_ * gv;
    q.s0 += deck_s0_ * gv;
    q.sK += deck_sK_ * gv;
    for (int j = 1; j < p.K; ++j) {
      q.nodes[j] += shift;
      q.u[j] = M_.chart_coords(q.charts[j], q.nodes[j]);
    }
    set_endpoints(q);
    return q;
  }

  // Translate so the shared subtorus parameters of s0 lie in [0, 1); returns the element applied.
  BrokenPath canonical(const BrokenPath& p, GroupElement* applied = nullptr) const {
    GroupElement g(rank_, 0);
    for (int r = 0; r < rank_; ++r) {
      Eigen::Index idx;
      deck_s0_.col(r).maxCoeff(&idx);
      g[r] = -static_cast<std::int64_t>(std::floor(p.s0[idx] + 1e-12));
    }
    if (applied) *applied = g;
    return translate(normalize_end(p), g);
  }

  // Represents the last node with sK as close as possible to the shared reference, moving integer
  // parts into end_offset.
  BrokenPath normalize_end(const BrokenPath& p) const {
    BrokenPath q = p;
    for (std::size_t i = 0; i < M_.factors().size(); ++i) {
      const auto& p1 = N1_.parts()[i];
      if (p1.kind != SubmanifoldPart::Kind::subtorus) continue;
      const auto& p0 = N0_.parts()[i];
      bool shared = p0.kind == SubmanifoldPart::Kind::subtorus && p0.directions == p1.directions;
      for (Eigen::Index c = 0; c < p1.directions.cols(); ++c) {
        const int k1 = N1_.part_offset(i) + static_cast<int>(c);
        double ref = shared ? p.s0[N0_.part_offset(i) + c] : 0.5;
        double shift = std::round(q.sK[k1] - ref);
        if (shift == 0) continue;
        q.sK[k1] -= shift;
        q.end_offset.segment(M_.factor_offset(i), p1.directions.rows()) += shift * p1.directions.col(c);
      }
    }
    set_endpoints(q);
    return q;
  }

  // Homotopy label: the integer end offset over torus coordinates after normalization.
  GroupElement label(const BrokenPath& p) const {
    BrokenPath q = normalize_end(p);
    GroupElement out;
    for (int k = 0; k < M_.ambient_dim(); ++k)
      if (torus_coord_[k]) out.push_back(static_cast<std::int64_t>(std::llround(q.end_offset[k])));
    return out;
  }

  // Deck element taking ref's canonical lift closest to p.
  GroupElement deck_offset(const BrokenPath& p, const BrokenPath& ref) const {
    GroupElement g(rank_, 0);
    for (int r = 0; r < rank_; ++r) {
      Eigen::Index idx;
      deck_s0_.col(r).maxCoeff(&idx);
      g[r] = std::llround(p.s0[idx] - ref.s0[idx]);
    }
    return g;
  }

  // ---- subdivision ----
  BrokenPath refine(const BrokenPath& p, int d) const {
    if (d < 1) throw DomainError("refinement factor must be >= 1");
    if (d == 1) return p;
    PathEvaluation ev = evaluate(p, 0);
    std::vector<Vec> interior;
    for (int j = 1; j <= p.K; ++j) {
      GeodesicSegment g = M_.sample_geodesic(ev.segments[j - 1], d + 1);
      for (int i = 1; i <= d; ++i) {
        if (j == p.K && i == d) break;
        interior.push_back(i == d ? p.nodes[j] : g.x[i]);
      }
    }
    return make_path(p.K * d, p.s0, interior, p.sK, p.end_offset);
  }

  // ---- admissibility ----
  AdmissibilityReport is_admissible(const ApproximationSpec& spec, const std::vector<double>& spectrum, double computed_to) const {
    AdmissibilityReport r;
    const double ell = spec.length_bound, gap = spec.gap_fraction * ell;
    if (computed_to < ell + gap) {
      std::ostringstream os;
      os << "spectrum computed only to " << computed_to << " but ell + gap = " << ell + gap;
      throw InsufficientDataError(os.str());
    }
    const double inj = M_.injectivity_radius_bound();
    r.lhs = ell * ell;
    r.rhs = spec.K * inj * inj;
    if (!(r.lhs < r.rhs)) {
      r.binding = "injectivity";
      std::ostringstream os;
      os << "ell^2 = " << r.lhs << " >= K injrad^2 = " << r.rhs;
      r.detail = os.str();
      return r;
    }
    for (double s : spectrum) {
      if (std::abs(s - ell) <= gap) {
        r.binding = "regular-value";
        std::ostringstream os;
        os << "critical length " << s << " within " << gap << " of ell";
        r.detail = os.str();
        return r;
      }
    }
    r.admissible = true;
    r.binding = "none";
    return r;
  }

  // Every arc of a path below level K rho^2 is shorter than rho.
  static bool compactness_holds(const PathEvaluation& ev, int K, double rho) {
    if (!(ev.energy < K * rho * rho)) return true;
    for (const auto& s : ev.segments)
      if (std::sqrt(s.energy) > rho) return false;
    return true;
  }

  // ---- serialization ----
  nlohmann::json to_json(const BrokenPath& p) const {
    auto arr = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json nodes = nlohmann::json::array();
    for (int j = 0; j <= p.K; ++j) {
      nlohmann::json o{{"x", arr(p.nodes[j])}};
      if (j > 0 && j < p.K) {
        o["chart"] = p.charts[j];
        o["coords"] = arr(p.u[j]);
      }
      nodes.push_back(o);
    }
    return {{"K", p.K}, {"s0", arr(p.s0)}, {"sK", arr(p.sK)}, {"end_offset", arr(p.end_offset)}, {"nodes", nodes}};
  }

  BrokenPath from_json(const nlohmann::json& j) const {
    auto vec = [](const nlohmann::json& a) {
      auto v = a.get<std::vector<double>>();
      return Vec(Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    BrokenPath p;
    p.K = j.at("K").get<int>();
    if (p.K < 1) throw ConfigError("K must be >= 1");
    p.s0 = vec(j.at("s0"));
    p.sK = vec(j.at("sK"));
    p.end_offset = vec(j.at("end_offset"));
    const auto& nodes = j.at("nodes");
    if (static_cast<int>(nodes.size()) != p.K + 1) throw ConfigError("path needs K+1 nodes");
    p.charts.assign(p.K + 1, 0);
    p.u.assign(p.K + 1, Vec());
    p.nodes.assign(p.K + 1, Vec());
    for (int k = 1; k < p.K; ++k) {
      p.charts[k] = nodes[k].at("chart").get<int>();
      p.u[k] = vec(nodes[k].at("coords"));
      p.nodes[k] = M_.embed({p.charts[k], p.u[k]});
    }
    set_endpoints(p);
    return p;
  }

 private:
  void check(const BrokenPath& p) const {
    if (p.K < 1 || static_cast<int>(p.nodes.size()) != p.K + 1) throw ContractViolation("invalid path: node count");
    if (p.s0.size() != N0_.dim() || p.sK.size() != N1_.dim()) throw ContractViolation("invalid path: endpoint parameters");
  }

  void keep_lift(Vec& x, const Vec& target) const {
    for (std::size_t i = 0; i < M_.factors().size(); ++i) {
      if (M_.factors()[i].kind != Factor::Kind::torus) continue;
      x.segment(M_.factor_offset(i), M_.factors()[i].m) = target.segment(M_.factor_offset(i), M_.factors()[i].m);
    }
  }

  void set_endpoints(BrokenPath& p) const {
    p.nodes[0] = N0_.embed(p.s0);
    p.nodes[p.K] = N1_.embed(p.sK) + p.end_offset;
    p.charts[0] = M_.chart_point(p.nodes[0]).chart;
    p.charts[p.K] = M_.chart_point(p.nodes[p.K]).chart;
  }

  ManifoldModel M_;
  SubmanifoldModel N0_, N1_;
  int rank_ = 0;
  Mat deck_amb_, deck_s0_, deck_sK_;
  std::vector<bool> torus_coord_;
};

}  // namespace chordmorse
