#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "chordmorse/errors.hpp"
#include "chordmorse/laurent.hpp"

namespace chordmorse {

using GroupElement = std::vector<std::int64_t>;

// Model of pi_1 of the relevant path-space component.
struct GroupModel {
  enum class Kind { trivial, free_abelian, finite_cyclic };
  Kind kind = Kind::trivial;
  int rank = 0;   // free abelian rank d
  int order = 1;  // finite cyclic order m
  std::vector<std::string> generators;

  static GroupModel trivial() { return {}; }
  static GroupModel free_abelian(int d) {
    GroupModel g;
    g.kind = d == 0 ? Kind::trivial : Kind::free_abelian;
    g.rank = d;
    for (int i = 0; i < d; ++i) g.generators.push_back("g" + std::to_string(i + 1));
    return g;
  }
  static GroupModel finite_cyclic(int m) {
    if (m < 1) throw ConfigError("cyclic group order must be positive");
    GroupModel g;
    g.kind = Kind::finite_cyclic;
    g.order = m;
    g.generators = {"g1"};
    return g;
  }

  // Number of integer coordinates of an element.
  int element_size() const { return kind == Kind::finite_cyclic ? 1 : rank; }
  GroupElement identity() const { return GroupElement(element_size(), 0); }

  GroupElement normalize(GroupElement g) const {
    if (static_cast<int>(g.size()) != element_size())
      throw DomainError("group element has wrong length");
    if (kind == Kind::finite_cyclic) g[0] = ((g[0] % order) + order) % order;
    return g;
  }
  GroupElement multiply(const GroupElement& a, const GroupElement& b) const {
    GroupElement r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += b[i];
    return normalize(r);
  }
  GroupElement inverse(const GroupElement& a) const {
    GroupElement r = a;
    for (auto& x : r) x = -x;
    return normalize(r);
  }

  std::string name() const {
    switch (kind) {
      case Kind::trivial: return "1";
      case Kind::free_abelian: return "Z^" + std::to_string(rank);
      case Kind::finite_cyclic: return "Z/" + std::to_string(order);
    }
    return "?";
  }

  static GroupModel parse(const std::string& s) {
    if (s == "1" || s == "trivial" || s == "Z^0") return trivial();
    if (s.rfind("Z^", 0) == 0) return free_abelian(std::stoi(s.substr(2)));
    if (s.rfind("Z/", 0) == 0) return finite_cyclic(std::stoi(s.substr(2)));
    throw ConfigError("unknown group '" + s + "'");
  }
};

namespace detail {

// Determinant by fraction-free elimination (square matrices).
inline Laurent determinant(RingMatrix m) {
  const std::size_t n = m.rows;
  if (n != m.cols) throw ContractViolation("determinant of non-square matrix");
  if (n == 0) return Laurent(m.nvars, 1);
  Laurent prev(m.nvars, 1);
  int sign = 1;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    while (p < n && m(p, k).is_zero()) ++p;
    if (p == n) return Laurent(m.nvars);
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(p, j), m(k, j));
      sign = -sign;
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      for (std::size_t j = k + 1; j < n; ++j)
        m(i, j) = exact_div(m(k, k) * m(i, j) - m(i, k) * m(k, j), prev);
      m(i, k) = Laurent(m.nvars);
    }
    prev = m(k, k);
  }
  return sign > 0 ? m(n - 1, n - 1) : -m(n - 1, n - 1);
}

// Inverse of a matrix with unit determinant, via the adjugate.
inline RingMatrix unit_inverse(const RingMatrix& m) {
  const std::size_t n = m.rows;
  Laurent det = determinant(m);
  if (!det.is_unit()) throw ConfigError("monodromy matrix is not invertible over the ring (det " + det.str() + ")");
  RingMatrix inv(m.nvars, n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      RingMatrix minor(m.nvars, n - 1, n - 1);
      for (std::size_t r = 0, rr = 0; r < n; ++r) {
        if (r == j) continue;
        for (std::size_t c = 0, cc = 0; c < n; ++c) {
          if (c == i) continue;
          minor(rr, cc++) = m(r, c);
        }
        ++rr;
      }
      Laurent cof = determinant(minor);
      if ((i + j) % 2 == 1) cof = -cof;
      inv(i, j) = exact_div(cof, det);
    }
  return inv;
}

inline RingMatrix power(const RingMatrix& m, const RingMatrix& m_inv, std::int64_t k) {
  RingMatrix base = k >= 0 ? m : m_inv;
  std::uint64_t e = static_cast<std::uint64_t>(k >= 0 ? k : -k);
  RingMatrix result = RingMatrix::identity(m.nvars, m.rows);
  while (e > 0) {
    if (e & 1u) result = result * base;
    base = base * base;
    e >>= 1u;
  }
  return result;
}

}  // namespace detail

// Representation of a group model by invertible matrices over Z or a Laurent ring.
class LocalSystem {
 public:
  LocalSystem() = default;

  // Constant rank-one Z system.
  static LocalSystem trivial(const GroupModel& group) {
    std::vector<RingMatrix> gens(group.generators.size(), RingMatrix::identity(0, 1));
    return LocalSystem(group, 0, 1, gens, false);
  }

  LocalSystem(GroupModel group, int ring_vars, int rank, std::vector<RingMatrix> generator_monodromy, bool is_free)
      : group_(std::move(group)), ring_vars_(ring_vars), rank_(rank), gens_(std::move(generator_monodromy)), free_(is_free) {
    if (gens_.size() != group_.generators.size())
      throw ConfigError("local system needs one monodromy matrix per group generator");
    for (const auto& g : gens_)
      if (g.rows != static_cast<std::size_t>(rank_) || g.cols != static_cast<std::size_t>(rank_))
        throw ConfigError("monodromy matrix has wrong size for rank " + std::to_string(rank_));
    for (const auto& g : gens_) inverses_.push_back(detail::unit_inverse(g));
    for (std::size_t i = 0; i < gens_.size(); ++i)
      for (std::size_t j = i + 1; j < gens_.size(); ++j)
        if (!(gens_[i] * gens_[j] == gens_[j] * gens_[i]))
          throw ConfigError("monodromies of abelian group generators do not commute");
    if (group_.kind == GroupModel::Kind::finite_cyclic && !gens_.empty()) {
      RingMatrix p = detail::power(gens_[0], inverses_[0], group_.order);
      if (!(p == RingMatrix::identity(ring_vars_, rank_)))
        throw ConfigError("monodromy of cyclic generator does not have the group order");
    }
  }

  const GroupModel& group() const { return group_; }
  int ring_vars() const { return ring_vars_; }
  bool over_laurent() const { return ring_vars_ > 0; }
  int rank() const { return rank_; }
  bool is_free() const { return free_; }
  const std::vector<RingMatrix>& generator_monodromy() const { return gens_; }

  // Monodromy of a group element: product of generator powers (abelian groups only).
  RingMatrix monodromy(const GroupElement& element) const {
    GroupElement g = group_.normalize(element);
    RingMatrix result = RingMatrix::identity(ring_vars_, rank_);
    if (group_.kind == GroupModel::Kind::trivial) return result;
    for (std::size_t i = 0; i < gens_.size(); ++i)
      if (g[i] != 0) result = result * detail::power(gens_[i], inverses_[i], g[i]);
    return result;
  }

  std::string ring_name() const {
    if (ring_vars_ == 0) return "Z";
    std::string s = "Z[";
    for (int i = 0; i < ring_vars_; ++i) s += (i ? "," : "") + std::string("t") + std::to_string(i + 1) + "^±1";
    return s + "]";
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["group"] = group_.name();
    j["rank"] = rank_;
    j["ring"] = ring_name();
    j["free"] = free_;
    nlohmann::json mono = nlohmann::json::object();
    for (std::size_t i = 0; i < gens_.size(); ++i) mono[group_.generators[i]] = gens_[i].strings();
    j["monodromy"] = mono;
    return j;
  }

 private:
  GroupModel group_;
  int ring_vars_ = 0;
  int rank_ = 1;
  std::vector<RingMatrix> gens_, inverses_;
  bool free_ = false;
};

// Rank-one regular representation over Z[t1^{±1},...,td^{±1}]: generator i acts by t_i.
inline LocalSystem free_system(const GroupModel& group) {
  if (group.kind == GroupModel::Kind::finite_cyclic)
    throw UnsupportedError("free local system over a finite cyclic group needs the ring Z[Z/m], which is not supported");
  if (group.kind == GroupModel::Kind::trivial) return LocalSystem::trivial(group);
  std::vector<RingMatrix> gens;
  for (int i = 0; i < group.rank; ++i) {
    RingMatrix m(group.rank, 1, 1);
    m(0, 0) = Laurent::variable(group.rank, i);
    gens.push_back(m);
  }
  return LocalSystem(group, group.rank, 1, gens, true);
}

// Builds a local system from config JSON for the given pi_1 model.
// Accepted forms: {"free": true}, {"trivial": true}, {"group": "Z^2", "rank": 1, "monodromy": {"g1": [[-1]], ...}}.
inline LocalSystem local_system_from_json(const nlohmann::json& j, const GroupModel& group) {
  if (!j.is_object()) throw ConfigError("local_system must be an object");
  if (j.value("free", false)) return free_system(group);
  if (j.value("trivial", false) || j.empty()) return LocalSystem::trivial(group);
  if (j.contains("group")) {
    GroupModel declared = GroupModel::parse(j.at("group").get<std::string>());
    if (declared.kind != group.kind || declared.rank != group.rank || declared.order != group.order)
      throw ConfigError("local_system group " + declared.name() + " does not match the path-space model " + group.name());
  }
  int rank = j.value("rank", 1);
  if (rank < 1) throw ConfigError("local_system rank must be >= 1");
  const auto& mono = j.at("monodromy");
  std::vector<RingMatrix> gens;
  int nvars = 0;
  for (const auto& name : group.generators) {
    if (!mono.contains(name)) throw ConfigError("missing monodromy for generator " + name);
    for (const auto& row : mono.at(name))
      for (const auto& e : row)
        if (e.is_string()) nvars = std::max(nvars, group.rank);
  }
  for (const auto& name : group.generators) {
    const auto& rows = mono.at(name);
    if (!rows.is_array() || static_cast<int>(rows.size()) != rank) throw ConfigError("monodromy of " + name + " must be rank x rank");
    RingMatrix m(nvars, rank, rank);
    for (int r = 0; r < rank; ++r) {
      if (!rows[r].is_array() || static_cast<int>(rows[r].size()) != rank) throw ConfigError("monodromy of " + name + " must be rank x rank");
      for (int c = 0; c < rank; ++c) {
        const auto& e = rows[r][c];
        if (e.is_number_integer())
          m(r, c) = Laurent(nvars, BigInt(e.get<long long>()));
        else if (e.is_string())
          m(r, c) = Laurent::parse(e.get<std::string>(), nvars);
        else
          throw ConfigError("monodromy entries must be integers or ring-element strings");
      }
    }
    gens.push_back(m);
  }
  return LocalSystem(group, nvars, rank, gens, false);
}

// Winding class of a discrete path in flat-torus lattice coordinates (points may be wrapped).
// Consecutive points are joined by the shortest lattice-coordinate step; a step whose metric
// length reaches `max_step` cannot be lifted unambiguously. The class is the lattice vector
// (lifted end) - end_reference, where end_reference defaults to the start point (closed loops).
inline GroupElement path_class(const std::vector<Eigen::VectorXd>& points, const Eigen::MatrixXd& gram, double max_step,
                               const Eigen::VectorXd* end_reference = nullptr) {
  if (points.empty()) throw DomainError("path_class of an empty path");
  const Eigen::Index n = points.front().size();
  Eigen::VectorXd lifted = points.front();
  for (std::size_t i = 1; i < points.size(); ++i) {
    Eigen::VectorXd d = points[i] - points[i - 1];
    for (Eigen::Index k = 0; k < n; ++k) d[k] -= std::round(d[k]);
    double len = std::sqrt(d.dot(gram * d));
    if (len >= max_step)
      throw LiftingError("path step " + std::to_string(i) + " has length " + std::to_string(len) + " >= " + std::to_string(max_step));
    lifted += d;
  }
  Eigen::VectorXd disp = lifted - (end_reference ? *end_reference : points.front());
  GroupElement g(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    double r = std::round(disp[k]);
    if (std::abs(disp[k] - r) > 1e-9) throw LiftingError("path does not end at a lattice translate of the reference point");
    g[k] = static_cast<std::int64_t>(r);
  }
  return g;
}

}  // namespace chordmorse
