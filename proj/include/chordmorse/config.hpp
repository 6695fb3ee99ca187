#pragma once

#include <json.hpp>

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "chordmorse/chords.hpp"
#include "chordmorse/errors.hpp"
#include "chordmorse/filtration.hpp"
#include "chordmorse/geometry.hpp"
#include "chordmorse/localsys.hpp"
#include "chordmorse/morse.hpp"
#include "chordmorse/pathspace.hpp"
#include "chordmorse/surrogates.hpp"

namespace chordmorse {

// A parsed and normalized run configuration. `normalized` holds every field with its default filled
// in; reports embed it verbatim.
struct RunConfig {
  std::string name;
  nlohmann::json manifold_json, source_json, target_json, system_json;
  ManifoldModel manifold;
  SubmanifoldModel source, target;
  ApproximationSpec spec;
  MorseControls controls;
  std::uint64_t seed = 0;
  std::string surrogate;  // "", "torus-point", "torus-circle", "sphere-two-point"
  std::optional<ApproximationSpec> continuation;
  std::string out_dir = ".";
  nlohmann::json normalized;

  PathSpace space() const { return PathSpace(manifold, source, target); }
  LocalSystem system() const { return local_system_from_json(system_json, space().group()); }
};

namespace detail {

inline void only_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::get_or;
  RunConfig c;
  if (!j.is_object() || j.empty()) throw ConfigError("config must be a non-empty object");
  detail::only_keys(j, {"name", "manifold", "submanifold", "source", "target", "local_system", "approximation", "controls",
                        "surrogate", "continuation", "output", "$schema"},
                    "config");
  c.name = get_or<std::string>(j, "name", "unnamed", "config");
  if (!j.contains("manifold")) throw ConfigError("config needs a manifold");
  c.manifold_json = j["manifold"];
  c.manifold = ManifoldModel::from_json(c.manifold_json);

  if (j.contains("submanifold")) {
    if (j.contains("source") || j.contains("target")) throw ConfigError("give either submanifold or source/target, not both");
    c.source_json = c.target_json = j["submanifold"];
  } else if (j.contains("source") && j.contains("target")) {
    c.source_json = j["source"];
    c.target_json = j["target"];
  } else {
    throw ConfigError("config needs a submanifold (or source and target)");
  }
  c.source = SubmanifoldModel::from_json(c.manifold, c.source_json);
  c.target = SubmanifoldModel::from_json(c.manifold, c.target_json);
  c.system_json = j.value("local_system", nlohmann::json{{"trivial", true}});
  c.system();  // validates against the path-space group

  const nlohmann::json ap = j.value("approximation", nlohmann::json::object());
  detail::only_keys(ap, {"K", "length_bound", "gap_fraction"}, "approximation");
  c.spec.K = get_or<int>(ap, "K", 16, "approximation");
  c.spec.length_bound = get_or<double>(ap, "length_bound", 1.0, "approximation");
  c.spec.gap_fraction = get_or<double>(ap, "gap_fraction", 1e-3, "approximation");
  if (c.spec.K < 1) throw ConfigError("approximation.K must be >= 1");
  if (!(c.spec.length_bound > 0)) throw ConfigError("approximation.length_bound must be positive");
  if (!(c.spec.gap_fraction > 0 && c.spec.gap_fraction < 0.1)) throw ConfigError("approximation.gap_fraction must be in (0, 0.1)");

  const nlohmann::json ct = j.value("controls", nlohmann::json::object());
  detail::only_keys(ct, {"seed", "threads", "degeneracy_threshold", "dedup_radius", "random_seeds", "subtorus_grid", "max_newton",
                         "epsilon", "resolution", "bisection_rounds", "max_steps", "tolerance", "level_offset", "absorption",
                         "validation", "sphere_refinement"},
                    "controls");
  MorseControls& m = c.controls;
  ChordControls& ch = m.chords;
  c.seed = get_or<std::uint64_t>(ct, "seed", 0, "controls");
  ch.seed = c.seed;
  m.threads = ch.threads = get_or<int>(ct, "threads", 1, "controls");
  ch.degeneracy_threshold = get_or<double>(ct, "degeneracy_threshold", ch.degeneracy_threshold, "controls");
  ch.dedup_radius = get_or<double>(ct, "dedup_radius", ch.dedup_radius, "controls");
  ch.random_seeds = get_or<int>(ct, "random_seeds", ch.random_seeds, "controls");
  ch.subtorus_grid = get_or<int>(ct, "subtorus_grid", ch.subtorus_grid, "controls");
  ch.max_newton = get_or<int>(ct, "max_newton", ch.max_newton, "controls");
  m.epsilon = get_or<double>(ct, "epsilon", m.epsilon, "controls");
  m.resolution = get_or<int>(ct, "resolution", m.resolution, "controls");
  m.bisection_rounds = get_or<int>(ct, "bisection_rounds", m.bisection_rounds, "controls");
  m.max_steps = get_or<long>(ct, "max_steps", m.max_steps, "controls");
  m.tolerance = get_or<double>(ct, "tolerance", m.tolerance, "controls");
  m.level_offset = get_or<double>(ct, "level_offset", m.level_offset, "controls");
  m.absorption = get_or<double>(ct, "absorption", m.absorption, "controls");
  m.validation = get_or<double>(ct, "validation", m.validation, "controls");
  m.sphere_refinement = get_or<int>(ct, "sphere_refinement", m.sphere_refinement, "controls");
  if (m.threads < 1) throw ConfigError("controls.threads must be >= 1");
  if (!(m.epsilon > 0 && m.epsilon < 0.5)) throw ConfigError("controls.epsilon must be in (0, 0.5)");
  if (m.resolution < 4) throw ConfigError("controls.resolution must be >= 4");
  if (ch.subtorus_grid < 1 || ch.random_seeds < 0 || ch.max_newton < 1 || m.max_steps < 1 || m.bisection_rounds < 1)
    throw ConfigError("controls: counts must be positive");

  c.surrogate = get_or<std::string>(j, "surrogate", "", "config");
  if (!c.surrogate.empty() && c.surrogate != "torus-point" && c.surrogate != "torus-circle" && c.surrogate != "sphere-two-point")
    throw ConfigError("unknown surrogate '" + c.surrogate + "'");
  if (j.contains("continuation")) {
    const auto& cj = j["continuation"];
    detail::only_keys(cj, {"K", "length_bound"}, "continuation");
    ApproximationSpec s = c.spec;
    s.K = get_or<int>(cj, "K", c.spec.K, "continuation");
    s.length_bound = get_or<double>(cj, "length_bound", c.spec.length_bound, "continuation");
    if (s.K % c.spec.K != 0 || s.length_bound < c.spec.length_bound)
      throw ConfigError("continuation needs K a multiple of approximation.K and length_bound >= approximation.length_bound");
    c.continuation = s;
  }
  const nlohmann::json out = j.value("output", nlohmann::json::object());
  detail::only_keys(out, {"dir"}, "output");
  c.out_dir = get_or<std::string>(out, "dir", ".", "output");

  nlohmann::json n;
  n["name"] = c.name;
  n["manifold"] = c.manifold.to_json();
  n["source"] = c.source.to_json();
  n["target"] = c.target.to_json();
  n["local_system"] = c.system().to_json();
  n["approximation"] = {{"K", c.spec.K}, {"length_bound", c.spec.length_bound}, {"gap_fraction", c.spec.gap_fraction}};
  n["controls"] = {{"seed", c.seed},
                   {"threads", m.threads},
                   {"degeneracy_threshold", ch.degeneracy_threshold},
                   {"dedup_radius", ch.dedup_radius},
                   {"random_seeds", ch.random_seeds},
                   {"subtorus_grid", ch.subtorus_grid},
                   {"max_newton", ch.max_newton},
                   {"epsilon", m.epsilon},
                   {"resolution", m.resolution},
                   {"bisection_rounds", m.bisection_rounds},
                   {"max_steps", m.max_steps},
                   {"tolerance", m.tolerance},
                   {"level_offset", m.level_offset},
                   {"absorption", m.absorption},
                   {"validation", m.validation},
                   {"sphere_refinement", m.sphere_refinement}};
  n["surrogate"] = c.surrogate;
  if (c.continuation) n["continuation"] = {{"K", c.continuation->K}, {"length_bound", c.continuation->length_bound}};
  n["output"] = {{"dir", c.out_dir}};
  c.normalized = n;
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON in ") + path + ": " + e.what());
  }
  return parse_config(j);
}

// The CW surrogate named by the config, sized by its geometry and length bound.
inline std::optional<PairModel> config_surrogate(const RunConfig& c) {
  if (c.surrogate.empty()) return std::nullopt;
  const double ell = c.spec.length_bound;
  if (c.surrogate == "torus-point") {
    const auto& f = c.manifold.factors().at(0);
    if (f.kind != Factor::Kind::torus) throw ConfigError("torus-point surrogate needs a torus");
    return torus_point_surrogate(f.gram, ell);
  }
  if (c.surrogate == "torus-circle") return torus_circle_surrogate(ell);
  const auto& f = c.manifold.factors().at(0);
  if (f.kind != Factor::Kind::ellipsoid) throw ConfigError("sphere-two-point surrogate needs an ellipsoid");
  Eigen::Vector3d a = c.source.basepoint().head<3>(), b = c.target.basepoint().head<3>();
  double angle = std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0));
  double radius = std::cbrt(f.axes[0] * f.axes[1] * f.axes[2]);
  return sphere_two_point_surrogate(sphere_geodesic_count(angle, radius, ell));
}

}  // namespace chordmorse
