#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "chordmorse/config.hpp"

using namespace chordmorse;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum Exit { ok = 0, verification_failed = 1, config_error = 2, contract_violation = 3 };

struct Options {
  std::string config, out, spectrum;
  int threads = 0;
  double length_bound = 0;
  int subdivisions = 0;
};

RunConfig load(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  std::ifstream in(o.config);
  if (!in) throw ConfigError("cannot open config " + o.config);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  if (j.is_object()) {
    if (o.length_bound > 0) j["approximation"]["length_bound"] = o.length_bound;
    if (o.subdivisions > 0) j["approximation"]["K"] = o.subdivisions;
    if (o.threads > 0) j["controls"]["threads"] = o.threads;
    if (!o.out.empty()) j["output"]["dir"] = o.out;
  }
  return parse_config(j);
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << text;
  spdlog::info("wrote {}", p.string());
}

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

// Chords of length <= ell only; the search itself runs a little past ell to certify the gap.
ChordSpectrum within_bound(const ChordSpectrum& s, double ell) {
  ChordSpectrum out = s;
  out.chords.clear();
  out.values.clear();
  out.members.clear();
  for (const auto& c : s.chords)
    if (c.length <= ell) out.chords.push_back(c);
  for (std::size_t i = 0; i < s.values.size(); ++i)
    if (s.values[i] <= ell) {
      out.values.push_back(s.values[i]);
      if (i < s.members.size()) out.members.push_back(s.members[i]);
    }
  return out;
}

ChordSpectrum compute_spectrum(const RunConfig& c, const PathSpace& X) {
  spdlog::info("searching chords: K={} ell={}", c.spec.K, c.spec.length_bound);
  ChordSpectrum s = find_chords(X, c.spec, c.controls.chords);
  for (const auto& w : s.warnings) spdlog::debug("chords: {}", w);
  return s;
}

// Per-degree comparison of the Morse complex with the oracle chain complex of a CW surrogate.
json oracle_block(const RunConfig& c, const PairModel& model, const ChainComplexData& morse, bool& agree) {
  LocalSystem sys = c.system();
  ChainComplexData oracle = covering_chain_oracle(model.cw, sys);
  json b;
  b["surrogate"] = model.cw.name;
  b["cells"] = model.cw.cells.size();
  agree = true;
  if (morse.nvars == 0) {
    HomologyResult hm = homology_over_Z(morse), ho = homology_over_Z(oracle);
    auto rm = hm.ranks(), ro = ho.ranks();
    std::size_t n = std::max(rm.size(), ro.size());
    rm.resize(n, 0);
    ro.resize(n, 0);
    agree = rm == ro;
    for (std::size_t k = 0; k < std::min(hm.degrees.size(), ho.degrees.size()); ++k)
      agree = agree && hm.degrees[k].torsion == ho.degrees[k].torsion;
    b["oracle_homology"] = ho.to_json();
    b["morse_ranks"] = rm;
    b["oracle_ranks"] = ro;
  } else {
    LaurentHomology hm = homology_rank_laurent(morse, c.seed), ho = homology_rank_laurent(oracle, c.seed);
    std::size_t n = std::max(hm.degrees.size(), ho.degrees.size());
    json per = json::array();
    for (std::size_t k = 0; k < n; ++k) {
      long long fm = k < hm.degrees.size() ? hm.degrees[k].field_rank : 0, fo = k < ho.degrees.size() ? ho.degrees[k].field_rank : 0;
      auto sm = k < hm.degrees.size() ? hm.degrees[k].certificate.status : ModuleCertificate::Status::zero;
      auto so = k < ho.degrees.size() ? ho.degrees[k].certificate.status : ModuleCertificate::Status::zero;
      bool same = fm == fo && sm == so;
      agree = agree && same;
      per.push_back({{"degree", k},
                     {"morse_field_rank", fm},
                     {"oracle_field_rank", fo},
                     {"morse_module", ModuleCertificate::name(sm)},
                     {"oracle_module", ModuleCertificate::name(so)},
                     {"agree", same}});
    }
    b["oracle_homology"] = ho.to_json();
    b["per_degree"] = per;
  }
  b["agree"] = agree;
  return b;
}

json homology_block(const ChainComplexData& chain, std::uint64_t seed) {
  json h;
  if (chain.nvars == 0) {
    h["Z"] = homology_over_Z(chain).to_json();
  } else {
    h["laurent_ranks"] = homology_rank_laurent(chain, seed).to_json();
    h["augmented_Z"] = homology_over_Z(augment(chain)).to_json();
  }
  return h;
}

int cmd_chords(const Options& o) {
  RunConfig c = load(o);
  PathSpace X = c.space();
  ChordSpectrum s = within_bound(compute_spectrum(c, X), c.spec.length_bound);
  fs::path dir = c.out_dir;
  write_file(dir / "chords.csv", spectrum_csv(s));
  write_json(dir / "chords.json", {{"command", "chords"}, {"config", c.normalized}, {"spectrum", spectrum_json(X, s)}});
  std::cout << s.chords.size() << " chords with length <= " << c.spec.length_bound << "\n";
  return ok;
}

int cmd_homology(const Options& o) {
  RunConfig c = load(o);
  PathSpace X = c.space();
  LocalSystem sys = c.system();
  ChordSpectrum full = compute_spectrum(c, X);
  BumpyReport cert = bumpy_certificate(X, full, c.spec.length_bound, c.controls.chords.degeneracy_threshold);
  if (!cert.passed) {
    std::ostringstream os;
    os << "bumpy certificate failed (degenerate chords:";
    for (int id : cert.degenerate_ids) os << " " << id;
    os << "; closed:";
    for (int id : cert.closed_ids) os << " " << id;
    os << "); try a perturbation of magnitude " << cert.suggested_magnitude;
    throw DegeneracyError(os.str());
  }
  MorseComplex mc = build_complex(X, sys, full, c.spec, c.controls);
  ChainComplexData chain = mc.chain();
  json rep{{"command", "homology"},
           {"config", c.normalized},
           {"spectrum", spectrum_json(X, within_bound(full, c.spec.length_bound))},
           {"bumpy", cert.to_json()},
           {"complex", mc.to_json()},
           {"homology", homology_block(chain, c.seed)}};
  bool agree = true;
  if (auto model = config_surrogate(c)) rep["oracle"] = oracle_block(c, *model, chain, agree);
  write_json(fs::path(c.out_dir) / "homology.json", rep);
  std::cout << "ring " << sys.ring_name() << ", generators per degree:";
  for (const auto& d : mc.by_degree) std::cout << " " << d.size();
  std::cout << "\n";
  if (chain.nvars == 0) {
    std::cout << "ranks:";
    for (auto r : homology_over_Z(chain).ranks()) std::cout << " " << r;
    std::cout << "\n";
  }
  if (rep.contains("oracle")) std::cout << "oracle " << (agree ? "agrees" : "DISAGREES") << "\n";
  return agree ? ok : verification_failed;
}

struct Suite {
  std::string name;
  std::string status;  // pass, fail, skipped
  std::string detail;
  json data;
};

// Rows of c2 that continue c1's generators are the leading block; there the matrix must be 1 + T.
bool leading_block_unit_triangular(const ContinuationResult& r, const MorseComplex& c1, std::string& why) {
  const int rk = c1.rank();
  const std::size_t n = c1.generators.size() * rk;
  RingMatrix block(r.matrix.nvars, n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) block(i, j) = r.matrix(i, j);
  if (!detail::unit_upper_triangular(block, rk)) {
    why = "leading block is not unit upper triangular";
    return false;
  }
  try {
    unitriangular_inverse(block);
  } catch (const ContractViolation& e) {
    why = e.what();
    return false;
  }
  for (std::size_t i = n; i < r.matrix.rows; ++i)
    for (std::size_t j = 0; j < r.matrix.cols; ++j)
      if (!r.matrix(i, j).is_zero()) {
        why = "a generator above the smaller bound receives a nonzero coefficient";
        return false;
      }
  return true;
}

int cmd_verify(const Options& o) {
  RunConfig c = load(o);
  PathSpace X = c.space();
  LocalSystem sys = c.system();
  std::vector<Suite> suites;
  auto skip_rest = [&](const std::vector<std::string>& names, const std::string& why) {
    for (const auto& n : names) suites.push_back({n, "skipped", why, {}});
  };
  ChordSpectrum full = compute_spectrum(c, X);
  BumpyReport cert = bumpy_certificate(X, full, c.spec.length_bound, c.controls.chords.degeneracy_threshold);
  suites.push_back({"bumpy", cert.passed ? "pass" : "fail",
                    cert.passed ? "nondegenerate and no closed orthogonal geodesics below ell"
                                : std::to_string(cert.degenerate_ids.size()) + " degenerate, " + std::to_string(cert.closed_ids.size()) +
                                      " closed chords",
                    cert.to_json()});
  std::optional<MorseComplex> mc;
  if (!cert.passed) {
    skip_rest({"d_squared", "index_crosscheck", "continuation", "hurewicz", "oracle", "schedule"}, "bumpy certificate failed");
  } else {
    try {
      mc = build_complex(X, sys, full, c.spec, c.controls);
      ChainComplexData chain = mc->chain();
      auto bad = chain.d_squared_violation();
      suites.push_back({"d_squared", bad ? "fail" : "pass",
                        bad ? "d∘d != 0 at degree " + std::to_string(*bad) : "exact over " + sys.ring_name(),
                        {{"generators", mc->generators.size()}, {"flow_lines", mc->flow_lines.size()}}});
    } catch (const ContractViolation& e) {
      suites.push_back({"d_squared", "fail", e.what(), {}});
    } catch (const AdmissibilityError& e) {
      suites.push_back({"d_squared", "fail", e.what(), {}});
    }

    json rows = json::array();
    bool idx_ok = true;
    int checked = 0;
    for (const auto& ch : full.chords) {
      if (ch.length > c.spec.length_bound) continue;
      int mi = morse_index(ch, c.controls.chords.degeneracy_threshold);
      JacobiCrosscheck jc = jacobi_index_crosscheck(X, ch);
      idx_ok = idx_ok && mi == jc.index;
      ++checked;
      rows.push_back({{"id", ch.id}, {"morse_index", mi}, {"jacobi_index", jc.index}, {"focal_count", jc.focal_count},
                      {"boundary_index", jc.boundary_index}});
    }
    suites.push_back({"index_crosscheck", idx_ok ? "pass" : "fail", std::to_string(checked) + " chords", rows});

    if (!mc) {
      skip_rest({"continuation"}, "no complex");
    } else if (!c.continuation) {
      skip_rest({"continuation"}, "config has no continuation block");
    } else {
      try {
        MorseComplex mc2 = build_complex(X, sys, *c.continuation, c.controls);
        ContinuationResult r = continuation_matrix(*mc, mc2);
        std::string why;
        bool tri = leading_block_unit_triangular(r, *mc, why);
        bool pass = r.chain_map && tri;
        if (!r.chain_map) why = "not a chain map";
        suites.push_back({"continuation", pass ? "pass" : "fail",
                          pass ? "chain map, 1 + T on the continued generators, invertible" : why,
                          {{"K", c.continuation->K},
                           {"length_bound", c.continuation->length_bound},
                           {"matrix", r.matrix.strings()},
                           {"notes", r.notes}}});
      } catch (const Error& e) {
        suites.push_back({"continuation", "fail", e.kind() + ": " + e.what(), {}});
      }
    }

    if (auto model = config_surrogate(c)) {
      HurewiczReport hr = hurewicz_report(*model, sys);
      suites.push_back({"hurewicz", hr.all_pass() ? "pass" : "fail", model->cw.name, hr.to_json()});
      if (mc) {
        bool agree = true;
        json b = oracle_block(c, *model, mc->chain(), agree);
        suites.push_back({"oracle", agree ? "pass" : "fail", "Morse complex against " + model->cw.name, b});
      } else {
        skip_rest({"oracle"}, "no complex");
      }
    } else {
      skip_rest({"hurewicz", "oracle"}, "no CW surrogate for this config");
    }

    std::vector<double> values = within_bound(full, c.spec.length_bound).values;
    try {
      FiltrationSchedule s = build_schedule(values);
      auto v = validate_schedule(s);
      auto diffs = even_step_action_differences(s);
      bool neg = std::all_of(diffs.begin(), diffs.end(), [](double d) { return d < 0; });
      std::string detail = std::to_string(values.size()) + " spectral values";
      if (!v.empty()) detail = "violates " + v.front().quantity + " at " + std::to_string(v.front().index);
      else if (!neg) detail = "an even-step action difference is nonnegative";
      suites.push_back({"schedule", v.empty() && neg ? "pass" : "fail", detail,
                        {{"schedule", s.to_json()}, {"even_step_differences", diffs}}});
    } catch (const DomainError& e) {
      suites.push_back({"schedule", "fail", e.what(), {}});
    }
  }

  bool all = true;
  json arr = json::array();
  for (const auto& s : suites) {
    all = all && s.status != "fail";
    arr.push_back({{"suite", s.name}, {"status", s.status}, {"detail", s.detail}, {"data", s.data}});
    std::cout << (s.status == "pass" ? "PASS " : s.status == "fail" ? "FAIL " : "SKIP ") << s.name << ": " << s.detail << "\n";
  }
  write_json(fs::path(c.out_dir) / "verify.json", {{"command", "verify"}, {"config", c.normalized}, {"suites", arr}, {"pass", all}});
  return all ? ok : verification_failed;
}

std::vector<double> read_spectrum(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spectrum " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<double> values;
  auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && (text[first] == '{' || text[first] == '[')) {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("malformed spectrum JSON: ") + e.what());
    }
    if (j.is_object() && j.contains("spectrum")) j = j["spectrum"];
    if (j.is_object() && j.contains("values")) j = j["values"];
    if (!j.is_array()) throw ConfigError("spectrum JSON must be an array of lengths or contain 'values'");
    for (const auto& v : j) {
      if (!v.is_number()) throw ConfigError("spectrum values must be numbers");
      values.push_back(v.get<double>());
    }
  } else {
    std::istringstream is(text);
    std::string line;
    bool header = true;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (header) {
        header = false;
        if (line.rfind("length", 0) == 0) continue;
      }
      try {
        values.push_back(std::stod(line.substr(0, line.find(','))));
      } catch (const std::exception&) {
        throw ConfigError("bad spectrum line: " + line);
      }
    }
  }
  std::sort(values.begin(), values.end());
  std::vector<double> distinct;
  for (double v : values)
    if (distinct.empty() || v - distinct.back() > 1e-9 * std::max(1.0, v)) distinct.push_back(v);
  return distinct;
}

int cmd_schedule(const Options& o) {
  if (o.spectrum.empty()) throw ConfigError("--spectrum is required");
  std::vector<double> values = read_spectrum(o.spectrum);
  FiltrationSchedule s;
  try {
    s = build_schedule(values);
  } catch (const DomainError& e) {
    throw ConfigError(std::string("spectrum rejected: ") + e.what());
  }
  auto v = validate_schedule(s);
  json viol = json::array();
  for (const auto& x : v) viol.push_back({{"quantity", x.quantity}, {"index", x.index}, {"detail", x.detail}});
  json rep{{"command", "schedule"},
           {"spectrum", values},
           {"schedule", s.to_json()},
           {"even_step_differences", even_step_action_differences(s)},
           {"violations", viol}};
  fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  write_json(dir / "schedule.json", rep);
  std::cout << values.size() << " values, " << s.x.size() << " slopes, " << v.size() << " violations\n";
  return v.empty() ? ok : verification_failed;
}

// Markdown digest of whatever reports exist in the output directory.
int cmd_report(const Options& o) {
  fs::path dir = !o.out.empty() ? fs::path(o.out) : !o.config.empty() ? fs::path(load(o).out_dir) : fs::path(".");
  std::ostringstream md;
  md << "# chord_morse report\n";
  int found = 0;
  auto read = [&](const char* name) -> std::optional<json> {
    std::ifstream in(dir / name);
    if (!in) return std::nullopt;
    ++found;
    try {
      return json::parse(in);
    } catch (const json::parse_error&) {
      throw ConfigError(std::string("unreadable report ") + name);
    }
  };
  if (auto j = read("chords.json")) {
    md << "\n## Chords\n\n| id | length | index | label |\n|---|---|---|---|\n";
    for (const auto& ch : (*j)["spectrum"]["chords"])
      md << "| " << ch["id"] << " | " << ch["length"].get<double>() << " | " << ch["index"] << " | " << ch["label"].dump() << " |\n";
  }
  if (auto j = read("homology.json")) {
    md << "\n## Homology\n\n";
    const auto& h = (*j)["homology"];
    if (h.contains("Z"))
      for (const auto& d : h["Z"]["degrees"]) md << "- H_" << d["degree"] << ": rank " << d["rank"] << ", torsion " << d["torsion"].dump() << "\n";
    if (h.contains("laurent_ranks"))
      for (const auto& d : h["laurent_ranks"]["degrees"])
        md << "- H_" << d["degree"] << ": fraction-field rank " << d["field_rank"] << ", module " << d["module"].get<std::string>() << "\n";
    if (j->contains("oracle")) md << "- oracle (" << (*j)["oracle"]["surrogate"].get<std::string>() << "): "
                                  << ((*j)["oracle"]["agree"].get<bool>() ? "agrees" : "disagrees") << "\n";
  }
  if (auto j = read("verify.json")) {
    md << "\n## Verification\n\n";
    for (const auto& s : (*j)["suites"])
      md << "- " << s["suite"].get<std::string>() << ": " << s["status"].get<std::string>() << " (" << s["detail"].get<std::string>() << ")\n";
  }
  if (auto j = read("schedule.json")) {
    md << "\n## Schedule\n\n- slopes: " << (*j)["schedule"]["x"].dump() << "\n- violations: " << (*j)["violations"].size() << "\n";
  }
  if (found == 0) throw ConfigError("no reports found in " + dir.string());
  write_file(dir / "report.md", md.str());
  std::cout << md.str();
  return ok;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("chord_morse");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("CHORD_MORSE_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Morse homology of broken-geodesic path spaces"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", o.config, "run configuration (JSON)");
    if (needs_config) opt->required();
    sub->add_option("--out", o.out, "output directory (overrides output.dir)");
    sub->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--length-bound", o.length_bound, "length bound ell (overrides the config)")->check(CLI::PositiveNumber);
    sub->add_option("--subdivisions", o.subdivisions, "number of geodesic arcs K (overrides the config)")->check(CLI::PositiveNumber);
  };
  auto* chords = app.add_subcommand("chords", "compute the chord spectrum");
  auto* homology = app.add_subcommand("homology", "build the Morse complex and its homology");
  auto* verify = app.add_subcommand("verify", "run the invariant suites");
  auto* schedule = app.add_subcommand("schedule", "build a filtration schedule from a spectrum file");
  auto* report = app.add_subcommand("report", "summarize the reports in an output directory");
  common(chords, true);
  common(homology, true);
  common(verify, true);
  common(report, false);
  schedule->add_option("--spectrum", o.spectrum, "spectrum CSV or JSON written by 'chords'")->required();
  schedule->add_option("--out", o.out, "output directory");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }
  try {
    if (*chords) return cmd_chords(o);
    if (*homology) return cmd_homology(o);
    if (*verify) return cmd_verify(o);
    if (*schedule) return cmd_schedule(o);
    if (*report) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const ContractViolation& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return contract_violation;
  } catch (const Error& e) {
    std::cerr << e.kind() << " error: " << e.what() << "\n";
    return verification_failed;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return contract_violation;
  }
  return ok;
}
