#pragma once

#include <json.hpp>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "chordmorse/errors.hpp"

namespace chordmorse {

// Slopes x_1 < x_2 < ... interleaving the spectrum: sigma_k is the midpoint of (x_{2k}, x_{2k+1}).
// Stored 0-based: x[n-1] is x_n, delta[n-1] is delta_n, sigma[k-1] is sigma_k.
struct FiltrationSchedule {
  std::vector<double> sigma;
  std::vector<double> x;
  std::vector<double> delta;

  double x_at(int n) const { return x.at(static_cast<std::size_t>(n - 1)); }
  double delta_at(int n) const { return delta.at(static_cast<std::size_t>(n - 1)); }

  nlohmann::json to_json() const { return {{"sigma", sigma}, {"x", x}, {"delta", delta}}; }
  static FiltrationSchedule from_json(const nlohmann::json& j) {
    FiltrationSchedule s;
    s.sigma = j.at("sigma").get<std::vector<double>>();
    s.x = j.at("x").get<std::vector<double>>();
    s.delta = j.value("delta", std::vector<double>{});
    return s;
  }
};

struct MarginPolicy {
  double first_slope_fraction = 0.5;  // x_1 = fraction * sigma_1
  double width_fraction = 0.5;        // fraction of the largest admissible half-width
  double max_gap_share = 0.45;        // half-width at most this share of the next gap
  double delta_fraction = 0.75;       // delta_n = fraction * (1/3) * min neighbouring gap
  double min_half_width = 0.0;        // infeasible below this
};

struct ScheduleViolation {
  std::string quantity;
  int index = 0;
  std::string detail;
};

// Widths must satisfy (1/3)-gap rule; the first gap is measured from x_0 = 0 and the last
// slope only has a left neighbour.
inline double delta_bound(const std::vector<double>& x, std::size_t i) {
  double left = x[i] - (i == 0 ? 0.0 : x[i - 1]);
  double bound = left;
  if (i + 1 < x.size()) bound = std::min(bound, x[i + 1] - x[i]);
  return bound / 3.0;
}

inline std::vector<ScheduleViolation> validate_schedule(const FiltrationSchedule& s) {
  std::vector<ScheduleViolation> out;
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  const std::size_t m = s.sigma.size();
  if (m == 0 && s.x.empty()) return out;
  if (s.x.size() != 2 * m + 1) {
    out.push_back({"length", static_cast<int>(s.x.size()), "expected " + std::to_string(2 * m + 1) + " slopes"});
    return out;
  }
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    if (!(s.x[i] > 0)) out.push_back({"positivity", static_cast<int>(i + 1), "x=" + fmt(s.x[i])});
    if (i > 0 && !(s.x[i] > s.x[i - 1])) out.push_back({"monotonicity", static_cast<int>(i + 1), "x_n <= x_{n-1}"});
  }
  for (std::size_t k = 1; k <= m; ++k) {
    double x2k = s.x[2 * k - 1], x2k1 = s.x[2 * k], x2km1 = s.x[2 * k - 2];
    double mid = 0.5 * (x2k + x2k1);
    if (std::abs(mid - s.sigma[k - 1]) > 1e-12)
      out.push_back({"midpoint", static_cast<int>(k), "midpoint " + fmt(mid) + " != sigma " + fmt(s.sigma[k - 1])});
    double lhs = x2k1 * x2k1 - x2k * x2k, rhs = x2k * x2k - x2km1 * x2km1;
    if (!(lhs < rhs)) out.push_back({"squared-gap", static_cast<int>(k), fmt(lhs) + " >= " + fmt(rhs)});
    if (!(x2k1 > s.sigma[k - 1])) out.push_back({"capture", static_cast<int>(k), "x_{2k+1} <= sigma_k"});
  }
  if (s.delta.size() != s.x.size()) {
    out.push_back({"width-count", static_cast<int>(s.delta.size()), "expected one width per slope"});
  } else {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!(s.delta[i] > 0)) out.push_back({"width", static_cast<int>(i + 1), "delta must be positive"});
      if (!(s.delta[i] < delta_bound(s.x, i)))
        out.push_back({"width", static_cast<int>(i + 1), "delta " + fmt(s.delta[i]) + " >= " + fmt(delta_bound(s.x, i))});
    }
  }
  return out;
}

// Greedy schedule: symmetric windows sigma_k ± w_k, each w_k a fixed fraction of the largest
// half-width allowed by the squared-gap condition against the previous window.
inline FiltrationSchedule build_schedule(const std::vector<double>& spectrum, const MarginPolicy& policy = {}) {
  FiltrationSchedule s;
  s.sigma = spectrum;
  const std::size_t m = spectrum.size();
  if (m == 0) return s;
  for (std::size_t k = 0; k < m; ++k) {
    if (!(spectrum[k] > 0)) throw DomainError("spectrum values must be positive");
    if (k > 0 && !(spectrum[k] > spectrum[k - 1])) throw DomainError("spectrum must be strictly increasing");
  }
  s.x.assign(2 * m + 1, 0.0);
  s.x[0] = policy.first_slope_fraction * spectrum[0];
  double prev_right = s.x[0];  // x_{2k-1}
  for (std::size_t k = 0; k < m; ++k) {
    const double sig = spectrum[k];
    // largest w with (sig + w)^2 - (sig - w)^2 < (sig - w)^2 - prev_right^2, i.e.
    // w^2 - 6 sig w + (sig^2 - prev_right^2) > 0 for the smaller root.
    const double c = sig * sig - prev_right * prev_right;
    const double disc = 9.0 * sig * sig - c;
    double w_max = 3.0 * sig - std::sqrt(disc);
    if (!(w_max > 0)) {
      std::ostringstream os;
      os << "no admissible window around sigma_" << k + 1 << "=" << sig << " after slope " << prev_right;
      throw DomainError(os.str());
    }
    double w = policy.width_fraction * w_max;
    if (k + 1 < m) w = std::min(w, policy.max_gap_share * (spectrum[k + 1] - sig));
    if (w <= policy.min_half_width) {
      std::ostringstream os;
      os << "spectrum gap too small for margins between sigma_" << k << " and sigma_" << k + 1 << " (half-width " << w << ")";
      throw DomainError(os.str());
    }
    s.x[2 * k + 1] = sig - w;
    s.x[2 * k + 2] = sig + w;
    // exact midpoint: recompute the right end from the left one
    s.x[2 * k + 2] = 2.0 * sig - s.x[2 * k + 1];
    prev_right = s.x[2 * k + 2];
  }
  s.delta.resize(s.x.size());
  for (std::size_t i = 0; i < s.x.size(); ++i) s.delta[i] = policy.delta_fraction * delta_bound(s.x, i);
  if (auto v = validate_schedule(s); !v.empty())
    throw ContractViolation("built schedule violates " + v.front().quantity + " at " + std::to_string(v.front().index));
  return s;
}

// Action of a chord on the level r = sigma_k in the n-th system: (x_n^2 - sigma_k^2) / 2.
inline double chord_action(const FiltrationSchedule& s, int n, double sigma_k) {
  if (n < 1 || n > static_cast<int>(s.x.size())) throw DomainError("slope index out of range");
  const double xn = s.x_at(n);
  if (!(sigma_k < xn)) throw DomainError("chord value is not below the slope x_n (chord not yet captured)");
  return 0.5 * (xn * xn - sigma_k * sigma_k);
}

// The action difference bound at even steps n = 2k: (x_{2k+1}^2 - 2 x_{2k}^2 + x_{2k-1}^2) / 2.
inline std::vector<double> even_step_action_differences(const FiltrationSchedule& s) {
  std::vector<double> out;
  for (std::size_t k = 1; 2 * k < s.x.size(); ++k) {
    double a = s.x[2 * k], b = s.x[2 * k - 1], c = s.x[2 * k - 2];
    out.push_back(0.5 * (a * a - 2.0 * b * b + c * c));
  }
  return out;
}

}  // namespace chordmorse
