#pragma once

#include <Eigen/Dense>
#include <boost/numeric/odeint.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chordmorse/errors.hpp"
#include "chordmorse/jet.hpp"

namespace chordmorse {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// f = magnitude * weight * psi(|x - center|^2 / radius^2), psi(s) = (1 - s)^8 on s < 1.
struct Bump {
  Vec center;
  double radius = 0.4;
  double weight = 1.0;
};

// Sup bounds of psi(|y|^2/r^2): gradient <= 2.55/r, Hessian operator norm <= 16/r^2.
constexpr double kBumpGradBound = 2.55;
constexpr double kBumpHessBound = 16.0;

template <class T>
T bump_power7(const T& w) {
  T w2 = w * w;
  T w3 = w2 * w;
  return w3 * w3 * w;
}

struct Factor {
  enum class Kind { torus, ellipsoid };
  Kind kind = Kind::torus;
  int n = 2;  // intrinsic dimension
  int m = 2;  // ambient coordinates (lattice coordinates for the torus, R^3 for the ellipsoid)
  Mat lattice;     // torus: columns are the lattice basis in Euclidean coordinates
  Mat gram;        // G0 (identity for the ellipsoid)
  Mat gram_inv;
  double systole = 0;
  Eigen::Vector3d axes = Eigen::Vector3d::Ones();
  double magnitude = 0;
  std::uint64_t seed = 0;
  std::vector<Bump> bumps;

  bool flat() const { return magnitude == 0.0 || bumps.empty(); }
  int chart_count() const { return kind == Kind::torus ? 1 : 2; }
  double min_radius() const {
    double r = 1e300;
    for (const auto& b : bumps) r = std::min(r, b.radius);
    return r;
  }
  double sup_f() const {
    double s = 0;
    for (const auto& b : bumps) s += std::abs(b.weight);
    return magnitude * s;
  }
  double grad_bound() const {
    double s = 0;
    for (const auto& b : bumps) s += std::abs(b.weight) * kBumpGradBound / b.radius;
    return magnitude * s;
  }
  double hess_bound() const {
    double s = 0;
    for (const auto& b : bumps) s += std::abs(b.weight) * kBumpHessBound / (b.radius * b.radius);
    return magnitude * s;
  }
};

namespace detail {

inline double shortest_lattice_vector(const Mat& gram) {
  const int n = static_cast<int>(gram.rows());
  // Enumerate coefficient boxes; the bound is loose but exact for the small lattices we ship.
  double best = 1e300;
  const int R = 3;
  std::vector<int> c(n, -R);
  while (true) {
    bool zero = std::all_of(c.begin(), c.end(), [](int v) { return v == 0; });
    if (!zero) {
      Vec v(n);
      for (int i = 0; i < n; ++i) v[i] = c[i];
      best = std::min(best, std::sqrt(v.dot(gram * v)));
    }
    int i = 0;
    while (i < n && c[i] == R) c[i++] = -R;
    if (i == n) break;
    ++c[i];
  }
  return best;
}

template <class T>
void conformal(const Factor& fac, const T* x, T& f, T* grad) {
  f = T(0.0);
  for (int i = 0; i < fac.m; ++i) grad[i] = T(0.0);
  if (fac.flat()) return;
  std::array<T, 8> d{};
  std::array<T, 8> Gd{};
  for (const auto& b : fac.bumps) {
    const double c = fac.magnitude * b.weight;
    const double r2 = b.radius * b.radius;
    if (fac.kind == Factor::Kind::ellipsoid) {
      T s(0.0);
      for (int i = 0; i < 3; ++i) {
        d[i] = x[i] - b.center[i];
        s += d[i] * d[i];
      }
      s = s / r2;
      if (value_of(s) >= 1.0) continue;
      T w = 1.0 - s;
      T w7 = bump_power7(w);
      f += c * w7 * w;
      for (int i = 0; i < 3; ++i) grad[i] += (-16.0 * c / r2) * w7 * d[i];
      continue;
    }
    const int n = fac.n;
    std::array<double, 8> shift{};
    for (int i = 0; i < n; ++i) shift[i] = b.center[i] + std::round(value_of(x[i]) - b.center[i]);
    std::array<int, 8> k{};
    for (int i = 0; i < n; ++i) k[i] = -1;
    while (true) {
      for (int i = 0; i < n; ++i) d[i] = x[i] - (shift[i] + k[i]);
      T s(0.0);
      for (int i = 0; i < n; ++i) {
        Gd[i] = T(0.0);
        for (int j = 0; j < n; ++j) Gd[i] += fac.gram(i, j) * d[j];
        s += d[i] * Gd[i];
      }
      s = s / r2;
      if (value_of(s) < 1.0) {
        T w = 1.0 - s;
        T w7 = bump_power7(w);
        f += c * w7 * w;
        for (int i = 0; i < n; ++i) grad[i] += (-16.0 * c / r2) * w7 * Gd[i];
      }
      int i = 0;
      while (i < n && k[i] == 1) k[i++] = -1;
      if (i == n) break;
      ++k[i];
    }
  }
}

// Geodesic acceleration of g = e^{2f} g0 in ambient coordinates.
template <class T>
void acceleration(const Factor& fac, const T* x, const T* v, T* a) {
  const int m = fac.m;
  for (int i = 0; i < m; ++i) a[i] = T(0.0);
  std::array<T, 8> g{};
  T f(0.0);
  const bool bumps = !fac.flat();
  if (bumps) conformal(fac, x, f, g.data());
  if (fac.kind == Factor::Kind::torus) {
    if (!bumps) return;
    T gv(0.0), vGv(0.0);
    for (int i = 0; i < m; ++i) {
      gv += g[i] * v[i];
      T Gv(0.0);
      for (int j = 0; j < m; ++j) Gv += fac.gram(i, j) * v[j];
      vGv += v[i] * Gv;
    }
    for (int i = 0; i < m; ++i) {
      T Gig(0.0);
      for (int j = 0; j < m; ++j) Gig += fac.gram_inv(i, j) * g[j];
      a[i] = -2.0 * gv * v[i] + vGv * Gig;
    }
    return;
  }
  std::array<T, 3> N;
  T nn(0.0), vHv(0.0);
  for (int i = 0; i < 3; ++i) {
    const double h = 2.0 / (fac.axes[i] * fac.axes[i]);
    N[i] = h * x[i];
    nn += N[i] * N[i];
    vHv += h * v[i] * v[i];
  }
  T mu = vHv / nn;
  for (int i = 0; i < 3; ++i) a[i] = -mu * N[i];
  if (!bumps) return;
  T gv(0.0), vv(0.0), Ng(0.0);
  for (int i = 0; i < 3; ++i) {
    gv += g[i] * v[i];
    vv += v[i] * v[i];
    Ng += N[i] * g[i];
  }
  T ratio = Ng / nn;
  for (int i = 0; i < 3; ++i) a[i] += -2.0 * gv * v[i] + vv * (g[i] - ratio * N[i]);
}

template <class T>
using State = std::vector<T>;

// Fixed-step RKF78 over t in [0, 1]; state = (x, v). Optionally records the state after each step.
template <class T>
void integrate(const Factor& fac, State<T>& s, int steps, std::vector<State<double>>* trace = nullptr) {
  namespace odeint = boost::numeric::odeint;
  odeint::runge_kutta_fehlberg78<State<T>, double, State<T>, double> stepper;
  const int m = fac.m;
  auto sys = [&fac, m](const State<T>& y, State<T>& dy, double) {
    for (int i = 0; i < m; ++i) dy[i] = y[m + i];
    acceleration(fac, y.data(), y.data() + m, dy.data() + m);
  };
  const double h = 1.0 / steps;
  auto record = [&]() {
    if (!trace) return;
    State<double> r(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) r[i] = value_of(s[i]);
    trace->push_back(r);
  };
  record();
  for (int k = 0; k < steps; ++k) {
    stepper.do_step(sys, s, k * h, h);
    record();
  }
}

inline Vec ellipsoid_normal(const Factor& fac, const Vec& x) {
  Vec N(3);
  for (int i = 0; i < 3; ++i) N[i] = 2.0 * x[i] / (fac.axes[i] * fac.axes[i]);
  return N;
}

// Orthonormal tangent frame (m x n). Torus: identity.
inline Mat tangent_frame(const Factor& fac, const Vec& x) {
  if (fac.kind == Factor::Kind::torus) return Mat::Identity(fac.m, fac.n);
  Eigen::Vector3d N = ellipsoid_normal(fac, x).normalized();
  int k = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(N[i]) < std::abs(N[k])) k = i;
  Eigen::Vector3d e = Eigen::Vector3d::Unit(k);
  Eigen::Vector3d t1 = (e - e.dot(N) * N).normalized();
  Eigen::Vector3d t2 = N.cross(t1);
  Mat T(3, 2);
  T.col(0) = t1;
  T.col(1) = t2;
  return T;
}

inline Vec project_to_factor(const Factor& fac, const Vec& x) {
  if (fac.kind == Factor::Kind::torus) return x;
  Eigen::Vector3d s(x[0] / fac.axes[0], x[1] / fac.axes[1], x[2] / fac.axes[2]);
  double r = s.norm();
  if (r == 0) throw DomainError("cannot project the origin onto the ellipsoid");
  s /= r;
  return Vec(s.cwiseProduct(fac.axes));
}

inline int steps_for(const Factor& fac, double ambient_length) {
  double h = 1e300;
  if (fac.kind == Factor::Kind::ellipsoid) {
    double amin = fac.axes.minCoeff(), amax = fac.axes.maxCoeff();
    h = amin * amin / amax / 12.0;
  }
  if (!fac.flat()) h = std::min(h, fac.min_radius() / 12.0);
  if (h > 1e299) return 1;
  return std::max(4, static_cast<int>(std::ceil(ambient_length / h)));
}

}  // namespace detail

// Result of one boundary-value solve on a factor; derivative blocks are d(x(1), v(1)) / d(x(0), v(0)).
struct FactorSegment {
  Vec a, b, va, vb;
  int steps = 1;
  bool has_flow_jacobian = false;
  Mat Fxx, Fxv, Fvx, Fvv;
};

namespace detail {

template <int N>
void shoot_newton(const Factor& fac, const Vec& a, const Vec& b, Vec& v, int steps, double& residual, int& iters) {
  using J = Jet<double, N>;
  const int m = fac.m, n = fac.n;
  Mat T = tangent_frame(fac, a);
  v = T * (T.transpose() * v);
  residual = 1e300;
  Vec v_prev = v, step_prev = Vec::Zero(m);
  double res_prev = 1e300;
  int backtracks = 0;
  for (iters = 0; iters < 60; ++iters) {
    State<J> s(2 * m);
    for (int i = 0; i < m; ++i) {
      s[i] = J(a[i]);
      s[m + i] = J(v[i]);
      for (int j = 0; j < n; ++j) s[m + i].d[j] = T(i, j);
    }
    integrate(fac, s, steps);
    Vec r(m);
    Mat Jr(m, n);
    for (int i = 0; i < m; ++i) {
      r[i] = s[i].v - b[i];
      for (int j = 0; j < n; ++j) Jr(i, j) = s[i].d[j];
    }
    double res = r.norm();
    if (!std::isfinite(res) || res > res_prev) {
      if (backtracks++ >= 12) return;
      step_prev *= 0.5;
      v = v_prev + step_prev;
      continue;
    }
    backtracks = 0;
    residual = res;
    if (res < 1e-13 * std::max(1.0, b.norm())) return;
    Vec step = T * Jr.colPivHouseholderQr().solve(-r);
    v_prev = v;
    step_prev = step;
    res_prev = res;
    v += step;
  }
}

template <int N>
void flow_jacobian(const Factor& fac, FactorSegment& seg) {
  using J = Jet<double, N>;
  const int m = fac.m;
  State<J> s(2 * m);
  for (int i = 0; i < m; ++i) {
    s[i] = J::variable(seg.a[i], i);
    s[m + i] = J::variable(seg.va[i], m + i);
  }
  integrate(fac, s, seg.steps);
  seg.b.resize(m);
  seg.vb.resize(m);
  seg.Fxx.resize(m, m);
  seg.Fxv.resize(m, m);
  seg.Fvx.resize(m, m);
  seg.Fvv.resize(m, m);
  for (int i = 0; i < m; ++i) {
    seg.b[i] = s[i].v;
    seg.vb[i] = s[m + i].v;
    for (int j = 0; j < m; ++j) {
      seg.Fxx(i, j) = s[i].d[j];
      seg.Fxv(i, j) = s[i].d[m + j];
      seg.Fvx(i, j) = s[m + i].d[j];
      seg.Fvv(i, j) = s[m + i].d[m + j];
    }
  }
  seg.has_flow_jacobian = true;
}

inline void dispatch_flow_jacobian(const Factor& fac, FactorSegment& seg) {
  switch (2 * fac.m) {
    case 2: flow_jacobian<2>(fac, seg); break;
    case 4: flow_jacobian<4>(fac, seg); break;
    case 6: flow_jacobian<6>(fac, seg); break;
    case 8: flow_jacobian<8>(fac, seg); break;
    default: throw UnsupportedError("perturbed factors of dimension above 4 are not supported");
  }
}

inline void dispatch_newton(const Factor& fac, const Vec& a, const Vec& b, Vec& v, int steps, double& res, int& it) {
  switch (fac.n) {
    case 1: shoot_newton<1>(fac, a, b, v, steps, res, it); break;
    case 2: shoot_newton<2>(fac, a, b, v, steps, res, it); break;
    case 3: shoot_newton<3>(fac, a, b, v, steps, res, it); break;
    case 4: shoot_newton<4>(fac, a, b, v, steps, res, it); break;
    default: throw UnsupportedError("perturbed factors of dimension above 4 are not supported");
  }
}

// Initial velocity guess: torus straight line, ellipsoid logarithm of the underlying unit sphere.
inline Vec initial_velocity(const Factor& fac, const Vec& a, const Vec& b) {
  if (fac.kind == Factor::Kind::torus) return b - a;
  Eigen::Vector3d sa(a[0] / fac.axes[0], a[1] / fac.axes[1], a[2] / fac.axes[2]);
  Eigen::Vector3d sb(b[0] / fac.axes[0], b[1] / fac.axes[1], b[2] / fac.axes[2]);
  sa.normalize();
  sb.normalize();
  Eigen::Vector3d w = sb - sa.dot(sb) * sa;
  double wn = w.norm();
  double ang = std::atan2(wn, sa.dot(sb));
  Eigen::Vector3d vs = wn > 1e-300 ? Eigen::Vector3d(w * (ang / wn)) : Eigen::Vector3d::Zero();
  Vec v = vs.cwiseProduct(fac.axes);
  Mat T = tangent_frame(fac, a);
  return T * (T.transpose() * v);
}

inline double ambient_speed(const Factor& fac, const Vec& v) { return std::sqrt(v.dot(fac.gram * v)); }

}  // namespace detail

// Solves the geodesic from a to b (time 1) on one factor. `guess` is an initial velocity at a.
inline FactorSegment solve_factor_segment(const Factor& fac, const Vec& a, const Vec& b, const Vec* guess, bool with_jacobian) {
  FactorSegment seg;
  seg.a = a;
  seg.b = b;
  const int m = fac.m;
  if (fac.kind == Factor::Kind::torus && fac.flat()) {
    seg.va = b - a;
    seg.vb = seg.va;
    seg.steps = 1;
    if (with_jacobian) {
      seg.Fxx = Mat::Identity(m, m);
      seg.Fxv = Mat::Identity(m, m);
      seg.Fvx = Mat::Zero(m, m);
      seg.Fvv = Mat::Identity(m, m);
      seg.has_flow_jacobian = true;
    }
    return seg;
  }
  Vec v0 = guess ? *guess : detail::initial_velocity(fac, a, b);
  seg.steps = detail::steps_for(fac, std::max(detail::ambient_speed(fac, v0), (b - a).norm()) * 1.05 + 1e-3);
  double res = 1e300;
  int iters = 0;
  Vec v = v0;
  detail::dispatch_newton(fac, a, b, v, seg.steps, res, iters);
  const double tol = 1e-11 * std::max(1.0, b.norm());
  if (!(res < tol)) {
    // homotopy on the target from the default guess
    Vec vh = detail::initial_velocity(fac, a, a + 0.25 * (b - a));
    bool ok = true;
    for (double tau : {0.25, 0.5, 0.75, 1.0}) {
      Vec bt = fac.kind == Factor::Kind::torus ? Vec(a + tau * (b - a)) : detail::project_to_factor(fac, a + tau * (b - a));
      if (tau == 1.0) bt = b;
      detail::dispatch_newton(fac, a, bt, vh, seg.steps, res, iters);
      if (!(res < tol)) {
        ok = false;
        break;
      }
    }
    if (!ok) {
      std::ostringstream os;
      os << "geodesic shooting did not converge (residual " << res << ")";
      throw SolverError(os.str());
    }
    v = vh;
  }
  seg.va = v;
  if (with_jacobian) {
    detail::dispatch_flow_jacobian(fac, seg);
    seg.b = b;
  } else {
    detail::State<double> s(2 * m);
    for (int i = 0; i < m; ++i) {
      s[i] = a[i];
      s[m + i] = v[i];
    }
    detail::integrate(fac, s, seg.steps);
    seg.vb.resize(m);
    for (int i = 0; i < m; ++i) seg.vb[i] = s[m + i];
  }
  return seg;
}

// Point of a chart: chart id (mixed radix over factors) and chart coordinates.
struct ChartPoint {
  int chart = 0;
  Vec u;
};

struct GeodesicSegment {
  Vec a, b;
  std::vector<double> t;
  std::vector<Vec> x, v;  // ambient samples and velocities
  double length = 0;
};

struct JacobiField {
  std::vector<double> t;
  std::vector<Vec> eta;      // ambient variation vectors
  std::vector<Vec> eta_dot;  // ordinary derivative of the ambient variation
};

// Full two-endpoint data of a broken-geodesic arc, with metric factors W = blockdiag(e^{2 f_i} G0_i)
// and C = blockdiag(2 e^{2 f_i} G0_i v_i grad f_i^T) at both ends.
struct Segment {
  Vec a, b, va, vb;
  double energy = 0;
  std::vector<FactorSegment> parts;
  bool has_second = false;
  Mat Wa, Wb, Ca, Cb;
  Mat Vaa, Vab, Vba, Vbb;
};

class ManifoldModel {
 public:
  enum class Preset { flat_torus, ellipsoid, product };

  ManifoldModel() = default;

  static ManifoldModel flat_torus(const Mat& lattice) {
    if (lattice.rows() != lattice.cols() || lattice.rows() < 1) throw ConfigError("torus lattice must be a square matrix");
    Factor f;
    f.kind = Factor::Kind::torus;
    f.n = f.m = static_cast<int>(lattice.rows());
    f.lattice = lattice;
    f.gram = lattice.transpose() * lattice;
    if (std::abs(lattice.determinant()) < 1e-12) throw ConfigError("torus lattice is singular");
    f.gram_inv = f.gram.inverse();
    f.systole = detail::shortest_lattice_vector(f.gram);
    ManifoldModel M;
    M.preset_ = Preset::flat_torus;
    M.factors_ = {f};
    M.finish();
    return M;
  }
  static ManifoldModel unit_torus(int n) { return flat_torus(Mat::Identity(n, n)); }

  static ManifoldModel ellipsoid(const Eigen::Vector3d& axes) {
    if (!(axes.minCoeff() > 0)) throw ConfigError("ellipsoid semi-axes must be positive");
    Factor f;
    f.kind = Factor::Kind::ellipsoid;
    f.n = 2;
    f.m = 3;
    f.axes = axes;
    f.gram = Mat::Identity(3, 3);
    f.gram_inv = Mat::Identity(3, 3);
    ManifoldModel M;
    M.preset_ = Preset::ellipsoid;
    M.factors_ = {f};
    M.finish();
    return M;
  }

  static ManifoldModel product(const ManifoldModel& A, const ManifoldModel& B) {
    ManifoldModel M;
    M.preset_ = Preset::product;
    M.factors_ = A.factors_;
    M.factors_.insert(M.factors_.end(), B.factors_.begin(), B.factors_.end());
    M.max_perturbation_ = std::min(A.max_perturbation_, B.max_perturbation_);
    M.finish();
    return M;
  }

  // Explicit bumps (centers in factor ambient coordinates) on factor `i`.
  ManifoldModel with_bumps(int i, double magnitude, const std::vector<Bump>& bumps, std::uint64_t seed = 0) const {
    if (magnitude < 0) throw ConfigError("perturbation magnitude must be nonnegative");
    ManifoldModel M = *this;
    Factor& f = M.factors_.at(static_cast<std::size_t>(i));
    f.magnitude = magnitude;
    f.seed = seed;
    f.bumps = bumps;
    for (auto& b : f.bumps) {
      if (b.center.size() != f.m) throw ConfigError("bump center has wrong dimension");
      if (!(b.radius > 0)) throw ConfigError("bump radius must be positive");
      if (f.kind == Factor::Kind::ellipsoid) b.center = detail::project_to_factor(f, b.center);
    }
    M.finish();
    return M;
  }

  // Seeded random bumps: `count` bumps with radii in [rmin, rmax] and weights of modulus in [0.5, 1].
  static std::vector<Bump> random_bumps(const Factor& f, std::uint64_t seed, int count, double rmin = 0.3, double rmax = 0.45) {
    std::mt19937_64 rng(seed);
    std::vector<Bump> out;
    for (int k = 0; k < count; ++k) {
      Bump b;
      b.center = Vec(f.m);
      if (f.kind == Factor::Kind::torus) {
        for (int i = 0; i < f.m; ++i) b.center[i] = uniform01(rng);
      } else {
        Eigen::Vector3d s;
        do {
          for (int i = 0; i < 3; ++i) s[i] = 2.0 * uniform01(rng) - 1.0;
        } while (s.norm() > 1.0 || s.norm() < 0.1);
        s.normalize();
        b.center = s.cwiseProduct(f.axes);
      }
      b.radius = rmin + (rmax - rmin) * uniform01(rng);
      double w = 0.5 + 0.5 * uniform01(rng);
      b.weight = (rng() & 1) ? w : -w;
      out.push_back(b);
    }
    return out;
  }

  ManifoldModel with_random_perturbation(double magnitude, std::uint64_t seed, int count = 3) const {
    ManifoldModel M = *this;
    for (std::size_t i = 0; i < M.factors_.size(); ++i) {
      auto bumps = random_bumps(M.factors_[i], seed + 7919 * i, count);
      M = M.with_bumps(static_cast<int>(i), magnitude, magnitude > 0 ? bumps : std::vector<Bump>{}, seed);
    }
    return M;
  }

  ManifoldModel with_max_perturbation(double t) const {
    ManifoldModel M = *this;
    M.max_perturbation_ = t;
    return M;
  }

  Preset preset() const { return preset_; }
  std::string preset_name() const {
    switch (preset_) {
      case Preset::flat_torus: return "flat-torus";
      case Preset::ellipsoid: return "ellipsoid";
      default: return "product";
    }
  }
  int dim() const { return dim_; }
  int ambient_dim() const { return ambient_; }
  const std::vector<Factor>& factors() const { return factors_; }
  int factor_offset(std::size_t i) const { return aoff_[i]; }
  int factor_intrinsic_offset(std::size_t i) const { return ioff_[i]; }
  double max_perturbation() const { return max_perturbation_; }
  bool flat() const {
    return std::all_of(factors_.begin(), factors_.end(), [](const Factor& f) { return f.flat(); });
  }
  double perturbation_sup() const {
    double s = 0;
    for (const auto& f : factors_) s = std::max(s, f.sup_f());
    return s;
  }

  Mat base_gram() const {
    Mat G = Mat::Zero(ambient_, ambient_);
    for (std::size_t i = 0; i < factors_.size(); ++i) G.block(aoff_[i], aoff_[i], factors_[i].m, factors_[i].m) = factors_[i].gram;
    return G;
  }

  // Conformal exponents f_i at the factor components of x.
  std::vector<double> conformal_at(const Vec& x) const {
    std::vector<double> out;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& fac = factors_[i];
      double f;
      std::array<double, 8> g{};
      detail::conformal(fac, x.data() + aoff_[i], f, g.data());
      out.push_back(f);
    }
    return out;
  }

  // Metric in ambient coordinates (restricted to tangent vectors): blockdiag(e^{2 f_i} G0_i).
  Mat ambient_metric(const Vec& x) const {
    Mat W = base_gram();
    auto fs = conformal_at(x);
    for (std::size_t i = 0; i < factors_.size(); ++i)
      W.block(aoff_[i], aoff_[i], factors_[i].m, factors_[i].m) *= std::exp(2.0 * fs[i]);
    return W;
  }

  double norm(const Vec& x, const Vec& v) const { return std::sqrt(v.dot(ambient_metric(x) * v)); }

  Vec project(const Vec& x) const {
    Vec y = x;
    for (std::size_t i = 0; i < factors_.size(); ++i)
      y.segment(aoff_[i], factors_[i].m) = detail::project_to_factor(factors_[i], x.segment(aoff_[i], factors_[i].m));
    return y;
  }

  // Orthonormal (w.r.t. G0) ambient frame of the tangent space, ambient x dim.
  Mat tangent_frame(const Vec& x) const {
    Mat T = Mat::Zero(ambient_, dim_);
    for (std::size_t i = 0; i < factors_.size(); ++i)
      T.block(aoff_[i], ioff_[i], factors_[i].m, factors_[i].n) =
          detail::tangent_frame(factors_[i], x.segment(aoff_[i], factors_[i].m));
    return T;
  }

  // Projection of an ambient vector onto the tangent space at x.
  Vec tangent_project(const Vec& x, const Vec& w) const {
    Vec r = w;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      if (factors_[i].kind != Factor::Kind::ellipsoid) continue;
      Vec N = detail::ellipsoid_normal(factors_[i], x.segment(aoff_[i], 3));
      Vec wi = w.segment(aoff_[i], 3);
      r.segment(aoff_[i], 3) = wi - (N.dot(wi) / N.squaredNorm()) * N;
    }
    return r;
  }

  // ---- charts ----
  int chart_count() const {
    int c = 1;
    for (const auto& f : factors_) c *= f.chart_count();
    return c;
  }
  std::vector<int> decode_chart(int chart) const {
    if (chart < 0 || chart >= chart_count()) throw DomainError("chart id out of range");
    std::vector<int> c(factors_.size());
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      c[i] = chart % factors_[i].chart_count();
      chart /= factors_[i].chart_count();
    }
    return c;
  }
  int encode_chart(const std::vector<int>& c) const {
    int id = 0, mul = 1;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      id += c[i] * mul;
      mul *= factors_[i].chart_count();
    }
    return id;
  }

  // Chart coordinates of x in the given chart. Ellipsoid charts are stereographic in s = D^{-1} x.
  Vec chart_coords(int chart, const Vec& x) const {
    auto c = decode_chart(chart);
    Vec u(dim_);
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      Vec xi = x.segment(aoff_[i], f.m);
      if (f.kind == Factor::Kind::torus) {
        u.segment(ioff_[i], f.n) = xi;
        continue;
      }
      Eigen::Vector3d s(xi[0] / f.axes[0], xi[1] / f.axes[1], xi[2] / f.axes[2]);
      s.normalize();
      double den = c[i] == 0 ? 1.0 + s[2] : 1.0 - s[2];
      if (den < 1e-12) throw DomainError("point is at the pole excluded from its chart");
      u[ioff_[i]] = s[0] / den;
      u[ioff_[i] + 1] = s[1] / den;
    }
    return u;
  }

  // Best chart for x: north for the upper hemisphere of each ellipsoid factor.
  ChartPoint chart_point(const Vec& x) const {
    std::vector<int> c(factors_.size(), 0);
    for (std::size_t i = 0; i < factors_.size(); ++i)
      if (factors_[i].kind == Factor::Kind::ellipsoid) c[i] = x[aoff_[i] + 2] >= 0 ? 0 : 1;
    int id = encode_chart(c);
    return {id, chart_coords(id, x)};
  }

  template <class T>
  void embed_factor(std::size_t i, int c, const T* u, T* x) const {
    const Factor& f = factors_[i];
    if (f.kind == Factor::Kind::torus) {
      for (int k = 0; k < f.n; ++k) x[k] = u[k];
      return;
    }
    T r2 = u[0] * u[0] + u[1] * u[1];
    T inv = 1.0 / (1.0 + r2);
    T z = (1.0 - r2) * inv;
    x[0] = f.axes[0] * 2.0 * u[0] * inv;
    x[1] = f.axes[1] * 2.0 * u[1] * inv;
    x[2] = f.axes[2] * (c == 0 ? z : -z);
  }

  Vec embed(const ChartPoint& p) const {
    if (p.u.size() != dim_) throw DomainError("chart point has wrong dimension");
    auto c = decode_chart(p.chart);
    Vec x(ambient_);
    for (std::size_t i = 0; i < factors_.size(); ++i) embed_factor(i, c[i], p.u.data() + ioff_[i], x.data() + aoff_[i]);
    return x;
  }

  // D phi (ambient x dim).
  Mat chart_jacobian(const ChartPoint& p) const {
    auto c = decode_chart(p.chart);
    Mat J = Mat::Zero(ambient_, dim_);
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      if (f.kind == Factor::Kind::torus) {
        J.block(aoff_[i], ioff_[i], f.m, f.n) = Mat::Identity(f.m, f.n);
        continue;
      }
      using J2 = Jet<double, 2>;
      std::array<J2, 2> u{J2::variable(p.u[ioff_[i]], 0), J2::variable(p.u[ioff_[i] + 1], 1)};
      std::array<J2, 3> x;
      embed_factor(i, c[i], u.data(), x.data());
      for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 2; ++k) J(aoff_[i] + r, ioff_[i] + k) = x[r].d[k];
    }
    return J;
  }

  // Second derivatives: result[r](p, q) = d^2 phi_r / du_p du_q for each ambient coordinate r.
  std::vector<Mat> chart_hessians(const ChartPoint& p) const {
    auto c = decode_chart(p.chart);
    std::vector<Mat> H(ambient_, Mat::Zero(dim_, dim_));
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      if (f.kind == Factor::Kind::torus) continue;
      using J1 = Jet<double, 2>;
      using J2 = Jet<J1, 2>;
      std::array<J2, 2> u;
      for (int k = 0; k < 2; ++k) {
        J1 val = J1::variable(p.u[ioff_[i] + k], k);
        u[k] = J2(val, {});
        u[k].d[k] = J1(1.0);
      }
      std::array<J2, 3> x;
      embed_factor(i, c[i], u.data(), x.data());
      for (int r = 0; r < 3; ++r)
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) H[aoff_[i] + r](ioff_[i] + a, ioff_[i] + b) = x[r].d[a].d[b];
    }
    return H;
  }

  // Metric matrix in chart coordinates.
  Mat metric_at(const ChartPoint& p) const {
    if (p.chart < 0 || p.chart >= chart_count() || p.u.size() != dim_ || !p.u.allFinite())
      throw DomainError("point outside the atlas");
    Vec x = embed(p);
    Mat J = chart_jacobian(p);
    Mat g = J.transpose() * ambient_metric(x) * J;
    return 0.5 * (g + g.transpose());
  }

  // ---- geodesics ----
  Segment solve_segment(const Vec& a, const Vec& b, const Vec* warm_va, bool second) const {
    Segment s;
    s.a = a;
    s.b = b;
    s.va.resize(ambient_);
    s.vb.resize(ambient_);
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      Vec ai = a.segment(aoff_[i], f.m), bi = b.segment(aoff_[i], f.m);
      Vec gi;
      if (warm_va) gi = warm_va->segment(aoff_[i], f.m);
      s.parts.push_back(solve_factor_segment(f, ai, bi, warm_va ? &gi : nullptr, second));
      s.va.segment(aoff_[i], f.m) = s.parts.back().va;
      s.vb.segment(aoff_[i], f.m) = s.parts.back().vb;
    }
    s.energy = 0;
    std::vector<double> fa = conformal_at(a);
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      Vec v = s.va.segment(aoff_[i], f.m);
      s.energy += std::exp(2.0 * fa[i]) * v.dot(f.gram * v);
    }
    if (second) fill_second(s);
    return s;
  }

  // Shortest geodesic between two points of M (torus endpoints are wrapped to the nearest image).
  GeodesicSegment minimal_geodesic(const Vec& a, const Vec& b_in, int samples = 33) const {
    Vec b = b_in;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      if (f.kind != Factor::Kind::torus) continue;
      Vec d = b.segment(aoff_[i], f.m) - a.segment(aoff_[i], f.m);
      for (int k = 0; k < f.m; ++k) d[k] -= std::round(d[k]);
      d = nearest_image(f, d);
      b.segment(aoff_[i], f.m) = a.segment(aoff_[i], f.m) + d;
    }
    Vec ap = project(a);
    b = project(b);
    Segment s = solve_segment(ap, b, nullptr, false);
    double len = std::sqrt(s.energy);
    double inj = injectivity_radius_bound();
    if (!(len < inj)) {
      std::ostringstream os;
      os << "distance " << len << " is not below the injectivity radius bound " << inj;
      throw AdmissibilityError(os.str());
    }
    return sample_geodesic(s, samples);
  }

  double distance(const Vec& a, const Vec& b) const { return minimal_geodesic(a, b, 2).length; }

  GeodesicSegment sample_geodesic(const Segment& s, int samples) const {
    GeodesicSegment g;
    g.a = s.a;
    g.b = s.b;
    g.length = std::sqrt(s.energy);
    samples = std::max(samples, 2);
    for (int k = 0; k < samples; ++k) {
      g.t.push_back(static_cast<double>(k) / (samples - 1));
      g.x.push_back(Vec(ambient_));
      g.v.push_back(Vec(ambient_));
    }
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      const FactorSegment& p = s.parts[i];
      // integrate each sample interval separately so every sample is an exact step boundary
      int sub = std::max(1, (p.steps + samples - 2) / (samples - 1));
      detail::State<double> st(2 * f.m);
      for (int k = 0; k < f.m; ++k) {
        st[k] = p.a[k];
        st[f.m + k] = p.va[k];
      }
      for (int j = 0; j < samples; ++j) {
        if (j > 0) {
          for (int k = 0; k < f.m; ++k) st[f.m + k] /= (samples - 1);
          detail::integrate(f, st, sub);
          for (int k = 0; k < f.m; ++k) st[f.m + k] *= (samples - 1);
        }
        for (int k = 0; k < f.m; ++k) {
          g.x[j][aoff_[i] + k] = st[k];
          g.v[j][aoff_[i] + k] = st[f.m + k];
        }
      }
    }
    return g;
  }

  // Max-norm of the discrepancy between consecutive samples and a twice-finer re-integration,
  // plus the endpoint interpolation error.
  double geodesic_residual(const GeodesicSegment& g) const {
    double r = 0;
    for (std::size_t j = 0; j + 1 < g.t.size(); ++j) {
      double dt = g.t[j + 1] - g.t[j];
      for (std::size_t i = 0; i < factors_.size(); ++i) {
        const Factor& f = factors_[i];
        detail::State<double> st(2 * f.m);
        for (int k = 0; k < f.m; ++k) {
          st[k] = g.x[j][aoff_[i] + k];
          st[f.m + k] = g.v[j][aoff_[i] + k] * dt;
        }
        double len = std::sqrt(Vec(g.v[j].segment(aoff_[i], f.m) * dt).squaredNorm());
        detail::integrate(f, st, 2 * detail::steps_for(f, len) + 2);
        for (int k = 0; k < f.m; ++k) {
          r = std::max(r, std::abs(st[k] - g.x[j + 1][aoff_[i] + k]));
          r = std::max(r, std::abs(st[f.m + k] / dt - g.v[j + 1][aoff_[i] + k]));
        }
      }
    }
    r = std::max(r, (g.x.back() - g.b).cwiseAbs().maxCoeff());
    r = std::max(r, (g.x.front() - g.a).cwiseAbs().maxCoeff());
    return r;
  }

  // Converts a covariant derivative w at the start of the curve into the ordinary derivative of
  // the ambient variation, using the connection of e^{2f} g0.
  Vec covariant_to_ambient(const Vec& x, const Vec& xdot, const Vec& eta, const Vec& w) const {
    Vec out(ambient_);
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      const int o = aoff_[i], m = f.m;
      Vec xi = x.segment(o, m), vi = xdot.segment(o, m), ei = eta.segment(o, m), wi = w.segment(o, m);
      double fv;
      std::array<double, 8> g{};
      detail::conformal(f, xi.data(), fv, g.data());
      Vec grad = Eigen::Map<Vec>(g.data(), m);
      Vec corr = grad.dot(vi) * ei + grad.dot(ei) * vi - vi.dot(f.gram * ei) * (f.gram_inv * grad);
      Vec d = wi - corr;
      if (f.kind == Factor::Kind::ellipsoid) {
        Vec N = detail::ellipsoid_normal(f, xi);
        corr = corr - (N.dot(corr) / N.squaredNorm()) * N;
        d = wi - corr;
        d -= (N.dot(d) / N.squaredNorm()) * N;
        // tangency of the variation: N . d = -eta^T Hess(F) xdot
        double s = 0;
        for (int k = 0; k < 3; ++k) s += 2.0 / (f.axes[k] * f.axes[k]) * ei[k] * vi[k];
        d -= (s / N.squaredNorm()) * N;
      }
      out.segment(o, m) = d;
    }
    return out;
  }

  // Jacobi field along a sampled geodesic with initial value eta0 and covariant derivative deta0
  // (both tangent, ambient coordinates).
  JacobiField jacobi_field(const GeodesicSegment& g, const Vec& eta0, const Vec& deta0) const {
    if (g.x.size() < 2) throw DomainError("segment has no samples");
    if (eta0.size() != ambient_ || deta0.size() != ambient_) throw DomainError("initial data has wrong dimension");
    Vec e0 = tangent_project(g.a, eta0);
    Vec w0 = tangent_project(g.a, deta0);
    Vec dv0 = covariant_to_ambient(g.x[0], g.v[0], e0, w0);
    JacobiField J;
    J.t = g.t;
    J.eta.assign(g.t.size(), Vec::Zero(ambient_));
    J.eta_dot.assign(g.t.size(), Vec::Zero(ambient_));
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      const int o = aoff_[i], m = f.m;
      Vec x = g.x[0].segment(o, m), v = g.v[0].segment(o, m);
      Vec ex = e0.segment(o, m), ev = dv0.segment(o, m);
      J.eta[0].segment(o, m) = ex;
      J.eta_dot[0].segment(o, m) = ev;
      for (std::size_t j = 1; j < g.t.size(); ++j) {
        double dt = g.t[j] - g.t[j - 1];
        FactorSegment fs;
        fs.a = x;
        fs.va = v * dt;
        fs.b = x;
        fs.vb = v;
        double len = detail::ambient_speed(f, fs.va);
        fs.steps = f.kind == Factor::Kind::torus && f.flat() ? 1 : detail::steps_for(f, len) + 2;
        if (f.kind == Factor::Kind::torus && f.flat()) {
          fs.Fxx = Mat::Identity(m, m);
          fs.Fxv = Mat::Identity(m, m);
          fs.Fvx = Mat::Zero(m, m);
          fs.Fvv = Mat::Identity(m, m);
          fs.b = x + fs.va;
          fs.vb = fs.va;
        } else {
          detail::dispatch_flow_jacobian(f, fs);
        }
        // rescaled time: the step uses velocity v*dt over unit time
        Vec nx = fs.Fxx * ex + fs.Fxv * (ev * dt);
        Vec nv = (fs.Fvx * ex + fs.Fvv * (ev * dt)) / dt;
        ex = nx;
        ev = nv;
        x = fs.b;
        v = fs.vb / dt;
        J.eta[j].segment(o, m) = ex;
        J.eta_dot[j].segment(o, m) = ev;
      }
    }
    return J;
  }

  // Certified lower bound for the injectivity radius of the perturbed metric.
  double injectivity_radius_bound() const {
    double best = 1e300;
    for (const auto& f : factors_) best = std::min(best, factor_injrad(f));
    return best;
  }

  // Upper bound on sectional curvature of each factor.
  double curvature_bound(const Factor& f) const {
    const double F = f.sup_f(), H = f.hess_bound(), G = f.grad_bound();
    if (f.kind == Factor::Kind::ellipsoid) {
      const Eigen::Vector3d& ax = f.axes;
      double k0 = 0;
      for (int i = 0; i < 3; ++i) {
        double o = 1;
        for (int j = 0; j < 3; ++j)
          if (j != i) o *= ax[j] * ax[j];
        k0 = std::max(k0, ax[i] * ax[i] / o);
      }
      double kappa = ax.maxCoeff() / (ax.minCoeff() * ax.minCoeff());
      return std::exp(2.0 * F) * (k0 + 2.0 * H + 2.0 * kappa * G);
    }
    if (f.flat()) return 0.0;
    if (f.n == 2) return std::exp(2.0 * F) * 2.0 * H;
    return std::exp(2.0 * F) * (2.0 * H + 3.0 * G * G);
  }

  double factor_injrad(const Factor& f) const {
    const double F = f.sup_f();
    if (F > max_perturbation_) {
      std::ostringstream os;
      os << "perturbation sup " << F << " exceeds the safety threshold " << max_perturbation_;
      throw ConfigError(os.str());
    }
    double K = curvature_bound(f);
    double conj = K > 0 ? M_PI / std::sqrt(K) : 1e300;
    if (f.kind == Factor::Kind::torus) return std::min(std::exp(-F) * f.systole / 2.0, conj);
    return std::min(std::exp(-F) * M_PI * f.axes.minCoeff(), conj);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["preset"] = preset_name();
    j["dimension"] = dim_;
    auto factor_json = [](const Factor& f) {
      nlohmann::json o;
      if (f.kind == Factor::Kind::torus) {
        o["preset"] = "flat-torus";
        o["dimension"] = f.n;
        std::vector<std::vector<double>> L(f.n, std::vector<double>(f.n));
        for (int r = 0; r < f.n; ++r)
          for (int c = 0; c < f.n; ++c) L[r][c] = f.lattice(r, c);
        o["params"] = {{"lattice", L}};
      } else {
        o["preset"] = "ellipsoid";
        o["dimension"] = 2;
        o["params"] = {{"axes", {f.axes[0], f.axes[1], f.axes[2]}}};
      }
      nlohmann::json bumps = nlohmann::json::array();
      for (const auto& b : f.bumps)
        bumps.push_back({{"center", std::vector<double>(b.center.data(), b.center.data() + b.center.size())},
                         {"radius", b.radius},
                         {"weight", b.weight}});
      o["perturbation"] = {{"magnitude", f.magnitude}, {"seed", f.seed}, {"bumps", bumps}};
      return o;
    };
    if (preset_ == Preset::product) {
      j["factors"] = nlohmann::json::array();
      for (const auto& f : factors_) j["factors"].push_back(factor_json(f));
    } else {
      auto o = factor_json(factors_[0]);
      j["params"] = o["params"];
      j["perturbation"] = o["perturbation"];
    }
    j["max_perturbation"] = max_perturbation_;
    return j;
  }

  static ManifoldModel from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("manifold must be an object");
    const std::string preset = j.value("preset", "");
    ManifoldModel M;
    if (preset == "product") {
      if (!j.contains("factors") || !j["factors"].is_array() || j["factors"].size() < 2)
        throw ConfigError("product preset needs at least two factors");
      M = from_json(j["factors"][0]);
      for (std::size_t i = 1; i < j["factors"].size(); ++i) M = product(M, from_json(j["factors"][i]));
    } else if (preset == "flat-torus") {
      int n = j.value("dimension", 2);
      if (n < 1) throw ConfigError("dimension must be >= 1");
      Mat L = Mat::Identity(n, n);
      if (j.contains("params") && j["params"].contains("lattice")) {
        auto rows = j["params"]["lattice"].get<std::vector<std::vector<double>>>();
        if (static_cast<int>(rows.size()) != n) throw ConfigError("lattice must be dimension x dimension");
        for (int r = 0; r < n; ++r) {
          if (static_cast<int>(rows[r].size()) != n) throw ConfigError("lattice must be dimension x dimension");
          for (int c = 0; c < n; ++c) L(r, c) = rows[r][c];
        }
      }
      M = flat_torus(L);
    } else if (preset == "ellipsoid") {
      if (j.value("dimension", 2) != 2) throw ConfigError("ellipsoid preset is two-dimensional");
      auto ax = j.contains("params") ? j["params"].value("axes", std::vector<double>{1, 1, 1}) : std::vector<double>{1, 1, 1};
      if (ax.size() != 3) throw ConfigError("ellipsoid needs three semi-axes");
      M = ellipsoid(Eigen::Vector3d(ax[0], ax[1], ax[2]));
    } else {
      throw ConfigError("unknown manifold preset '" + preset + "'");
    }
    if (j.contains("max_perturbation")) M.max_perturbation_ = j["max_perturbation"].get<double>();
    if (preset != "product" && j.contains("perturbation")) {
      const auto& p = j["perturbation"];
      double mag = p.value("magnitude", 0.0);
      auto seed = p.value("seed", std::uint64_t{0});
      if (mag < 0) throw ConfigError("perturbation magnitude must be nonnegative");
      std::vector<Bump> bumps;
      if (p.contains("bumps") && p["bumps"].is_array()) {
        for (const auto& b : p["bumps"]) {
          Bump bb;
          auto c = b.at("center").get<std::vector<double>>();
          bb.center = Eigen::Map<Vec>(c.data(), static_cast<Eigen::Index>(c.size()));
          bb.radius = b.value("radius", 0.4);
          bb.weight = b.value("weight", 1.0);
          bumps.push_back(bb);
        }
      } else if (mag > 0) {
        int count = p.contains("bumps") && p["bumps"].is_number_integer() ? p["bumps"].get<int>() : p.value("count", 3);
        bumps = random_bumps(M.factors_[0], seed, count);
      }
      M = M.with_bumps(0, mag, bumps, seed);
    }
    M.injectivity_radius_bound();  // validates the safety threshold
    return M;
  }

 private:
  void finish() {
    dim_ = ambient_ = 0;
    aoff_.clear();
    ioff_.clear();
    for (const auto& f : factors_) {
      aoff_.push_back(ambient_);
      ioff_.push_back(dim_);
      ambient_ += f.m;
      dim_ += f.n;
    }
  }

  static Vec nearest_image(const Factor& f, const Vec& d) {
    Vec best = d;
    double bl = d.dot(f.gram * d);
    const int n = f.m;
    std::vector<int> k(n, -1);
    while (true) {
      Vec c = d;
      for (int i = 0; i < n; ++i) c[i] += k[i];
      double l = c.dot(f.gram * c);
      if (l < bl - 1e-15) {
        bl = l;
        best = c;
      }
      int i = 0;
      while (i < n && k[i] == 1) k[i++] = -1;
      if (i == n) break;
      ++k[i];
    }
    return best;
  }

  void fill_second(Segment& s) const {
    const int A = ambient_;
    s.Wa = Mat::Zero(A, A);
    s.Wb = Mat::Zero(A, A);
    s.Ca = Mat::Zero(A, A);
    s.Cb = Mat::Zero(A, A);
    s.Vaa = Mat::Zero(A, A);
    s.Vab = Mat::Zero(A, A);
    s.Vba = Mat::Zero(A, A);
    s.Vbb = Mat::Zero(A, A);
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const Factor& f = factors_[i];
      const int o = aoff_[i], m = f.m;
      const FactorSegment& p = s.parts[i];
      for (int end = 0; end < 2; ++end) {
        const Vec& x = end == 0 ? p.a : p.b;
        const Vec& v = end == 0 ? p.va : p.vb;
        double fv;
        std::array<double, 8> g{};
        detail::conformal(f, x.data(), fv, g.data());
        Vec grad = Eigen::Map<Vec>(g.data(), m);
        double e2 = std::exp(2.0 * fv);
        Mat& W = end == 0 ? s.Wa : s.Wb;
        Mat& C = end == 0 ? s.Ca : s.Cb;
        W.block(o, o, m, m) = e2 * f.gram;
        C.block(o, o, m, m) = 2.0 * e2 * (f.gram * v) * grad.transpose();
      }
      Mat Vaa, Vab;
      if (f.kind == Factor::Kind::torus) {
        Mat inv = p.Fxv.inverse();
        Vab = inv;
        Vaa = -inv * p.Fxx;
      } else {
        Mat Ta = detail::tangent_frame(f, p.a), Tb = detail::tangent_frame(f, p.b);
        Vec Na = detail::ellipsoid_normal(f, p.a);
        double nn = Na.norm();
        Vec na = Na / nn;
        Eigen::RowVectorXd nu(3);
        for (int k = 0; k < 3; ++k) nu[k] = -(2.0 / (f.axes[k] * f.axes[k])) * p.va[k] / nn;
        Mat M = Tb.transpose() * p.Fxv * Ta;
        Mat Minv = M.inverse();
        Vab = Ta * Minv * Tb.transpose();
        Vaa = -Ta * Minv * Tb.transpose() * (p.Fxx + p.Fxv * na * nu) + na * nu;
      }
      s.Vaa.block(o, o, m, m) = Vaa;
      s.Vab.block(o, o, m, m) = Vab;
      s.Vba.block(o, o, m, m) = p.Fvx + p.Fvv * Vaa;
      s.Vbb.block(o, o, m, m) = p.Fvv * Vab;
    }
    s.has_second = true;
  }

  Preset preset_ = Preset::flat_torus;
  std::vector<Factor> factors_;
  std::vector<int> aoff_, ioff_;
  int dim_ = 0, ambient_ = 0;
  double max_perturbation_ = 0.25;
};

// N as a product of per-factor pieces: a point, or a linear subtorus base + B s (B integer columns).
struct SubmanifoldPart {
  enum class Kind { point, subtorus };
  Kind kind = Kind::point;
  Vec base;        // factor ambient coordinates
  Mat directions;  // m x k
};

class SubmanifoldModel {
 public:
  SubmanifoldModel() = default;
  SubmanifoldModel(const ManifoldModel& M, std::vector<SubmanifoldPart> parts) : parts_(std::move(parts)) {
    if (parts_.size() != M.factors().size()) throw ConfigError("submanifold needs one piece per manifold factor");
    ambient_ = M.ambient_dim();
    dim_ = 0;
    for (std::size_t i = 0; i < parts_.size(); ++i) {
      const Factor& f = M.factors()[i];
      auto& p = parts_[i];
      if (p.base.size() != f.m) throw ConfigError("submanifold point has wrong dimension");
      if (f.kind == Factor::Kind::ellipsoid) {
        if (p.kind != SubmanifoldPart::Kind::point) throw ConfigError("only points are supported on ellipsoid factors");
        p.base = detail::project_to_factor(f, p.base);
      }
      if (p.kind == SubmanifoldPart::Kind::point) p.directions = Mat::Zero(f.m, 0);
      if (p.directions.rows() != f.m) throw ConfigError("subtorus directions have wrong dimension");
      for (Eigen::Index r = 0; r < p.directions.rows(); ++r)
        for (Eigen::Index c = 0; c < p.directions.cols(); ++c)
          if (p.directions(r, c) != std::round(p.directions(r, c))) throw ConfigError("subtorus directions must be integer vectors");
      if (p.directions.cols() > 0) {
        Eigen::FullPivLU<Mat> lu(p.directions);
        if (lu.rank() != p.directions.cols()) throw ConfigError("subtorus directions must be independent");
      }
      offsets_.push_back(dim_);
      aoffsets_.push_back(M.factor_offset(i));
      dim_ += static_cast<int>(p.directions.cols());
    }
    if (!(dim_ < M.dim())) throw ConfigError("submanifold must have positive codimension");
  }

  static SubmanifoldModel point(const ManifoldModel& M, const Vec& x) {
    std::vector<SubmanifoldPart> parts;
    for (std::size_t i = 0; i < M.factors().size(); ++i) {
      SubmanifoldPart p;
      p.base = x.segment(M.factor_offset(i), M.factors()[i].m);
      parts.push_back(p);
    }
    return SubmanifoldModel(M, parts);
  }

  int dim() const { return dim_; }
  const std::vector<SubmanifoldPart>& parts() const { return parts_; }
  int part_offset(std::size_t i) const { return offsets_[i]; }

  Vec embed(const Vec& s) const {
    if (s.size() != dim_) throw DomainError("submanifold parameter has wrong dimension");
    Vec x(ambient_);
    for (std::size_t i = 0; i < parts_.size(); ++i) {
      const auto& p = parts_[i];
      Vec xi = p.base;
      if (p.directions.cols() > 0) xi += p.directions * s.segment(offsets_[i], p.directions.cols());
      x.segment(aoffsets_[i], p.base.size()) = xi;
    }
    return x;
  }
  Vec basepoint() const { return embed(Vec::Zero(dim_)); }

  // d embed / ds (ambient x dim N); constant.
  Mat jacobian() const {
    Mat J = Mat::Zero(ambient_, dim_);
    for (std::size_t i = 0; i < parts_.size(); ++i)
      if (parts_[i].directions.cols() > 0)
        J.block(aoffsets_[i], offsets_[i], parts_[i].base.size(), parts_[i].directions.cols()) = parts_[i].directions;
    return J;
  }
  Mat tangent_basis() const { return jacobian(); }

  bool same_as(const SubmanifoldModel& o) const {
    if (parts_.size() != o.parts_.size()) return false;
    for (std::size_t i = 0; i < parts_.size(); ++i) {
      if (parts_[i].kind != o.parts_[i].kind) return false;
      if (!parts_[i].base.isApprox(o.parts_[i].base, 1e-14) && (parts_[i].base - o.parts_[i].base).norm() > 1e-14) return false;
      if (parts_[i].directions.cols() != o.parts_[i].directions.cols()) return false;
      if (parts_[i].directions != o.parts_[i].directions) return false;
    }
    return true;
  }

  // Defining-equation residual: distance from x to the affine model (lattice coordinates taken mod 1).
  double residual(const ManifoldModel& M, const Vec& x) const {
    double r = 0;
    for (std::size_t i = 0; i < parts_.size(); ++i) {
      const auto& p = parts_[i];
      const Factor& f = M.factors()[i];
      Vec d = x.segment(aoffsets_[i], f.m) - p.base;
      if (p.directions.cols() > 0) {
        Mat B = p.directions;
        Vec c = (B.transpose() * B).ldlt().solve(B.transpose() * d);
        d -= B * c;
      }
      if (f.kind == Factor::Kind::torus)
        for (int k = 0; k < f.m; ++k) d[k] -= std::round(d[k]);
      r = std::max(r, d.cwiseAbs().maxCoeff());
    }
    return r;
  }

  nlohmann::json to_json() const {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& p : parts_) {
      nlohmann::json o;
      o["kind"] = p.kind == SubmanifoldPart::Kind::point ? "point" : "subtorus";
      std::vector<double> b(p.base.data(), p.base.data() + p.base.size());
      if (p.kind == SubmanifoldPart::Kind::point) {
        o["point"] = b;
      } else {
        o["base"] = b;
        std::vector<std::vector<int>> dirs;
        for (Eigen::Index c = 0; c < p.directions.cols(); ++c) {
          std::vector<int> d;
          for (Eigen::Index r = 0; r < p.directions.rows(); ++r) d.push_back(static_cast<int>(p.directions(r, c)));
          dirs.push_back(d);
        }
        o["directions"] = dirs;
      }
      parts.push_back(o);
    }
    if (parts.size() == 1) return parts[0];
    return {{"kind", "product"}, {"factors", parts}};
  }

  static SubmanifoldModel from_json(const ManifoldModel& M, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("submanifold must be an object");
    std::vector<nlohmann::json> pieces;
    if (j.value("kind", "") == "product") {
      for (const auto& p : j.at("factors")) pieces.push_back(p);
    } else {
      pieces.push_back(j);
    }
    if (pieces.size() != M.factors().size()) throw ConfigError("submanifold needs one piece per manifold factor");
    std::vector<SubmanifoldPart> parts;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      const auto& p = pieces[i];
      SubmanifoldPart part;
      const std::string kind = p.value("kind", "point");
      const int m = M.factors()[i].m;
      if (kind == "point") {
        auto b = p.value("point", std::vector<double>(m, 0.0));
        part.base = Eigen::Map<Vec>(b.data(), static_cast<Eigen::Index>(b.size()));
      } else if (kind == "subtorus") {
        if (M.factors()[i].kind != Factor::Kind::torus) throw ConfigError("subtorus needs a torus factor");
        part.kind = SubmanifoldPart::Kind::subtorus;
        auto b = p.value("base", std::vector<double>(m, 0.0));
        part.base = Eigen::Map<Vec>(b.data(), static_cast<Eigen::Index>(b.size()));
        auto dirs = p.at("directions").get<std::vector<std::vector<double>>>();
        part.directions = Mat::Zero(m, static_cast<Eigen::Index>(dirs.size()));
        for (std::size_t c = 0; c < dirs.size(); ++c) {
          if (static_cast<int>(dirs[c].size()) != m) throw ConfigError("subtorus direction has wrong dimension");
          for (int r = 0; r < m; ++r) part.directions(r, static_cast<Eigen::Index>(c)) = dirs[c][r];
        }
      } else {
        throw ConfigError("unknown submanifold kind '" + kind + "'");
      }
      parts.push_back(part);
    }
    return SubmanifoldModel(M, parts);
  }

 private:
  std::vector<SubmanifoldPart> parts_;
  std::vector<int> offsets_, aoffsets_;
  int dim_ = 0, ambient_ = 0;
};

}  // namespace chordmorse
