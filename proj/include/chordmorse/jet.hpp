#pragma once

#include <array>
#include <cmath>
#include <type_traits>

namespace chordmorse {

// Forward-mode dual number with N directional derivatives. Nesting Jet<Jet<double, N>, N>
// gives second derivatives.
template <class T, int N>
struct Jet {
  T v{};
  std::array<T, N> d{};

  Jet() = default;
  Jet(double x) : v(x) {}  // NOLINT: implicit constants are the point
  Jet(const T& x, const std::array<T, N>& dx) : v(x), d(dx) {}

  static Jet variable(const T& x, int i) {
    Jet j(x, {});
    j.d[i] = T(1.0);
    return j;
  }

  Jet operator-() const {
    Jet r = *this;
    r.v = -r.v;
    for (auto& x : r.d) x = -x;
    return r;
  }
  Jet& operator+=(const Jet& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Jet& operator-=(const Jet& o) {
    v -= o.v;
    for (int i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Jet& operator*=(const Jet& o) {
    for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  Jet& operator/=(const Jet& o) {
    T inv = T(1.0) / o.v;
    v *= inv;
    for (int i = 0; i < N; ++i) d[i] = (d[i] - v * o.d[i]) * inv;
    return *this;
  }
  Jet& operator*=(double s) {
    v *= s;
    for (auto& x : d) x *= s;
    return *this;
  }

  friend Jet operator+(Jet a, const Jet& b) { return a += b; }
  friend Jet operator-(Jet a, const Jet& b) { return a -= b; }
  friend Jet operator*(Jet a, const Jet& b) { return a *= b; }
  friend Jet operator/(Jet a, const Jet& b) { return a /= b; }
  friend Jet operator*(Jet a, double s) { return a *= s; }
  friend Jet operator*(double s, Jet a) { return a *= s; }
  friend Jet operator+(Jet a, double s) { a.v += s; return a; }
  friend Jet operator+(double s, Jet a) { a.v += s; return a; }
  friend Jet operator-(Jet a, double s) { a.v -= s; return a; }
  friend Jet operator-(double s, const Jet& a) { return -a + s; }
  friend Jet operator/(Jet a, double s) { return a *= (1.0 / s); }
  friend Jet operator/(double s, const Jet& a) { return Jet(s) / a; }
};

template <class T>
inline double value_of(const T& x) {
  if constexpr (std::is_arithmetic_v<T>) {
    return static_cast<double>(x);
  } else {
    return value_of(x.v);
  }
}

template <class T, int N>
inline Jet<T, N> exp(const Jet<T, N>& a) {
  using std::exp;
  T e = exp(a.v);
  Jet<T, N> r;
  r.v = e;
  for (int i = 0; i < N; ++i) r.d[i] = e * a.d[i];
  return r;
}

template <class T, int N>
inline Jet<T, N> sqrt(const Jet<T, N>& a) {
  using std::sqrt;
  T s = sqrt(a.v);
  Jet<T, N> r;
  r.v = s;
  T h = T(0.5) / s;
  for (int i = 0; i < N; ++i) r.d[i] = h * a.d[i];
  return r;
}

}  // namespace chordmorse
