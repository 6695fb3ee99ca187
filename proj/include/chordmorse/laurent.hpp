#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "chordmorse/errors.hpp"

namespace chordmorse {

using BigInt = boost::multiprecision::cpp_int;
using BigRational = boost::multiprecision::cpp_rational;

// Exponent vector of a Laurent monomial t1^e1 ... td^ed (entries may be negative).
using Exponent = std::vector<std::int64_t>;

// Element of Z[t1^{±1}, ..., td^{±1}] with exact integer coefficients.
// nvars == 0 is the ring Z itself.
class Laurent {
 public:
  Laurent() = default;
  explicit Laurent(int nvars) : nvars_(nvars) {}
  Laurent(int nvars, const BigInt& c) : nvars_(nvars) {
    if (c != 0) terms_[Exponent(nvars, 0)] = c;
  }

  static Laurent monomial(const Exponent& e, const BigInt& c = 1) {
    Laurent r(static_cast<int>(e.size()));
    if (c != 0) r.terms_[e] = c;
    return r;
  }
  static Laurent variable(int nvars, int i) {
    Exponent e(nvars, 0);
    e[i] = 1;
    return monomial(e);
  }

  int nvars() const { return nvars_; }
  bool is_zero() const { return terms_.empty(); }
  std::size_t term_count() const { return terms_.size(); }
  const std::map<Exponent, BigInt>& terms() const { return terms_; }

  // Units of the Laurent ring are exactly ±monomials.
  bool is_unit() const {
    return terms_.size() == 1 && (terms_.begin()->second == 1 || terms_.begin()->second == -1);
  }
  bool is_constant() const {
    return terms_.empty() || (terms_.size() == 1 && is_zero_exp(terms_.begin()->first));
  }
  BigInt constant_term() const {
    auto it = terms_.find(Exponent(nvars_, 0));
    return it == terms_.end() ? BigInt(0) : it->second;
  }

  Laurent operator-() const {
    Laurent r = *this;
    for (auto& [e, c] : r.terms_) c = -c;
    return r;
  }
  Laurent& operator+=(const Laurent& o) {
    adopt(o);
    for (const auto& [e, c] : o.terms_) add_term(e, c);
    return *this;
  }
  Laurent& operator-=(const Laurent& o) {
    adopt(o);
    for (const auto& [e, c] : o.terms_) add_term(e, -c);
    return *this;
  }
  friend Laurent operator+(Laurent a, const Laurent& b) { return a += b; }
  friend Laurent operator-(Laurent a, const Laurent& b) { return a -= b; }
  friend Laurent operator*(const Laurent& a, const Laurent& b) {
    Laurent r(std::max(a.nvars_, b.nvars_));
    for (const auto& [ea, ca] : a.terms_)
      for (const auto& [eb, cb] : b.terms_) r.add_term(add_exp(ea, eb), ca * cb);
    return r;
  }
  Laurent& operator*=(const Laurent& o) { return *this = *this * o; }
  friend bool operator==(const Laurent& a, const Laurent& b) { return a.terms_ == b.terms_; }
  friend bool operator!=(const Laurent& a, const Laurent& b) { return !(a == b); }

  // Leading term in lexicographic exponent order.
  std::pair<Exponent, BigInt> leading() const {
    if (terms_.empty()) throw DomainError("leading term of zero Laurent polynomial");
    auto it = std::prev(terms_.end());
    return {it->first, it->second};
  }
  std::pair<Exponent, BigInt> trailing() const {
    if (terms_.empty()) throw DomainError("trailing term of zero Laurent polynomial");
    return {terms_.begin()->first, terms_.begin()->second};
  }

  // Exact quotient a / b; throws DomainError when b does not divide a.
  friend Laurent exact_div(const Laurent& a, const Laurent& b) {
    if (b.is_zero()) throw DomainError("division by zero Laurent polynomial");
    Laurent q(std::max(a.nvars_, b.nvars_));
    if (a.is_zero()) return q;
    Laurent r = a;
    const auto [lb_e, lb_c] = b.leading();
    const Exponent floor_e = sub_exp(a.trailing().first, b.trailing().first);
    while (!r.is_zero()) {
      auto [lr_e, lr_c] = r.leading();
      Exponent qe = sub_exp(lr_e, lb_e);
      if (qe < floor_e) throw DomainError("Laurent division is not exact");
      BigInt qc = lr_c / lb_c;
      if (qc * lb_c != lr_c) throw DomainError("Laurent division is not exact");
      Laurent term = monomial(qe, qc);
      q += term;
      r -= term * b;
    }
    return q;
  }

  // Integer value with every variable set to the given integer (used for t = ±1 probes).
  BigInt evaluate_integer(const std::vector<int>& point) const {
    BigInt total = 0;
    for (const auto& [e, c] : terms_) {
      BigInt v = c;
      for (int i = 0; i < nvars_; ++i) {
        int p = point[i];
        if (p == 1) continue;
        if (p == -1) {
          if (e[i] % 2 != 0) v = -v;
          continue;
        }
        if (p == 0) throw DomainError("cannot evaluate Laurent polynomial at 0");
        if (e[i] < 0) throw DomainError("integer evaluation with negative exponent at non-unit");
        v *= boost::multiprecision::pow(BigInt(p), static_cast<unsigned>(e[i]));
      }
      total += v;
    }
    return total;
  }

  BigRational evaluate(const std::vector<BigRational>& point) const {
    BigRational total = 0;
    for (const auto& [e, c] : terms_) {
      BigRational v = BigRational(c);
      for (int i = 0; i < nvars_; ++i) {
        if (e[i] == 0) continue;
        if (point[i] == 0) throw DomainError("cannot evaluate Laurent polynomial at 0");
        BigRational base = e[i] > 0 ? point[i] : BigRational(1) / point[i];
        for (std::int64_t k = 0; k < (e[i] > 0 ? e[i] : -e[i]); ++k) v *= base;
      }
      total += v;
    }
    return total;
  }

  // Canonical string: terms ordered by total degree then lexicographically, e.g. "1-t1", "2*t1^-1*t2+3".
  std::string str() const {
    if (terms_.empty()) return "0";
    std::vector<std::pair<Exponent, BigInt>> ordered(terms_.begin(), terms_.end());
    std::stable_sort(ordered.begin(), ordered.end(), [](const auto& x, const auto& y) {
      auto dx = total_degree(x.first), dy = total_degree(y.first);
      if (dx != dy) return dx < dy;
      return x.first < y.first;
    });
    std::ostringstream os;
    bool first = true;
    for (const auto& [e, c] : ordered) {
      BigInt mag = c < 0 ? BigInt(-c) : c;
      if (c < 0)
        os << "-";
      else if (!first)
        os << "+";
      first = false;
      bool constant = is_zero_exp(e);
      bool wrote = false;
      if (mag != 1 || constant) {
        os << mag;
        wrote = true;
      }
      for (int i = 0; i < nvars_; ++i) {
        if (e[i] == 0) continue;
        if (wrote) os << "*";
        os << "t" << (i + 1);
        if (e[i] != 1) os << "^" << e[i];
        wrote = true;
      }
    }
    return os.str();
  }

  // Parses the format produced by str(). Variables are t1..t<nvars>.
  static Laurent parse(const std::string& text, int nvars) {
    Laurent r(nvars);
    std::size_t i = 0;
    auto skip = [&] {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    };
    auto read_int = [&]() -> std::string {
      std::size_t start = i;
      if (i < text.size() && (text[i] == '-' || text[i] == '+')) ++i;
      while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) ++i;
      return text.substr(start, i - start);
    };
    skip();
    if (text.substr(i) == "0") return r;
    while (true) {
      skip();
      if (i >= text.size()) break;
      int sign = 1;
      if (text[i] == '+' || text[i] == '-') {
        if (text[i] == '-') sign = -1;
        ++i;
        skip();
      }
      BigInt coef = 1;
      Exponent e(nvars, 0);
      bool any = false;
      while (i < text.size()) {
        if (std::isdigit(static_cast<unsigned char>(text[i]))) {
          coef *= BigInt(read_int());
          any = true;
        } else if (text[i] == 't') {
          ++i;
          std::string idx = read_int();
          if (idx.empty()) throw ConfigError("bad ring element '" + text + "'");
          int v = std::stoi(idx) - 1;
          if (v < 0 || v >= nvars) throw ConfigError("variable out of range in '" + text + "'");
          std::int64_t p = 1;
          if (i < text.size() && text[i] == '^') {
            ++i;
            p = std::stoll(read_int());
          }
          e[v] += p;
          any = true;
        } else {
          throw ConfigError("bad ring element '" + text + "'");
        }
        skip();
        if (i < text.size() && text[i] == '*') {
          ++i;
          skip();
          continue;
        }
        break;
      }
      if (!any) throw ConfigError("bad ring element '" + text + "'");
      r.add_term(e, sign * coef);
    }
    return r;
  }

 private:
  static bool is_zero_exp(const Exponent& e) {
    return std::all_of(e.begin(), e.end(), [](std::int64_t x) { return x == 0; });
  }
  static std::int64_t total_degree(const Exponent& e) {
    std::int64_t s = 0;
    for (auto x : e) s += x;
    return s;
  }
  static Exponent add_exp(const Exponent& a, const Exponent& b) {
    Exponent r(std::max(a.size(), b.size()), 0);
    for (std::size_t i = 0; i < a.size(); ++i) r[i] += a[i];
    for (std::size_t i = 0; i < b.size(); ++i) r[i] += b[i];
    return r;
  }
  static Exponent sub_exp(const Exponent& a, const Exponent& b) {
    Exponent r(std::max(a.size(), b.size()), 0);
    for (std::size_t i = 0; i < a.size(); ++i) r[i] += a[i];
    for (std::size_t i = 0; i < b.size(); ++i) r[i] -= b[i];
    return r;
  }
  void adopt(const Laurent& o) {
    if (o.nvars_ > nvars_) {
      std::map<Exponent, BigInt> widened;
      for (auto& [e, c] : terms_) {
        Exponent w = e;
        w.resize(o.nvars_, 0);
        widened[w] = c;
      }
      terms_ = std::move(widened);
      nvars_ = o.nvars_;
    }
  }
  void add_term(const Exponent& e, const BigInt& c) {
    if (c == 0) return;
    Exponent key = e;
    key.resize(nvars_, 0);
    auto it = terms_.find(key);
    if (it == terms_.end()) {
      terms_.emplace(key, c);
    } else {
      it->second += c;
      if (it->second == 0) terms_.erase(it);
    }
  }

  int nvars_ = 0;
  std::map<Exponent, BigInt> terms_;
};

// Dense matrix over a Laurent ring (nvars == 0 gives integer matrices).
struct RingMatrix {
  int nvars = 0;
  std::size_t rows = 0, cols = 0;
  std::vector<Laurent> data;

  RingMatrix() = default;
  RingMatrix(int nv, std::size_t r, std::size_t c) : nvars(nv), rows(r), cols(c), data(r * c, Laurent(nv)) {}

  Laurent& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const Laurent& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  static RingMatrix identity(int nv, std::size_t n) {
    RingMatrix m(nv, n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = Laurent(nv, 1);
    return m;
  }
  bool is_zero() const {
    return std::all_of(data.begin(), data.end(), [](const Laurent& x) { return x.is_zero(); });
  }
  friend RingMatrix operator*(const RingMatrix& a, const RingMatrix& b) {
    if (a.cols != b.rows) throw ContractViolation("ring matrix dimension mismatch in product");
    RingMatrix r(std::max(a.nvars, b.nvars), a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
      for (std::size_t k = 0; k < a.cols; ++k) {
        if (a(i, k).is_zero()) continue;
        for (std::size_t j = 0; j < b.cols; ++j)
          if (!b(k, j).is_zero()) r(i, j) += a(i, k) * b(k, j);
      }
    return r;
  }
  friend RingMatrix operator+(const RingMatrix& a, const RingMatrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) throw ContractViolation("ring matrix dimension mismatch in sum");
    RingMatrix r = a;
    r.nvars = std::max(a.nvars, b.nvars);
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] += b.data[i];
    return r;
  }
  friend RingMatrix operator-(const RingMatrix& a, const RingMatrix& b) {
    RingMatrix nb = b;
    for (auto& x : nb.data) x = -x;
    return a + nb;
  }
  friend bool operator==(const RingMatrix& a, const RingMatrix& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
  }

  std::vector<std::vector<std::string>> strings() const {
    std::vector<std::vector<std::string>> out(rows, std::vector<std::string>(cols));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[i][j] = (*this)(i, j).str();
    return out;
  }
};

}  // namespace chordmorse
