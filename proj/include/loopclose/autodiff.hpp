#pragma once

// Forward-mode dual numbers carrying derivatives with respect to the seven
// tangent coordinates of one Sim3 vertex. Usable as an Eigen scalar.

#include "loopclose/geometry.hpp"

#include <Eigen/Core>

#include <cmath>

namespace loopclose {

struct Dual7 {
  using Partials = Eigen::Matrix<double, 7, 1>;

  double value = 0.0;
  Partials partials = Partials::Zero();

  Dual7() = default;
  Dual7(double v) : value(v) {}  // NOLINT: implicit promotion of constants
  Dual7(double v, const Partials& d) : value(v), partials(d) {}

  /// Independent variable number `index` with value `v`.
  static Dual7 variable(double v, int index) {
    Dual7 out(v);
    out.partials(index) = 1.0;
    return out;
  }

  Dual7& operator+=(const Dual7& o) {
    value += o.value;
    partials += o.partials;
    return *this;
  }
  Dual7& operator-=(const Dual7& o) {
    value -= o.value;
    partials -= o.partials;
    return *this;
  }
  Dual7& operator*=(const Dual7& o) {
    partials = partials * o.value + o.partials * value;
    value *= o.value;
    return *this;
  }
  Dual7& operator/=(const Dual7& o) {
    const double inv = 1.0 / o.value;
    partials = (partials - o.partials * (value * inv)) * inv;
    value *= inv;
    return *this;
  }
};

inline double scalar_value(const Dual7& x) { return x.value; }

inline Dual7 operator-(const Dual7& a) { return {-a.value, -a.partials}; }
inline Dual7 operator+(const Dual7& a) { return a; }

inline Dual7 operator+(Dual7 a, const Dual7& b) { return a += b; }
inline Dual7 operator-(Dual7 a, const Dual7& b) { return a -= b; }
inline Dual7 operator*(Dual7 a, const Dual7& b) { return a *= b; }
inline Dual7 operator/(Dual7 a, const Dual7& b) { return a /= b; }

inline Dual7 operator+(Dual7 a, double b) { a.value += b; return a; }
inline Dual7 operator+(double a, Dual7 b) { b.value += a; return b; }
inline Dual7 operator-(Dual7 a, double b) { a.value -= b; return a; }
inline Dual7 operator-(double a, const Dual7& b) { return {a - b.value, -b.partials}; }
inline Dual7 operator*(const Dual7& a, double b) { return {a.value * b, a.partials * b}; }
inline Dual7 operator*(double a, const Dual7& b) { return {a * b.value, a * b.partials}; }
inline Dual7 operator/(const Dual7& a, double b) { return {a.value / b, a.partials / b}; }
inline Dual7 operator/(double a, const Dual7& b) {
  const double inv = 1.0 / b.value;
  return {a * inv, b.partials * (-a * inv * inv)};
}

inline bool operator<(const Dual7& a, const Dual7& b) { return a.value < b.value; }
inline bool operator>(const Dual7& a, const Dual7& b) { return a.value > b.value; }
inline bool operator<=(const Dual7& a, const Dual7& b) { return a.value <= b.value; }
inline bool operator>=(const Dual7& a, const Dual7& b) { return a.value >= b.value; }
inline bool operator==(const Dual7& a, const Dual7& b) { return a.value == b.value; }
inline bool operator!=(const Dual7& a, const Dual7& b) { return a.value != b.value; }

// Chain rule: f(a) with f'(a) given.
inline Dual7 chain(const Dual7& a, double f, double df) { return {f, a.partials * df}; }

inline Dual7 sqrt(const Dual7& a) {
  const double r = std::sqrt(a.value);
  return chain(a, r, 0.5 / r);
}
inline Dual7 sin(const Dual7& a) { return chain(a, std::sin(a.value), std::cos(a.value)); }
inline Dual7 cos(const Dual7& a) { return chain(a, std::cos(a.value), -std::sin(a.value)); }
inline Dual7 exp(const Dual7& a) {
  const double e = std::exp(a.value);
  return chain(a, e, e);
}
inline Dual7 log(const Dual7& a) { return chain(a, std::log(a.value), 1.0 / a.value); }
inline Dual7 abs(const Dual7& a) { return a.value < 0.0 ? -a : a; }
inline Dual7 atan2(const Dual7& y, const Dual7& x) {
  const double d = x.value * x.value + y.value * y.value;
  return {std::atan2(y.value, x.value), (y.partials * x.value - x.partials * y.value) / d};
}
inline Dual7 abs2(const Dual7& a) { return a * a; }
inline bool isfinite(const Dual7& a) { return std::isfinite(a.value) && a.partials.allFinite(); }

}  // namespace loopclose

namespace Eigen {

template <> struct NumTraits<loopclose::Dual7> : GenericNumTraits<double> {
  using Real = loopclose::Dual7;
  using NonInteger = loopclose::Dual7;
  using Nested = loopclose::Dual7;
  using Literal = loopclose::Dual7;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 8,
    AddCost = 8,
    MulCost = 24
  };
  static inline Real epsilon() { return Real(std::numeric_limits<double>::epsilon()); }
  static inline Real dummy_precision() { return Real(1e-12); }
  static inline Real highest() { return Real(std::numeric_limits<double>::max()); }
  static inline Real lowest() { return Real(std::numeric_limits<double>::lowest()); }
  static inline int digits10() { return std::numeric_limits<double>::digits10; }
};

template <typename BinaryOp> struct ScalarBinaryOpTraits<loopclose::Dual7, double, BinaryOp> {
  using ReturnType = loopclose::Dual7;
};
template <typename BinaryOp> struct ScalarBinaryOpTraits<double, loopclose::Dual7, BinaryOp> {
  using ReturnType = loopclose::Dual7;
};

}  // namespace Eigen
