#pragma once

// Hyper-dual numbers a + b1·e1 + b2·e2 + b12·e1e2 with e1² = e2² = 0.
//
// Seeding a point with direction u in e1 and v in e2 yields, after evaluating a
// twice-differentiable map, the value, the directional derivatives along u and
// v, and the exact mixed second derivative uᵀ∇²f v in the e1e2 slot.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <ostream>

namespace equichk {

struct HyperDual {
  double v = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
  double d12 = 0.0;

  constexpr HyperDual() = default;
  constexpr HyperDual(double value) : v(value) {}  // NOLINT: implicit lift of constants
  constexpr HyperDual(double value, double e1, double e2, double e12) : v(value), d1(e1), d2(e2), d12(e12) {}

  constexpr HyperDual& operator+=(const HyperDual& o) {
    v += o.v;
    d1 += o.d1;
    d2 += o.d2;
    d12 += o.d12;
    return *this;
  }
  constexpr HyperDual& operator-=(const HyperDual& o) {
    v -= o.v;
    d1 -= o.d1;
    d2 -= o.d2;
    d12 -= o.d12;
    return *this;
  }
  constexpr HyperDual& operator*=(const HyperDual& o) {
    *this = HyperDual(v * o.v, v * o.d1 + d1 * o.v, v * o.d2 + d2 * o.v,
                      v * o.d12 + d1 * o.d2 + d2 * o.d1 + d12 * o.v);
    return *this;
  }
  constexpr HyperDual& operator/=(const HyperDual& o);
};

/// Applies a scalar function given its value and first two derivatives at x.v.
constexpr HyperDual lift(const HyperDual& x, double f, double df, double ddf) {
  return {f, df * x.d1, df * x.d2, df * x.d12 + ddf * x.d1 * x.d2};
}

constexpr HyperDual operator+(HyperDual a, const HyperDual& b) { return a += b; }
constexpr HyperDual operator-(HyperDual a, const HyperDual& b) { return a -= b; }
constexpr HyperDual operator*(HyperDual a, const HyperDual& b) { return a *= b; }
constexpr HyperDual operator-(const HyperDual& a) { return {-a.v, -a.d1, -a.d2, -a.d12}; }
constexpr HyperDual operator+(const HyperDual& a) { return a; }

constexpr HyperDual reciprocal(const HyperDual& x) {
  const double inv = 1.0 / x.v;
  return lift(x, inv, -inv * inv, 2.0 * inv * inv * inv);
}

constexpr HyperDual& HyperDual::operator/=(const HyperDual& o) { return *this *= reciprocal(o); }
constexpr HyperDual operator/(HyperDual a, const HyperDual& b) { return a /= b; }

// Comparisons look at the real part only.
constexpr bool operator<(const HyperDual& a, const HyperDual& b) { return a.v < b.v; }
constexpr bool operator>(const HyperDual& a, const HyperDual& b) { return a.v > b.v; }
constexpr bool operator<=(const HyperDual& a, const HyperDual& b) { return a.v <= b.v; }
constexpr bool operator>=(const HyperDual& a, const HyperDual& b) { return a.v >= b.v; }
constexpr bool operator==(const HyperDual& a, const HyperDual& b) {
  return a.v == b.v && a.d1 == b.d1 && a.d2 == b.d2 && a.d12 == b.d12;
}
constexpr bool operator!=(const HyperDual& a, const HyperDual& b) { return !(a == b); }

inline HyperDual exp(const HyperDual& x) {
  const double e = std::exp(x.v);
  return lift(x, e, e, e);
}
inline HyperDual log(const HyperDual& x) {
  const double inv = 1.0 / x.v;
  return lift(x, std::log(x.v), inv, -inv * inv);
}
inline HyperDual log1p(const HyperDual& x) {
  const double inv = 1.0 / (1.0 + x.v);
  return lift(x, std::log1p(x.v), inv, -inv * inv);
}
inline HyperDual sqrt(const HyperDual& x) {
  const double s = std::sqrt(x.v);
  return lift(x, s, 0.5 / s, -0.25 / (s * x.v));
}
inline HyperDual tanh(const HyperDual& x) {
  const double t = std::tanh(x.v);
  const double dt = 1.0 - t * t;
  return lift(x, t, dt, -2.0 * t * dt);
}
inline HyperDual sin(const HyperDual& x) {
  return lift(x, std::sin(x.v), std::cos(x.v), -std::sin(x.v));
}
inline HyperDual cos(const HyperDual& x) {
  return lift(x, std::cos(x.v), -std::sin(x.v), -std::cos(x.v));
}
inline HyperDual abs(const HyperDual& x) { return x.v < 0 ? -x : x; }
inline bool isfinite(const HyperDual& x) {
  return std::isfinite(x.v) && std::isfinite(x.d1) && std::isfinite(x.d2) && std::isfinite(x.d12);
}

inline std::ostream& operator<<(std::ostream& os, const HyperDual& x) {
  return os << "(" << x.v << ", " << x.d1 << ", " << x.d2 << ", " << x.d12 << ")";
}

// Scalar-generic helpers used by model code templated on double / HyperDual.

inline double value_of(double x) { return x; }
inline double value_of(const HyperDual& x) { return x.v; }

/// max(0, x); the derivative at the kink is taken to be 0 and the second
/// derivative vanishes everywhere.
template <typename Scalar>
Scalar relu(const Scalar& x) {
  return value_of(x) > 0.0 ? x : Scalar(0.0);
}

}  // namespace equichk

namespace Eigen {

template <>
struct NumTraits<equichk::HyperDual> : GenericNumTraits<equichk::HyperDual> {
  using Real = equichk::HyperDual;
  using NonInteger = equichk::HyperDual;
  using Literal = equichk::HyperDual;
  using Nested = equichk::HyperDual;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 4,
    AddCost = 4,
    MulCost = 12,
  };
  static inline Real epsilon() { return Real(std::numeric_limits<double>::epsilon()); }
  static inline Real dummy_precision() { return Real(1e-12); }
  static inline Real highest() { return Real(std::numeric_limits<double>::max()); }
  static inline Real lowest() { return Real(std::numeric_limits<double>::lowest()); }
  static inline int digits10() { return std::numeric_limits<double>::digits10; }
};

template <typename BinaryOp>
struct ScalarBinaryOpTraits<equichk::HyperDual, double, BinaryOp> {
  using ReturnType = equichk::HyperDual;
};
template <typename BinaryOp>
struct ScalarBinaryOpTraits<double, equichk::HyperDual, BinaryOp> {
  using ReturnType = equichk::HyperDual;
};

}  // namespace Eigen
