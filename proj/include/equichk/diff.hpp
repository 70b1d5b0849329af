#pragma once

// First and second derivatives of vector-valued maps R^d -> R^c.
//
// A "map" is any callable accepting `const VectorX<S>&` and returning
// `VectorX<S>` for both S = double and S = HyperDual (a generic lambda works).
// Exact mode evaluates hyper-dual directional sweeps over coordinate pairs;
// finite-difference mode routes every request through `fd_oracle`.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>

#include "equichk/hyperdual.hpp"
#include "equichk/tensor.hpp"

namespace equichk {

enum class DiffMode { exact, finite_difference };

struct DiffConfig {
  /// Central-difference step multiplier; must be positive.
  double fd_step_scale = 1.0;
  DiffMode mode = DiffMode::exact;
};

namespace detail {

inline void require_finite_point(const Eigen::VectorXd& point) {
  if (!point.allFinite()) throw Error(ErrorCode::NonFiniteEntry, "evaluation point must be finite");
}

inline void require_valid(const DiffConfig& cfg) {
  if (!(cfg.fd_step_scale > 0.0)) throw Error(ErrorCode::InvalidParams, "fd_step_scale must be > 0");
}

template <typename Map>
VectorX<HyperDual> eval_seeded(const Map& map, const Eigen::VectorXd& point, Index i, Index j) {
  VectorX<HyperDual> x(point.size());
  for (Index k = 0; k < point.size(); ++k) x[k] = HyperDual(point[k]);
  if (i >= 0) x[i].d1 = 1.0;
  if (j >= 0) x[j].d2 = 1.0;
  VectorX<HyperDual> y = map(x);
  for (Index k = 0; k < y.size(); ++k) {
    if (!isfinite(y[k])) throw Error(ErrorCode::NonFiniteResult, "map produced a non-finite value");
  }
  return y;
}

template <typename Map>
Eigen::VectorXd eval_plain(const Map& map, const Eigen::VectorXd& point) {
  Eigen::VectorXd y = map(point);
  if (!y.allFinite()) throw Error(ErrorCode::NonFiniteResult, "map produced a non-finite value");
  return y;
}

}  // namespace detail

/// Step used for coordinate `x` at derivative `order` (1 or 2):
/// scale·max(1,|x|)·eps^(1/3) for first order, eps^(1/4) for second order.
inline double fd_step(double x, int order, double scale) {
  const double eps = std::numeric_limits<double>::epsilon();
  const double base = order == 1 ? std::cbrt(eps) : std::sqrt(std::sqrt(eps));
  const double h = scale * std::max(1.0, std::abs(x)) * base;
  volatile double xp = x + h;  // keep the step exactly representable
  return xp - x;
}

template <typename Map>
Eigen::VectorXd evaluate(const Map& map, const Eigen::VectorXd& point) {
  detail::require_finite_point(point);
  return detail::eval_plain(map, point);
}

/// Central finite differences: order 1 returns (d, c), order 2 returns (d, d, c).
template <typename Map>
Tensord fd_oracle(const Map& map, const Eigen::VectorXd& point, int order, const DiffConfig& cfg = {}) {
  detail::require_valid(cfg);
  detail::require_finite_point(point);
  if (order != 1 && order != 2) {
    throw Error(ErrorCode::IndexOutOfRange, "fd_oracle supports order 1 or 2, got " + std::to_string(order));
  }
  const Index d = point.size();
  const Eigen::VectorXd y0 = detail::eval_plain(map, point);
  const Index c = y0.size();

  if (order == 1) {
    Tensord out = Tensord::zeros(Shape{d, c});
    Eigen::VectorXd x = point;
    for (Index i = 0; i < d; ++i) {
      const double h = fd_step(point[i], 1, cfg.fd_step_scale);
      x[i] = point[i] + h;
      const Eigen::VectorXd yp = detail::eval_plain(map, x);
      x[i] = point[i] - h;
      const Eigen::VectorXd ym = detail::eval_plain(map, x);
      x[i] = point[i];
      out.data().segment(i * c, c) = (yp - ym) / (2.0 * h);
    }
    return out;
  }

  Tensord out = Tensord::zeros(Shape{d, d, c});
  Eigen::VectorXd x = point;
  for (Index i = 0; i < d; ++i) {
    const double hi = fd_step(point[i], 2, cfg.fd_step_scale);
    for (Index j = i; j < d; ++j) {
      const double hj = fd_step(point[j], 2, cfg.fd_step_scale);
      auto at = [&](double si, double sj) {
        x = point;
        x[i] += si * hi;
        x[j] += sj * hj;
        return detail::eval_plain(map, x);
      };
      const Eigen::VectorXd v = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * hi * hj);
      out.data().segment((i * d + j) * c, c) = v;
      out.data().segment((j * d + i) * c, c) = v;
    }
  }
  return out;
}

/// (d, c) tensor with entry [i, j] = d(output j) / d(parameter i).
template <typename Map>
Tensord jacobian(const Map& map, const Eigen::VectorXd& point, const DiffConfig& cfg = {}) {
  detail::require_valid(cfg);
  detail::require_finite_point(point);
  if (cfg.mode == DiffMode::finite_difference) return fd_oracle(map, point, 1, cfg);
  const Index d = point.size();
  Tensord out;
  for (Index i = 0; i < d; ++i) {
    const VectorX<HyperDual> y = detail::eval_seeded(map, point, i, -1);
    if (i == 0) out = Tensord::zeros(Shape{d, y.size()});
    for (Index k = 0; k < y.size(); ++k) out.data()[i * y.size() + k] = y[k].d1;
  }
  return out;
}

/// (d, d, c) tensor with entry [i, j, k] = d²(output k) / dθi dθj.
template <typename Map>
Tensord second_derivative(const Map& map, const Eigen::VectorXd& point, const DiffConfig& cfg = {}) {
  detail::require_valid(cfg);
  detail::require_finite_point(point);
  if (cfg.mode == DiffMode::finite_difference) return fd_oracle(map, point, 2, cfg);
  const Index d = point.size();
  Tensord out;
  for (Index i = 0; i < d; ++i) {
    for (Index j = i; j < d; ++j) {
      const VectorX<HyperDual> y = detail::eval_seeded(map, point, i, j);
      const Index c = y.size();
      if (i == 0 && j == 0) out = Tensord::zeros(Shape{d, d, c});
      for (Index k = 0; k < c; ++k) {
        out.data()[(i * d + j) * c + k] = y[k].d12;
        out.data()[(j * d + i) * c + k] = y[k].d12;
      }
    }
  }
  return out;
}

/// Value and first/second directional derivatives along u (e1) and v (e2) in
/// one evaluation; the e1e2 slot of output k is uᵀ∇²f_k v.
template <typename Map>
VectorX<HyperDual> directional(const Map& map, const Eigen::VectorXd& point, const Eigen::VectorXd& u,
                               const Eigen::VectorXd& v) {
  detail::require_finite_point(point);
  VectorX<HyperDual> x(point.size());
  for (Index k = 0; k < point.size(); ++k) x[k] = HyperDual(point[k], u[k], v[k], 0.0);
  VectorX<HyperDual> y = map(x);
  for (Index k = 0; k < y.size(); ++k) {
    if (!isfinite(y[k])) throw Error(ErrorCode::NonFiniteResult, "map produced a non-finite value");
  }
  return y;
}

}  // namespace equichk
