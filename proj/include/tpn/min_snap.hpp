#pragma once

// Minimum-snap piecewise polynomials through time-stamped planar waypoints.
//
// Each segment is a degree-7 polynomial in local time. Per axis the fit
// minimizes the integrated squared fourth derivative subject to waypoint
// interpolation, continuity of derivatives 1..4 at interior knots and rest
// (zero velocity, acceleration, jerk) at both ends. The equality-constrained
// QP is solved through its KKT system.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "tpn/errors.hpp"
#include "tpn/geom3d.hpp"

namespace tpn {

inline constexpr int kPolyCoeffs = 8;
inline constexpr int kContinuityOrder = 4;

using Coeffs = std::array<double, kPolyCoeffs>;

struct Waypoint {
  Vec3 p = Vec3::Zero();
  double t = 0.0;
};

using WaypointSeq = std::vector<Waypoint>;

namespace detail {

/// d^order/dtau^order of tau^power evaluated at tau.
inline double monomial_derivative(int power, int order, double tau) {
  if (order > power) return 0.0;
  double factor = 1.0;
  for (int k = 0; k < order; ++k) factor *= static_cast<double>(power - k);
  return factor * std::pow(tau, power - order);
}

inline double falling_factorial(int n, int k) {
  double out = 1.0;
  for (int i = 0; i < k; ++i) out *= static_cast<double>(n - i);
  return out;
}

/// Snap Gram matrix of one segment of duration T.
inline Eigen::Matrix<double, kPolyCoeffs, kPolyCoeffs> snap_gram(double duration) {
  Eigen::Matrix<double, kPolyCoeffs, kPolyCoeffs> q = Eigen::Matrix<double, kPolyCoeffs, kPolyCoeffs>::Zero();
  for (int i = 4; i < kPolyCoeffs; ++i) {
    for (int j = 4; j < kPolyCoeffs; ++j) {
      const int e = i + j - 7;
      q(i, j) = falling_factorial(i, 4) * falling_factorial(j, 4) * std::pow(duration, e) / e;
    }
  }
  return q;
}

}  // namespace detail

/// Planar piecewise polynomial; z is identically zero.
class PiecewisePolynomial {
 public:
  PiecewisePolynomial() = default;
  PiecewisePolynomial(std::vector<double> knots, std::vector<Coeffs> x, std::vector<Coeffs> y)
      : knots_(std::move(knots)), x_(std::move(x)), y_(std::move(y)) {}

  const std::vector<double>& knots() const { return knots_; }
  const std::vector<Coeffs>& x() const { return x_; }
  const std::vector<Coeffs>& y() const { return y_; }
  std::size_t segments() const { return x_.size(); }
  double start() const { return knots_.front(); }
  double end() const { return knots_.back(); }

  /// Segment containing t; times outside the span extrapolate the end segments.
  std::size_t segment_at(double t) const {
    std::size_t s = 0;
    while (s + 1 < segments() && t >= knots_[s + 1]) ++s;
    return s;
  }

  /// Derivative of the given order at t.
  Vec3 eval(double t, int order = 0) const { return eval_segment(segment_at(t), t - knots_[segment_at(t)], order); }

  Vec3 eval_segment(std::size_t s, double tau, int order) const {
    Vec3 out = Vec3::Zero();
    for (int i = 0; i < kPolyCoeffs; ++i) {
      const double m = detail::monomial_derivative(i, order, tau);
      out.x() += x_[s][i] * m;
      out.y() += y_[s][i] * m;
    }
    return out;
  }

  /// Sum over axes of the integrated squared fourth derivative.
  double snap_cost() const {
    double total = 0.0;
    for (std::size_t s = 0; s < segments(); ++s) {
      const auto q = detail::snap_gram(knots_[s + 1] - knots_[s]);
      Eigen::Map<const Eigen::Matrix<double, kPolyCoeffs, 1>> cx(x_[s].data());
      Eigen::Map<const Eigen::Matrix<double, kPolyCoeffs, 1>> cy(y_[s].data());
      total += cx.dot(q * cx) + cy.dot(q * cy);
    }
    return total;
  }

  /// Largest jump of derivatives 0..4 across interior knots.
  double continuity_residual() const {
    double worst = 0.0;
    for (std::size_t s = 0; s + 1 < segments(); ++s) {
      const double duration = knots_[s + 1] - knots_[s];
      for (int r = 0; r <= kContinuityOrder; ++r) {
        const Vec3 left = eval_segment(s, duration, r);
        const Vec3 right = eval_segment(s + 1, 0.0, r);
        worst = std::max(worst, (left - right).cwiseAbs().maxCoeff());
      }
    }
    return worst;
  }

  friend bool operator==(const PiecewisePolynomial&, const PiecewisePolynomial&) = default;

 private:
  std::vector<double> knots_;
  std::vector<Coeffs> x_, y_;
};

/// Equality-constrained QP system for a knot vector; shared across axes.
struct MinSnapSystem {
  Eigen::MatrixXd kkt;
  int unknowns = 0;
  int constraints = 0;
};

inline MinSnapSystem min_snap_system(const std::vector<double>& knots) {
  const int n_seg = static_cast<int>(knots.size()) - 1;
  MinSnapSystem sys;
  sys.unknowns = kPolyCoeffs * n_seg;
  sys.constraints = 2 * n_seg + kContinuityOrder * (n_seg - 1) + 6;
  const int n = sys.unknowns;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(sys.constraints, n);
  int row = 0;
  for (int s = 0; s < n_seg; ++s) {
    const double duration = knots[s + 1] - knots[s];
    a(row++, kPolyCoeffs * s) = 1.0;
    for (int i = 0; i < kPolyCoeffs; ++i) a(row, kPolyCoeffs * s + i) = std::pow(duration, i);
    ++row;
  }
  for (int s = 0; s + 1 < n_seg; ++s) {
    const double duration = knots[s + 1] - knots[s];
    for (int r = 1; r <= kContinuityOrder; ++r) {
      for (int i = 0; i < kPolyCoeffs; ++i) {
        a(row, kPolyCoeffs * s + i) = detail::monomial_derivative(i, r, duration);
        a(row, kPolyCoeffs * (s + 1) + i) = -detail::monomial_derivative(i, r, 0.0);
      }
      ++row;
    }
  }
  const double last = knots[n_seg] - knots[n_seg - 1];
  for (int r = 1; r <= 3; ++r) {
    for (int i = 0; i < kPolyCoeffs; ++i) {
      a(row, i) = detail::monomial_derivative(i, r, 0.0);
      a(row + 1, kPolyCoeffs * (n_seg - 1) + i) = detail::monomial_derivative(i, r, last);
    }
    row += 2;
  }

  sys.kkt = Eigen::MatrixXd::Zero(n + sys.constraints, n + sys.constraints);
  for (int s = 0; s < n_seg; ++s) {
    sys.kkt.block<kPolyCoeffs, kPolyCoeffs>(kPolyCoeffs * s, kPolyCoeffs * s) =
        2.0 * detail::snap_gram(knots[s + 1] - knots[s]);
  }
  sys.kkt.block(0, n, n, sys.constraints) = a.transpose();
  sys.kkt.block(n, 0, sys.constraints, n) = a;
  return sys;
}

/// Right-hand side of the constraint rows for one axis.
inline Eigen::VectorXd min_snap_rhs(const MinSnapSystem& sys, const std::vector<double>& values) {
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(sys.unknowns + sys.constraints);
  const int n_seg = static_cast<int>(values.size()) - 1;
  for (int s = 0; s < n_seg; ++s) {
    rhs(sys.unknowns + 2 * s) = values[s];
    rhs(sys.unknowns + 2 * s + 1) = values[s + 1];
  }
  return rhs;
}

inline PiecewisePolynomial min_snap_fit(const WaypointSeq& wps) {
  if (wps.size() < 2) throw Error(ErrorCode::InvalidArgument, "min_snap_fit() needs at least two waypoints");
  std::vector<double> knots;
  knots.reserve(wps.size());
  for (const Waypoint& w : wps) knots.push_back(w.t);
  for (std::size_t i = 0; i + 1 < knots.size(); ++i) {
    if (!(knots[i + 1] - knots[i] > 1e-9)) throw Error(ErrorCode::SingularKKT, "knot times must strictly increase");
  }
  const MinSnapSystem sys = min_snap_system(knots);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(sys.kkt);
  if (lu.rank() < sys.kkt.rows()) throw Error(ErrorCode::SingularKKT, "KKT matrix is rank deficient");

  const int n_seg = static_cast<int>(wps.size()) - 1;
  std::vector<Coeffs> axes[2];
  for (int axis = 0; axis < 2; ++axis) {
    std::vector<double> values;
    for (const Waypoint& w : wps) values.push_back(w.p(axis));
    const Eigen::VectorXd sol = lu.solve(min_snap_rhs(sys, values));
    axes[axis].resize(n_seg);
    for (int s = 0; s < n_seg; ++s)
      for (int i = 0; i < kPolyCoeffs; ++i) axes[axis][s][i] = sol(kPolyCoeffs * s + i);
  }
  return PiecewisePolynomial(std::move(knots), std::move(axes[0]), std::move(axes[1]));
}

/// Largest |P(t_d) - p_d| over the waypoints.
inline double interpolation_residual(const PiecewisePolynomial& poly, const WaypointSeq& wps) {
  double worst = 0.0;
  for (std::size_t d = 0; d < wps.size(); ++d) {
    const std::size_t s = std::min(d, poly.segments() - 1);
    const double tau = wps[d].t - poly.knots()[s];
    const Vec3 at = poly.eval_segment(s, tau, 0);
    worst = std::max(worst, (at - Vec3(wps[d].p.x(), wps[d].p.y(), 0.0)).norm());
  }
  return worst;
}

}  // namespace tpn
