#pragma once

// Independent reference implementations used as test oracles.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>

#include "tpn/geo_ctrl.hpp"
#include "tpn/quad_sim.hpp"
#include "tpn/traj_bank.hpp"

namespace tpn::testing {

inline Mat3 random_rotation(std::mt19937_64& rng, double max_angle = 3.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vec3 axis(u(rng), u(rng), u(rng));
  axis.normalize();
  const double angle = max_angle * 0.5 * (u(rng) + 1.0);
  return Eigen::AngleAxisd(angle, axis).toRotationMatrix();
}

inline Vec3 random_vec(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  return {u(rng), u(rng), u(rng)};
}

/// Continuous-time rigid body with the input held constant, integrated by
/// classical RK4 on (p, v, R, Omega) with R treated as a plain matrix.
inline QuadState rk4_oracle(const QuadModel& m, const QuadState& x0, const ControlInput& u, double duration,
                            int substeps) {
  struct D {
    Vec3 p, v;
    Mat3 R;
    Vec3 w;
  };
  auto deriv = [&](const D& s) {
    D d;
    d.p = s.v;
    d.v = m.gravity * Vec3::UnitZ() - (u.f / m.mass) * (s.R * Vec3::UnitZ());
    Mat3 w_hat;
    w_hat << 0, -s.w.z(), s.w.y(), s.w.z(), 0, -s.w.x(), -s.w.y(), s.w.x(), 0;
    d.R = s.R * w_hat;
    d.w = m.inertia.inverse() * (u.M - s.w.cross(m.inertia * s.w));
    return d;
  };
  auto axpy = [](const D& s, const D& d, double h) { return D{s.p + h * d.p, s.v + h * d.v, s.R + h * d.R, s.w + h * d.w}; };
  D s{x0.p, x0.v, x0.R, x0.Omega};
  const double h = duration / substeps;
  for (int i = 0; i < substeps; ++i) {
    const D k1 = deriv(s);
    const D k2 = deriv(axpy(s, k1, h / 2));
    const D k3 = deriv(axpy(s, k2, h / 2));
    const D k4 = deriv(axpy(s, k3, h));
    s.p += h / 6 * (k1.p + 2 * k2.p + 2 * k3.p + k4.p);
    s.v += h / 6 * (k1.v + 2 * k2.v + 2 * k3.v + k4.v);
    s.R += h / 6 * (k1.R + 2 * k2.R + 2 * k3.R + k4.R);
    s.w += h / 6 * (k1.w + 2 * k2.w + 2 * k3.w + k4.w);
  }
  QuadState out;
  out.p = s.p;
  out.v = s.v;
  out.R = s.R;
  out.Omega = s.w;
  return out;
}

/// The discrete step written out without the re-orthonormalization guard, so
/// it can be differenced in every flat coordinate.
inline StateVec raw_step(const QuadModel& m, const StateVec& xs, const Eigen::Vector4d& us) {
  const QuadState x = unpack(xs);
  const double h = m.dt;
  QuadState n;
  n.v = x.v + h * (m.gravity * Vec3::UnitZ() - (us(0) / m.mass) * (x.R * Vec3::UnitZ()));
  n.p = x.p + h * n.v;
  const Vec3 w = h * x.Omega;
  const double th = w.norm();
  Mat3 K;
  K << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  const Mat3 E = th < 1e-8 ? Mat3(Mat3::Identity() + K + 0.5 * K * K)
                           : Mat3(Mat3::Identity() + std::sin(th) / th * K + (1 - std::cos(th)) / (th * th) * K * K);
  n.R = x.R * E;
  n.Omega = x.Omega + h * m.inertia.inverse() * (us.tail<3>() - x.Omega.cross(m.inertia * x.Omega));
  return pack(n);
}

/// Central-difference Jacobian of a vector map.
template <int Rows, int Cols>
Eigen::Matrix<double, Rows, Cols> fd_jacobian(
    const std::function<Eigen::Matrix<double, Rows, 1>(const Eigen::Matrix<double, Cols, 1>&)>& f,
    const Eigen::Matrix<double, Cols, 1>& x, double eps) {
  Eigen::Matrix<double, Rows, Cols> out;
  for (int c = 0; c < Cols; ++c) {
    Eigen::Matrix<double, Cols, 1> a = x, b = x;
    a(c) += eps;
    b(c) -= eps;
    out.col(c) = (f(a) - f(b)) / (2 * eps);
  }
  return out;
}

inline bool close_rel_abs(double a, double b, double rel, double abs) {
  return std::abs(a - b) <= std::max(abs, rel * std::max(std::abs(a), std::abs(b)));
}

inline ControlParams perturbed_params(std::mt19937_64& rng, double spread = 0.5) {
  std::uniform_real_distribution<double> u(1.0 - spread, 1.0 + spread);
  ParamVec v = default_params().to_vector();
  for (int i = 0; i < kParamDim; ++i) v(i) *= u(rng);
  return ControlParams::from_vector(v);
}

/// A small bank shared by tests that need realistic tasks.
inline const Bank& small_bank() {
  static const Bank bank = [] {
    BankConfig c;
    c.parents = 2;
    c.children = 3;
    return build_bank(c, 11);
  }();
  return bank;
}

}  // namespace tpn::testing
