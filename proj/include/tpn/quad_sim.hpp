#pragma once

// Discrete-time quadrotor rigid-body dynamics in NED coordinates.
//
//   p' = v,  v' = g e3 - (f / m) R e3,  R' = R hat(Omega),
//   Omega' = J^-1 (M - Omega x J Omega)
//
// discretized with a semi-implicit Euler step for translation and an
// exponential-map step for attitude so that R stays on SO(3).

#include <Eigen/Dense>
#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "tpn/errors.hpp"
#include "tpn/geom3d.hpp"

namespace tpn {

struct QuadModel {
  double mass = 4.34;
  Mat3 inertia = Eigen::Vector3d(0.082, 0.0845, 0.1377).asDiagonal();
  double gravity = 9.81;
  double dt = 0.01;

  double hover_thrust() const { return mass * gravity; }
};

inline QuadModel default_model() { return QuadModel{}; }

struct QuadState {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Vec3 Omega = Vec3::Zero();

  bool finite() const { return p.allFinite() && v.allFinite() && R.allFinite() && Omega.allFinite(); }
};

struct ControlInput {
  double f = 0.0;
  Vec3 M = Vec3::Zero();
};

// Flat coordinates used by the sensitivity code: p(3) v(3) R(9, row-major) Omega(3).
inline constexpr int kStateDim = 18;
inline constexpr int kInputDim = 4;
inline constexpr int kIdxP = 0;
inline constexpr int kIdxV = 3;
inline constexpr int kIdxR = 6;
inline constexpr int kIdxW = 15;

constexpr int rot_index(int row, int col) { return kIdxR + 3 * row + col; }

using StateVec = Eigen::Matrix<double, kStateDim, 1>;
using StateJacobian = Eigen::Matrix<double, kStateDim, kStateDim>;
using InputJacobian = Eigen::Matrix<double, kStateDim, kInputDim>;

inline StateVec pack(const QuadState& x) {
  StateVec s;
  s.segment<3>(kIdxP) = x.p;
  s.segment<3>(kIdxV) = x.v;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) s(rot_index(i, j)) = x.R(i, j);
  s.segment<3>(kIdxW) = x.Omega;
  return s;
}

inline QuadState unpack(const StateVec& s) {
  QuadState x;
  x.p = s.segment<3>(kIdxP);
  x.v = s.segment<3>(kIdxV);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) x.R(i, j) = s(rot_index(i, j));
  x.Omega = s.segment<3>(kIdxW);
  return x;
}

inline constexpr double kReorthonormalizeThreshold = 1e-9;

/// One step of length model.dt. Throws NonFiniteStateError on blow-up.
inline QuadState step_dynamics(const QuadModel& model, const QuadState& x, const ControlInput& u) {
  const Vec3 e3 = Vec3::UnitZ();
  const double h = model.dt;
  QuadState next;
  const Vec3 accel = model.gravity * e3 - (u.f / model.mass) * (x.R * e3);
  next.v = x.v + h * accel;
  next.p = x.p + h * next.v;
  next.R = x.R * so3_exp(h * x.Omega);
  if (orthonormality_error(next.R) > kReorthonormalizeThreshold) next.R = reorthonormalize(next.R);
  const Vec3 gyro = x.Omega.cross(model.inertia * x.Omega);
  next.Omega = x.Omega + h * model.inertia.inverse() * (u.M - gyro);
  if (!next.finite()) throw NonFiniteStateError(-1, "step_dynamics produced a non-finite state");
  return next;
}

/// Closed-form Jacobians of step_dynamics about (x, u) in the flat coordinates.
/// The rare re-orthonormalization projection is treated as identity.
struct StepJacobians {
  StateJacobian dx;
  InputJacobian du;
};

inline StepJacobians step_jacobians(const QuadModel& model, const QuadState& x, const ControlInput& u) {
  const double h = model.dt;
  const Mat3 j_inv = model.inertia.inverse();
  StepJacobians jac;
  jac.dx.setZero();
  jac.du.setZero();

  // v' = v + h (g e3 - f/m R e3); only the third column of R enters.
  jac.dx.block<3, 3>(kIdxV, kIdxV).setIdentity();
  for (int i = 0; i < 3; ++i) jac.dx(kIdxV + i, rot_index(i, 2)) = -h * u.f / model.mass;
  jac.du.block<3, 1>(kIdxV, 0) = -(h / model.mass) * x.R.col(2);

  // p' = p + h v'
  jac.dx.block<3, 3>(kIdxP, kIdxP).setIdentity();
  jac.dx.block<3, kStateDim>(kIdxP, 0) += h * jac.dx.block<3, kStateDim>(kIdxV, 0);
  jac.du.block<3, kInputDim>(kIdxP, 0) = h * jac.du.block<3, kInputDim>(kIdxV, 0);

  // R' = R E with E = exp(h Omega)
  const Vec3 phi = h * x.Omega;
  const Mat3 e = so3_exp(phi);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) jac.dx(rot_index(i, j), rot_index(i, k)) = e(k, j);
  const Mat3 r_next = x.R * e;
  const Mat3 jr = so3_right_jacobian(phi);
  for (int l = 0; l < 3; ++l) {
    const Mat3 d = r_next * hat(h * jr.col(l));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) jac.dx(rot_index(i, j), kIdxW + l) = d(i, j);
  }

  // Omega' = Omega + h J^-1 (M - Omega x J Omega)
  const Mat3 d_gyro = hat(x.Omega) * model.inertia - hat(model.inertia * x.Omega);
  jac.dx.block<3, 3>(kIdxW, kIdxW) = Mat3::Identity() - h * j_inv * d_gyro;
  jac.du.block<3, 3>(kIdxW, 1) = h * j_inv;
  return jac;
}

struct Trajectory {
  std::vector<QuadState> states;      // M entries, states[0] == x0
  std::vector<ControlInput> controls; // M - 1 entries
};

/// Closed loop states[k+1] = step(states[k], law(states[k], reference[k], k)).
/// A task with fewer than two samples produces an empty trajectory.
template <typename Law, typename Ref>
  requires std::invocable<Law&, const QuadState&, const Ref&, std::size_t>
Trajectory rollout(const QuadModel& model, Law&& law, const QuadState& x0, std::span<const Ref> reference) {
  Trajectory out;
  if (reference.size() < 2) return out;
  const std::size_t steps = reference.size() - 1;
  out.states.reserve(reference.size());
  out.controls.reserve(steps);
  out.states.push_back(x0);
  for (std::size_t k = 0; k < steps; ++k) {
    const ControlInput u = law(out.states.back(), reference[k], k);
    out.controls.push_back(u);
    try {
      out.states.push_back(step_dynamics(model, out.states.back(), u));
    } catch (const NonFiniteStateError&) {
      throw NonFiniteStateError(static_cast<long>(k), "closed-loop rollout diverged");
    }
  }
  return out;
}

}  // namespace tpn
