#pragma once

// Geometric tracking controller on SE(3) with per-axis gains.
//
// The commanded attitude is rebuilt every step from the desired force so that
// horizontal position errors feed back through tilt; with zero tracking error
// it coincides with the reference attitude. The reference body rate and its
// derivative are used as feedforward.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <span>
#include <vector>

#include "tpn/geom3d.hpp"
#include "tpn/quad_sim.hpp"

namespace tpn {

inline constexpr int kParamDim = 12;
inline constexpr double kMinGain = 0.01;

using ParamVec = Eigen::Matrix<double, kParamDim, 1>;

struct ControlParams {
  Vec3 k_p = Vec3::Constant(16.0);
  Vec3 k_v = Vec3::Constant(5.6);
  Vec3 k_R = Vec3::Constant(8.81);
  Vec3 k_Omega = Vec3::Constant(2.54);

  ParamVec to_vector() const {
    ParamVec out;
    out << k_p, k_v, k_R, k_Omega;
    return out;
  }

  static ControlParams from_vector(const ParamVec& v) {
    ControlParams out;
    out.k_p = v.segment<3>(0);
    out.k_v = v.segment<3>(3);
    out.k_R = v.segment<3>(6);
    out.k_Omega = v.segment<3>(9);
    return out;
  }

  bool feasible() const { return to_vector().minCoeff() >= kMinGain; }

  friend bool operator==(const ControlParams& a, const ControlParams& b) {
    return a.to_vector() == b.to_vector();
  }
};

inline constexpr std::array<const char*, kParamDim> kParamNames = {
    "k_p.x", "k_p.y", "k_p.z", "k_v.x", "k_v.y", "k_v.z",
    "k_R.x", "k_R.y", "k_R.z", "k_Omega.x", "k_Omega.y", "k_Omega.z"};

/// Initial gains used before any tuning.
inline ControlParams default_params() { return ControlParams{}; }

/// Elementwise projection onto {theta >= kMinGain}.
inline ParamVec project_feasible(const ParamVec& theta) { return theta.cwiseMax(kMinGain); }

struct ReferencePoint {
  double t = 0.0;
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 a = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Vec3 Omega = Vec3::Zero();
  Vec3 dOmega = Vec3::Zero();
};

/// One tracking task: M uniformly spaced reference samples.
using Task = std::vector<ReferencePoint>;

/// Rotation [b1, b3 x b1, b3] whose third axis is b3 and whose first axis is
/// `heading` projected orthogonally to b3.
inline Mat3 attitude_from_axis(const Vec3& b3, const Vec3& heading) {
  Vec3 u = heading - heading.dot(b3) * b3;
  if (u.norm() < 1e-9) u = Vec3::UnitY() - Vec3::UnitY().dot(b3) * b3;
  const Vec3 b1 = u.normalized();
  Mat3 r;
  r.col(0) = b1;
  r.col(1) = b3.cross(b1);
  r.col(2) = b3;
  return r;
}

namespace detail {

struct ControlTerms {
  Vec3 e_p, e_v, force, e_R, e_Omega;
  Mat3 R_c;   // commanded attitude
  Mat3 A;     // R_c^T R
  Vec3 heading;
  double force_norm;
};

inline Vec3 asym_vee(const Mat3& a) {
  return {a(2, 1) - a(1, 2), a(0, 2) - a(2, 0), a(1, 0) - a(0, 1)};
}

inline ControlTerms control_terms(const QuadModel& model, const QuadState& x, const ReferencePoint& ref,
                                  const ControlParams& theta) {
  ControlTerms t;
  const Vec3 e3 = Vec3::UnitZ();
  t.e_p = x.p - ref.p;
  t.e_v = x.v - ref.v;
  t.force = -theta.k_p.cwiseProduct(t.e_p) - theta.k_v.cwiseProduct(t.e_v) -
            model.mass * model.gravity * e3 + model.mass * ref.a;
  t.force_norm = t.force.norm();
  t.heading = ref.R.col(0);
  const Vec3 b3 = t.force_norm > 1e-9 ? Vec3(-t.force / t.force_norm) : Vec3(x.R.col(2));
  t.R_c = attitude_from_axis(b3, t.heading);
  t.A = t.R_c.transpose() * x.R;
  t.e_R = 0.5 * asym_vee(t.A);
  t.e_Omega = x.Omega - t.A.transpose() * ref.Omega;
  return t;
}

}  // namespace detail

/// (f, M) from state, reference sample and gains.
inline ControlInput control(const QuadModel& model, const QuadState& x, const ReferencePoint& ref,
                            const ControlParams& theta) {
  const detail::ControlTerms t = detail::control_terms(model, x, ref, theta);
  const Mat3& J = model.inertia;
  ControlInput u;
  u.f = -t.force.dot(x.R.col(2));
  const Vec3 w_ref = t.A.transpose() * ref.Omega;
  const Vec3 dw_ref = t.A.transpose() * ref.dOmega;
  u.M = -theta.k_R.cwiseProduct(t.e_R) - theta.k_Omega.cwiseProduct(t.e_Omega) +
        x.Omega.cross(J * x.Omega) - J * (x.Omega.cross(w_ref) - dw_ref);
  return u;
}

using ControlStateJacobian = Eigen::Matrix<double, kInputDim, kStateDim>;
using ControlParamJacobian = Eigen::Matrix<double, kInputDim, kParamDim>;

struct ControlJacobians {
  ControlStateJacobian dx;
  ControlParamJacobian dtheta;
};

/// Closed-form Jacobians of control() with respect to the flat state and the
/// 12 gains.
inline ControlJacobians control_jacobians(const QuadModel& model, const QuadState& x, const ReferencePoint& ref,
                                          const ControlParams& theta) {
  const detail::ControlTerms t = detail::control_terms(model, x, ref, theta);
  const Mat3& J = model.inertia;
  const Vec3 w_ref = t.A.transpose() * ref.Omega;
  ControlJacobians jac;
  jac.dx.setZero();
  jac.dtheta.setZero();

  // Moment response to a perturbation dA of R_c^T R.
  auto moment_from_dA = [&](const Mat3& dA) -> Vec3 {
    const Vec3 de_R = 0.5 * detail::asym_vee(dA);
    const Vec3 dw = dA.transpose() * ref.Omega;
    const Vec3 ddw = dA.transpose() * ref.dOmega;
    return -theta.k_R.cwiseProduct(de_R) + theta.k_Omega.cwiseProduct(dw) - J * (x.Omega.cross(dw) - ddw);
  };

  // Sensitivity of R_c to the desired force, one column of F at a time.
  Eigen::Matrix<double, 1, 3> df_dF = -x.R.col(2).transpose();
  Eigen::Matrix<double, 3, 3> dM_dF = Eigen::Matrix3d::Zero();
  if (t.force_norm > 1e-9) {
    const Vec3 b3 = t.R_c.col(2);
    const Vec3 b1 = t.R_c.col(0);
    const Vec3 u = t.heading - t.heading.dot(b3) * b3;
    const double u_norm = u.norm();
    const Mat3 db3_dF = -(Mat3::Identity() - b3 * b3.transpose()) / t.force_norm;
    for (int l = 0; l < 3; ++l) {
      const Vec3 db3 = db3_dF.col(l);
      const Vec3 du = -t.heading.dot(db3) * b3 - t.heading.dot(b3) * db3;
      const Vec3 db1 = (Mat3::Identity() - b1 * b1.transpose()) * du / u_norm;
      const Vec3 db2 = db3.cross(b1) + b3.cross(db1);
      Mat3 dRc;
      dRc.col(0) = db1;
      dRc.col(1) = db2;
      dRc.col(2) = db3;
      dM_dF.col(l) = moment_from_dA(dRc.transpose() * x.R);
    }
  }

  // Through the desired force: p, v, k_p, k_v.
  const Mat3 dF_dp = -theta.k_p.asDiagonal().toDenseMatrix();
  const Mat3 dF_dv = -theta.k_v.asDiagonal().toDenseMatrix();
  jac.dx.block<1, 3>(0, kIdxP) = df_dF * dF_dp;
  jac.dx.block<1, 3>(0, kIdxV) = df_dF * dF_dv;
  jac.dx.block<3, 3>(1, kIdxP) = dM_dF * dF_dp;
  jac.dx.block<3, 3>(1, kIdxV) = dM_dF * dF_dv;
  const Mat3 dF_dkp = -t.e_p.asDiagonal().toDenseMatrix();
  const Mat3 dF_dkv = -t.e_v.asDiagonal().toDenseMatrix();
  jac.dtheta.block<1, 3>(0, 0) = df_dF * dF_dkp;
  jac.dtheta.block<1, 3>(0, 3) = df_dF * dF_dkv;
  jac.dtheta.block<3, 3>(1, 0) = dM_dF * dF_dkp;
  jac.dtheta.block<3, 3>(1, 3) = dM_dF * dF_dkv;

  // Attitude: f through R e3, M through A = R_c^T R.
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (j == 2) jac.dx(0, rot_index(i, 2)) = -t.force(i);
      Mat3 dR = Mat3::Zero();
      dR(i, j) = 1.0;
      jac.dx.block<3, 1>(1, rot_index(i, j)) = moment_from_dA(t.R_c.transpose() * dR);
    }
  }

  // Body rate.
  const Mat3 d_gyro = hat(x.Omega) * J - hat(J * x.Omega);
  jac.dx.block<3, 3>(1, kIdxW) =
      -theta.k_Omega.asDiagonal().toDenseMatrix() + d_gyro + J * hat(w_ref);

  // Attitude gains.
  jac.dtheta.block<3, 3>(1, 6) = -t.e_R.asDiagonal().toDenseMatrix();
  jac.dtheta.block<3, 3>(1, 9) = -t.e_Omega.asDiagonal().toDenseMatrix();
  return jac;
}

/// Closed-loop rollout of the geometric controller with fixed gains.
inline Trajectory rollout(const QuadModel& model, const ControlParams& theta, const QuadState& x0,
                          std::span<const ReferencePoint> task) {
  return rollout(
      model,
      [&](const QuadState& x, const ReferencePoint& ref, std::size_t) { return control(model, x, ref, theta); },
      x0, task);
}

/// Rollout with a gain schedule: step k uses schedule[k / piece_length].
inline Trajectory rollout_scheduled(const QuadModel& model, std::span<const ControlParams> schedule,
                                    std::size_t piece_length, const QuadState& x0,
                                    std::span<const ReferencePoint> task) {
  return rollout(
      model,
      [&](const QuadState& x, const ReferencePoint& ref, std::size_t k) {
        const std::size_t idx = std::min(k / piece_length, schedule.size() - 1);
        return control(model, x, ref, schedule[idx]);
      },
      x0, task);
}

/// State that sits exactly on the reference sample.
inline QuadState state_on_reference(const ReferencePoint& ref) {
  QuadState x;
  x.p = ref.p;
  x.v = ref.v;
  x.R = ref.R;
  x.Omega = ref.Omega;
  return x;
}

}  // namespace tpn
