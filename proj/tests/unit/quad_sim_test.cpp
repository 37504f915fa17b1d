#include <gtest/gtest.h>

#include "support.hpp"
#include "tpn/difftune.hpp"
#include "tpn/flat_ref.hpp"
#include "tpn/geo_ctrl.hpp"
#include "tpn/quad_sim.hpp"

using namespace tpn;
using namespace tpn::testing;

TEST(QuadModel, AppendixConstants) {
  const QuadModel m = default_model();
  EXPECT_DOUBLE_EQ(m.mass, 4.34);
  EXPECT_EQ(m.inertia, Mat3(Vec3(0.082, 0.0845, 0.1377).asDiagonal()));
  EXPECT_DOUBLE_EQ(m.gravity, 9.81);
  EXPECT_DOUBLE_EQ(m.dt, 0.01);
  EXPECT_NEAR(m.hover_thrust(), 42.5754, 1e-12);
}

TEST(StepDynamics, HoverIsAnEquilibrium) {
  const QuadModel m = default_model();
  const QuadState x;
  const QuadState n = step_dynamics(m, x, {m.hover_thrust(), Vec3::Zero()});
  EXPECT_LT(n.p.norm(), 1e-12);
  EXPECT_LT(n.v.norm(), 1e-12);
  EXPECT_LT((n.R - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT(n.Omega.norm(), 1e-12);
}

TEST(StepDynamics, FreeFallGainsDownwardSpeed) {
  const QuadModel m = default_model();
  const QuadState n = step_dynamics(m, QuadState{}, {0.0, Vec3::Zero()});
  EXPECT_LT((n.v - Vec3(0, 0, 0.0981)).norm(), 1e-15);
}

TEST(StepDynamics, MatchesFineRk4OverOneStep) {
  const QuadModel m = default_model();
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> thrust(0.9, 1.1);
  for (int i = 0; i < 50; ++i) {
    QuadState x;
    x.p = random_vec(rng, 5.0);
    x.v = random_vec(rng, 3.0);
    x.R = random_rotation(rng, 0.1);
    // A first-order step is off by about |Omega| (f/m) dt^2 / 2 in velocity,
    // so the 1e-4 budget holds for rates below roughly 0.18 rad/s.
    x.Omega = random_vec(rng, 0.1);
    const ControlInput u{thrust(rng) * m.hover_thrust(), random_vec(rng, 0.05)};
    const QuadState a = step_dynamics(m, x, u);
    const QuadState b = rk4_oracle(m, x, u, m.dt, 100);
    EXPECT_LT((pack(a) - pack(b)).cwiseAbs().maxCoeff(), 1e-4) << "sample " << i;
  }
}

TEST(StepDynamics, FreeFallDistanceTracksHalfGTSquared) {
  const QuadModel m = default_model();
  QuadState x;
  const int n = 500;
  for (int k = 0; k < n; ++k) x = step_dynamics(m, x, {0.0, Vec3::Zero()});
  const double t = n * m.dt;
  const double expected = 0.5 * m.gravity * t * t;
  EXPECT_NEAR(x.p.z(), expected, 0.01 * expected);
  EXPECT_LT(x.p.head<2>().norm(), 1e-12);
}

TEST(StepDynamics, RotationStaysOrthonormalOverLongRuns) {
  const QuadModel m = default_model();
  std::mt19937_64 rng(22);
  QuadState x;
  double worst = 0.0;
  for (int k = 0; k < 100000; ++k) {
    ControlInput u{m.hover_thrust(), random_vec(rng, 0.05)};
    u.M -= 0.2 * x.Omega;  // keep rates bounded
    x = step_dynamics(m, x, u);
    x.p.setZero();
    x.v.setZero();
    worst = std::max(worst, (x.R.transpose() * x.R - Mat3::Identity()).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(StepDynamics, NonFiniteInputRaises) {
  const QuadModel m = default_model();
  try {
    step_dynamics(m, QuadState{}, {std::numeric_limits<double>::infinity(), Vec3::Zero()});
    FAIL() << "expected NonFiniteState";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteState);
  }
}

TEST(StepJacobians, MatchFiniteDifferencesOfTheStep) {
  const QuadModel m = default_model();
  std::mt19937_64 rng(23);
  for (int i = 0; i < 30; ++i) {
    QuadState x;
    x.p = random_vec(rng, 2.0);
    x.v = random_vec(rng, 2.0);
    x.R = random_rotation(rng);
    x.Omega = random_vec(rng, 2.0);
    const ControlInput u{m.hover_thrust() * 1.05, random_vec(rng, 0.3)};
    Eigen::Vector4d us;
    us << u.f, u.M;
    // The oracle step and the library step agree on SO(3) inputs.
    ASSERT_LT((raw_step(m, pack(x), us) - pack(step_dynamics(m, x, u))).cwiseAbs().maxCoeff(), 1e-12);

    const StepJacobians j = step_jacobians(m, x, u);
    const StateJacobian fdx = fd_jacobian<kStateDim, kStateDim>(
        [&](const StateVec& s) { return raw_step(m, s, us); }, pack(x), 1e-6);
    const InputJacobian fdu = fd_jacobian<kStateDim, kInputDim>(
        [&](const Eigen::Vector4d& v) { return raw_step(m, pack(x), v); }, us, 1e-5);
    EXPECT_LT((j.dx - fdx).cwiseAbs().maxCoeff(), 1e-7);
    EXPECT_LT((j.du - fdu).cwiseAbs().maxCoeff(), 1e-7);
  }
}

TEST(Rollout, HoverReferenceIsTrackedExactly) {
  const QuadModel m = default_model();
  const Task task = flatten(hover_curve(Vec3(1, -2, 0)), 0.0, 201, m.dt, m);
  const Trajectory traj = rollout(m, default_params(), state_on_reference(task.front()), task);
  ASSERT_EQ(traj.states.size(), 201u);
  ASSERT_EQ(traj.controls.size(), 200u);
  for (std::size_t k = 0; k < traj.states.size(); ++k) EXPECT_LT((traj.states[k].p - task[k].p).norm(), 1e-6);
}

TEST(Rollout, SingleSampleTaskIsEmpty) {
  const QuadModel m = default_model();
  const Task task = flatten(hover_curve(Vec3::Zero()), 0.0, 1, m.dt, m);
  const Trajectory traj = rollout(m, default_params(), QuadState{}, task);
  EXPECT_TRUE(traj.states.empty());
  EXPECT_TRUE(traj.controls.empty());
}

TEST(Rollout, CircleWithDefaultGainsHasBoundedError) {
  const QuadModel m = default_model();
  const Task task = flatten(circle_curve(1.0), 0.0, 201, m.dt, m);
  const Trajectory traj = rollout(m, default_params(), state_on_reference(task.front()), task);
  const double rmse = position_rmse(traj, task);
  EXPECT_TRUE(std::isfinite(rmse));
  EXPECT_LT(rmse, 1.0);
}

TEST(Rollout, IsDeterministic) {
  const QuadModel m = default_model();
  const Task task = flatten(lemniscate_curve(2.0), 1.0, 201, m.dt, m);
  const QuadState x0 = offset_initial_state(task.front(), 0.3, -0.3, 0.3, 0.3);
  const Trajectory a = rollout(m, default_params(), x0, task);
  const Trajectory b = rollout(m, default_params(), x0, task);
  for (std::size_t k = 0; k < a.states.size(); ++k) EXPECT_EQ(pack(a.states[k]), pack(b.states[k]));
}

TEST(Rollout, UnstableGainsReportTheStep) {
  const QuadModel m = default_model();
  const Task task = flatten(circle_curve(3.0), 0.0, 201, m.dt, m);
  ControlParams wild = default_params();
  wild.k_Omega = Vec3::Constant(1000.0);  // far beyond the explicit-Euler stability limit
  try {
    rollout(m, wild, offset_initial_state(task.front(), 0.3, 0.3, 0.3, 0.3), task);
    FAIL() << "expected divergence";
  } catch (const NonFiniteStateError& e) {
    EXPECT_GE(e.step(), 0);
    EXPECT_LT(e.step(), 200);
  }
}

TEST(PackUnpack, RoundTrip) {
  std::mt19937_64 rng(24);
  QuadState x;
  x.p = random_vec(rng, 1);
  x.v = random_vec(rng, 1);
  x.R = random_rotation(rng);
  x.Omega = random_vec(rng, 1);
  const QuadState y = unpack(pack(x));
  EXPECT_EQ(pack(y), pack(x));
  EXPECT_EQ(pack(x)(rot_index(1, 2)), x.R(1, 2));
}
