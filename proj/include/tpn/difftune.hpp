#pragma once

// Batch auto-tuning of the controller gains. The loss gradient is exact: the
// state sensitivities dx_k/dtheta are pushed forward through the unrolled
// closed loop with the analytic Jacobians of the dynamics and the controller,
//
//   du_k/dtheta     = dh/dx S_k + dh/dtheta
//   S_{k+1}         = df/dx S_k + df/du du_k/dtheta,   S_0 = 0,
//
// and the gains follow projected gradient descent on the batch-mean loss.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tpn/errors.hpp"
#include "tpn/geo_ctrl.hpp"
#include "tpn/quad_sim.hpp"
#include "tpn/rng.hpp"

namespace tpn {

enum class LossMode {
  Rmse,       // sqrt(mean_k |p_k - pbar_k|^2)
  Quadratic,  // sum_k |p_k - pbar_k|^2 + lambda sum_k |u_k|^2
};

inline const char* to_string(LossMode m) { return m == LossMode::Rmse ? "rmse" : "quadratic"; }

inline constexpr double kDiverged = std::numeric_limits<double>::infinity();

using Sensitivity = Eigen::Matrix<double, kStateDim, kParamDim>;

struct TaskLoss {
  double loss = 0.0;
  double rmse = 0.0;
  std::vector<double> errors;  // |p_k - pbar_k| for k = 0..M-1
  bool diverged = false;
};

/// Position RMSE over every sample of a rollout against its reference.
inline double position_rmse(const Trajectory& traj, std::span<const ReferencePoint> task) {
  if (traj.states.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t k = 0; k < traj.states.size(); ++k) sum += (traj.states[k].p - task[k].p).squaredNorm();
  return std::sqrt(sum / static_cast<double>(traj.states.size()));
}

inline TaskLoss task_loss(const ControlParams& theta, std::span<const ReferencePoint> task, const QuadState& x0,
                          double lambda, const QuadModel& model, LossMode mode = LossMode::Rmse) {
  TaskLoss out;
  Trajectory traj;
  try {
    traj = rollout(model, theta, x0, task);
  } catch (const NonFiniteStateError&) {
    out.loss = out.rmse = kDiverged;
    out.diverged = true;
    return out;
  }
  double sq = 0.0;
  for (std::size_t k = 0; k < traj.states.size(); ++k) {
    const double e = (traj.states[k].p - task[k].p).norm();
    out.errors.push_back(e);
    sq += e * e;
  }
  out.rmse = traj.states.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(traj.states.size()));
  if (mode == LossMode::Rmse) {
    out.loss = out.rmse;
  } else {
    double effort = 0.0;
    for (const ControlInput& u : traj.controls) effort += u.f * u.f + u.M.squaredNorm();
    out.loss = sq + lambda * effort;
  }
  if (!std::isfinite(out.loss)) {
    out.loss = out.rmse = kDiverged;
    out.diverged = true;
  }
  return out;
}

struct LossGradient {
  double loss = 0.0;
  double rmse = 0.0;
  ParamVec grad = ParamVec::Zero();
};

/// Loss and its exact gradient with respect to the 12 gains. Throws
/// DivergedRollout if the closed loop blows up.
inline LossGradient propagate_sensitivities(const QuadModel& model, const ControlParams& theta, const QuadState& x0,
                                            std::span<const ReferencePoint> task, LossMode mode = LossMode::Rmse,
                                            double lambda = 0.0) {
  LossGradient out;
  if (task.size() < 2) return out;
  Sensitivity sens = Sensitivity::Zero();
  QuadState x = x0;
  ParamVec grad_sq = ParamVec::Zero();
  ParamVec grad_effort = ParamVec::Zero();
  double sq = 0.0, effort = 0.0;
  const std::size_t steps = task.size() - 1;
  for (std::size_t k = 0;; ++k) {
    const Vec3 e = x.p - task[k].p;
    sq += e.squaredNorm();
    grad_sq += 2.0 * sens.block<3, kParamDim>(kIdxP, 0).transpose() * e;
    if (k == steps) break;

    const ControlInput u = control(model, x, task[k], theta);
    const ControlJacobians cj = control_jacobians(model, x, task[k], theta);
    const Eigen::Matrix<double, kInputDim, kParamDim> du = cj.dx * sens + cj.dtheta;
    if (mode == LossMode::Quadratic && lambda != 0.0) {
      Eigen::Matrix<double, kInputDim, 1> uv;
      uv << u.f, u.M;
      effort += uv.squaredNorm();
      grad_effort += 2.0 * du.transpose() * uv;
    }
    const StepJacobians sj = step_jacobians(model, x, u);
    sens = sj.dx * sens + sj.du * du;
    try {
      x = step_dynamics(model, x, u);
    } catch (const NonFiniteStateError&) {
      throw Error(ErrorCode::DivergedRollout, "rollout diverged at step " + std::to_string(k));
    }
    if (!sens.allFinite()) throw Error(ErrorCode::DivergedRollout, "sensitivities diverged at step " + std::to_string(k));
  }
  const double samples = static_cast<double>(task.size());
  out.rmse = std::sqrt(sq / samples);
  if (mode == LossMode::Rmse) {
    out.loss = out.rmse;
    out.grad = out.rmse > 0.0 ? ParamVec(grad_sq / (2.0 * samples * out.rmse)) : ParamVec::Zero();
  } else {
    out.loss = sq + lambda * effort;
    out.grad = grad_sq + lambda * grad_effort;
  }
  if (!std::isfinite(out.loss) || !out.grad.allFinite()) throw Error(ErrorCode::DivergedRollout, "non-finite loss");
  return out;
}

/// Box of initial-state offsets applied on the x and y axes.
struct InitialStateBox {
  double position = 0.3;  // m
  double velocity = 0.3;  // m/s
};

/// Reference start perturbed in p_x, p_y, v_x, v_y; attitude and rate copied.
inline QuadState offset_initial_state(const ReferencePoint& ref0, double dpx, double dpy, double dvx, double dvy) {
  QuadState x = state_on_reference(ref0);
  x.p += Vec3(dpx, dpy, 0.0);
  x.v += Vec3(dvx, dvy, 0.0);
  return x;
}

inline QuadState sample_initial_state(const ReferencePoint& ref0, const InitialStateBox& box, Rng& rng) {
  std::uniform_real_distribution<double> pos(-box.position, box.position);
  std::uniform_real_distribution<double> vel(-box.velocity, box.velocity);
  const double dpx = pos(rng), dpy = pos(rng), dvx = vel(rng), dvy = vel(rng);
  return offset_initial_state(ref0, dpx, dpy, dvx, dvy);
}

struct TuneConfig {
  double step_size = 0.1;
  int iterations = 100;
  LossMode mode = LossMode::Rmse;
  double lambda = 0.0;
  int train_count = 4;  // leading children used for gradients; the rest validate
  InitialStateBox init_box;
};

struct TuneReport {
  LossMode mode = LossMode::Rmse;
  ControlParams theta_init;
  ControlParams theta_star;
  int best_iteration = 0;
  std::vector<double> train_loss;   // batch-mean train loss at iterate k
  std::vector<double> val_rmse;     // mean validation RMSE at iterate k
  std::vector<double> best_so_far;  // running minimum of the selection metric
  std::vector<int> diverged;        // diverged training children at iterate k
  std::vector<double> child_train_rmse;  // at theta_star
  std::vector<double> child_val_rmse;    // at theta_star
  double initial_train_rmse = 0.0;
  double final_train_rmse = 0.0;
  double wall_seconds = 0.0;
};

namespace detail {

inline double mean_or_inf(const std::vector<double>& xs) {
  if (xs.empty()) return kDiverged;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline std::vector<double> child_rmse(const QuadModel& model, const ControlParams& theta,
                                      std::span<const Task> tasks, std::span<const QuadState> x0) {
  std::vector<double> out;
  for (std::size_t c = 0; c < tasks.size(); ++c)
    out.push_back(task_loss(theta, tasks[c], x0[c], 0.0, model, LossMode::Rmse).rmse);
  return out;
}

}  // namespace detail

/// Projected gradient descent over a task batch with frozen initial states.
/// The first cfg.train_count tasks drive the update (a diverged child adds a
/// zero gradient but still counts in the average); the rest score each
/// iterate, and the iterate with the lowest validation RMSE is returned. With
/// no validation tasks the batch training loss selects the iterate instead.
inline TuneReport batch_tune(const QuadModel& model, std::span<const Task> batch, std::span<const QuadState> x0,
                             const TuneConfig& cfg, const ControlParams& theta_init) {
  if (batch.empty()) throw Error(ErrorCode::InvalidArgument, "batch_tune() needs a non-empty batch");
  if (x0.size() != batch.size()) throw Error(ErrorCode::InvalidArgument, "one initial state per task required");
  if (!theta_init.feasible()) throw Error(ErrorCode::InvalidArgument, "initial gains are infeasible");
  const auto t_begin = std::chrono::steady_clock::now();
  const std::size_t n_train = std::min<std::size_t>(batch.size(), static_cast<std::size_t>(std::max(1, cfg.train_count)));
  const std::span<const Task> train = batch.first(n_train);
  const std::span<const Task> val = batch.subspan(n_train);
  const std::span<const QuadState> x0_train = x0.first(n_train);
  const std::span<const QuadState> x0_val = x0.subspan(n_train);

  TuneReport rep;
  rep.mode = cfg.mode;
  rep.theta_init = theta_init;
  ParamVec theta = theta_init.to_vector();
  ParamVec best_theta = theta;
  double best = kDiverged;

  for (int it = 0; it <= cfg.iterations; ++it) {
    const ControlParams current = ControlParams::from_vector(theta);
    ParamVec grad_sum = ParamVec::Zero();
    std::vector<double> losses;
    int diverged = 0;
    for (std::size_t c = 0; c < train.size(); ++c) {
      try {
        const LossGradient lg = propagate_sensitivities(model, current, x0_train[c], train[c], cfg.mode, cfg.lambda);
        grad_sum += lg.grad;
        losses.push_back(lg.loss);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DivergedRollout) throw;
        ++diverged;
        losses.push_back(kDiverged);
      }
    }
    if (diverged == static_cast<int>(train.size())) {
      throw Error(ErrorCode::AllChildrenDiverged, "every training child diverged at iteration " + std::to_string(it));
    }
    const double train_loss = detail::mean_or_inf(losses);
    const double val_loss = val.empty() ? train_loss : detail::mean_or_inf(detail::child_rmse(model, current, val, x0_val));
    rep.train_loss.push_back(train_loss);
    rep.val_rmse.push_back(val_loss);
    rep.diverged.push_back(diverged);
    if (val_loss < best) {
      best = val_loss;
      best_theta = theta;
      rep.best_iteration = it;
    }
    rep.best_so_far.push_back(best);
    if (it == cfg.iterations) break;
    theta = project_feasible(theta - (cfg.step_size / static_cast<double>(train.size())) * grad_sum);
  }

  rep.theta_star = ControlParams::from_vector(best_theta);
  rep.child_train_rmse = detail::child_rmse(model, rep.theta_star, train, x0_train);
  rep.child_val_rmse = detail::child_rmse(model, rep.theta_star, val, x0_val);
  rep.initial_train_rmse = detail::mean_or_inf(detail::child_rmse(model, theta_init, train, x0_train));
  rep.final_train_rmse = detail::mean_or_inf(rep.child_train_rmse);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  return rep;
}

/// Draws one frozen initial state per task from the box, then tunes.
inline TuneReport batch_tune(const QuadModel& model, std::span<const Task> batch, const TuneConfig& cfg,
                             const ControlParams& theta_init, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<QuadState> x0;
  x0.reserve(batch.size());
  for (const Task& t : batch) {
    if (t.empty()) throw Error(ErrorCode::InvalidArgument, "empty task in batch");
    x0.push_back(sample_initial_state(t.front(), cfg.init_box, rng));
  }
  return batch_tune(model, batch, x0, cfg, theta_init);
}

}  // namespace tpn
