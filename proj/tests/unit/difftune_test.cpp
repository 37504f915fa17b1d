#include <gtest/gtest.h>

#include <map>

#include "support.hpp"
#include "tpn/difftune.hpp"
#include "tpn/flat_ref.hpp"
#include "tpn/traj_bank.hpp"

using namespace tpn;
using namespace tpn::testing;

namespace {

Task hover_task() {
  const QuadModel m = default_model();
  return flatten(hover_curve(Vec3(0.5, -0.5, 0)), 0.0, 201, m.dt, m);
}

const Task& bank_task(const std::string& cat, int parent = 0, int child = 0, int piece = 0) {
  static std::map<std::string, Task> cache;
  const std::string key = cat + "/" + std::to_string(parent) + "/" + std::to_string(child) + "/" + std::to_string(piece);
  auto it = cache.find(key);
  if (it == cache.end()) {
    const ParentRecord& rec = small_bank().find(cat)->parents[parent];
    it = cache.emplace(key, piece_task(rec.children[child], piece, default_model())).first;
  }
  return it->second;
}

ParamVec fd_gradient(const QuadModel& m, const ControlParams& th, const QuadState& x0, const Task& task, LossMode mode,
                     double lambda, double eps) {
  ParamVec g;
  for (int i = 0; i < kParamDim; ++i) {
    ParamVec a = th.to_vector(), b = a;
    a(i) += eps;
    b(i) -= eps;
    const double la = task_loss(ControlParams::from_vector(a), task, x0, lambda, m, mode).loss;
    const double lb = task_loss(ControlParams::from_vector(b), task, x0, lambda, m, mode).loss;
    g(i) = (la - lb) / (2 * eps);
  }
  return g;
}

}  // namespace

TEST(TaskLoss, PerfectTrackingIsZero) {
  const QuadModel m = default_model();
  const Task task = hover_task();
  const TaskLoss l = task_loss(default_params(), task, state_on_reference(task.front()), 0.0, m);
  EXPECT_LT(l.loss, 1e-9);
  EXPECT_FALSE(l.diverged);
  EXPECT_EQ(l.errors.size(), task.size());
}

TEST(TaskLoss, QuadraticEqualsSamplesTimesRmseSquared) {
  const QuadModel m = default_model();
  const Task& task = bank_task("S2C2");
  const QuadState x0 = offset_initial_state(task.front(), 0.3, -0.2, 0.1, 0.3);
  const TaskLoss r = task_loss(default_params(), task, x0, 0.0, m, LossMode::Rmse);
  const TaskLoss q = task_loss(default_params(), task, x0, 0.0, m, LossMode::Quadratic);
  EXPECT_NEAR(q.loss, task.size() * r.rmse * r.rmse, 1e-9 * q.loss);
}

TEST(TaskLoss, DefaultGainsOnTheFastestTightestCategory) {
  const QuadModel m = default_model();
  const Task& task = bank_task("S3C4");
  // Mean over the 16 corners of the initial-offset box.
  double rmse = 0.0;
  for (int mask = 0; mask < 16; ++mask) {
    auto sgn = [&](int bit) { return (mask >> bit) & 1 ? 0.3 : -0.3; };
    rmse += task_loss(default_params(), task, offset_initial_state(task.front(), sgn(0), sgn(1), sgn(2), sgn(3)), 0.0, m).rmse / 16;
  }
  EXPECT_GE(rmse, 0.2);
  EXPECT_LE(rmse, 1.5);
}

TEST(TaskLoss, DivergenceGivesTheSentinel) {
  const QuadModel m = default_model();
  const Task& task = bank_task("S3C4");
  ControlParams wild = default_params();
  wild.k_Omega = Vec3::Constant(1000.0);
  const TaskLoss l = task_loss(wild, task, offset_initial_state(task.front(), 0.3, 0.3, 0.3, 0.3), 0.0, m);
  EXPECT_TRUE(l.diverged);
  EXPECT_EQ(l.loss, kDiverged);
}

TEST(PropagateSensitivities, ZeroAtPerfectTracking) {
  const QuadModel m = default_model();
  const Task task = hover_task();
  const QuadState x0 = state_on_reference(task.front());
  for (LossMode mode : {LossMode::Rmse, LossMode::Quadratic}) {
    const LossGradient g = propagate_sensitivities(m, default_params(), x0, std::span(task).first(2), mode);
    EXPECT_LT(g.grad.norm(), 1e-12);
    EXPECT_LT(propagate_sensitivities(m, default_params(), x0, task, mode).grad.norm(), 1e-9);
  }
}

TEST(PropagateSensitivities, MatchesFiniteDifferences) {
  const QuadModel m = default_model();
  std::mt19937_64 rng(51);
  Rng init(52);
  const std::vector<std::string> cats{"S1C1", "S1C4", "S2C3", "S3C1", "S3C4"};
  for (int trial = 0; trial < 10; ++trial) {
    const Task& task = bank_task(cats[trial % cats.size()], trial % 2, trial % 3, trial % 5);
    const ControlParams th = perturbed_params(rng);
    const QuadState x0 = sample_initial_state(task.front(), InitialStateBox{}, init);
    const LossGradient g = propagate_sensitivities(m, th, x0, task);
    EXPECT_NEAR(g.loss, task_loss(th, task, x0, 0.0, m).loss, 1e-12);
    const ParamVec fd = fd_gradient(m, th, x0, task, LossMode::Rmse, 0.0, 1e-4);
    for (int i = 0; i < kParamDim; ++i)
      EXPECT_TRUE(close_rel_abs(g.grad(i), fd(i), 1e-3, 1e-6)) << kParamNames[i] << ": " << g.grad(i) << " vs " << fd(i);
  }
}

TEST(PropagateSensitivities, QuadraticWithEffortMatchesFiniteDifferences) {
  const QuadModel m = default_model();
  std::mt19937_64 rng(53);
  const Task& task = bank_task("S2C4");
  const ControlParams th = perturbed_params(rng);
  const QuadState x0 = offset_initial_state(task.front(), -0.3, 0.3, 0.2, -0.1);
  const double lambda = 1e-4;
  const LossGradient g = propagate_sensitivities(m, th, x0, task, LossMode::Quadratic, lambda);
  const ParamVec fd = fd_gradient(m, th, x0, task, LossMode::Quadratic, lambda, 1e-4);
  for (int i = 0; i < kParamDim; ++i) EXPECT_TRUE(close_rel_abs(g.grad(i), fd(i), 1e-3, 1e-6)) << kParamNames[i];
}

TEST(PropagateSensitivities, RmseGradientIsScaledQuadraticGradient) {
  const QuadModel m = default_model();
  const Task& task = bank_task("S1C3");
  const QuadState x0 = offset_initial_state(task.front(), 0.2, 0.2, -0.3, 0.0);
  const LossGradient r = propagate_sensitivities(m, default_params(), x0, task, LossMode::Rmse);
  const LossGradient q = propagate_sensitivities(m, default_params(), x0, task, LossMode::Quadratic);
  const ParamVec scaled = q.grad / (2.0 * task.size() * r.rmse);
  EXPECT_LT((r.grad - scaled).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, q.grad.cwiseAbs().maxCoeff()));
}

TEST(PropagateSensitivities, DivergenceRaises) {
  const QuadModel m = default_model();
  const Task& task = bank_task("S3C4");
  ControlParams wild = default_params();
  wild.k_Omega = Vec3::Constant(1000.0);
  try {
    propagate_sensitivities(m, wild, offset_initial_state(task.front(), 0.3, 0.3, 0.3, 0.3), task);
    FAIL() << "expected DivergedRollout";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DivergedRollout);
  }
}

TEST(BatchTune, HoverBatchLeavesGainsUnchanged) {
  const QuadModel m = default_model();
  const std::vector<Task> batch{hover_task()};
  const std::vector<QuadState> x0{state_on_reference(batch[0].front())};
  TuneConfig cfg;
  cfg.iterations = 5;
  cfg.train_count = 1;
  const TuneReport rep = batch_tune(m, batch, x0, cfg, default_params());
  EXPECT_LT((rep.theta_star.to_vector() - default_params().to_vector()).norm(), 1e-9);
}

TEST(BatchTune, ReducesTrainingRmseOnTheSlowTightCategory) {
  const QuadModel m = default_model();
  const ParentRecord& rec = small_bank().find("S1C4")->parents[0];
  std::vector<Task> batch;
  for (const auto& c : rec.children) batch.push_back(piece_task(c, 0, m));
  TuneConfig cfg;
  cfg.train_count = 2;
  const TuneReport rep = batch_tune(m, batch, cfg, default_params(), 61);
  EXPECT_EQ(rep.train_loss.size(), 101u);
  EXPECT_LT(rep.final_train_rmse, rep.initial_train_rmse);
  EXPECT_LT(rep.train_loss.back(), rep.train_loss.front());
  for (std::size_t k = 1; k < rep.best_so_far.size(); ++k) EXPECT_LE(rep.best_so_far[k], rep.best_so_far[k - 1]);
  EXPECT_TRUE(rep.theta_star.feasible());
  // Train and validation children come from the same parent.
  const double ratio = detail::mean_or_inf(rep.child_train_rmse) / detail::mean_or_inf(rep.child_val_rmse);
  EXPECT_GE(ratio, 0.5);
  EXPECT_LE(ratio, 2.0);
}

TEST(BatchTune, ProjectionKeepsGainsFeasible) {
  // A huge step drives some gains negative; they are stored at the floor.
  const QuadModel m = default_model();
  const std::vector<Task> batch{bank_task("S2C4")};
  const std::vector<QuadState> x0{offset_initial_state(batch[0].front(), 0.3, 0.3, 0.3, 0.3)};
  TuneConfig cfg;
  cfg.step_size = 1e6;
  cfg.iterations = 1;
  cfg.train_count = 1;
  const LossGradient g = propagate_sensitivities(m, default_params(), x0[0], batch[0]);
  const ParamVec stepped = project_feasible(default_params().to_vector() - cfg.step_size * g.grad);
  for (int i = 0; i < kParamDim; ++i) {
    EXPECT_GE(stepped(i), 0.01);
    if (g.grad(i) > 1e-5) EXPECT_EQ(stepped(i), 0.01);
  }
  EXPECT_EQ(project_feasible(stepped), stepped);
}

TEST(BatchTune, DuplicatedChildrenGiveTheSameTrajectory) {
  const QuadModel m = default_model();
  const Task& a = bank_task("S2C2");
  const QuadState xa = offset_initial_state(a.front(), 0.3, -0.3, 0.0, 0.2);
  TuneConfig one;
  one.iterations = 10;
  one.train_count = 1;
  TuneConfig two = one;
  two.train_count = 2;
  const std::vector<Task> b1{a}, b2{a, a};
  const std::vector<QuadState> x1{xa}, x2{xa, xa};
  const TuneReport r1 = batch_tune(m, b1, x1, one, default_params());
  const TuneReport r2 = batch_tune(m, b2, x2, two, default_params());
  EXPECT_EQ(r1.theta_star.to_vector(), r2.theta_star.to_vector());
  EXPECT_EQ(r1.train_loss, r2.train_loss);
}

TEST(BatchTune, InitialStatesAreFrozenAndSeeded) {
  const QuadModel m = default_model();
  std::vector<Task> batch{bank_task("S1C2"), bank_task("S1C2", 0, 1)};
  TuneConfig cfg;
  cfg.iterations = 3;
  cfg.train_count = 1;
  const TuneReport a = batch_tune(m, batch, cfg, default_params(), 9);
  const TuneReport b = batch_tune(m, batch, cfg, default_params(), 9);
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(a.val_rmse, b.val_rmse);
  const TuneReport c = batch_tune(m, batch, cfg, default_params(), 10);
  EXPECT_NE(a.train_loss, c.train_loss);
}

TEST(SampleInitialState, StaysInTheBox) {
  const Task& task = bank_task("S3C2");
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const QuadState x = sample_initial_state(task.front(), InitialStateBox{}, rng);
    const Vec3 dp = x.p - task.front().p, dv = x.v - task.front().v;
    EXPECT_LE(dp.head<2>().cwiseAbs().maxCoeff(), 0.3);
    EXPECT_LE(dv.head<2>().cwiseAbs().maxCoeff(), 0.3);
    EXPECT_EQ(dp.z(), 0.0);
    EXPECT_EQ(dv.z(), 0.0);
    EXPECT_EQ(x.R, task.front().R);
    EXPECT_EQ(x.Omega, task.front().Omega);
  }
}

TEST(BatchTune, RejectsBadInputs) {
  const QuadModel m = default_model();
  TuneConfig cfg;
  EXPECT_THROW(batch_tune(m, std::span<const Task>{}, cfg, default_params(), 1), Error);
  ControlParams bad = default_params();
  bad.k_v.x() = 0.0;
  const std::vector<Task> batch{hover_task()};
  EXPECT_THROW(batch_tune(m, batch, cfg, bad, 1), Error);
}
