#pragma once

// Pipeline orchestration and evaluation.
//
// run_pipeline() chains bank -> expert tuning -> dataset -> TPN training ->
// evaluation. Every stage writes a stage key (hash of the config slice it
// depends on plus upstream keys) next to its output; a rerun reuses any stage
// whose key still matches.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "tpn/bank_io.hpp"
#include "tpn/difftune.hpp"
#include "tpn/flat_ref.hpp"
#include "tpn/parallel.hpp"
#include "tpn/tpn_io.hpp"
#include "tpn/tpn_net.hpp"
#include "tpn/traj_bank.hpp"

namespace tpn {

inline constexpr const char* kLibraryVersion = "0.1.0";
inline constexpr int kManifestFormatVersion = 1;

/// Out-of-bank categories: higher speeds S4..S6 (4, 5, 6 m/s) or sharper
/// curvature C5 = [0.8, 1.0], C6 = [1.0, 1.2].
inline std::vector<Category> make_ood_categories() {
  return {make_category(1, 5), make_category(1, 6), make_category(2, 5), make_category(4, 1),
          make_category(4, 2), make_category(4, 3), make_category(5, 1), make_category(6, 1)};
}

struct PipelineConfig {
  std::string scale = "desk";
  std::uint64_t seed = 7;
  BankConfig bank = BankConfig::desk_scale();
  TuneConfig tune;
  TrainConfig tpn;
  double heldout_fraction = 0.2;
  int ood_parents = 1;
  std::vector<double> trig_speeds{1.0, 2.0, 3.0, 4.0};
  double trig_start = 2.0;
  int eval_piece = 0;
  bool dump_trajectories = true;
  unsigned threads = 0;  // 0 = hardware concurrency; does not affect results

  static PipelineConfig desk() { return PipelineConfig{}; }
  static PipelineConfig paper() {
    PipelineConfig c;
    c.scale = "paper";
    c.bank = BankConfig::paper_scale();
    c.tune.train_count = 16;
    c.ood_parents = 4;
    return c;
  }

  int heldout_parents() const {
    return std::clamp(static_cast<int>(std::ceil(heldout_fraction * bank.parents - 1e-9)), 1, bank.parents);
  }
  int first_heldout_parent() const { return bank.parents - heldout_parents(); }

  BankConfig ood_bank() const {
    BankConfig c = bank;
    c.categories = make_ood_categories();
    c.parents = ood_parents;
    return c;
  }
};

inline Json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.adam.learning_rate}, {"beta1", c.adam.beta1},       {"beta2", c.adam.beta2},
          {"epsilon", c.adam.epsilon},             {"batch_size", c.batch_size}, {"epochs", c.epochs}};
}

/// Everything that affects results; `threads` is deliberately absent.
inline Json to_json(const PipelineConfig& c) {
  Json bank = to_json(c.bank);
  bank.erase("categories");
  return {{"scale", c.scale},
          {"seed", c.seed},
          {"bank", bank},
          {"tune", to_json(c.tune)},
          {"tpn", to_json(c.tpn)},
          {"eval",
           {{"heldout_fraction", c.heldout_fraction},
            {"ood_parents", c.ood_parents},
            {"trig_speeds", c.trig_speeds},
            {"trig_start", c.trig_start},
            {"piece", c.eval_piece},
            {"dump_trajectories", c.dump_trajectories}}}};
}

namespace detail {

inline void reject_unknown(const Json& j, std::initializer_list<const char*> known, const std::string& section) {
  if (!j.is_object()) throw Error(ErrorCode::Format, "config section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return it.key() == k; }) == known.end())
      throw Error(ErrorCode::Format, "unknown config key '" + section + "." + it.key() + "'");
  }
}

}  // namespace detail

/// Starts from the preset named by "scale" and applies overrides.
inline PipelineConfig pipeline_config_from_json(const Json& j) {
  detail::reject_unknown(j, {"scale", "seed", "bank", "tune", "tpn", "eval", "threads"}, "root");
  const std::string scale = j.value("scale", "desk");
  PipelineConfig c;
  if (scale == "paper") c = PipelineConfig::paper();
  else if (scale != "desk") throw Error(ErrorCode::Format, "scale must be desk or paper");
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  if (j.contains("bank")) {
    const Json& b = j.at("bank");
    detail::reject_unknown(b, {"parents", "children", "waypoints", "waypoint_dt", "child_radius"}, "bank");
    c.bank = bank_config_from_json(b, c.bank);
  }
  if (j.contains("tune")) {
    detail::reject_unknown(j.at("tune"),
                           {"step_size", "iterations", "mode", "lambda", "train_count", "init_position", "init_velocity"},
                           "tune");
    c.tune = tune_config_from_json(j.at("tune"), c.tune);
  }
  if (j.contains("tpn")) {
    const Json& t = j.at("tpn");
    detail::reject_unknown(t, {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "epochs"}, "tpn");
    c.tpn.adam.learning_rate = t.value("learning_rate", c.tpn.adam.learning_rate);
    c.tpn.adam.beta1 = t.value("beta1", c.tpn.adam.beta1);
    c.tpn.adam.beta2 = t.value("beta2", c.tpn.adam.beta2);
    c.tpn.adam.epsilon = t.value("epsilon", c.tpn.adam.epsilon);
    c.tpn.batch_size = t.value("batch_size", c.tpn.batch_size);
    c.tpn.epochs = t.value("epochs", c.tpn.epochs);
  }
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    detail::reject_unknown(
        e, {"heldout_fraction", "ood_parents", "trig_speeds", "trig_start", "piece", "dump_trajectories"}, "eval");
    c.heldout_fraction = e.value("heldout_fraction", c.heldout_fraction);
    c.ood_parents = e.value("ood_parents", c.ood_parents);
    c.trig_speeds = e.value("trig_speeds", c.trig_speeds);
    c.trig_start = e.value("trig_start", c.trig_start);
    c.eval_piece = e.value("piece", c.eval_piece);
    c.dump_trajectories = e.value("dump_trajectories", c.dump_trajectories);
  }
  if (c.bank.parents < 2 || c.bank.children < 1 || c.ood_parents < 1 || !(c.heldout_fraction > 0.0) ||
      c.eval_piece < 0 || c.eval_piece >= c.bank.pieces())
    throw Error(ErrorCode::InvalidArgument, "invalid pipeline configuration");
  return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  return pipeline_config_from_json(read_json(path));
}

inline std::string config_hash(const PipelineConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

/// Seeds of every stochastic piece, all derived from the run seed.
inline std::uint64_t bank_seed(std::uint64_t seed) { return derive_seed(seed, {0xba4c}); }
inline std::uint64_t ood_bank_seed(std::uint64_t seed) { return derive_seed(seed, {0x00d}); }
inline std::uint64_t tpn_seed(std::uint64_t seed) { return derive_seed(seed, {0x7e11}); }
inline std::uint64_t tune_seed(std::uint64_t seed, const TaskIndex& idx) {
  return derive_seed(seed, {0x70e, static_cast<std::uint64_t>(idx.speed_index),
                            static_cast<std::uint64_t>(idx.curvature_index), static_cast<std::uint64_t>(idx.parent),
                            static_cast<std::uint64_t>(idx.piece)});
}

// ---------------------------------------------------------------------------
// Tuning and dataset assembly

/// The batch of one (parent, piece): piece s of every child polynomial.
inline std::vector<Task> batch_tasks(const ParentRecord& rec, int piece, const QuadModel& model) {
  std::vector<Task> out;
  out.reserve(rec.children.size());
  for (const PiecewisePolynomial& child : rec.children) out.push_back(piece_task(child, piece, model));
  return out;
}

inline ExpertRecord tune_batch(const QuadModel& model, const ParentRecord& rec, int piece, const TuneConfig& cfg,
                               std::uint64_t seed, const std::string& bank_digest) {
  const std::vector<Task> batch = batch_tasks(rec, piece, model);
  const TuneReport rep = batch_tune(model, batch, cfg, default_params(), seed);
  ExpertRecord out;
  out.index = {rec.category.speed_index, rec.category.curvature_index, rec.parent, piece};
  out.theta = rep.theta_star;
  out.seed = seed;
  out.best_iteration = rep.best_iteration;
  out.initial_train_rmse = rep.initial_train_rmse;
  out.final_train_rmse = rep.final_train_rmse;
  out.final_val_rmse = rep.child_val_rmse.empty() ? rep.final_train_rmse : detail::mean_or_inf(rep.child_val_rmse);
  out.bank_hash = bank_digest;
  out.tune = cfg;
  return out;
}

/// Limits tuning to the given pieces (all pieces when empty).
inline ExpertSet tune_all(const QuadModel& model, const Bank& bank, const TuneConfig& cfg, std::uint64_t seed,
                          unsigned threads, std::vector<int> pieces = {},
                          const std::function<void(std::size_t, std::size_t)>& progress = {}) {
  if (pieces.empty())
    for (int s = 0; s < bank.config.pieces(); ++s) pieces.push_back(s);
  struct Job {
    const ParentRecord* rec;
    int piece;
  };
  std::vector<Job> jobs;
  for (const CategoryBank& cb : bank.categories)
    for (const ParentRecord& rec : cb.parents)
      for (int s : pieces) jobs.push_back({&rec, s});
  const std::string digest = bank_hash(bank);
  ExpertSet set;
  set.records.resize(jobs.size());
  std::atomic<std::size_t> done{0};
  std::mutex progress_mutex;
  parallel_for(
      jobs.size(),
      [&](std::size_t i) {
        const Job& job = jobs[i];
        const TaskIndex idx{job.rec->category.speed_index, job.rec->category.curvature_index, job.rec->parent,
                            job.piece};
        set.records[i] = tune_batch(model, *job.rec, job.piece, cfg, tune_seed(seed, idx), digest);
        if (progress) {
          std::lock_guard<std::mutex> lock(progress_mutex);
          progress(++done, jobs.size());
        }
      },
      threads);
  return set;
}

/// One (parent piece, expert gains) pair per tuned batch.
inline TaskParamDataset build_dataset(const QuadModel& model, const Bank& bank, const ExpertSet& experts) {
  TaskParamDataset data;
  for (const CategoryBank& cb : bank.categories) {
    for (const ParentRecord& rec : cb.parents) {
      for (int s = 0; s < bank.config.pieces(); ++s) {
        const TaskIndex idx{cb.category.speed_index, cb.category.curvature_index, rec.parent, s};
        const ExpertRecord* e = experts.find(idx);
        if (!e) continue;
        TaskParamSample sample;
        sample.index = idx;
        sample.input = task_input(piece_task(rec.poly, s, model));
        sample.target = e->theta.to_vector();
        data.push_back(std::move(sample));
      }
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class ParamSource { Untrained, Expert, Tpn };

inline const char* to_string(ParamSource s) {
  switch (s) {
    case ParamSource::Untrained: return "untrained";
    case ParamSource::Expert: return "expert";
    case ParamSource::Tpn: return "tpn";
  }
  return "?";
}

inline ParamSource param_source_from_string(const std::string& s) {
  if (s == "untrained") return ParamSource::Untrained;
  if (s == "expert") return ParamSource::Expert;
  if (s == "tpn") return ParamSource::Tpn;
  throw Error(ErrorCode::InvalidArgument, "source must be expert, tpn or untrained");
}

struct InitialOffset {
  double dpx, dpy, dvx, dvy;
};

/// The 2^4 sign lattice of (p_x, p_y, v_x, v_y) offsets.
inline std::vector<InitialOffset> sign_grid(double position = 0.3, double velocity = 0.3) {
  std::vector<InitialOffset> out;
  for (int mask = 0; mask < 16; ++mask) {
    auto sgn = [&](int bit) { return (mask >> bit) & 1 ? -1.0 : 1.0; };
    out.push_back({sgn(0) * position, sgn(1) * position, sgn(2) * velocity, sgn(3) * velocity});
  }
  return out;
}

struct EvalProtocol {
  ParamSource source = ParamSource::Untrained;
  std::vector<InitialOffset> grid = sign_grid();
};

struct EvalRow {
  std::string table;
  std::string name;
  std::string source;
  int tasks = 0;
  int runs = 0;
  int diverged = 0;
  double mean_rmse = 0.0;
  double std_rmse = 0.0;

  bool flagged() const { return diverged > 0; }
};

/// A run kept for plotting: the first grid state on the first task.
struct TrajectoryDump {
  std::string file_stem;
  std::vector<double> t;
  std::vector<Vec3> p, p_ref;
};

/// Rollout RMSE for every (task, grid state); runs that blow up are counted
/// as diverged and left out of the statistics.
inline EvalRow evaluate(const QuadModel& model, const std::string& table, const std::string& name,
                        const EvalProtocol& protocol, std::span<const Task> tasks,
                        std::span<const ControlParams> params, unsigned threads = 0, TrajectoryDump* dump = nullptr) {
  if (tasks.size() != params.size()) throw Error(ErrorCode::InvalidArgument, "one parameter set per task required");
  const std::size_t g = protocol.grid.size();
  std::vector<double> rmse(tasks.size() * g, kDiverged);
  Trajectory first;
  parallel_for(
      rmse.size(),
      [&](std::size_t i) {
        const Task& task = tasks[i / g];
        const InitialOffset& o = protocol.grid[i % g];
        const QuadState x0 = offset_initial_state(task.front(), o.dpx, o.dpy, o.dvx, o.dvy);
        try {
          Trajectory traj = rollout(model, params[i / g], x0, task);
          rmse[i] = position_rmse(traj, task);
          if (i == 0) first = std::move(traj);
        } catch (const NonFiniteStateError&) {
          rmse[i] = kDiverged;
        }
      },
      threads);
  EvalRow row;
  row.table = table;
  row.name = name;
  row.source = to_string(protocol.source);
  row.tasks = static_cast<int>(tasks.size());
  row.runs = static_cast<int>(rmse.size());
  double sum = 0.0;
  int ok = 0;
  for (double r : rmse) {
    if (!std::isfinite(r)) {
      ++row.diverged;
      continue;
    }
    sum += r;
    ++ok;
  }
  row.mean_rmse = ok ? sum / ok : kDiverged;
  double var = 0.0;
  for (double r : rmse)
    if (std::isfinite(r)) var += (r - row.mean_rmse) * (r - row.mean_rmse);
  row.std_rmse = ok ? std::sqrt(var / ok) : 0.0;
  if (dump && !tasks.empty() && !first.states.empty()) {
    dump->file_stem = table + "_" + name + "_" + row.source;
    for (std::size_t k = 0; k < first.states.size(); ++k) {
      dump->t.push_back(tasks[0][k].t);
      dump->p.push_back(first.states[k].p);
      dump->p_ref.push_back(tasks[0][k].p);
    }
  }
  return row;
}

using ResultTable = std::vector<EvalRow>;

inline std::string format_number(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

inline constexpr const char* kTableHeader = "table,name,source,tasks,runs,diverged,mean_rmse,std_rmse";

inline std::string table_csv(const ResultTable& rows) {
  std::ostringstream out;
  out << kTableHeader << "\n";
  for (const EvalRow& r : rows) {
    out << r.table << ',' << r.name << ',' << r.source << ',' << r.tasks << ',' << r.runs << ',' << r.diverged << ','
        << format_number(r.mean_rmse) << ',' << format_number(r.std_rmse) << "\n";
  }
  return out.str();
}

inline ResultTable parse_table_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kTableHeader) throw Error(ErrorCode::Format, "unexpected table header");
  ResultTable rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw Error(ErrorCode::Format, "table row needs 8 fields");
    EvalRow r;
    r.table = f[0];
    r.name = f[1];
    r.source = f[2];
    r.tasks = std::stoi(f[3]);
    r.runs = std::stoi(f[4]);
    r.diverged = std::stoi(f[5]);
    r.mean_rmse = std::stod(f[6]);
    r.std_rmse = std::stod(f[7]);
    rows.push_back(r);
  }
  return rows;
}

inline std::string dump_csv(const TrajectoryDump& d) {
  std::ostringstream out;
  out << "t,px,py,pz,ref_px,ref_py,ref_pz\n";
  for (std::size_t k = 0; k < d.t.size(); ++k) {
    out << format_number(d.t[k]);
    for (int i = 0; i < 3; ++i) out << ',' << format_number(d.p[k](i));
    for (int i = 0; i < 3; ++i) out << ',' << format_number(d.p_ref[k](i));
    out << "\n";
  }
  return out.str();
}

inline const EvalRow* find_row(const ResultTable& rows, const std::string& name, const std::string& source) {
  for (const EvalRow& r : rows)
    if (r.name == name && r.source == source) return &r;
  return nullptr;
}

/// Trigonometric evaluation tasks Cir(v) and Lem(v).
inline std::vector<std::pair<std::string, Task>> trig_tasks(const QuadModel& model, const PipelineConfig& cfg) {
  std::vector<std::pair<std::string, Task>> out;
  for (double v : cfg.trig_speeds) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    out.emplace_back("Cir(" + std::string(buf) + ")",
                     flatten(circle_curve(v), cfg.trig_start, task_length(model), model.dt, model));
  }
  for (double v : cfg.trig_speeds) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    out.emplace_back("Lem(" + std::string(buf) + ")",
                     flatten(lemniscate_curve(v), cfg.trig_start, task_length(model), model.dt, model));
  }
  return out;
}

inline ControlParams tpn_params_for(const TpnModel& net, const Task& task) {
  const std::vector<double> xy = task_input(task);
  return forward(net, xy);
}

struct EvalInputs {
  const Bank* bank = nullptr;
  const ExpertSet* experts = nullptr;
  const Bank* ood_bank = nullptr;
  const ExpertSet* ood_experts = nullptr;
  const TpnModel* net = nullptr;
};

struct EvalTables {
  ResultTable inbank, ood, trig;
  std::vector<TrajectoryDump> dumps;
};

inline bool source_available(ParamSource s, const EvalInputs& in) {
  if (s == ParamSource::Tpn) return in.net != nullptr;
  return true;
}

/// Rows for the given sources, in category order and then source order.
inline EvalTables evaluate_tables(const QuadModel& model, const PipelineConfig& cfg, const EvalInputs& in,
                                  const std::vector<ParamSource>& sources) {
  EvalTables out;
  const int piece = cfg.eval_piece;
  auto params_for = [&](ParamSource s, const Task& task, const ExpertSet* experts, const TaskIndex& idx) {
    switch (s) {
      case ParamSource::Untrained: return default_params();
      case ParamSource::Tpn: return tpn_params_for(*in.net, task);
      case ParamSource::Expert: {
        const ExpertRecord* e = experts ? experts->find(idx) : nullptr;
        if (!e) throw Error(ErrorCode::InvalidArgument, "no expert gains for the evaluated batch");
        return e->theta;
      }
    }
    return default_params();
  };
  auto run = [&](ResultTable& table, const std::string& table_name, const std::string& row_name, ParamSource s,
                 const std::vector<Task>& tasks, const std::vector<ControlParams>& params) {
    EvalProtocol protocol;
    protocol.source = s;
    TrajectoryDump dump;
    table.push_back(evaluate(model, table_name, row_name, protocol, tasks, params, cfg.threads,
                             cfg.dump_trajectories ? &dump : nullptr));
    if (cfg.dump_trajectories && !dump.t.empty()) out.dumps.push_back(std::move(dump));
  };
  auto bank_rows = [&](ResultTable& table, const std::string& table_name, const Bank& bank, const ExpertSet* experts,
                       int first_parent) {
    for (const CategoryBank& cb : bank.categories) {
      std::vector<Task> tasks;
      std::vector<TaskIndex> idx;
      for (const ParentRecord& rec : cb.parents) {
        if (rec.parent < first_parent) continue;
        tasks.push_back(piece_task(rec.poly, piece, model));
        idx.push_back({cb.category.speed_index, cb.category.curvature_index, rec.parent, piece});
      }
      for (ParamSource s : sources) {
        if (!source_available(s, in)) continue;
        std::vector<ControlParams> params;
        for (std::size_t k = 0; k < tasks.size(); ++k) params.push_back(params_for(s, tasks[k], experts, idx[k]));
        run(table, table_name, cb.category.name(), s, tasks, params);
      }
    }
  };
  if (in.bank) bank_rows(out.inbank, "inbank", *in.bank, in.experts, cfg.first_heldout_parent());
  if (in.ood_bank) bank_rows(out.ood, "ood", *in.ood_bank, in.ood_experts, 0);
  for (const auto& [name, task] : trig_tasks(model, cfg)) {
    for (ParamSource s : sources) {
      if (s == ParamSource::Expert || !source_available(s, in)) continue;
      run(out.trig, "trig", name, s, {task}, {params_for(s, task, nullptr, {})});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct StageInfo {
  std::string name;
  std::string key;
  std::size_t jobs = 0;
  bool cached = false;
};

struct StagePlan {
  std::vector<StageInfo> stages;

  std::size_t jobs(const std::string& name) const {
    for (const StageInfo& s : stages)
      if (s.name == name) return s.jobs;
    return 0;
  }
};

namespace detail {

inline std::string stage_key(const std::string& name, const Json& slice, std::initializer_list<std::string> upstream) {
  std::string blob = name + "|" + slice.dump();
  for (const std::string& u : upstream) blob += "|" + u;
  return hex64(fnv1a64(blob));
}

}  // namespace detail

struct StageKeys {
  std::string bank, experts, dataset, tpn, ood_bank, ood_experts;
};

inline StageKeys stage_keys(const PipelineConfig& c) {
  StageKeys k;
  const Json bank_slice = {{"bank", to_json(c.bank)}, {"seed", c.seed}};
  k.bank = detail::stage_key("bank", bank_slice, {});
  k.experts = detail::stage_key("experts", to_json(c.tune), {k.bank});
  k.dataset = detail::stage_key("dataset", Json::object(), {k.experts});
  k.tpn = detail::stage_key("tpn", {{"tpn", to_json(c.tpn)}, {"heldout", c.heldout_parents()}, {"seed", c.seed}},
                            {k.dataset});
  k.ood_bank = detail::stage_key("ood_bank", {{"bank", to_json(c.ood_bank())}, {"seed", c.seed}}, {});
  k.ood_experts =
      detail::stage_key("ood_experts", {{"tune", to_json(c.tune)}, {"piece", c.eval_piece}}, {k.ood_bank});
  return k;
}

/// Stage list with job counts; nothing is computed.
inline StagePlan plan_pipeline(const PipelineConfig& c) {
  const StageKeys k = stage_keys(c);
  StagePlan plan;
  plan.stages.push_back({"bank", k.bank, c.bank.categories.size() * static_cast<std::size_t>(c.bank.parents)});
  plan.stages.push_back({"experts", k.experts, static_cast<std::size_t>(c.bank.batches())});
  plan.stages.push_back({"dataset", k.dataset, static_cast<std::size_t>(c.bank.batches())});
  plan.stages.push_back({"tpn", k.tpn, static_cast<std::size_t>(c.tpn.epochs)});
  const std::size_t ood = make_ood_categories().size() * static_cast<std::size_t>(c.ood_parents);
  plan.stages.push_back({"ood_bank", k.ood_bank, ood});
  plan.stages.push_back({"ood_experts", k.ood_experts, ood});
  plan.stages.push_back({"eval", "", c.bank.categories.size() * 3 + ood * 3 + c.trig_speeds.size() * 4});
  return plan;
}

struct PipelineArtifacts {
  std::filesystem::path root;
  std::filesystem::path bank_dir, experts_file, dataset_file, checkpoint_file, ood_bank_dir, ood_experts_file;
  std::filesystem::path tables_dir, dumps_dir, manifest_file;
  StagePlan plan;
  EvalTables tables;
  std::vector<double> train_loss, val_loss;
  std::vector<ExpertRecord> experts;
};

inline PipelineArtifacts artifact_paths(const std::filesystem::path& root) {
  PipelineArtifacts a;
  a.root = root;
  a.bank_dir = root / "bank";
  a.experts_file = root / "experts.json";
  a.dataset_file = root / "dataset.jsonl";
  a.checkpoint_file = root / "tpn.ckpt.json";
  a.ood_bank_dir = root / "ood_bank";
  a.ood_experts_file = root / "ood_experts.json";
  a.tables_dir = root / "tables";
  a.dumps_dir = root / "dumps";
  a.manifest_file = root / "manifest.json";
  return a;
}

namespace detail {

inline bool bank_cached(const std::filesystem::path& dir, const std::string& key) {
  const auto marker = dir / "stage.json";
  if (!std::filesystem::exists(marker)) return false;
  try {
    return read_json(marker).value("stage_key", "") == key;
  } catch (const Error&) {
    return false;
  }
}

template <typename Fn>
auto run_stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), "stage " + name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::Io, "stage " + name + ": " + e.what());
  }
}

inline Bank load_or_build_bank(const BankConfig& bc, std::uint64_t seed, const std::filesystem::path& dir,
                               const std::string& key, bool& cached) {
  cached = bank_cached(dir, key);
  if (cached) return read_bank(dir);
  std::filesystem::remove_all(dir);
  Bank bank = build_bank(bc, seed);
  write_bank(bank, dir);
  write_text(dir / "stage.json", Json{{"stage_key", key}}.dump() + "\n");
  return bank;
}

inline ExpertSet load_or_tune(const QuadModel& model, const Bank& bank, const TuneConfig& tc, std::uint64_t seed,
                              unsigned threads, std::vector<int> pieces, const std::filesystem::path& file,
                              const std::string& key, bool& cached, std::ostream* log) {
  if (std::filesystem::exists(file)) {
    ExpertSet set = read_expert_set(file);
    if (set.stage_key == key) {
      cached = true;
      return set;
    }
  }
  cached = false;
  ExpertSet set = tune_all(model, bank, tc, seed, threads, std::move(pieces), [&](std::size_t done, std::size_t n) {
    if (log && (done % 20 == 0 || done == n)) *log << "  tuned " << done << "/" << n << " batches\n";
  });
  set.stage_key = key;
  write_expert_set(set, file);
  return set;
}

inline std::string tuning_csv_header() {
  std::string out = "table,category,parent,piece,best_iteration,initial_train_rmse,final_train_rmse,final_val_rmse";
  for (const char* n : kParamNames) out += std::string(",") + n;
  return out + "\n";
}

inline std::string tuning_csv_rows(const std::vector<ExpertRecord>& records, const std::string& table) {
  std::ostringstream out;
  for (const ExpertRecord& r : records) {
    out << table << ",S" << r.index.speed_index << 'C' << r.index.curvature_index << ',' << r.index.parent << ','
        << r.index.piece << ',' << r.best_iteration << ',' << format_number(r.initial_train_rmse) << ','
        << format_number(r.final_train_rmse) << ',' << format_number(r.final_val_rmse);
    const ParamVec v = r.theta.to_vector();
    for (int i = 0; i < kParamDim; ++i) out << ',' << format_number(v(i));
    out << "\n";
  }
  return out.str();
}

inline std::string training_csv(const std::vector<double>& train, const std::vector<double>& val) {
  std::ostringstream out;
  out << "epoch,train_mse,val_mse\n";
  for (std::size_t e = 0; e < train.size(); ++e)
    out << e << ',' << format_number(train[e]) << ',' << format_number(e < val.size() ? val[e] : 0.0) << "\n";
  return out.str();
}

}  // namespace detail

inline TrainResult train_tpn(const DatasetFile& data, const PipelineConfig& cfg, const std::string& stage_key,
                             const std::filesystem::path& checkpoint) {
  std::vector<std::size_t> train_rows, val_rows;
  const int first_heldout =
      data.parents - std::clamp(static_cast<int>(std::ceil(cfg.heldout_fraction * data.parents - 1e-9)), 1, data.parents);
  split_by_parent(data.samples, first_heldout, train_rows, val_rows);
  TrainConfig tc = cfg.tpn;
  tc.seed = tpn_seed(cfg.seed);
  TpnModel init = TpnModel::create_default(derive_seed(tc.seed, {0x1417}));
  std::vector<double> train_hist, val_hist;
  const std::string chash = config_hash(cfg);
  TrainResult res = train(data.samples, train_rows, val_rows, tc, init, [&](int epoch, const TpnModel& m) {
    if (checkpoint.empty()) return;
    Checkpoint c{m, epoch, chash, epoch == tc.epochs ? stage_key : std::string(), {}, {}};
    write_checkpoint(c, checkpoint);
  });
  if (!checkpoint.empty())
    write_checkpoint({res.model, tc.epochs, chash, stage_key, res.train_loss, res.val_loss}, checkpoint);
  return res;
}

inline void write_tables(const PipelineArtifacts& a, const EvalTables& t) {
  write_text(a.tables_dir / "table1_inbank.csv", table_csv(t.inbank));
  write_text(a.tables_dir / "table2_ood.csv", table_csv(t.ood));
  write_text(a.tables_dir / "table3_trig.csv", table_csv(t.trig));
  for (const TrajectoryDump& d : t.dumps) {
    std::string stem = d.file_stem;
    std::replace(stem.begin(), stem.end(), '(', '_');
    stem.erase(std::remove(stem.begin(), stem.end(), ')'), stem.end());
    write_text(a.dumps_dir / (stem + ".csv"), dump_csv(d));
  }
}

/// Runs (or resumes) every stage under `root`.
inline PipelineArtifacts run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& root,
                                      std::ostream* log = nullptr) {
  const QuadModel model = default_model();
  PipelineArtifacts a = artifact_paths(root);
  std::filesystem::create_directories(root);
  a.plan = plan_pipeline(cfg);
  const StageKeys k = stage_keys(cfg);
  auto mark = [&](const std::string& name, bool cached) {
    for (StageInfo& s : a.plan.stages)
      if (s.name == name) s.cached = cached;
    if (log) *log << "[" << name << "] " << (cached ? "cached" : "done") << "\n";
  };
  bool cached = false;

  const Bank bank = detail::run_stage("bank", [&] {
    return detail::load_or_build_bank(cfg.bank, bank_seed(cfg.seed), a.bank_dir, k.bank, cached);
  });
  mark("bank", cached);

  const ExpertSet experts = detail::run_stage("experts", [&] {
    return detail::load_or_tune(model, bank, cfg.tune, cfg.seed, cfg.threads, {}, a.experts_file, k.experts, cached,
                                log);
  });
  mark("experts", cached);

  const DatasetFile dataset = detail::run_stage("dataset", [&] {
    if (std::filesystem::exists(a.dataset_file)) {
      DatasetFile d = read_dataset(a.dataset_file);
      if (d.stage_key == k.dataset) {
        cached = true;
        return d;
      }
    }
    cached = false;
    DatasetFile d{k.dataset, cfg.bank.parents, build_dataset(model, bank, experts)};
    write_dataset(d, a.dataset_file);
    return d;
  });
  mark("dataset", cached);

  const TpnModel net = detail::run_stage("tpn", [&] {
    if (std::filesystem::exists(a.checkpoint_file)) {
      Checkpoint c = read_checkpoint(a.checkpoint_file);
      if (c.stage_key == k.tpn) {
        cached = true;
        a.train_loss = c.train_loss;
        a.val_loss = c.val_loss;
        return c.model;
      }
    }
    cached = false;
    TrainResult res = train_tpn(dataset, cfg, k.tpn, a.checkpoint_file);
    a.train_loss = res.train_loss;
    a.val_loss = res.val_loss;
    return res.model;
  });
  mark("tpn", cached);

  const Bank ood_bank = detail::run_stage("ood_bank", [&] {
    return detail::load_or_build_bank(cfg.ood_bank(), ood_bank_seed(cfg.seed), a.ood_bank_dir, k.ood_bank, cached);
  });
  mark("ood_bank", cached);

  const ExpertSet ood_experts = detail::run_stage("ood_experts", [&] {
    return detail::load_or_tune(model, ood_bank, cfg.tune, derive_seed(cfg.seed, {0x00d}), cfg.threads,
                                {cfg.eval_piece}, a.ood_experts_file, k.ood_experts, cached, log);
  });
  mark("ood_experts", cached);

  a.tables = detail::run_stage("eval", [&] {
    EvalInputs in{&bank, &experts, &ood_bank, &ood_experts, &net};
    return evaluate_tables(model, cfg, in, {ParamSource::Untrained, ParamSource::Expert, ParamSource::Tpn});
  });
  detail::run_stage("eval", [&] {
    std::filesystem::remove_all(a.dumps_dir);
    write_tables(a, a.tables);
    write_text(a.tables_dir / "tuning.csv",
               detail::tuning_csv_header() + detail::tuning_csv_rows(experts.records, "inbank") +
                   detail::tuning_csv_rows(ood_experts.records, "ood"));
    write_text(a.tables_dir / "tpn_training.csv", detail::training_csv(a.train_loss, a.val_loss));
    return 0;
  });
  mark("eval", false);
  a.experts = experts.records;

  Json stages = Json::array();
  for (const StageInfo& s : a.plan.stages)
    stages.push_back({{"name", s.name}, {"key", s.key}, {"jobs", s.jobs}, {"cached", s.cached}});
  const Json manifest = {{"format", "tpn-manifest"},
                         {"version", kManifestFormatVersion},
                         {"library_version", kLibraryVersion},
                         {"config_hash", config_hash(cfg)},
                         {"seed", cfg.seed},
                         {"config", to_json(cfg)},
                         {"stages", stages}};
  write_text(a.manifest_file, manifest.dump(2) + "\n");
  return a;
}

/// Manifest for a single CLI stage run.
inline void write_stage_manifest(const std::filesystem::path& path, const std::string& command,
                                 const PipelineConfig& cfg, std::uint64_t seed, const Json& extra = Json::object()) {
  Json m = {{"format", "tpn-manifest"},
            {"version", kManifestFormatVersion},
            {"library_version", kLibraryVersion},
            {"command", command},
            {"config_hash", config_hash(cfg)},
            {"seed", seed},
            {"config", to_json(cfg)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_text(path, m.dump(2) + "\n");
}

}  // namespace tpn
