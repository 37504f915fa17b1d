// Command-line front end for the bank / tuning / TPN pipeline.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "tpn/harness.hpp"

namespace fs = std::filesystem;
using namespace tpn;

namespace {

PipelineConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  PipelineConfig cfg = path.empty() ? PipelineConfig::desk() : load_pipeline_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

/// "S3C4" -> (3, 4).
std::pair<int, int> parse_category(const std::string& name) {
  int i = 0, j = 0;
  char tail = 0;
  if (std::sscanf(name.c_str(), "S%dC%d%c", &i, &j, &tail) != 2)
    throw Error(ErrorCode::InvalidArgument, "category must look like S<i>C<j>, got '" + name + "'");
  return {i, j};
}

/// Two numeric columns (x, y) per line, comma or whitespace separated; a
/// non-numeric first line is taken as a header.
Task read_task_xy(const fs::path& path, const QuadModel& model) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  Task task;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    for (char& c : line)
      if (c == ',' || c == ';' || c == '\t') c = ' ';
    std::istringstream ss(line);
    double x = 0.0, y = 0.0;
    if (!(ss >> x >> y)) {
      if (first || line.find_first_not_of(' ') == std::string::npos) {
        first = false;
        continue;
      }
      throw Error(ErrorCode::Format, path.string() + ": cannot parse line '" + line + "'");
    }
    first = false;
    ReferencePoint r;
    r.t = static_cast<double>(task.size()) * model.dt;
    r.p = Vec3(x, y, 0.0);
    task.push_back(r);
  }
  return task;
}

void print_rows(const ResultTable& rows, std::ostream& out) { out << table_csv(rows); }

int cmd_gen_bank(const std::string& config, const std::string& out, std::uint64_t seed) {
  const PipelineConfig cfg = load_config(config, seed);
  const Bank bank = build_bank(cfg.bank, bank_seed(cfg.seed));
  write_bank(bank, out);
  write_stage_manifest(fs::path(out) / "manifest.json", "gen-bank", cfg, cfg.seed, {{"bank_hash", bank_hash(bank)}});
  std::cout << "wrote " << cfg.bank.categories.size() * cfg.bank.parents << " parents to " << out << "\n";
  return 0;
}

int cmd_tune(const std::string& bank_dir, const std::string& category, int parent, int piece, const std::string& out,
             std::uint64_t seed, const std::string& config) {
  const PipelineConfig cfg = load_config(config, seed);
  const Bank bank = read_bank(bank_dir);
  const auto [i, j] = parse_category(category);
  const CategoryBank* cb = bank.find("S" + std::to_string(i) + "C" + std::to_string(j));
  if (!cb) throw Error(ErrorCode::InvalidArgument, "category " + category + " is not in the bank");
  if (parent < 0 || parent >= static_cast<int>(cb->parents.size()))
    throw Error(ErrorCode::InvalidArgument, "parent index out of range");
  if (piece < 0 || piece >= bank.config.pieces()) throw Error(ErrorCode::InvalidArgument, "piece index out of range");
  const TaskIndex idx{i, j, parent, piece};
  const ExpertRecord rec =
      tune_batch(default_model(), cb->parents[parent], piece, cfg.tune, tune_seed(cfg.seed, idx), bank_hash(bank));
  write_text(out, to_json(rec).dump(2) + "\n");
  std::cout << category << " parent " << parent << " piece " << piece << ": train RMSE "
            << format_number(rec.initial_train_rmse) << " -> " << format_number(rec.final_train_rmse) << "\n";
  return 0;
}

int cmd_tune_all(const std::string& bank_dir, const std::string& out, std::uint64_t seed, const std::string& config) {
  const PipelineConfig cfg = load_config(config, seed);
  const Bank bank = read_bank(bank_dir);
  ExpertSet set = tune_all(default_model(), bank, cfg.tune, cfg.seed, cfg.threads, {},
                           [](std::size_t done, std::size_t n) {
                             if (done % 20 == 0 || done == n) std::cerr << "tuned " << done << "/" << n << "\n";
                           });
  write_expert_set(set, out);
  write_stage_manifest(fs::path(out).string() + ".manifest.json", "tune-all", cfg, cfg.seed,
                       {{"bank_hash", bank_hash(bank)}, {"records", set.records.size()}});
  return 0;
}

int cmd_build_dataset(const std::string& bank_dir, const std::string& experts, const std::string& out) {
  const Bank bank = read_bank(bank_dir);
  const ExpertSet set = read_expert_set(experts);
  DatasetFile d{"", bank.config.parents, build_dataset(default_model(), bank, set)};
  write_dataset(d, out);
  std::cout << "wrote " << d.samples.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& dataset, const std::string& out, std::uint64_t seed, const std::string& config) {
  const PipelineConfig cfg = load_config(config, seed);
  const DatasetFile d = read_dataset(dataset);
  const TrainResult res = train_tpn(d, cfg, "", out);
  std::cout << "train MSE " << format_number(res.train_loss.front()) << " -> " << format_number(res.train_loss.back())
            << ", val MSE " << format_number(res.val_loss.front()) << " -> " << format_number(res.val_loss.back())
            << "\n";
  write_stage_manifest(fs::path(out).string() + ".manifest.json", "train-tpn", cfg, cfg.seed);
  return 0;
}

int cmd_predict(const std::string& ckpt, const std::string& task_file) {
  const QuadModel model = default_model();
  const Checkpoint c = read_checkpoint(ckpt);
  const Task task = read_task_xy(task_file, model);
  const std::size_t m = static_cast<std::size_t>(c.model.input_dim() / 2);
  const std::vector<ControlParams> schedule = infer_for_horizon(c.model, task, m);
  Json out = Json::array();
  for (std::size_t i = 0; i < schedule.size(); ++i) out.push_back({{"piece", i}, {"gains", gains_to_json(schedule[i])}});
  std::cout << out.dump(2) << "\n";
  return 0;
}

struct RunInputs {
  Bank bank, ood_bank;
  ExpertSet experts, ood_experts;
  std::optional<TpnModel> net;
};

RunInputs load_run(const fs::path& run, bool need_experts, bool need_tpn) {
  const PipelineArtifacts a = artifact_paths(run);
  RunInputs in;
  in.bank = read_bank(a.bank_dir);
  in.ood_bank = read_bank(a.ood_bank_dir);
  if (need_experts) {
    in.experts = read_expert_set(a.experts_file);
    in.ood_experts = read_expert_set(a.ood_experts_file);
  }
  if (need_tpn) in.net = read_checkpoint(a.checkpoint_file).model;
  return in;
}

int cmd_eval(const std::string& source, const std::string& run, const std::string& config, const std::string& out) {
  const PipelineConfig cfg = load_config(config, std::nullopt);
  const ParamSource s = param_source_from_string(source);
  RunInputs in = load_run(run, s == ParamSource::Expert, s == ParamSource::Tpn);
  EvalInputs ev{&in.bank, &in.experts, &in.ood_bank, &in.ood_experts, in.net ? &*in.net : nullptr};
  PipelineConfig quiet = cfg;
  quiet.dump_trajectories = false;
  const EvalTables t = evaluate_tables(default_model(), quiet, ev, {s});
  ResultTable all = t.inbank;
  all.insert(all.end(), t.ood.begin(), t.ood.end());
  all.insert(all.end(), t.trig.begin(), t.trig.end());
  if (out.empty()) {
    print_rows(all, std::cout);
  } else {
    write_text(out, table_csv(all));
  }
  return 0;
}

int cmd_report(const std::string& run) {
  const PipelineArtifacts a = artifact_paths(run);
  std::ostringstream summary;
  summary << "table,name,untrained,expert,tpn,expert_over_untrained,tpn_over_expert,tpn_over_untrained\n";
  for (const char* file : {"table1_inbank.csv", "table2_ood.csv", "table3_trig.csv"}) {
    const ResultTable rows = parse_table_csv(read_text(a.tables_dir / file));
    std::vector<std::string> names;
    for (const EvalRow& r : rows)
      if (std::find(names.begin(), names.end(), r.name) == names.end()) names.push_back(r.name);
    std::cout << "\n" << file << "\n";
    std::printf("  %-10s %22s %22s %22s\n", "name", "untrained", "expert", "tpn");
    for (const std::string& n : names) {
      auto cell = [&](const char* src) {
        const EvalRow* r = find_row(rows, n, src);
        char buf[64];
        if (!r) return std::string("-");
        std::snprintf(buf, sizeof buf, "%.3f +- %.3f%s", r->mean_rmse, r->std_rmse, r->flagged() ? " !" : "");
        return std::string(buf);
      };
      std::printf("  %-10s %22s %22s %22s\n", n.c_str(), cell("untrained").c_str(), cell("expert").c_str(),
                  cell("tpn").c_str());
      auto mean = [&](const char* src) {
        const EvalRow* r = find_row(rows, n, src);
        return r ? r->mean_rmse : std::nan("");
      };
      const double u = mean("untrained"), e = mean("expert"), t = mean("tpn");
      summary << rows.front().table << ',' << n << ',' << format_number(u) << ',' << format_number(e) << ','
              << format_number(t) << ',' << format_number(e / u) << ',' << format_number(t / e) << ','
              << format_number(t / u) << "\n";
    }
  }
  write_text(a.tables_dir / "summary.csv", summary.str());
  return 0;
}

int cmd_run(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed, bool dry_run) {
  const PipelineConfig cfg = load_config(config, seed);
  if (dry_run) {
    const StagePlan plan = plan_pipeline(cfg);
    std::cout << "config " << config_hash(cfg) << " (" << cfg.scale << " scale, seed " << cfg.seed << ")\n";
    for (const StageInfo& s : plan.stages)
      std::cout << "  " << s.name << ": " << s.jobs << " jobs" << (s.key.empty() ? "" : ", key " + s.key) << "\n";
    return 0;
  }
  run_pipeline(cfg, out, &std::cerr);
  return cmd_report(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-to-gains pipeline: trajectory bank, batch auto-tuning, TPN training and evaluation"};
  app.require_subcommand(1);

  std::string config, out, bank, category, experts, dataset, ckpt, task, source, run;
  std::uint64_t seed = 0;
  int parent = 0, piece = 0;
  bool dry_run = false;

  auto* gen = app.add_subcommand("gen-bank", "Sample waypoints and fit the parent/child bank");
  gen->add_option("--config", config, "Pipeline config file")->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output bank directory")->required();
  gen->add_option("--seed", seed, "Run seed")->required();

  auto* tune = app.add_subcommand("tune", "Tune gains on one (category, parent, piece) batch");
  tune->add_option("--bank", bank, "Bank directory")->required()->check(CLI::ExistingDirectory);
  tune->add_option("--category", category, "Category, e.g. S3C4")->required();
  tune->add_option("--parent", parent, "Parent index (0-based)")->required();
  tune->add_option("--piece", piece, "Piece index (0-based)")->required();
  tune->add_option("--out", out, "Params file")->required();
  tune->add_option("--seed", seed, "Run seed")->required();
  tune->add_option("--config", config, "Pipeline config file")->check(CLI::ExistingFile);

  auto* tune_all_cmd = app.add_subcommand("tune-all", "Tune every batch of a bank");
  tune_all_cmd->add_option("--bank", bank, "Bank directory")->required()->check(CLI::ExistingDirectory);
  tune_all_cmd->add_option("--out", out, "Expert set file")->required();
  tune_all_cmd->add_option("--seed", seed, "Run seed")->required();
  tune_all_cmd->add_option("--config", config, "Pipeline config file")->check(CLI::ExistingFile);

  auto* build = app.add_subcommand("build-dataset", "Pair parent tasks with expert gains");
  build->add_option("--bank", bank, "Bank directory")->required()->check(CLI::ExistingDirectory);
  build->add_option("--experts", experts, "Expert set file")->required()->check(CLI::ExistingFile);
  build->add_option("--out", out, "Dataset file")->required();

  auto* train_cmd = app.add_subcommand("train-tpn", "Train the TPN; the checkpoint is rewritten every epoch");
  train_cmd->add_option("--dataset", dataset, "Dataset file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out, "Checkpoint file")->required();
  train_cmd->add_option("--seed", seed, "Run seed")->required();
  train_cmd->add_option("--config", config, "Pipeline config file")->check(CLI::ExistingFile);

  auto* predict = app.add_subcommand("predict", "Predict gains for a task given as x,y rows");
  predict->add_option("--ckpt", ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  predict->add_option("--task", task, "Task file")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate one parameter source over a finished run");
  eval->add_option("--source", source, "expert, tpn or untrained")
      ->required()
      ->check(CLI::IsMember({"expert", "tpn", "untrained"}));
  eval->add_option("--run", run, "Run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--config", config, "Pipeline config file")->check(CLI::ExistingFile);
  eval->add_option("--out", out, "CSV output (default stdout)");

  auto* report = app.add_subcommand("report", "Summarize the tables of a run");
  report->add_option("--run", run, "Run directory")->required()->check(CLI::ExistingDirectory);

  std::optional<std::uint64_t> run_seed;
  auto* run_cmd = app.add_subcommand("run", "Run or resume the whole pipeline");
  run_cmd->add_option("--config", config, "Pipeline config file")->check(CLI::ExistingFile);
  run_cmd->add_option("--out", out, "Run directory")->required();
  run_cmd->add_option("--seed", run_seed, "Override the config seed");
  run_cmd->add_flag("--dry-run", dry_run, "Print the stage plan only");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_bank(config, out, seed);
    if (*tune) return cmd_tune(bank, category, parent, piece, out, seed, config);
    if (*tune_all_cmd) return cmd_tune_all(bank, out, seed, config);
    if (*build) return cmd_build_dataset(bank, experts, out);
    if (*train_cmd) return cmd_train(dataset, out, seed, config);
    if (*predict) return cmd_predict(ckpt, task);
    if (*eval) return cmd_eval(source, run, config, out);
    if (*report) return cmd_report(run);
    if (*run_cmd) return cmd_run(config, out, run_seed, dry_run);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
