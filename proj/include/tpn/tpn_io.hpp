#pragma once

// Params records, expert sets, the JSONL dataset and TPN checkpoints.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tpn/bank_io.hpp"
#include "tpn/difftune.hpp"
#include "tpn/tpn_net.hpp"

namespace tpn {

inline constexpr int kParamsFormatVersion = 1;
inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;

inline Json gains_to_json(const ControlParams& theta) {
  Json j = Json::object();
  const ParamVec v = theta.to_vector();
  for (int i = 0; i < kParamDim; ++i) j[kParamNames[i]] = v(i);
  return j;
}

inline ControlParams gains_from_json(const Json& j) {
  ParamVec v;
  for (int i = 0; i < kParamDim; ++i) {
    if (!j.contains(kParamNames[i])) throw Error(ErrorCode::Format, std::string("missing gain ") + kParamNames[i]);
    v(i) = j.at(kParamNames[i]).get<double>();
  }
  return ControlParams::from_vector(v);
}

inline Json to_json(const TuneConfig& c) {
  return {{"step_size", c.step_size},
          {"iterations", c.iterations},
          {"mode", to_string(c.mode)},
          {"lambda", c.lambda},
          {"train_count", c.train_count},
          {"init_position", c.init_box.position},
          {"init_velocity", c.init_box.velocity}};
}

inline TuneConfig tune_config_from_json(const Json& j, TuneConfig c = {}) {
  c.step_size = j.value("step_size", c.step_size);
  c.iterations = j.value("iterations", c.iterations);
  if (j.contains("mode")) {
    const std::string m = j.at("mode").get<std::string>();
    if (m == "rmse") c.mode = LossMode::Rmse;
    else if (m == "quadratic") c.mode = LossMode::Quadratic;
    else throw Error(ErrorCode::Format, "tune.mode must be rmse or quadratic");
  }
  c.lambda = j.value("lambda", c.lambda);
  c.train_count = j.value("train_count", c.train_count);
  c.init_box.position = j.value("init_position", c.init_box.position);
  c.init_box.velocity = j.value("init_velocity", c.init_box.velocity);
  if (!(c.step_size > 0.0) || c.iterations < 0 || c.lambda < 0.0 || c.train_count < 1)
    throw Error(ErrorCode::InvalidArgument, "invalid tuning configuration");
  return c;
}

inline Json to_json(const TaskIndex& i) {
  return {{"speed_index", i.speed_index}, {"curvature_index", i.curvature_index}, {"parent", i.parent}, {"piece", i.piece}};
}

inline TaskIndex task_index_from_json(const Json& j) {
  return {j.at("speed_index").get<int>(), j.at("curvature_index").get<int>(), j.at("parent").get<int>(),
          j.at("piece").get<int>()};
}

/// Tuned gains for one (category, parent, piece) batch with provenance.
struct ExpertRecord {
  TaskIndex index;
  ControlParams theta;
  std::uint64_t seed = 0;
  int best_iteration = 0;
  double initial_train_rmse = 0.0;
  double final_train_rmse = 0.0;
  double final_val_rmse = 0.0;
  std::string bank_hash;
  TuneConfig tune;
};

inline Json to_json(const ExpertRecord& r) {
  return {{"format", "tpn-params"},
          {"version", kParamsFormatVersion},
          {"gains", gains_to_json(r.theta)},
          {"provenance",
           {{"index", to_json(r.index)},
            {"bank_hash", r.bank_hash},
            {"seed", r.seed},
            {"config", to_json(r.tune)},
            {"best_iteration", r.best_iteration},
            {"initial_train_rmse", r.initial_train_rmse},
            {"final_train_rmse", r.final_train_rmse},
            {"final_val_rmse", r.final_val_rmse}}}};
}

inline ExpertRecord expert_from_json(const Json& j, const std::string& where) {
  require_format(j, "tpn-params", kParamsFormatVersion, where);
  ExpertRecord r;
  r.theta = gains_from_json(j.at("gains"));
  const Json& p = j.at("provenance");
  r.index = task_index_from_json(p.at("index"));
  r.bank_hash = p.at("bank_hash").get<std::string>();
  r.seed = p.at("seed").get<std::uint64_t>();
  r.tune = tune_config_from_json(p.at("config"));
  r.best_iteration = p.at("best_iteration").get<int>();
  r.initial_train_rmse = p.at("initial_train_rmse").get<double>();
  r.final_train_rmse = p.at("final_train_rmse").get<double>();
  r.final_val_rmse = p.at("final_val_rmse").get<double>();
  return r;
}

struct ExpertSet {
  std::string stage_key;
  std::vector<ExpertRecord> records;

  const ExpertRecord* find(const TaskIndex& idx) const {
    for (const ExpertRecord& r : records)
      if (r.index == idx) return &r;
    return nullptr;
  }
};

inline void write_expert_set(const ExpertSet& set, const std::filesystem::path& path) {
  Json recs = Json::array();
  for (const ExpertRecord& r : set.records) recs.push_back(to_json(r));
  const Json j = {{"format", "tpn-expert-set"}, {"version", kParamsFormatVersion}, {"stage_key", set.stage_key},
                  {"records", recs}};
  write_text(path, j.dump(1) + "\n");
}

inline ExpertSet read_expert_set(const std::filesystem::path& path) {
  const Json j = read_json(path);
  require_format(j, "tpn-expert-set", kParamsFormatVersion, path.string());
  ExpertSet set;
  set.stage_key = j.value("stage_key", "");
  for (const Json& r : j.at("records")) set.records.push_back(expert_from_json(r, path.string()));
  return set;
}

struct DatasetFile {
  std::string stage_key;
  int parents = 0;  // parents per category in the source bank
  TaskParamDataset samples;
};

/// Header line, then one JSON object per (i, j, p, s).
inline void write_dataset(const DatasetFile& d, const std::filesystem::path& path) {
  std::ostringstream out;
  const std::size_t dim = d.samples.empty() ? 0 : d.samples.front().input.size();
  out << Json{{"format", "tpn-dataset"},
              {"version", kDatasetFormatVersion},
              {"stage_key", d.stage_key},
              {"parents", d.parents},
              {"count", d.samples.size()},
              {"input_dim", dim},
              {"target_dim", kParamDim}}
             .dump()
      << "\n";
  for (const TaskParamSample& s : d.samples) {
    std::vector<double> target(s.target.data(), s.target.data() + kParamDim);
    out << Json{{"index", to_json(s.index)}, {"input", s.input}, {"target", target}}.dump() << "\n";
  }
  write_text(path, out.str());
}

inline DatasetFile read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Format, path.string() + ": empty dataset");
  Json header;
  try {
    header = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::Format, path.string() + ": " + e.what());
  }
  require_format(header, "tpn-dataset", kDatasetFormatVersion, path.string());
  DatasetFile d;
  d.stage_key = header.value("stage_key", "");
  d.parents = header.at("parents").get<int>();
  const std::size_t dim = header.at("input_dim").get<std::size_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    TaskParamSample s;
    s.index = task_index_from_json(j.at("index"));
    s.input = j.at("input").get<std::vector<double>>();
    const std::vector<double> target = j.at("target").get<std::vector<double>>();
    if (s.input.size() != dim || target.size() != kParamDim)
      throw Error(ErrorCode::Format, path.string() + ": record has the wrong dimensions");
    s.target = Eigen::Map<const ParamVec>(target.data());
    d.samples.push_back(std::move(s));
  }
  if (d.samples.size() != header.at("count").get<std::size_t>())
    throw Error(ErrorCode::Format, path.string() + ": record count does not match header");
  return d;
}

inline Json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  const std::vector<double> data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw Error(ErrorCode::Format, "matrix size mismatch");
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

struct Checkpoint {
  TpnModel model;
  int epoch = 0;
  std::string config_hash;
  std::string stage_key;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
};

inline void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  Json tensors = Json::array();
  for (const Matrix& t : c.model.params.tensors) tensors.push_back(matrix_to_json(t));
  const std::vector<double> mean(c.model.input_mean.data(), c.model.input_mean.data() + c.model.input_mean.size());
  const std::vector<double> stdev(c.model.input_std.data(), c.model.input_std.data() + c.model.input_std.size());
  const Json j = {{"format", "tpn-checkpoint"},
                  {"version", kCheckpointFormatVersion},
                  {"layer_sizes", c.model.sizes},
                  {"origin_relative", c.model.origin_relative},
                  {"tensors", tensors},
                  {"input_mean", mean},
                  {"input_std", stdev},
                  {"epoch", c.epoch},
                  {"config_hash", c.config_hash},
                  {"stage_key", c.stage_key},
                  {"train_loss", c.train_loss},
                  {"val_loss", c.val_loss}};
  const std::filesystem::path tmp = path.string() + ".tmp";
  write_text(tmp, j.dump() + "\n");
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const Json j = read_json(path);
  require_format(j, "tpn-checkpoint", kCheckpointFormatVersion, path.string());
  Checkpoint c;
  c.model.sizes = j.at("layer_sizes").get<std::vector<int>>();
  c.model.origin_relative = j.at("origin_relative").get<bool>();
  for (const Json& t : j.at("tensors")) c.model.params.tensors.push_back(matrix_from_json(t));
  const std::vector<double> mean = j.at("input_mean").get<std::vector<double>>();
  const std::vector<double> stdev = j.at("input_std").get<std::vector<double>>();
  c.model.input_mean = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  c.model.input_std = Eigen::Map<const Vector>(stdev.data(), static_cast<Eigen::Index>(stdev.size()));
  c.epoch = j.at("epoch").get<int>();
  c.config_hash = j.value("config_hash", "");
  c.stage_key = j.value("stage_key", "");
  c.train_loss = j.value("train_loss", std::vector<double>{});
  c.val_loss = j.value("val_loss", std::vector<double>{});

  const std::size_t layers = c.model.sizes.size() - 1;
  const std::size_t expected = 4 * layers - 2;
  if (c.model.sizes.size() < 2 || c.model.params.tensors.size() != expected)
    throw Error(ErrorCode::Format, path.string() + ": tensor count does not match layer sizes");
  for (std::size_t l = 0; l < layers; ++l) {
    const Matrix& w = c.model.params.tensors[4 * l];
    if (w.rows() != c.model.sizes[l + 1] || w.cols() != c.model.sizes[l])
      throw Error(ErrorCode::Format, path.string() + ": weight shape does not match layer sizes");
  }
  if (c.model.input_mean.size() != c.model.sizes.front() || c.model.input_std.size() != c.model.sizes.front())
    throw Error(ErrorCode::Format, path.string() + ": input statistics have the wrong size");
  return c;
}

}  // namespace tpn
