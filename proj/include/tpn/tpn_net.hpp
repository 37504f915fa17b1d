#pragma once

// Task-to-gains network: a small MLP with layer normalization before each
// hidden ReLU and a hard lower bound on the output,
//
//   theta = kMinGain + softplus(z),
//
// so every prediction lies in {theta >= 0.01} for any finite input. Trained
// with Adam on the element-mean squared error against expert gains.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "tpn/errors.hpp"
#include "tpn/geo_ctrl.hpp"
#include "tpn/rng.hpp"

namespace tpn {

inline constexpr double kLayerNormEps = 1e-12;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Numerically stable log(1 + exp(z)).
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Parameter tensors in a fixed order: per hidden layer (W, b, gain, offset),
/// then the output head (W, b). Gradients share the same layout.
struct TpnParams {
  std::vector<Matrix> tensors;

  TpnParams zeros_like() const {
    TpnParams out;
    for (const Matrix& t : tensors) out.tensors.push_back(Matrix::Zero(t.rows(), t.cols()));
    return out;
  }
};

struct TpnModel {
  std::vector<int> sizes;  // {input, hidden..., output}
  TpnParams params;
  Vector input_mean;
  Vector input_std;
  bool origin_relative = true;  // inputs are (x, y) pairs re-expressed relative to the first pair

  int hidden_layers() const { return static_cast<int>(sizes.size()) - 2; }
  int input_dim() const { return sizes.front(); }
  int output_dim() const { return sizes.back(); }

  Matrix& weight(int layer) { return params.tensors[tensor_index(layer)]; }
  const Matrix& weight(int layer) const { return params.tensors[tensor_index(layer)]; }

  static int tensor_index(int layer) { return 4 * layer; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, unit gains.
  static TpnModel create(std::vector<int> sizes, std::uint64_t seed) {
    if (sizes.size() < 2) throw Error(ErrorCode::InvalidArgument, "network needs at least input and output sizes");
    TpnModel m;
    m.sizes = std::move(sizes);
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < m.sizes.size(); ++l) {
      const int fan_in = m.sizes[l], fan_out = m.sizes[l + 1];
      std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
      Matrix w(fan_out, fan_in);
      for (int c = 0; c < fan_in; ++c)
        for (int r = 0; r < fan_out; ++r) w(r, c) = dist(rng);
      Matrix b(fan_out, 1);
      for (int r = 0; r < fan_out; ++r) b(r, 0) = dist(rng);
      m.params.tensors.push_back(std::move(w));
      m.params.tensors.push_back(std::move(b));
      if (l + 2 < m.sizes.size()) {
        m.params.tensors.push_back(Matrix::Ones(fan_out, 1));
        m.params.tensors.push_back(Matrix::Zero(fan_out, 1));
      }
    }
    m.input_mean = Vector::Zero(m.sizes.front());
    m.input_std = Vector::Ones(m.sizes.front());
    m.origin_relative = false;
    return m;
  }

  /// The task network: 402 -> 128 -> 64 -> 12.
  static TpnModel create_default(std::uint64_t seed) {
    TpnModel m = create({402, 128, 64, kParamDim}, seed);
    m.origin_relative = true;
    return m;
  }
};

/// Raw inputs (one column per sample) to the standardized network input.
inline Matrix preprocess(const TpnModel& model, const Matrix& raw) {
  Matrix x = raw;
  if (model.origin_relative) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double x0 = raw(0, c), y0 = raw(1, c);
      for (Eigen::Index r = 0; r + 1 < x.rows(); r += 2) {
        x(r, c) -= x0;
        x(r + 1, c) -= y0;
      }
    }
  }
  return (x.colwise() - model.input_mean).array().colwise() / model.input_std.array();
}

namespace detail {

struct LayerCache {
  Matrix input;   // layer input
  Matrix pre;     // affine output
  Matrix xhat;    // normalized pre-activation (hidden layers)
  Vector inv_std; // per column 1/sigma (hidden layers)
  Matrix normed;  // gain * xhat + offset (hidden layers)
};

struct ForwardPass {
  std::vector<LayerCache> layers;
  Matrix z;      // output pre-activation
  Matrix theta;  // constrained output
};

inline ForwardPass forward_pass(const TpnModel& model, const Matrix& x) {
  ForwardPass fp;
  Matrix h = x;
  const int n_layers = static_cast<int>(model.sizes.size()) - 1;
  for (int l = 0; l < n_layers; ++l) {
    const Matrix& w = model.params.tensors[4 * l];
    const Matrix& b = model.params.tensors[4 * l + 1];
    LayerCache cache;
    cache.input = h;
    cache.pre = (w * h).colwise() + b.col(0);
    if (l + 1 == n_layers) {
      fp.z = cache.pre;
      fp.layers.push_back(std::move(cache));
      break;
    }
    const Matrix& gain = model.params.tensors[4 * l + 2];
    const Matrix& offset = model.params.tensors[4 * l + 3];
    const Eigen::Index width = cache.pre.rows();
    cache.xhat.resize(width, cache.pre.cols());
    cache.inv_std.resize(cache.pre.cols());
    for (Eigen::Index c = 0; c < cache.pre.cols(); ++c) {
      const double mu = cache.pre.col(c).mean();
      const double var = (cache.pre.col(c).array() - mu).square().mean();
      cache.inv_std(c) = 1.0 / std::sqrt(var + kLayerNormEps);
      cache.xhat.col(c) = (cache.pre.col(c).array() - mu) * cache.inv_std(c);
    }
    cache.normed = (cache.xhat.array().colwise() * gain.col(0).array()).colwise() + offset.col(0).array();
    h = cache.normed.cwiseMax(0.0);
    fp.layers.push_back(std::move(cache));
  }
  fp.theta = fp.z.unaryExpr([](double v) { return kMinGain + softplus(v); });
  return fp;
}

}  // namespace detail

/// Constrained outputs for already-standardized inputs (one column each).
inline Matrix forward_standardized(const TpnModel& model, const Matrix& x) {
  return detail::forward_pass(model, x).theta;
}

/// Gains for one task given its raw (x, y) positions.
inline ControlParams forward(const TpnModel& model, std::span<const double> task_xy) {
  if (static_cast<int>(task_xy.size()) != model.input_dim())
    throw Error(ErrorCode::InvalidArgument, "task input has the wrong dimension");
  const Matrix raw = Eigen::Map<const Vector>(task_xy.data(), static_cast<Eigen::Index>(task_xy.size()));
  const Matrix theta = forward_standardized(model, preprocess(model, raw));
  if (theta.rows() != kParamDim) throw Error(ErrorCode::InvalidArgument, "model output is not 12 gains");
  return ControlParams::from_vector(theta.col(0));
}

/// Mean over samples and outputs of the squared error.
inline double mse(const Matrix& prediction, const Matrix& target) {
  return (prediction - target).array().square().mean();
}

struct BackwardResult {
  double loss = 0.0;
  TpnParams grad;
};

/// Exact gradient of the batch MSE with respect to every parameter tensor.
inline BackwardResult backward(const TpnModel& model, const Matrix& x, const Matrix& target) {
  if (x.cols() == 0) throw Error(ErrorCode::InvalidArgument, "backward() needs a non-empty batch");
  const detail::ForwardPass fp = detail::forward_pass(model, x);
  BackwardResult out;
  out.loss = mse(fp.theta, target);
  out.grad = model.params.zeros_like();
  const double scale = 2.0 / static_cast<double>(fp.theta.size());
  Matrix delta = scale * (fp.theta - target);
  delta.array() *= fp.z.unaryExpr([](double v) { return sigmoid(v); }).array();

  const int n_layers = static_cast<int>(model.sizes.size()) - 1;
  for (int l = n_layers - 1; l >= 0; --l) {
    const detail::LayerCache& cache = fp.layers[l];
    if (l + 1 < n_layers) {
      // delta currently holds dL/d(relu output); push through ReLU and the norm.
      delta = delta.cwiseProduct((cache.normed.array() > 0.0).cast<double>().matrix());
      const Matrix& gain = model.params.tensors[4 * l + 2];
      out.grad.tensors[4 * l + 2] = (delta.cwiseProduct(cache.xhat)).rowwise().sum();
      out.grad.tensors[4 * l + 3] = delta.rowwise().sum();
      const Matrix dxhat = delta.array().colwise() * gain.col(0).array();
      Matrix dpre(dxhat.rows(), dxhat.cols());
      for (Eigen::Index c = 0; c < dxhat.cols(); ++c) {
        const double m1 = dxhat.col(c).mean();
        const double m2 = dxhat.col(c).dot(cache.xhat.col(c)) / static_cast<double>(dxhat.rows());
        dpre.col(c) = cache.inv_std(c) * (dxhat.col(c).array() - m1 - cache.xhat.col(c).array() * m2);
      }
      delta = std::move(dpre);
    }
    out.grad.tensors[4 * l] = delta * cache.input.transpose();
    out.grad.tensors[4 * l + 1] = delta.rowwise().sum();
    if (l > 0) delta = model.params.tensors[4 * l].transpose() * delta;
  }
  return out;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(const TpnParams& like, AdamConfig cfg) : cfg_(cfg), m_(like.zeros_like()), v_(like.zeros_like()) {}

  void step(TpnParams& params, const TpnParams& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      m_.tensors[i] = cfg_.beta1 * m_.tensors[i] + (1.0 - cfg_.beta1) * grad.tensors[i];
      v_.tensors[i] = cfg_.beta2 * v_.tensors[i] + (1.0 - cfg_.beta2) * grad.tensors[i].cwiseAbs2();
      params.tensors[i].array() -= cfg_.learning_rate * (m_.tensors[i].array() / c1) /
                                   ((v_.tensors[i].array() / c2).sqrt() + cfg_.epsilon);
    }
  }

 private:
  AdamConfig cfg_;
  TpnParams m_, v_;
  long t_ = 0;
};

struct TaskIndex {
  int speed_index = 0;
  int curvature_index = 0;
  int parent = 0;
  int piece = 0;

  friend bool operator==(const TaskIndex&, const TaskIndex&) = default;
  friend auto operator<=>(const TaskIndex&, const TaskIndex&) = default;
};

struct TaskParamSample {
  TaskIndex index;
  std::vector<double> input;  // 2 * M raw positions, (x, y) interleaved
  ParamVec target;
};

using TaskParamDataset = std::vector<TaskParamSample>;

/// Interleaved (x, y) positions of a task.
inline std::vector<double> task_input(std::span<const ReferencePoint> task) {
  std::vector<double> out;
  out.reserve(2 * task.size());
  for (const ReferencePoint& r : task) {
    out.push_back(r.p.x());
    out.push_back(r.p.y());
  }
  return out;
}

inline Matrix inputs_matrix(const TaskParamDataset& data, std::span<const std::size_t> rows) {
  const Eigen::Index dim = data.empty() ? 0 : static_cast<Eigen::Index>(data.front().input.size());
  Matrix out(dim, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t c = 0; c < rows.size(); ++c)
    out.col(static_cast<Eigen::Index>(c)) = Eigen::Map<const Vector>(data[rows[c]].input.data(), dim);
  return out;
}

inline Matrix targets_matrix(const TaskParamDataset& data, std::span<const std::size_t> rows) {
  Matrix out(kParamDim, static_cast<Eigen::Index>(rows.size()));
  for (std::size_t c = 0; c < rows.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = data[rows[c]].target;
  return out;
}

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 32;
  int epochs = 50;
  std::uint64_t seed = 0;
};

struct TrainResult {
  TpnModel model;
  std::vector<double> train_loss;  // entry 0 is before the first update
  std::vector<double> val_loss;
};

/// Rows whose parent index is below `first_heldout` train; the rest validate.
inline void split_by_parent(const TaskParamDataset& data, int first_heldout, std::vector<std::size_t>& train,
                            std::vector<std::size_t>& val) {
  train.clear();
  val.clear();
  for (std::size_t r = 0; r < data.size(); ++r) (data[r].index.parent < first_heldout ? train : val).push_back(r);
}

/// Fits the input statistics on the training rows, then runs Adam over
/// seeded shuffled mini-batches. `on_epoch(epoch, model)` runs after every
/// epoch, which the CLI uses for checkpoints.
inline TrainResult train(const TaskParamDataset& data, std::span<const std::size_t> train_rows,
                         std::span<const std::size_t> val_rows, const TrainConfig& cfg, TpnModel model,
                         const std::function<void(int, const TpnModel&)>& on_epoch = {}) {
  if (cfg.batch_size <= 0 || cfg.epochs < 0 || !(cfg.adam.learning_rate >= 0.0))
    throw Error(ErrorCode::InvalidArgument, "invalid training configuration");
  if (train_rows.size() < static_cast<std::size_t>(cfg.batch_size))
    throw Error(ErrorCode::InvalidArgument, "training split smaller than one batch");
  TrainResult res;

  TpnModel stats_view = model;
  stats_view.input_mean.setZero();
  stats_view.input_std.setOnes();
  const Matrix train_shifted = preprocess(stats_view, inputs_matrix(data, train_rows));
  model.input_mean = train_shifted.rowwise().mean();
  const Vector var = (train_shifted.colwise() - model.input_mean).array().square().rowwise().mean();
  model.input_std = var.array().sqrt().max(1e-6).matrix();

  const Matrix x_train = preprocess(model, inputs_matrix(data, train_rows));
  const Matrix y_train = targets_matrix(data, train_rows);
  const Matrix x_val = preprocess(model, inputs_matrix(data, val_rows));
  const Matrix y_val = targets_matrix(data, val_rows);
  auto record = [&] {
    res.train_loss.push_back(mse(forward_standardized(model, x_train), y_train));
    res.val_loss.push_back(val_rows.empty() ? 0.0 : mse(forward_standardized(model, x_val), y_val));
  };
  record();

  Adam opt(model.params, cfg.adam);
  Rng rng(derive_seed(cfg.seed, {0xba7c}));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x_train.cols()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Matrix xb(x_train.rows(), static_cast<Eigen::Index>(stop - start));
      Matrix yb(y_train.rows(), static_cast<Eigen::Index>(stop - start));
      for (std::size_t k = start; k < stop; ++k) {
        xb.col(static_cast<Eigen::Index>(k - start)) = x_train.col(order[k]);
        yb.col(static_cast<Eigen::Index>(k - start)) = y_train.col(order[k]);
      }
      opt.step(model.params, backward(model, xb, yb).grad);
    }
    record();
    if (on_epoch) on_epoch(epoch + 1, model);
  }
  res.model = std::move(model);
  return res;
}

/// Splits an N-sample reference into consecutive pieces of `piece_length`,
/// padding the last piece by repeating the final sample, and predicts one
/// gain set per piece.
inline std::vector<ControlParams> infer_for_horizon(const TpnModel& model, std::span<const ReferencePoint> reference,
                                                    std::size_t piece_length) {
  if (reference.size() < 2) throw Error(ErrorCode::InvalidArgument, "infer_for_horizon() needs N >= 2");
  const std::size_t pieces = (reference.size() + piece_length - 1) / piece_length;
  std::vector<ControlParams> schedule;
  schedule.reserve(pieces);
  for (std::size_t i = 0; i < pieces; ++i) {
    Task piece;
    piece.reserve(piece_length);
    for (std::size_t k = 0; k < piece_length; ++k) {
      piece.push_back(reference[std::min(i * piece_length + k, reference.size() - 1)]);
    }
    const std::vector<double> xy = task_input(piece);
    schedule.push_back(forward(model, xy));
  }
  return schedule;
}

}  // namespace tpn
