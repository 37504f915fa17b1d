#pragma once

// Differential-flatness map from a position curve to controller reference
// samples, plus the circle and lemniscate benchmark curves.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tpn/errors.hpp"
#include "tpn/geo_ctrl.hpp"
#include "tpn/geom3d.hpp"
#include "tpn/quad_sim.hpp"

namespace tpn {

struct FlatSample {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 a = Vec3::Zero();
};

/// A position curve with exact first and second derivatives.
class FlatCurve {
 public:
  using Fn = std::function<FlatSample(double)>;

  FlatCurve(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}

  FlatSample operator()(double t) const { return fn_(t); }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  Fn fn_;
};

/// x(t) = 1 - cos(v t), y(t) = sin(v t): unit-radius circle at speed v.
inline FlatCurve circle_curve(double speed) {
  if (!(speed > 0.0)) throw Error(ErrorCode::InvalidArgument, "circle_curve() needs speed > 0");
  return FlatCurve("Cir(" + std::to_string(speed) + ")", [speed](double t) {
    const double c = std::cos(speed * t), s = std::sin(speed * t);
    FlatSample out;
    out.p = {1.0 - c, s, 0.0};
    out.v = {speed * s, speed * c, 0.0};
    out.a = {speed * speed * c, -speed * speed * s, 0.0};
    return out;
  });
}

/// x(t) = sin(2 v t / 2.5), y(t) = 1.5 sin(v t / 2.5).
inline FlatCurve lemniscate_curve(double speed) {
  if (!(speed > 0.0)) throw Error(ErrorCode::InvalidArgument, "lemniscate_curve() needs speed > 0");
  return FlatCurve("Lem(" + std::to_string(speed) + ")", [speed](double t) {
    const double w = speed / 2.5;
    FlatSample out;
    out.p = {std::sin(2.0 * w * t), 1.5 * std::sin(w * t), 0.0};
    out.v = {2.0 * w * std::cos(2.0 * w * t), 1.5 * w * std::cos(w * t), 0.0};
    out.a = {-4.0 * w * w * std::sin(2.0 * w * t), -1.5 * w * w * std::sin(w * t), 0.0};
    return out;
  });
}

inline FlatCurve hover_curve(const Vec3& position) {
  return FlatCurve("hover", [position](double) {
    FlatSample out;
    out.p = position;
    return out;
  });
}

inline FlatCurve line_curve(const Vec3& start, const Vec3& velocity) {
  return FlatCurve("line", [start, velocity](double t) {
    FlatSample out;
    out.p = start + t * velocity;
    out.v = velocity;
    return out;
  });
}

/// Desired attitude for a sample with zero yaw. Throws DegenerateThrust when
/// the feedforward force vanishes.
inline Mat3 flat_attitude(const QuadModel& model, const Vec3& accel) {
  const Vec3 force = -model.mass * model.gravity * Vec3::UnitZ() + model.mass * accel;
  const double n = force.norm();
  if (n < 1e-6) throw Error(ErrorCode::DegenerateThrust, "feedforward thrust vanishes; attitude undefined");
  return attitude_from_axis(-force / n, Vec3::UnitX());
}

/// Samples `count` reference points at t0 + k * dt. The curve is evaluated on
/// [t0 - dt, t0 + count * dt]; body rates come from central differences of the
/// attitude, their derivative from differences of the rates (one-sided at the
/// ends).
inline Task flatten(const FlatCurve& curve, double t0, std::size_t count, double dt, const QuadModel& model) {
  Task task(count);
  if (count == 0) return task;
  std::vector<Mat3> attitudes(count + 2);
  for (std::size_t k = 0; k < count + 2; ++k) {
    const double t = t0 + (static_cast<double>(k) - 1.0) * dt;
    attitudes[k] = flat_attitude(model, curve(t).a);
  }
  for (std::size_t k = 0; k < count; ++k) {
    const double t = t0 + static_cast<double>(k) * dt;
    const FlatSample s = curve(t);
    ReferencePoint& ref = task[k];
    ref.t = t;
    ref.p = s.p;
    ref.v = s.v;
    ref.a = s.a;
    ref.R = attitudes[k + 1];
    const Mat3 rate = ref.R.transpose() * (attitudes[k + 2] - attitudes[k]) / (2.0 * dt);
    const Mat3 skew = 0.5 * (rate - rate.transpose());
    ref.Omega = vee(skew);
  }
  if (count == 1) return task;
  for (std::size_t k = 0; k < count; ++k) {
    if (k == 0) {
      task[k].dOmega = (task[1].Omega - task[0].Omega) / dt;
    } else if (k + 1 == count) {
      task[k].dOmega = (task[k].Omega - task[k - 1].Omega) / dt;
    } else {
      task[k].dOmega = (task[k + 1].Omega - task[k - 1].Omega) / (2.0 * dt);
    }
  }
  return task;
}

}  // namespace tpn
