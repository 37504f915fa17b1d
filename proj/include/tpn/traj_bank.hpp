#pragma once

// Trajectory bank: categories of (speed band, curvature band), randomly
// marched waypoint chains per category, minimum-snap parents, perturbed
// children, and the split of every polynomial into fixed-length tasks.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tpn/errors.hpp"
#include "tpn/flat_ref.hpp"
#include "tpn/geo_ctrl.hpp"
#include "tpn/min_snap.hpp"
#include "tpn/rng.hpp"

namespace tpn {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double x) const { return x >= lo && x <= hi; }
  double median() const { return 0.5 * (lo + hi); }
  friend bool operator==(const Interval&, const Interval&) = default;
};

struct Category {
  int speed_index = 1;     // i in S_i (1-based)
  int curvature_index = 1; // j in C_j (1-based)
  Interval speed;          // m/s
  Interval curvature;      // 1/m

  std::string name() const { return "S" + std::to_string(speed_index) + "C" + std::to_string(curvature_index); }
  double nominal_speed() const { return speed.median(); }
  friend bool operator==(const Category&, const Category&) = default;
};

/// S_i = [i - 0.5, i + 0.5] m/s, so the nominal speed of S_i is i m/s.
inline Interval speed_band(int i) { return {i - 0.5, i + 0.5}; }

/// C_j = [0.2 (j - 1), 0.2 j] 1/m.
inline Interval curvature_band(int j) { return {0.2 * (j - 1), 0.2 * j}; }

inline Category make_category(int i, int j) { return {i, j, speed_band(i), curvature_band(j)}; }

/// The 3 x 4 grid of in-bank categories S1..S3 x C1..C4.
inline std::vector<Category> bank_categories() {
  std::vector<Category> out;
  for (int i = 1; i <= 3; ++i)
    for (int j = 1; j <= 4; ++j) out.push_back(make_category(i, j));
  return out;
}

inline constexpr int kMaxRejections = 10000;
inline constexpr int kMaxBacktracks = 10;

/// Marches `count` waypoints with spacing v dt. Each new point lies on the
/// circle of radius v dt around its predecessor, drawn uniformly among the
/// directions whose Menger curvature with the two previous points is in the
/// category's curvature band.
///
/// On a circle of radius L = v dt about p_{d-1}, a turn angle b gives curvature
/// 2 sin(|b| / 2) / L, so the uniform-on-circle draw conditioned on the band
/// is uniform on the matching turn-angle interval. Candidates are still checked
/// against the band; a waypoint that exhausts kMaxRejections triggers a redraw
/// of its predecessor, and after kMaxBacktracks of those SamplingStalled is thrown.
inline WaypointSeq sample_waypoints(const Category& cat, int count, double dt, std::uint64_t seed) {
  if (count < 3) throw Error(ErrorCode::InvalidArgument, "sample_waypoints() needs count >= 3");
  if (!(dt > 0.0)) throw Error(ErrorCode::InvalidArgument, "sample_waypoints() needs dt > 0");
  const double step = cat.nominal_speed() * dt;
  const auto stalled = [&](int d) {
    return Error(ErrorCode::SamplingStalled,
                 "category " + cat.name() + " stalled at waypoint index " + std::to_string(d));
  };
  const double lo_arg = cat.curvature.lo * step / 2.0;
  if (lo_arg > 1.0) throw stalled(3);
  const double turn_lo = 2.0 * std::asin(std::max(0.0, lo_arg));
  const double turn_hi = 2.0 * std::asin(std::min(1.0, cat.curvature.hi * step / 2.0));

  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  WaypointSeq wps(static_cast<std::size_t>(count));
  for (int d = 0; d < count; ++d) wps[d].t = d * dt;
  wps[0].p = Vec3::Zero();
  wps[1].p = Vec3(step, 0.0, 0.0);

  int backtracks = 0;
  int d = 2;
  while (d < count) {
    const Vec3 prev = wps[d - 1].p;
    const Vec3 dir = prev - wps[d - 2].p;
    const double heading = std::atan2(dir.y(), dir.x());
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
      const double turn = turn_lo + (turn_hi - turn_lo) * unit(rng);
      const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
      const double angle = heading + sign * turn;
      const Vec3 cand = prev + step * Vec3(std::cos(angle), std::sin(angle), 0.0);
      if ((cand - wps[d - 2].p).norm() <= kCoincidentTolerance) continue;
      if (cat.curvature.contains(menger_curvature(wps[d - 2].p, prev, cand))) {
        wps[d].p = cand;
        accepted = true;
        break;
      }
    }
    if (accepted) {
      ++d;
      continue;
    }
    if (++backtracks > kMaxBacktracks) throw stalled(d + 1);
    if (d > 2) --d;
  }
  return wps;
}

/// Children share the parent's times; every waypoint moves uniformly within a
/// planar disk of the given radius.
inline std::vector<WaypointSeq> perturb_children(const WaypointSeq& parent, int count, double radius,
                                                 std::uint64_t seed) {
  if (radius < 0.0) throw Error(ErrorCode::InvalidArgument, "perturb_children() needs radius >= 0");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<WaypointSeq> children;
  children.reserve(static_cast<std::size_t>(count));
  for (int c = 0; c < count; ++c) {
    WaypointSeq child = parent;
    for (Waypoint& w : child) {
      const double rho = radius * std::sqrt(unit(rng));
      const double ang = 2.0 * std::numbers::pi * unit(rng);
      w.p += Vec3(rho * std::cos(ang), rho * std::sin(ang), 0.0);
    }
    children.push_back(std::move(child));
  }
  return children;
}

inline FlatCurve polynomial_curve(const PiecewisePolynomial& poly) {
  return FlatCurve("min-snap", [poly](double t) {
    FlatSample s;
    s.p = poly.eval(t, 0);
    s.v = poly.eval(t, 1);
    s.a = poly.eval(t, 2);
    return s;
  });
}

inline constexpr double kExcludedSeconds = 2.0;
inline constexpr double kPieceSeconds = 2.0;
inline constexpr double kMinSpanSeconds = 14.0;

/// Samples per task: a closed 2 s window at the model's step.
inline std::size_t task_length(const QuadModel& model) {
  return static_cast<std::size_t>(std::lround(kPieceSeconds / model.dt)) + 1;
}

inline int pieces_per_trajectory(const PiecewisePolynomial& poly) {
  const double usable = poly.end() - poly.start() - 2.0 * kExcludedSeconds;
  return static_cast<int>(std::floor(usable / kPieceSeconds + 1e-9));
}

/// Start time of piece s.
inline double piece_start(const PiecewisePolynomial& poly, int s) {
  return poly.start() + kExcludedSeconds + kPieceSeconds * s;
}

inline Task piece_task(const PiecewisePolynomial& poly, int s, const QuadModel& model) {
  return flatten(polynomial_curve(poly), piece_start(poly, s), task_length(model), model.dt, model);
}

/// Drops the first and last 2 s and cuts the rest into 2 s tasks that share
/// their boundary samples.
inline std::vector<Task> split_into_tasks(const PiecewisePolynomial& poly, const QuadModel& model) {
  if (poly.segments() == 0 || poly.end() - poly.start() < kMinSpanSeconds - 1e-9) {
    throw Error(ErrorCode::SpanTooShort, "polynomial must span at least 14 s");
  }
  std::vector<Task> tasks;
  const int pieces = pieces_per_trajectory(poly);
  tasks.reserve(static_cast<std::size_t>(pieces));
  for (int s = 0; s < pieces; ++s) tasks.push_back(piece_task(poly, s, model));
  return tasks;
}

struct BankConfig {
  std::vector<Category> categories = bank_categories();
  int parents = 4;
  int children = 6;
  int waypoints = 15;
  double waypoint_dt = 1.0;
  double child_radius = 0.05;

  static BankConfig paper_scale() {
    BankConfig c;
    c.parents = 20;
    c.children = 20;
    return c;
  }
  static BankConfig desk_scale() { return BankConfig{}; }

  int pieces() const {
    const double span = (waypoints - 1) * waypoint_dt;
    return static_cast<int>(std::floor((span - 2.0 * kExcludedSeconds) / kPieceSeconds + 1e-9));
  }
  /// Number of (category, parent, piece) tuning batches.
  int batches() const { return static_cast<int>(categories.size()) * parents * pieces(); }
};

struct ParentRecord {
  Category category;
  int parent = 0;  // 0-based
  std::uint64_t seed = 0;
  WaypointSeq waypoints;
  PiecewisePolynomial poly;
  std::vector<WaypointSeq> child_waypoints;
  std::vector<PiecewisePolynomial> children;
};

struct CategoryBank {
  Category category;
  std::vector<ParentRecord> parents;
};

struct Bank {
  BankConfig config;
  std::uint64_t seed = 0;
  std::vector<CategoryBank> categories;

  const CategoryBank* find(const std::string& name) const {
    for (const CategoryBank& c : categories)
      if (c.category.name() == name) return &c;
    return nullptr;
  }
};

inline std::uint64_t parent_seed(std::uint64_t bank_seed, const Category& cat, int parent) {
  return derive_seed(bank_seed, {static_cast<std::uint64_t>(cat.speed_index),
                                 static_cast<std::uint64_t>(cat.curvature_index), static_cast<std::uint64_t>(parent)});
}

inline ParentRecord build_parent(const BankConfig& config, const Category& cat, int parent, std::uint64_t seed) {
  ParentRecord rec;
  rec.category = cat;
  rec.parent = parent;
  rec.seed = seed;
  rec.waypoints = sample_waypoints(cat, config.waypoints, config.waypoint_dt, derive_seed(seed, {1}));
  rec.poly = min_snap_fit(rec.waypoints);
  rec.child_waypoints = perturb_children(rec.waypoints, config.children, config.child_radius, derive_seed(seed, {2}));
  rec.children.reserve(rec.child_waypoints.size());
  for (const WaypointSeq& w : rec.child_waypoints) rec.children.push_back(min_snap_fit(w));
  return rec;
}

inline Bank build_bank(const BankConfig& config, std::uint64_t seed) {
  Bank bank;
  bank.config = config;
  bank.seed = seed;
  for (const Category& cat : config.categories) {
    CategoryBank cb;
    cb.category = cat;
    for (int p = 0; p < config.parents; ++p) {
      cb.parents.push_back(build_parent(config, cat, p, parent_seed(seed, cat, p)));
    }
    bank.categories.push_back(std::move(cb));
  }
  return bank;
}

struct SpeedCurvatureSample {
  double t, speed, curvature;
};

/// Speed and curvature |v x a| / |v|^3 of the fitted curve on [t0, t1].
inline std::vector<SpeedCurvatureSample> speed_curvature_profile(const PiecewisePolynomial& poly, double t0,
                                                                 double t1, double step) {
  std::vector<SpeedCurvatureSample> out;
  const int n = static_cast<int>(std::floor((t1 - t0) / step + 1e-9));
  for (int k = 0; k <= n; ++k) {
    const double t = t0 + k * step;
    const Vec3 v = poly.eval(t, 1);
    const Vec3 a = poly.eval(t, 2);
    const double speed = v.norm();
    const double curv = speed > 1e-9 ? v.cross(a).norm() / (speed * speed * speed) : 0.0;
    out.push_back({t, speed, curv});
  }
  return out;
}

}  // namespace tpn
