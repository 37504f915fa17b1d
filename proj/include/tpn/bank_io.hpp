#pragma once

// On-disk bank layout:
//
//   <dir>/bank.json                 bank header (format, version, config, seed)
//   <dir>/S{i}C{j}/parent_{pp}.json one record per parent
//
// Doubles go through nlohmann::json, whose shortest round-trip printing makes
// write -> read bit-exact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "tpn/errors.hpp"
#include "tpn/rng.hpp"
#include "tpn/traj_bank.hpp"

namespace tpn {

using Json = nlohmann::json;

inline constexpr int kBankFormatVersion = 1;

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

inline Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::Format, path.string() + ": " + e.what());
  }
}

inline void require_format(const Json& j, const char* format, int version, const std::string& where) {
  if (!j.is_object() || j.value("format", "") != format)
    throw Error(ErrorCode::Format, where + ": expected a " + std::string(format) + " record");
  if (j.value("version", -1) != version)
    throw Error(ErrorCode::Format, where + ": unsupported " + std::string(format) + " version");
}

inline Json to_json(const Interval& i) { return Json::array({i.lo, i.hi}); }
inline Interval interval_from_json(const Json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline Json to_json(const Category& c) {
  return {{"name", c.name()},
          {"speed_index", c.speed_index},
          {"curvature_index", c.curvature_index},
          {"speed", to_json(c.speed)},
          {"curvature", to_json(c.curvature)}};
}

inline Category category_from_json(const Json& j) {
  Category c;
  c.speed_index = j.at("speed_index").get<int>();
  c.curvature_index = j.at("curvature_index").get<int>();
  c.speed = interval_from_json(j.at("speed"));
  c.curvature = interval_from_json(j.at("curvature"));
  return c;
}

inline Json to_json(const WaypointSeq& w) {
  Json arr = Json::array();
  for (const Waypoint& p : w) arr.push_back({p.t, p.p.x(), p.p.y()});
  return arr;
}

inline WaypointSeq waypoints_from_json(const Json& j) {
  WaypointSeq out;
  for (const Json& row : j) {
    Waypoint w;
    w.t = row.at(0).get<double>();
    w.p = Vec3(row.at(1).get<double>(), row.at(2).get<double>(), 0.0);
    out.push_back(w);
  }
  return out;
}

inline Json to_json(const PiecewisePolynomial& poly) {
  auto coeffs = [](const std::vector<Coeffs>& axis) {
    Json arr = Json::array();
    for (const Coeffs& c : axis) arr.push_back(Json(std::vector<double>(c.begin(), c.end())));
    return arr;
  };
  return {{"knots", poly.knots()}, {"x", coeffs(poly.x())}, {"y", coeffs(poly.y())}};
}

inline PiecewisePolynomial polynomial_from_json(const Json& j) {
  auto coeffs = [](const Json& arr) {
    std::vector<Coeffs> out;
    for (const Json& row : arr) {
      if (row.size() != kPolyCoeffs) throw Error(ErrorCode::Format, "segment must have 8 coefficients");
      Coeffs c{};
      for (int i = 0; i < kPolyCoeffs; ++i) c[i] = row.at(i).get<double>();
      out.push_back(c);
    }
    return out;
  };
  std::vector<double> knots = j.at("knots").get<std::vector<double>>();
  std::vector<Coeffs> x = coeffs(j.at("x")), y = coeffs(j.at("y"));
  if (x.size() != y.size() || knots.size() != x.size() + 1)
    throw Error(ErrorCode::Format, "polynomial knots and segments disagree");
  return PiecewisePolynomial(std::move(knots), std::move(x), std::move(y));
}

inline Json to_json(const BankConfig& c) {
  Json cats = Json::array();
  for (const Category& cat : c.categories) cats.push_back(to_json(cat));
  return {{"categories", cats},
          {"parents", c.parents},
          {"children", c.children},
          {"waypoints", c.waypoints},
          {"waypoint_dt", c.waypoint_dt},
          {"child_radius", c.child_radius}};
}

inline BankConfig bank_config_from_json(const Json& j, BankConfig c = {}) {
  if (j.contains("categories")) {
    c.categories.clear();
    for (const Json& cat : j.at("categories")) c.categories.push_back(category_from_json(cat));
  }
  c.parents = j.value("parents", c.parents);
  c.children = j.value("children", c.children);
  c.waypoints = j.value("waypoints", c.waypoints);
  c.waypoint_dt = j.value("waypoint_dt", c.waypoint_dt);
  c.child_radius = j.value("child_radius", c.child_radius);
  return c;
}

inline Json to_json(const ParentRecord& rec) {
  Json children = Json::array();
  for (std::size_t c = 0; c < rec.children.size(); ++c)
    children.push_back({{"waypoints", to_json(rec.child_waypoints[c])}, {"poly", to_json(rec.children[c])}});
  return {{"format", "tpn-bank-parent"},
          {"version", kBankFormatVersion},
          {"category", to_json(rec.category)},
          {"parent", rec.parent},
          {"seed", rec.seed},
          {"waypoints", to_json(rec.waypoints)},
          {"poly", to_json(rec.poly)},
          {"children", children}};
}

inline ParentRecord parent_from_json(const Json& j, const std::string& where) {
  require_format(j, "tpn-bank-parent", kBankFormatVersion, where);
  ParentRecord rec;
  rec.category = category_from_json(j.at("category"));
  rec.parent = j.at("parent").get<int>();
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.waypoints = waypoints_from_json(j.at("waypoints"));
  rec.poly = polynomial_from_json(j.at("poly"));
  for (const Json& c : j.at("children")) {
    rec.child_waypoints.push_back(waypoints_from_json(c.at("waypoints")));
    rec.children.push_back(polynomial_from_json(c.at("poly")));
  }
  return rec;
}

inline std::string parent_file_name(int parent) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "parent_%02d.json", parent);
  return buf;
}

inline void write_bank(const Bank& bank, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const Json header = {{"format", "tpn-bank"},
                       {"version", kBankFormatVersion},
                       {"seed", bank.seed},
                       {"config", to_json(bank.config)}};
  write_text(dir / "bank.json", header.dump(2) + "\n");
  for (const CategoryBank& cb : bank.categories) {
    for (const ParentRecord& rec : cb.parents)
      write_text(dir / cb.category.name() / parent_file_name(rec.parent), to_json(rec).dump() + "\n");
  }
}

inline Bank read_bank(const std::filesystem::path& dir) {
  const Json header = read_json(dir / "bank.json");
  require_format(header, "tpn-bank", kBankFormatVersion, (dir / "bank.json").string());
  Bank bank;
  bank.seed = header.at("seed").get<std::uint64_t>();
  bank.config = bank_config_from_json(header.at("config"));
  for (const Category& cat : bank.config.categories) {
    CategoryBank cb;
    cb.category = cat;
    for (int p = 0; p < bank.config.parents; ++p) {
      const auto path = dir / cat.name() / parent_file_name(p);
      cb.parents.push_back(parent_from_json(read_json(path), path.string()));
    }
    bank.categories.push_back(std::move(cb));
  }
  return bank;
}

/// Content hash of the serialized bank; independent of where it is stored.
inline std::string bank_hash(const Bank& bank) {
  std::string blob = to_json(bank.config).dump() + std::to_string(bank.seed);
  for (const CategoryBank& cb : bank.categories)
    for (const ParentRecord& rec : cb.parents) blob += to_json(rec).dump();
  return hex64(fnv1a64(blob));
}

}  // namespace tpn
