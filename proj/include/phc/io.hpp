#pragma once

// JSON checkpoints for models, policies and baseline gains; dataset
// directories; number formatting shared by the CSV writers.

#include <Eigen/Dense>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "phc/mlp.hpp"
#include "phc/odeint.hpp"
#include "phc/phmodel.hpp"
#include "phc/plants.hpp"

namespace phc::io {

using Json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest text that reads back to the same double ("%.17g").
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& j) {
  if (!j.is_array()) throw FormatError("matrix must be a list of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? 0 : static_cast<Eigen::Index>(j.at(0).size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j.at(static_cast<std::size_t>(r));
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw FormatError("ragged matrix");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

inline Json vector_to_json(const Eigen::VectorXd& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Eigen::VectorXd vector_from_json(const Json& j) {
  if (!j.is_array()) throw FormatError("vector must be a list");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

inline Json params_to_json(const ad::ParamSet& p) {
  Json o = Json::object();
  for (const auto& [name, value] : p) o[name] = matrix_to_json(value);
  return o;
}

inline ad::ParamSet params_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("parameters must be an object");
  ad::ParamSet p;
  for (auto it = j.begin(); it != j.end(); ++it) p.add(it.key(), matrix_from_json(it.value()));
  return p;
}

inline void check_header(const Json& j, const std::string& kind) {
  if (!j.contains("version") || j["version"].get<int>() != kFormatVersion) {
    throw FormatError("unsupported checkpoint version");
  }
  if (!j.contains("kind") || j["kind"].get<std::string>() != kind) {
    throw FormatError("checkpoint kind is not '" + kind + "'");
  }
}

inline Json model_to_json(const StructuredPHModel& m) {
  Json j;
  j["version"] = kFormatVersion;
  j["kind"] = "model";
  j["n"] = m.config.dof;
  j["m"] = m.config.inputs;
  j["arch"] = {{"mass", m.config.mass_net.to_string()},
               {"potential", m.config.potential_net.to_string()},
               {"input", m.config.input_net.to_string()},
               {"damping", m.config.learn_damping ? m.config.damping_net.to_string() : ""}};
  j["angle_features"] = m.config.angle_features;
  j["learn_damping"] = m.config.learn_damping;
  j["mass_floor"] = m.config.mass_floor;
  j["damping_floor"] = m.config.damping_floor;
  j["anchor"] = m.anchor;
  j["seeds"] = {{"init", m.seed}};
  j["parameters"] = params_to_json(m.params);
  return j;
}

inline StructuredPHModel model_from_json(const Json& j) {
  check_header(j, "model");
  StructuredPHModel m;
  ModelConfig& c = m.config;
  c.dof = j.at("n").get<int>();
  c.inputs = j.at("m").get<int>();
  c.angle_features = j.value("angle_features", false);
  c.learn_damping = j.value("learn_damping", true);
  c.mass_floor = j.value("mass_floor", 1e-6);
  c.damping_floor = j.value("damping_floor", 0.0);
  const Json& a = j.at("arch");
  c.mass_net = ad::Architecture::parse(a.at("mass").get<std::string>());
  c.potential_net = ad::Architecture::parse(a.at("potential").get<std::string>());
  c.input_net = ad::Architecture::parse(a.at("input").get<std::string>());
  if (c.learn_damping) c.damping_net = ad::Architecture::parse(a.at("damping").get<std::string>());
  c.validate();
  m.anchor = j.value("anchor", 0.0);
  m.seed = j.at("seeds").value("init", std::uint64_t{0});
  m.params = params_from_json(j.at("parameters"));
  // Binding checks every shape against the architecture.
  m.bind(nullptr);
  return m;
}

inline Json policy_to_json(const EnergyShapingPolicy& p) {
  Json j;
  j["version"] = kFormatVersion;
  j["kind"] = "policy";
  j["n"] = p.config.dof;
  j["m"] = p.config.inputs;
  j["arch"] = {{"shaping", p.config.potential_net.to_string()},
               {"injection", p.config.damping_net.to_string()}};
  j["kappa"] = p.config.kappa;
  j["target"] = vector_to_json(p.config.target);
  j["seeds"] = {{"init", p.seed}};
  j["parameters"] = params_to_json(p.params);
  return j;
}

inline EnergyShapingPolicy policy_from_json(const Json& j) {
  check_header(j, "policy");
  EnergyShapingPolicy p;
  PolicyConfig& c = p.config;
  c.dof = j.at("n").get<int>();
  c.inputs = j.at("m").get<int>();
  c.potential_net = ad::Architecture::parse(j.at("arch").at("shaping").get<std::string>());
  c.damping_net = ad::Architecture::parse(j.at("arch").at("injection").get<std::string>());
  c.kappa = j.at("kappa").get<double>();
  c.target = vector_from_json(j.at("target"));
  c.validate();
  p.seed = j.at("seeds").value("init", std::uint64_t{0});
  p.params = params_from_json(j.at("parameters"));
  p.bind(nullptr);
  return p;
}

inline Json plant_to_json(const PlantSpec& s) {
  Json j;
  j["kind"] = plant_kind_name(s.kind);
  Json params = Json::object();
  for (const auto& [k, v] : s.params) params[k] = v;
  j["params"] = params;
  return j;
}

inline PlantSpec plant_from_json(const Json& j) {
  PlantSpec s;
  s.kind = parse_plant_kind(j.at("kind").get<std::string>());
  for (auto it = j.at("params").begin(); it != j.at("params").end(); ++it) {
    s.params[it.key()] = it.value().get<double>();
  }
  s.validate();
  return s;
}

/// Baseline controller gains (PD+ or standard EB-PBC).
struct GainsCheckpoint {
  std::string kind;  // "pd-plus" or "standard-ebpbc"
  Eigen::VectorXd kp;
  Eigen::VectorXd kd;
  Eigen::VectorXd target;
  bool printed_sign = false;
};

inline Json gains_to_json(const GainsCheckpoint& g) {
  Json j;
  j["version"] = kFormatVersion;
  j["kind"] = g.kind;
  j["kp"] = vector_to_json(g.kp);
  j["kd"] = vector_to_json(g.kd);
  j["target"] = vector_to_json(g.target);
  j["printed_sign"] = g.printed_sign;
  return j;
}

inline GainsCheckpoint gains_from_json(const Json& j) {
  GainsCheckpoint g;
  g.kind = j.at("kind").get<std::string>();
  if (g.kind != "pd-plus" && g.kind != "standard-ebpbc") throw FormatError("not a gains checkpoint");
  g.kp = vector_from_json(j.at("kp"));
  g.kd = vector_from_json(j.at("kd"));
  g.target = vector_from_json(j.at("target"));
  g.printed_sign = j.value("printed_sign", false);
  return g;
}

inline void save_json(const std::filesystem::path& path, const Json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline Json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// --- dataset directories -----------------------------------------------------

struct DatasetMeta {
  PlantSpec plant;
  std::uint64_t seed = 0;
  int n = 1;
  int m = 1;
  std::size_t count = 0;
};

inline std::string trajectory_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "traj_%05zu.csv", i);
  return buf;
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds,
                          const PlantSpec& plant, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  Json meta;
  meta["version"] = kFormatVersion;
  meta["plant"] = plant_to_json(plant);
  meta["seed"] = seed;
  meta["dt"] = ds.dt;
  meta["T"] = ds.horizon;
  meta["provenance"] = ds.provenance;
  meta["policy_id"] = ds.policy_id;
  meta["n"] = plant.dof();
  meta["m"] = plant.inputs();
  meta["count"] = ds.size();
  meta["failures"] = ds.failures;
  Json levels = Json::array();
  for (const auto& l : ds.levels) levels.push_back(vector_to_json(l));
  meta["levels"] = levels;
  save_json(dir / "meta.json", meta);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_trajectory_csv((dir / trajectory_file(i)).string(), ds.trajectories[i], plant.inputs());
  }
}

inline Dataset read_dataset(const std::filesystem::path& dir, DatasetMeta* meta_out = nullptr) {
  const Json meta = load_json(dir / "meta.json");
  Dataset ds;
  DatasetMeta m;
  m.plant = plant_from_json(meta.at("plant"));
  m.seed = meta.value("seed", std::uint64_t{0});
  m.n = meta.at("n").get<int>();
  m.m = meta.at("m").get<int>();
  m.count = meta.at("count").get<std::size_t>();
  ds.dt = meta.at("dt").get<double>();
  ds.horizon = meta.at("T").get<double>();
  ds.provenance = meta.at("provenance").get<std::string>();
  ds.policy_id = meta.value("policy_id", "");
  ds.failures = meta.value("failures", std::size_t{0});
  for (const auto& l : meta.value("levels", Json::array())) ds.levels.push_back(vector_from_json(l));
  for (std::size_t i = 0; i < m.count; ++i) {
    ds.trajectories.push_back(read_trajectory_csv((dir / trajectory_file(i)).string(), m.n, m.m));
  }
  if (meta_out != nullptr) *meta_out = m;
  return ds;
}

}  // namespace phc::io
