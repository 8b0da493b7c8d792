#pragma once

// Analytic ground-truth mechanical systems and dataset generation.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "phc/autodiff.hpp"
#include "phc/log.hpp"
#include "phc/odeint.hpp"
#include "phc/phmodel.hpp"

namespace phc {

enum class PlantKind { kPlanarPendulum, kTorsionalPendulum, kTwoLink };

inline std::string plant_kind_name(PlantKind k) {
  switch (k) {
    case PlantKind::kPlanarPendulum:
      return "planar-pendulum";
    case PlantKind::kTorsionalPendulum:
      return "torsional-pendulum";
    case PlantKind::kTwoLink:
      return "two-link-torsional";
  }
  return "unknown";
}

inline PlantKind parse_plant_kind(const std::string& s) {
  if (s == "planar-pendulum" || s == "planar") return PlantKind::kPlanarPendulum;
  if (s == "torsional-pendulum" || s == "torsional") return PlantKind::kTorsionalPendulum;
  if (s == "two-link-torsional" || s == "two-link") return PlantKind::kTwoLink;
  throw std::invalid_argument("unknown plant '" + s + "'");
}

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PlantSpec {
  PlantKind kind = PlantKind::kPlanarPendulum;
  std::map<std::string, double> params;

  int dof() const { return kind == PlantKind::kTwoLink ? 2 : 1; }
  int inputs() const { return kind == PlantKind::kTwoLink ? 2 : 1; }

  double at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ParameterError("plant parameter '" + name + "' missing");
    return it->second;
  }

  void validate() const {
    const char* positive[] = {"m", "l", "J", "r", "m1", "m2", "l1", "l2", "lc1", "lc2", "I1", "I2"};
    const char* nonnegative[] = {"k", "D", "Ks1", "Ks2", "d1", "d2", "g"};
    for (const char* p : positive) {
      auto it = params.find(p);
      if (it != params.end() && !(it->second > 0.0)) {
        throw ParameterError(std::string("plant parameter '") + p + "' must be positive");
      }
    }
    for (const char* p : nonnegative) {
      auto it = params.find(p);
      if (it != params.end() && !(it->second >= 0.0)) {
        throw ParameterError(std::string("plant parameter '") + p + "' must be non-negative");
      }
    }
    for (const auto& [name, v] : params) {
      if (!std::isfinite(v)) throw ParameterError("plant parameter '" + name + "' is not finite");
    }
  }

  static PlantSpec planar(double m = 1.0, double l = 1.0, double b = 1.0, double g = 9.81) {
    return {PlantKind::kPlanarPendulum, {{"m", m}, {"l", l}, {"b", b}, {"g", g}}};
  }

  /// Mass, length and input gain drawn from U(lo, 2); lo = 0.5 by default.
  static PlantSpec random_planar(std::uint64_t seed, double lo = 0.5, double g = 9.81) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(lo, 2.0);
    const double m = d(rng);
    const double l = d(rng);
    const double b = d(rng);
    if (b < 0.05) log::warning("random planar draw has input gain b = " + std::to_string(b) + ", nearly uncontrollable");
    return planar(m, l, b, g);
  }

  static PlantSpec torsional(double J = 1.0, double m = 1.0, double r = 1.0, double k = 0.5,
                             double D = 0.01, double g = 9.81) {
    return {PlantKind::kTorsionalPendulum,
            {{"J", J}, {"m", m}, {"r", r}, {"k", k}, {"D", D}, {"g", g}}};
  }

  static PlantSpec two_link(double g = 9.81) {
    return {PlantKind::kTwoLink,
            {{"m1", 1.0},
             {"m2", 1.0},
             {"l1", 1.0},
             {"l2", 1.0},
             {"lc1", 0.5},
             {"lc2", 0.5},
             {"I1", 1.0 / 12.0},
             {"I2", 1.0 / 12.0},
             {"Ks1", 0.5},
             {"Ks2", 0.5},
             {"qeq1", 0.0},
             {"qeq2", 0.0},
             {"d1", 0.0},
             {"d2", 0.0},
             {"g", g}}};
  }
};

class BoundPlant final : public BoundSystem {
 public:
  explicit BoundPlant(const PlantSpec& spec) : spec_(spec) {}

  int dof() const override { return spec_.dof(); }
  int inputs() const override { return spec_.inputs(); }

  BatchMatrix mass_inverse(const Var& q) const override {
    switch (spec_.kind) {
      case PlantKind::kPlanarPendulum: {
        BatchMatrix m(1, 1);
        m(0, 0) = Var(1.0 / (spec_.at("m") * sq(spec_.at("l"))));
        return m;
      }
      case PlantKind::kTorsionalPendulum: {
        BatchMatrix m(1, 1);
        m(0, 0) = Var(1.0 / spec_.at("J"));
        return m;
      }
      case PlantKind::kTwoLink: {
        const TwoLinkMass mm = two_link_mass(q);
        const Var det = mm.m11 * mm.m22 - mm.m12 * mm.m12;
        const Var inv = ad::reciprocal(det);
        BatchMatrix m(2, 2);
        m(0, 0) = mm.m22 * inv;
        m(0, 1) = -mm.m12 * inv;
        m(1, 0) = m(0, 1);
        m(1, 1) = mm.m11 * inv;
        return m;
      }
    }
    throw ParameterError("unknown plant");
  }

  Var potential(const Var& q) const override {
    const double g = spec_.at("g");
    switch (spec_.kind) {
      case PlantKind::kPlanarPendulum: {
        const double mgl = spec_.at("m") * g * spec_.at("l");
        return mgl * (1.0 - ad::cos(q));
      }
      case PlantKind::kTorsionalPendulum: {
        const double mgr = spec_.at("m") * g * spec_.at("r");
        return mgr * (1.0 - ad::cos(q)) + 0.5 * spec_.at("k") * ad::square(q);
      }
      case PlantKind::kTwoLink: {
        const Var q1 = ad::row(q, 0);
        const Var q2 = ad::row(q, 1);
        return gravity_potential(q1, q2) + elastic_potential(q1, q2);
      }
    }
    throw ParameterError("unknown plant");
  }

  BatchMatrix input_matrix(const Var&) const override {
    BatchMatrix g(dof(), inputs());
    switch (spec_.kind) {
      case PlantKind::kPlanarPendulum:
        g(0, 0) = Var(spec_.at("b"));
        break;
      case PlantKind::kTorsionalPendulum:
        g(0, 0) = Var(1.0);
        break;
      case PlantKind::kTwoLink:
        g(0, 0) = Var(1.0);
        g(1, 1) = Var(1.0);
        break;
    }
    return g;
  }

  BatchMatrix dissipation(const Var&) const override {
    BatchMatrix d(dof(), dof());
    switch (spec_.kind) {
      case PlantKind::kPlanarPendulum:
        break;
      case PlantKind::kTorsionalPendulum:
        d(0, 0) = Var(spec_.at("D"));
        break;
      case PlantKind::kTwoLink:
        d(0, 0) = Var(value_or("d1", 0.0));
        d(1, 1) = Var(value_or("d2", 0.0));
        break;
    }
    return d;
  }

  StateGradient grad_hamiltonian(const Var& z) const override {
    const Var q = positions(z);
    const Var p = momenta(z);
    switch (spec_.kind) {
      case PlantKind::kPlanarPendulum:
      case PlantKind::kTorsionalPendulum: {
        const Var dp = p * mass_inverse(q)(0, 0);
        return {grad_potential(q), dp};
      }
      case PlantKind::kTwoLink: {
        const Var qdot = apply(mass_inverse(q), p);
        const Var v1 = ad::row(qdot, 0);
        const Var v2 = ad::row(qdot, 1);
        // d/dq2 of 1/2 p^T M^{-1} p = -1/2 qdot^T (dM/dq2) qdot.
        const double a = spec_.at("m2") * spec_.at("l1") * spec_.at("lc2");
        const Var kin2 = a * ad::sin(ad::row(q, 1)) * (ad::square(v1) + v1 * v2);
        const Var dv = grad_potential(q);
        const Var dq = ad::concat_rows({ad::row(dv, 0), ad::row(dv, 1) + kin2});
        return {dq, qdot};
      }
    }
    throw ParameterError("unknown plant");
  }

  /// Gradient of the potential energy, n x B.
  Var grad_potential(const Var& q) const {
    const double g = spec_.at("g");
    switch (spec_.kind) {
      case PlantKind::kPlanarPendulum:
        return (spec_.at("m") * g * spec_.at("l")) * ad::sin(q);
      case PlantKind::kTorsionalPendulum:
        return (spec_.at("m") * g * spec_.at("r")) * ad::sin(q) + spec_.at("k") * q;
      case PlantKind::kTwoLink: {
        const Var g_parts = grad_gravity(q);
        const Var e_parts = grad_elastic(q);
        return g_parts + e_parts;
      }
    }
    throw ParameterError("unknown plant");
  }

  /// Two-link only: gradients of the gravitational and spring potentials.
  Var grad_gravity(const Var& q) const {
    const double g = spec_.at("g");
    const Var q1 = ad::row(q, 0);
    const Var s12 = ad::sin(q1 + ad::row(q, 1));
    const double c1 = (spec_.at("m1") * spec_.at("lc1") + spec_.at("m2") * spec_.at("l1")) * g;
    const double c2 = spec_.at("m2") * spec_.at("lc2") * g;
    return ad::concat_rows({c1 * ad::sin(q1) + c2 * s12, c2 * s12});
  }

  Var grad_elastic(const Var& q) const {
    return ad::concat_rows({spec_.at("Ks1") * (ad::row(q, 0) - value_or("qeq1", 0.0)),
                            spec_.at("Ks2") * (ad::row(q, 1) - value_or("qeq2", 0.0))});
  }

  const PlantSpec& spec() const { return spec_; }

 private:
  struct TwoLinkMass {
    Var m11, m12, m22;
  };

  static double sq(double x) { return x * x; }

  double value_or(const char* name, double fallback) const {
    auto it = spec_.params.find(name);
    return it == spec_.params.end() ? fallback : it->second;
  }

  TwoLinkMass two_link_mass(const Var& q) const {
    const double m1 = spec_.at("m1"), m2 = spec_.at("m2"), l1 = spec_.at("l1");
    const double lc1 = spec_.at("lc1"), lc2 = spec_.at("lc2");
    const double i1 = spec_.at("I1"), i2 = spec_.at("I2");
    const Var c2 = ad::cos(ad::row(q, 1));
    const double a = m2 * l1 * lc2;
    const double base22 = m2 * lc2 * lc2 + i2;
    return {(m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2) + i1 + i2) + (2.0 * a) * c2,
            base22 + a * c2, constant_row(q, base22)};
  }

  static Var constant_row(const Var& like, double v) {
    return ad::constant_like(like, Matrix::Constant(1, like.cols(), v));
  }

  Var gravity_potential(const Var& q1, const Var& q2) const {
    const double g = spec_.at("g");
    const double c1 = (spec_.at("m1") * spec_.at("lc1") + spec_.at("m2") * spec_.at("l1")) * g;
    const double c2 = spec_.at("m2") * spec_.at("lc2") * g;
    return -c1 * ad::cos(q1) - c2 * ad::cos(q1 + q2);
  }

  Var elastic_potential(const Var& q1, const Var& q2) const {
    return 0.5 * spec_.at("Ks1") * ad::square(q1 - value_or("qeq1", 0.0)) +
           0.5 * spec_.at("Ks2") * ad::square(q2 - value_or("qeq2", 0.0));
  }

  PlantSpec spec_;
};

/// Ground-truth system described by a PlantSpec.
class AnalyticPlant final : public PortHamiltonianSystem {
 public:
  explicit AnalyticPlant(PlantSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  int dof() const override { return spec_.dof(); }
  int inputs() const override { return spec_.inputs(); }
  const PlantSpec& spec() const { return spec_; }

  std::unique_ptr<BoundSystem> bind(ad::Tape*, bool = false) const override {
    return std::make_unique<BoundPlant>(spec_);
  }
  BoundPlant bind_plant() const { return BoundPlant(spec_); }

  std::unique_ptr<PortHamiltonianSystem> clone() const override {
    return std::make_unique<AnalyticPlant>(*this);
  }

  /// Inertia matrix M(q) (inverse of mass_inverse).
  Eigen::MatrixXd mass_matrix(const Eigen::VectorXd& q) const {
    return phc::mass_inverse(*this, q).inverse();
  }

  Eigen::VectorXd momentum(const Eigen::VectorXd& q, const Eigen::VectorXd& qdot) const {
    return mass_matrix(q) * qdot;
  }

  Eigen::VectorXd velocity(const Eigen::VectorXd& z) const {
    const Eigen::Index n = z.size() / 2;
    return phc::mass_inverse(*this, z.head(n)) * z.tail(n);
  }

 private:
  PlantSpec spec_;
};

/// q ~ U(-2pi, 2pi)^n and qdot ~ U(-pi, pi)^n; p = M(q) qdot. Returns stacked
/// phase states.
inline std::vector<Eigen::VectorXd> sample_ics(const AnalyticPlant& plant, std::size_t count,
                                               std::uint64_t seed, double q_range = 2.0 * M_PI,
                                               double qdot_range = M_PI) {
  if (count == 0) throw std::invalid_argument("sample_ics: need at least one sample");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dq(-q_range, q_range);
  std::uniform_real_distribution<double> dv(-qdot_range, qdot_range);
  const int n = plant.dof();
  std::vector<Eigen::VectorXd> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    Eigen::VectorXd q(n), v(n);
    for (int i = 0; i < n; ++i) q(i) = dq(rng);
    for (int i = 0; i < n; ++i) v(i) = dv(rng);
    Eigen::VectorXd z(2 * n);
    z << q, plant.momentum(q, v);
    out.push_back(z);
  }
  return out;
}

struct Dataset {
  std::string provenance = "step-excited";  // or "policy-excited"
  std::vector<Trajectory> trajectories;
  std::vector<Eigen::VectorXd> levels;  // excitation level of each trajectory (step-excited)
  std::string policy_id;
  double dt = 0.0;
  double horizon = 0.0;
  std::size_t failures = 0;

  std::size_t size() const { return trajectories.size(); }
};

/// Excitation levels: the scalar grid for m = 1, the per-channel Cartesian
/// product for m > 1, evenly subsampled to at most `max_combinations`.
inline std::vector<Eigen::VectorXd> excitation_levels(const std::vector<double>& grid, int inputs,
                                                      std::size_t max_combinations = 25) {
  if (grid.empty()) throw std::invalid_argument("excitation grid is empty");
  std::vector<Eigen::VectorXd> all;
  std::vector<std::size_t> idx(static_cast<std::size_t>(inputs), 0);
  while (true) {
    Eigen::VectorXd u(inputs);
    for (int i = 0; i < inputs; ++i) u(i) = grid[idx[static_cast<std::size_t>(i)]];
    all.push_back(u);
    int d = inputs - 1;
    while (d >= 0 && ++idx[static_cast<std::size_t>(d)] == grid.size()) {
      idx[static_cast<std::size_t>(d)] = 0;
      --d;
    }
    if (d < 0) break;
  }
  if (inputs == 1 || all.size() <= max_combinations) return all;
  std::vector<Eigen::VectorXd> picked;
  for (std::size_t i = 0; i < max_combinations; ++i) {
    picked.push_back(all[i * all.size() / max_combinations]);
  }
  return picked;
}

/// One constant-input rollout per (initial state, level) pair on the true plant.
inline Dataset step_excited_dataset(const PortHamiltonianSystem& plant,
                                    const std::vector<Eigen::VectorXd>& ics,
                                    const std::vector<Eigen::VectorXd>& levels, double horizon,
                                    double dt, const BatchOptions& opt = {}) {
  if (levels.empty()) throw std::invalid_argument("step_excited_dataset: no levels");
  const BatchField f = make_field(plant);
  Dataset ds;
  ds.provenance = "step-excited";
  ds.dt = dt;
  ds.horizon = horizon;
  for (const Eigen::VectorXd& level : levels) {
    if (level.size() != plant.inputs()) throw ad::ShapeError("excitation level has wrong size");
  }
  for (std::size_t i = 0; i < ics.size(); ++i) {
    ds.levels.insert(ds.levels.end(), levels.begin(), levels.end());
  }
  // Group by level so each batch shares one constant input.
  std::vector<Trajectory> ordered(ics.size() * levels.size());
  std::vector<bool> ok(ordered.size(), false);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const BatchRollout r = rollout_batch(f, ics, constant_controller(levels[l]), horizon, dt, opt);
    for (std::size_t i = 0; i < ics.size(); ++i) {
      if (r.ok(i)) {
        ordered[i * levels.size() + l] = r.trajectories[i];
        ok[i * levels.size() + l] = true;
      }
    }
  }
  std::vector<Eigen::VectorXd> kept_levels;
  for (std::size_t j = 0; j < ordered.size(); ++j) {
    if (ok[j]) {
      ds.trajectories.push_back(std::move(ordered[j]));
      kept_levels.push_back(ds.levels[j]);
    } else {
      ++ds.failures;
    }
  }
  ds.levels = std::move(kept_levels);
  return ds;
}

/// Closed-loop rollouts of the true plant under `controller`.
inline Dataset policy_excited_dataset(const PortHamiltonianSystem& plant,
                                      const Controller& controller,
                                      const std::vector<Eigen::VectorXd>& ics, double horizon,
                                      double dt, const std::string& policy_id = "",
                                      const BatchOptions& opt = {}) {
  const BatchRollout r = rollout_batch(make_field(plant), ics, controller, horizon, dt, opt);
  Dataset ds;
  ds.provenance = "policy-excited";
  ds.policy_id = policy_id;
  ds.dt = dt;
  ds.horizon = horizon;
  for (std::size_t i = 0; i < ics.size(); ++i) {
    if (r.ok(i)) {
      ds.trajectories.push_back(r.trajectories[i]);
    } else {
      ++ds.failures;
    }
  }
  return ds;
}

/// Splits every trajectory into consecutive windows of `knots` knots.
inline Dataset split_windows(const Dataset& ds, std::size_t knots) {
  if (knots < 2) throw std::invalid_argument("windows need at least two knots");
  Dataset out = ds;
  out.trajectories.clear();
  out.levels.clear();
  out.horizon = static_cast<double>(knots - 1) * ds.dt;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& tr = ds.trajectories[i];
    for (std::size_t first = 0; first + knots <= tr.size(); first += knots - 1) {
      out.trajectories.push_back(tr.window(first, knots));
      if (i < ds.levels.size()) out.levels.push_back(ds.levels[i]);
    }
  }
  return out;
}

}  // namespace phc
