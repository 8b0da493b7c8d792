#pragma once

// Command-line entry points: data generation, training, evaluation,
// certification and plot export, all writing into a run directory.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "phc/eval.hpp"
#include "phc/io.hpp"
#include "phc/log.hpp"
#include "phc/training.hpp"

namespace phc::cli {

namespace fs = std::filesystem;
using io::Json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitNumeric = 2;

/// Everything a run needs; serialized to config.json.
struct RunConfig {
  std::string mode = "desk";  // desk | strict-paper
  TaskKind task = TaskKind::kStabilization;
  std::string model_source = "learned";  // learned | exact
  std::string baseline;                  // empty, pd-plus or standard-ebpbc
  bool printed_sign = false;             // PD+ sign exactly as printed
  int eval_ics = 64;
  double eval_horizon = 0.0;  // 0 means the cost horizon
  AlternationConfig alt;

  double evaluation_horizon() const { return eval_horizon > 0.0 ? eval_horizon : alt.cost.horizon; }
};

inline Eigen::VectorXd default_target(PlantKind kind) {
  switch (kind) {
    case PlantKind::kPlanarPendulum:
      return Eigen::Vector2d::Zero();
    case PlantKind::kTorsionalPendulum:
      return Eigen::Vector2d(M_PI, 0.0);
    case PlantKind::kTwoLink:
      return Eigen::Vector4d(M_PI, 0.0, 0.0, 0.0);
  }
  throw std::invalid_argument("unknown plant");
}

inline void check_mode(const std::string& mode) {
  if (mode != "desk" && mode != "strict-paper") {
    throw std::invalid_argument("mode must be desk or strict-paper, got '" + mode + "'");
  }
}

/// Defaults for a plant: stabilization for the planar pendulum, swing-up for
/// the torsional ones.
inline RunConfig preset(PlantKind kind, const std::string& mode, std::uint64_t seed) {
  check_mode(mode);
  const bool strict = mode == "strict-paper";
  RunConfig rc;
  rc.mode = mode;
  rc.printed_sign = strict;
  AlternationConfig& a = rc.alt;
  a.seed = seed;
  switch (kind) {
    case PlantKind::kPlanarPendulum:
      a.plant = strict ? PlantSpec::random_planar(derive_seed(seed, 0x9a), 0.0) : PlantSpec::planar();
      rc.task = TaskKind::kStabilization;
      break;
    case PlantKind::kTorsionalPendulum:
      a.plant = PlantSpec::torsional();
      rc.task = TaskKind::kSwingUp;
      break;
    case PlantKind::kTwoLink:
      a.plant = PlantSpec::two_link();
      rc.task = TaskKind::kSwingUp;
      break;
  }
  const int n = a.plant.dof();
  const int m = a.plant.inputs();
  const Eigen::VectorXd target = default_target(kind);
  const bool angle = kind == PlantKind::kPlanarPendulum;
  a.model = strict ? ModelConfig::paper(n, m, angle) : ModelConfig::desk(n, m, angle);
  a.policy = strict ? PolicyConfig::paper(n, m, target) : PolicyConfig::desk(n, m, target);
  a.cost = rc.task == TaskKind::kStabilization ? CostConfig::stabilization(target)
                                               : CostConfig::swing_up(target);
  a.ics = strict ? 512 : 64;
  a.holdout_ics = strict ? 128 : 32;
  a.warmup.batch_size = 64;
  a.theta.batch_size = 64;
  a.theta.epochs = 50;
  a.phi.batch_size = a.ics;
  a.phi.adam = {1e-2, 1e-5};
  a.phi.adam.clip_norm = 100.0;
  a.phi.resample = false;
  return rc;
}

inline RunConfig preset(PlantKind kind, TaskKind task, const std::string& mode, std::uint64_t seed) {
  RunConfig rc = preset(kind, mode, seed);
  rc.task = task;
  const Eigen::VectorXd target = rc.alt.cost.target;
  rc.alt.cost = task == TaskKind::kStabilization ? CostConfig::stabilization(target)
                                                 : CostConfig::swing_up(target);
  return rc;
}

// --- config serialization ------------------------------------------------------

inline Json adam_to_json(const AdamConfig& a) {
  return {{"lr_max", a.lr_max},           {"lr_min", a.lr_min}, {"beta1", a.beta1},
          {"beta2", a.beta2},             {"eps", a.eps},       {"weight_decay", a.weight_decay},
          {"clip_norm", a.clip_norm}};
}

inline void adam_from_json(const Json& j, AdamConfig& a) {
  a.lr_max = j.value("lr_max", a.lr_max);
  a.lr_min = j.value("lr_min", a.lr_min);
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  a.weight_decay = j.value("weight_decay", a.weight_decay);
  a.clip_norm = j.value("clip_norm", a.clip_norm);
}

inline Json sysid_to_json(const SysIdConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"adam", adam_to_json(c.adam)}};
}

inline void sysid_from_json(const Json& j, SysIdConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("adam")) adam_from_json(j.at("adam"), c.adam);
}

inline Json phi_to_json(const PolicyTrainConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"resample", c.resample},
          {"adam", adam_to_json(c.adam)}};
}

inline void phi_from_json(const Json& j, PolicyTrainConfig& c) {
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.resample = j.value("resample", c.resample);
  if (j.contains("adam")) adam_from_json(j.at("adam"), c.adam);
}

inline Json cost_to_json(const CostConfig& c) {
  Json j{{"task", task_name(c.task)},
         {"eta", c.eta},
         {"sigma2", c.sigma2},
         {"lambda_diss", c.lambda_diss},
         {"rho", c.rho},
         {"horizon", c.horizon},
         {"dt", c.dt},
         {"target", io::vector_to_json(c.target)},
         {"wrap_angles", c.wrap_angles}};
  j["q_weight"] = c.q_weight.size() == 0 ? Json(nullptr) : io::matrix_to_json(c.q_weight);
  return j;
}

inline void cost_from_json(const Json& j, CostConfig& c) {
  if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
  c.eta = j.value("eta", c.eta);
  c.sigma2 = j.value("sigma2", c.sigma2);
  c.lambda_diss = j.value("lambda_diss", c.lambda_diss);
  c.rho = j.value("rho", c.rho);
  c.horizon = j.value("horizon", c.horizon);
  c.dt = j.value("dt", c.dt);
  c.wrap_angles = j.value("wrap_angles", c.wrap_angles);
  if (j.contains("target")) c.target = io::vector_from_json(j.at("target"));
  if (j.contains("q_weight")) {
    c.q_weight = j.at("q_weight").is_null() ? Eigen::MatrixXd() : io::matrix_from_json(j.at("q_weight"));
  }
}

inline Json config_to_json(const RunConfig& rc) {
  const AlternationConfig& a = rc.alt;
  Json j;
  j["version"] = io::kFormatVersion;
  j["mode"] = rc.mode;
  j["task"] = task_name(rc.task);
  j["model_source"] = rc.model_source;
  j["baseline"] = rc.baseline;
  j["printed_sign"] = rc.printed_sign;
  j["seed"] = a.seed;
  j["workers"] = a.workers;
  j["plant"] = io::plant_to_json(a.plant);
  j["model"] = {{"mass", a.model.mass_net.to_string()},
                {"potential", a.model.potential_net.to_string()},
                {"input", a.model.input_net.to_string()},
                {"damping", a.model.damping_net.to_string()},
                {"angle_features", a.model.angle_features},
                {"learn_damping", a.model.learn_damping}};
  j["policy"] = {{"shaping", a.policy.potential_net.to_string()},
                 {"injection", a.policy.damping_net.to_string()},
                 {"kappa", a.policy.kappa}};
  j["cost"] = cost_to_json(a.cost);
  j["warmup"] = sysid_to_json(a.warmup);
  j["theta"] = sysid_to_json(a.theta);
  j["phi"] = phi_to_json(a.phi);
  j["rounds"] = a.rounds;
  j["ics"] = a.ics;
  j["holdout_ics"] = a.holdout_ics;
  j["levels"] = a.levels;
  j["data_horizon"] = a.data_horizon;
  j["data_dt"] = a.data_dt;
  j["collect_horizon"] = a.collect_horizon;
  j["policy_fraction"] = a.policy_fraction;
  j["q_range"] = a.q_range;
  j["qdot_range"] = a.qdot_range;
  j["anchor"] = a.anchor;
  j["eval_ics"] = rc.eval_ics;
  j["eval_horizon"] = rc.eval_horizon;
  return j;
}

/// Applies the keys present in `j` on top of `rc`.
inline void apply_config(const Json& j, RunConfig& rc) {
  AlternationConfig& a = rc.alt;
  rc.mode = j.value("mode", rc.mode);
  check_mode(rc.mode);
  if (j.contains("task")) rc.task = parse_task(j.at("task").get<std::string>());
  rc.model_source = j.value("model_source", rc.model_source);
  rc.baseline = j.value("baseline", rc.baseline);
  rc.printed_sign = j.value("printed_sign", rc.printed_sign);
  a.seed = j.value("seed", a.seed);
  a.workers = j.value("workers", a.workers);
  if (j.contains("plant")) {
    const Json& pj = j.at("plant");
    if (pj.contains("kind") && parse_plant_kind(pj.at("kind").get<std::string>()) != a.plant.kind) {
      throw std::invalid_argument("plant kind differs from the preset being overridden");
    }
    if (pj.contains("params")) {
      for (auto it = pj.at("params").begin(); it != pj.at("params").end(); ++it) {
        a.plant.params[it.key()] = it.value().get<double>();
      }
    }
    a.plant.validate();
  }
  if (j.contains("model")) {
    const Json& m = j.at("model");
    a.model.dof = a.plant.dof();
    a.model.inputs = a.plant.inputs();
    a.model.angle_features = m.value("angle_features", a.model.angle_features);
    a.model.learn_damping = m.value("learn_damping", a.model.learn_damping);
    if (m.contains("mass")) a.model.mass_net = ad::Architecture::parse(m.at("mass").get<std::string>());
    if (m.contains("potential")) {
      a.model.potential_net = ad::Architecture::parse(m.at("potential").get<std::string>());
    }
    if (m.contains("input")) a.model.input_net = ad::Architecture::parse(m.at("input").get<std::string>());
    if (m.contains("damping")) {
      a.model.damping_net = ad::Architecture::parse(m.at("damping").get<std::string>());
    }
  }
  if (j.contains("policy")) {
    const Json& p = j.at("policy");
    if (p.contains("shaping")) {
      a.policy.potential_net = ad::Architecture::parse(p.at("shaping").get<std::string>());
    }
    if (p.contains("injection")) {
      a.policy.damping_net = ad::Architecture::parse(p.at("injection").get<std::string>());
    }
    a.policy.kappa = p.value("kappa", a.policy.kappa);
  }
  if (j.contains("cost")) cost_from_json(j.at("cost"), a.cost);
  a.policy.target = a.cost.target;
  a.policy.dof = a.plant.dof();
  a.policy.inputs = a.plant.inputs();
  if (j.contains("warmup")) sysid_from_json(j.at("warmup"), a.warmup);
  if (j.contains("theta")) sysid_from_json(j.at("theta"), a.theta);
  if (j.contains("phi")) phi_from_json(j.at("phi"), a.phi);
  a.rounds = j.value("rounds", a.rounds);
  a.ics = j.value("ics", a.ics);
  a.holdout_ics = j.value("holdout_ics", a.holdout_ics);
  if (j.contains("levels")) a.levels = j.at("levels").get<std::vector<double>>();
  a.data_horizon = j.value("data_horizon", a.data_horizon);
  a.data_dt = j.value("data_dt", a.data_dt);
  a.collect_horizon = j.value("collect_horizon", a.collect_horizon);
  a.policy_fraction = j.value("policy_fraction", a.policy_fraction);
  a.q_range = j.value("q_range", a.q_range);
  a.qdot_range = j.value("qdot_range", a.qdot_range);
  a.anchor = j.value("anchor", a.anchor);
  rc.eval_ics = j.value("eval_ics", rc.eval_ics);
  rc.eval_horizon = j.value("eval_horizon", rc.eval_horizon);
}

inline RunConfig config_from_json(const Json& j) {
  const PlantKind kind = j.contains("plant") && j.at("plant").contains("kind")
                             ? parse_plant_kind(j.at("plant").at("kind").get<std::string>())
                             : PlantKind::kPlanarPendulum;
  RunConfig rc = preset(kind, j.value("mode", std::string("desk")), j.value("seed", std::uint64_t{0}));
  if (j.contains("task")) {
    rc = preset(kind, parse_task(j.at("task").get<std::string>()), rc.mode, rc.alt.seed);
  }
  apply_config(j, rc);
  return rc;
}

// --- run directory ---------------------------------------------------------------

struct RunDir {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path history() const { return root / "history.csv"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path summary() const { return root / "summary.json"; }
  fs::path theta(int round) const { return checkpoints() / ("round_" + std::to_string(round) + "_theta.json"); }
  fs::path phi(int round) const { return checkpoints() / ("round_" + std::to_string(round) + "_phi.json"); }
  fs::path gains() const { return checkpoints() / "gains.json"; }

  /// Highest round with a checkpoint of the given kind, or -1.
  int latest(const std::string& what) const {
    int best = -1;
    if (!fs::exists(checkpoints())) return best;
    const std::regex re("round_([0-9]+)_" + what + "\\.json");
    for (const auto& e : fs::directory_iterator(checkpoints())) {
      std::smatch mt;
      const std::string name = e.path().filename().string();
      if (std::regex_match(name, mt, re)) best = std::max(best, std::stoi(mt[1].str()));
    }
    return best;
  }
};

inline void write_summary(const RunDir& run, const Json& updates) {
  Json s = fs::exists(run.summary()) ? io::load_json(run.summary()) : Json::object();
  for (auto it = updates.begin(); it != updates.end(); ++it) s[it.key()] = it.value();
  io::save_json(run.summary(), s);
}

inline Json read_summary(const RunDir& run) {
  return fs::exists(run.summary()) ? io::load_json(run.summary()) : Json::object();
}

/// The model a run controls with: the plant itself for `exact` runs,
/// otherwise the latest theta checkpoint.
inline std::shared_ptr<const PortHamiltonianSystem> load_run_model(const RunDir& run,
                                                                   const RunConfig& rc) {
  if (rc.model_source == "exact") return std::make_shared<AnalyticPlant>(rc.alt.plant);
  const int k = run.latest("theta");
  if (k < 0) throw std::invalid_argument("run " + run.root.string() + " has no model checkpoint");
  return std::make_shared<StructuredPHModel>(io::model_from_json(io::load_json(run.theta(k))));
}

inline EnergyShapingPolicy load_run_policy(const RunDir& run) {
  const int k = run.latest("phi");
  if (k < 0) throw std::invalid_argument("run " + run.root.string() + " has no policy checkpoint");
  return io::policy_from_json(io::load_json(run.phi(k)));
}

inline RunConfig load_run_config(const RunDir& run) {
  if (!fs::exists(run.config())) throw std::invalid_argument("no config.json in " + run.root.string());
  return config_from_json(io::load_json(run.config()));
}

/// The controller stored in a run: learned EB-PBC or optimized baseline gains.
inline ControllerHandle load_run_controller(const RunDir& run, const RunConfig& rc) {
  ControllerHandle h;
  h.plant = rc.alt.plant;
  h.inputs = rc.alt.plant.inputs();
  if (!rc.baseline.empty()) {
    const io::GainsCheckpoint g = io::gains_from_json(io::load_json(run.gains()));
    h.kind = g.kind == "pd-plus" ? ControllerKind::kPdPlus : ControllerKind::kStandardEbpbc;
    h.kp = g.kp;
    h.kd = g.kd;
    h.target = g.target;
    h.printed_sign = g.printed_sign;
    return h;
  }
  h.kind = ControllerKind::kEbpbcLearned;
  h.model = load_run_model(run, rc);
  h.policy = std::make_shared<EnergyShapingPolicy>(load_run_policy(run));
  return h;
}

// --- evaluation ------------------------------------------------------------------

struct Evaluation {
  std::vector<Trajectory> trajectories;
  std::vector<eval::Effort> effort;
  std::vector<double> terminal;           // wrapped state error at the final knot
  std::vector<double> terminal_position;  // wrapped position error at the final knot
  std::size_t failures = 0;
  double mean_l1 = 0.0;
  double mean_l2 = 0.0;
  double success = 0.0;  // share of initial states meeting the task tolerance

  Json to_json(TaskKind task) const {
    double te = 0.0, tp = 0.0;
    for (double v : terminal) te += v;
    for (double v : terminal_position) tp += v;
    const double cnt = std::max<double>(1.0, static_cast<double>(terminal.size()));
    return {{"task", task_name(task)},
            {"initial_states", trajectories.size() + failures},
            {"diverged", failures},
            {"mean_effort_l1", mean_l1},
            {"mean_effort_l2", mean_l2},
            {"mean_terminal_error", te / cnt},
            {"mean_terminal_position_error", tp / cnt},
            {"success_fraction", success}};
  }
};

/// Tolerances used to call a closed-loop rollout successful.
inline constexpr double kStabilizationTolerance = 0.1;  // wrapped state norm
inline constexpr double kSwingUpTolerance = 0.2;        // wrapped position error, rad

inline Evaluation evaluate_controller(const PlantSpec& plant, const Controller& u,
                                      const std::vector<Eigen::VectorXd>& ics, double horizon,
                                      double dt, TaskKind task, const Eigen::VectorXd& target,
                                      int workers = 1) {
  const AnalyticPlant sys(plant);
  BatchOptions bo;
  bo.workers = workers;
  bo.divergence_threshold = 1e3;
  BatchRollout r = rollout_batch(make_field(sys), ics, u, horizon, dt, bo);
  Evaluation ev;
  ev.failures = r.failures.size();
  const int n = plant.dof();
  std::size_t ok = 0;
  for (Trajectory& tr : r.trajectories) {
    if (tr.size() == 0) continue;
    const eval::Effort e = eval::effort_metrics(tr);
    ev.effort.push_back(e);
    ev.mean_l1 += e.l1;
    ev.mean_l2 += e.l2;
    const double te = eval::terminal_error(tr, target);
    const double tp = eval::terminal_position_error(tr, target.head(n));
    ev.terminal.push_back(te);
    ev.terminal_position.push_back(tp);
    const bool good = task == TaskKind::kStabilization
                          ? eval::wrapped_norm(tr.states.back(), target) < kStabilizationTolerance
                          : tp < kSwingUpTolerance;
    if (good) ++ok;
    ev.trajectories.push_back(std::move(tr));
  }
  const double cnt = std::max<double>(1.0, static_cast<double>(ev.effort.size()));
  ev.mean_l1 /= cnt;
  ev.mean_l2 /= cnt;
  ev.success = static_cast<double>(ok) / static_cast<double>(ics.size());
  return ev;
}

/// Unforced rollouts of the plant and of a model from shared initial states.
inline eval::ErrorBands model_error_bands(const PlantSpec& plant, const PortHamiltonianSystem& model,
                                          const std::vector<Eigen::VectorXd>& ics, double horizon,
                                          double dt, int workers = 1) {
  const AnalyticPlant sys(plant);
  BatchOptions bo;
  bo.workers = workers;
  const Controller zero = zero_controller(plant.inputs());
  const BatchRollout truth = rollout_batch(make_field(sys), ics, zero, horizon, dt, bo);
  const BatchRollout pred = rollout_batch(make_field(model), ics, zero, horizon, dt, bo);
  std::vector<Trajectory> a, b;
  for (std::size_t i = 0; i < ics.size(); ++i) {
    if (truth.trajectories[i].size() == 0 || pred.trajectories[i].size() == 0) continue;
    a.push_back(truth.trajectories[i]);
    b.push_back(pred.trajectories[i]);
  }
  if (a.empty()) throw DivergenceError("every model rollout diverged", 0);
  return eval::error_bands(a, b);
}

// --- command-line plumbing -------------------------------------------------------

struct Common {
  std::string config;
  std::string plant;
  std::string task;
  std::string mode;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  bool deterministic = false;
  bool verbose = false;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "JSON run configuration");
    app->add_option("--plant", plant, "planar | torsional | two-link");
    app->add_option("--task", task, "stabilization | swing-up");
    app->add_option("--mode", mode, "desk | strict-paper");
    app->add_option("--seed", seed, "base seed (falls back to PH_SEED)");
    app->add_option("--workers", workers, "batch fan-out")->check(CLI::PositiveNumber);
    app->add_flag("--deterministic", deterministic, "single worker, ordered reductions");
    app->add_flag("-v,--verbose", verbose, "log progress");
  }

  std::uint64_t resolved_seed() const {
    if (seed) return *seed;
    if (const char* env = std::getenv("PH_SEED")) {
      try {
        return std::stoull(env);
      } catch (const std::exception&) {
        throw std::invalid_argument(std::string("PH_SEED is not an unsigned integer: ") + env);
      }
    }
    return 0;
  }

  /// Preset or config file, then command-line overrides.
  RunConfig resolve() const {
    RunConfig rc;
    if (!config.empty()) {
      const Json j = io::load_json(config);
      rc = config_from_json(j);
      if (!plant.empty() && parse_plant_kind(plant) != rc.alt.plant.kind) {
        throw std::invalid_argument("--plant disagrees with the config file");
      }
      if (!mode.empty() && mode != rc.mode) {
        Json k = j;
        k["mode"] = mode;
        rc = config_from_json(k);
      }
      if (!task.empty()) rc.task = parse_task(task);
      if (seed || std::getenv("PH_SEED")) rc.alt.seed = resolved_seed();
    } else {
      const PlantKind kind = parse_plant_kind(plant.empty() ? "planar" : plant);
      const std::string m = mode.empty() ? "desk" : mode;
      rc = task.empty() ? preset(kind, m, resolved_seed())
                        : preset(kind, parse_task(task), m, resolved_seed());
    }
    rc.alt.workers = deterministic ? 1 : workers;
    rc.alt.warmup.exec.workers = rc.alt.workers;
    rc.alt.theta.exec.workers = rc.alt.workers;
    rc.alt.phi.exec.workers = rc.alt.workers;
    return rc;
  }
};

inline void prepare_run(const RunDir& run, const RunConfig& rc) {
  fs::create_directories(run.checkpoints());
  io::save_json(run.config(), config_to_json(rc));
}

inline std::vector<Eigen::VectorXd> eval_ics(const RunConfig& rc, std::size_t count, std::uint64_t tag) {
  return sample_ics(AnalyticPlant(rc.alt.plant), count, derive_seed(rc.alt.seed, tag), rc.alt.q_range,
                    rc.alt.qdot_range);
}

// --- subcommands -----------------------------------------------------------------

inline int cmd_gen_data(const RunConfig& rc, int ics, double horizon, double dt,
                        const std::vector<double>& levels, const fs::path& out) {
  const AnalyticPlant plant(rc.alt.plant);
  BatchOptions bo;
  bo.workers = rc.alt.workers;
  const auto z0 = sample_ics(plant, static_cast<std::size_t>(ics), rc.alt.seed, rc.alt.q_range,
                             rc.alt.qdot_range);
  const Dataset ds =
      step_excited_dataset(plant, z0, excitation_levels(levels, plant.inputs()), horizon, dt, bo);
  io::write_dataset(out, ds, rc.alt.plant, rc.alt.seed);
  std::cout << "wrote " << ds.size() << " trajectories to " << out.string() << '\n';
  if (ds.failures > 0) std::cout << ds.failures << " rollouts diverged and were dropped\n";
  return kExitOk;
}

inline int cmd_train_system(RunConfig rc, const std::string& data, const RunDir& run) {
  Dataset ds;
  if (!data.empty()) {
    io::DatasetMeta meta;
    ds = io::read_dataset(data, &meta);
    if (meta.plant.kind != rc.alt.plant.kind) {
      throw std::invalid_argument("dataset plant differs from the configured plant");
    }
    rc.alt.plant = meta.plant;
  } else {
    const AnalyticPlant plant(rc.alt.plant);
    const auto z0 = sample_ics(plant, static_cast<std::size_t>(rc.alt.ics),
                               derive_seed(rc.alt.seed, 0xb1), rc.alt.q_range, rc.alt.qdot_range);
    BatchOptions bo;
    bo.workers = rc.alt.workers;
    ds = step_excited_dataset(plant, z0, excitation_levels(rc.alt.levels, plant.inputs()),
                              rc.alt.data_horizon, rc.alt.data_dt, bo);
  }
  rc.model_source = "learned";
  prepare_run(run, rc);
  StructuredPHModel model(rc.alt.model, derive_seed(rc.alt.seed, 0xa1));
  TrainRun tr;
  tr.seed = rc.alt.seed;
  if (log::threshold() <= static_cast<int>(log::Level::kInfo)) {
    tr.on_row = [](const HistoryRow& r) {
      log::info(r.phase + " " + std::to_string(r.step) + " loss " + io::format_double(r.loss));
    };
  }
  try {
    theta_step(model, ds.trajectories, rc.alt.warmup, tr, 0, "warmup");
  } catch (const TrainingAbort&) {
    write_history(run.history(), tr.history);
    throw;
  }
  if (rc.alt.anchor) {
    const AnalyticPlant plant(rc.alt.plant);
    model.anchor_potential(potential(plant, Eigen::VectorXd::Zero(plant.dof())));
  }
  io::save_json(run.theta(0), io::model_to_json(model));
  write_history(run.history(), tr.history);
  write_summary(run, {{"final_loss", tr.history.empty() ? 0.0 : tr.history.back().loss},
                      {"trajectories", ds.size()}});
  std::cout << "model trained on " << ds.size() << " trajectories, final loss "
            << io::format_double(tr.history.empty() ? 0.0 : tr.history.back().loss) << '\n';
  return kExitOk;
}

inline Eigen::VectorXd initial_kp(const PlantSpec& p, bool published) {
  if (published && p.kind == PlantKind::kTorsionalPendulum) return Eigen::VectorXd::Constant(1, 12.29);
  if (published && p.kind == PlantKind::kTwoLink) return Eigen::Vector2d(28.9, 12.8);
  return Eigen::VectorXd::Ones(p.dof());
}

inline Eigen::VectorXd initial_kd(const PlantSpec& p, bool published) {
  if (published && p.kind == PlantKind::kTorsionalPendulum) return Eigen::VectorXd::Constant(1, 6.30);
  if (published && p.kind == PlantKind::kTwoLink) return Eigen::Vector2d(20.42, 0.96);
  return Eigen::VectorXd::Ones(p.dof());
}

inline int cmd_train_policy(RunConfig rc, const std::string& model_arg, const RunDir& run,
                            bool published_gains) {
  const AnalyticPlant plant(rc.alt.plant);
  const int n = plant.dof();
  const IcSampler sampler = plant_sampler(plant, rc.alt.q_range, rc.alt.qdot_range);
  TrainRun tr;
  tr.seed = rc.alt.seed;
  rc.alt.cost.task = rc.task;

  if (!rc.baseline.empty()) {
    const Baseline kind = rc.baseline == "pd-plus" ? Baseline::kPdPlus : Baseline::kStandardEbpbc;
    if (kind == Baseline::kPdPlus && n != 1) throw std::invalid_argument("PD+ needs a single-joint plant");
    rc.model_source = "exact";
    prepare_run(run, rc);
    ad::ParamSet gains =
        baseline_gains(initial_kp(rc.alt.plant, published_gains), initial_kd(rc.alt.plant, published_gains));
    const Eigen::VectorXd q_target = rc.alt.cost.target.head(n);
    const RolloutOptimization o = optimize_gains(rc.alt.plant, kind, gains, q_target, rc.printed_sign,
                                                 sampler, rc.alt.cost, rc.alt.phi, tr);
    io::GainsCheckpoint g{rc.baseline, gains["kp"].col(0), gains["kd"].col(0), q_target, rc.printed_sign};
    io::save_json(run.gains(), io::gains_to_json(g));
    write_history(run.history(), tr.history);
    write_summary(run, {{"initial_cost", o.initial}, {"final_cost", o.final}});
    std::cout << baseline_name(kind) << " gains kp=" << io::vector_to_json(g.kp).dump()
              << " kd=" << io::vector_to_json(g.kd).dump() << ", cost " << io::format_double(o.initial)
              << " -> " << io::format_double(o.final) << '\n';
    return kExitOk;
  }

  std::shared_ptr<const PortHamiltonianSystem> model;
  if (model_arg.empty() || model_arg == "exact") {
    rc.model_source = "exact";
    model = std::make_shared<AnalyticPlant>(rc.alt.plant);
  } else {
    rc.model_source = "learned";
    auto learned = std::make_shared<StructuredPHModel>(io::model_from_json(io::load_json(model_arg)));
    model = learned;
  }
  prepare_run(run, rc);
  if (rc.model_source == "learned") {
    io::save_json(run.theta(0), io::model_to_json(static_cast<const StructuredPHModel&>(*model)));
  }
  EnergyShapingPolicy policy(rc.alt.policy, derive_seed(rc.alt.seed, 0xa2));
  PhiResult pr;
  try {
    pr = phi_step(*model, policy, sampler, rc.alt.cost, rc.alt.phi, tr, 1);
  } catch (const TrainingAbort&) {
    write_history(run.history(), tr.history);
    throw;
  }
  io::save_json(run.phi(1), io::policy_to_json(policy));
  write_history(run.history(), tr.history);
  write_summary(run, {{"initial_cost", pr.initial_cost},
                      {"final_cost", pr.final_cost},
                      {"eps_diss", pr.eps_diss},
                      {"rho", rc.alt.cost.rho}});
  std::cout << "policy cost " << io::format_double(pr.initial_cost) << " -> "
            << io::format_double(pr.final_cost) << ", eps_diss " << io::format_double(pr.eps_diss)
            << '\n';
  return kExitOk;
}

inline int cmd_alternate(RunConfig rc, const RunDir& run) {
  rc.model_source = "learned";
  rc.alt.cost.task = rc.task;
  rc.alt.run_dir = run.root;
  prepare_run(run, rc);
  const AlternationResult res = alternate_optimize(rc.alt);
  Json hold = Json::array(), eps = Json::array();
  for (double v : res.holdout) hold.push_back(v);
  for (double v : res.eps_diss) eps.push_back(v);
  write_summary(run, {{"holdout_err", hold},
                      {"eps_diss_per_round", eps},
                      {"eps_diss", res.eps_diss.empty() ? 0.0 : res.eps_diss.back()},
                      {"rho", rc.alt.cost.rho}});
  std::cout << "completed " << rc.alt.rounds << " rounds; held-out error " << hold.dump() << '\n';
  return kExitOk;
}

inline int cmd_evaluate(const RunDir& run, int ics, double horizon) {
  const RunConfig rc = load_run_config(run);
  const ControllerHandle h = load_run_controller(run, rc);
  const double T = horizon > 0.0 ? horizon : rc.evaluation_horizon();
  const auto z0 = eval_ics(rc, static_cast<std::size_t>(ics > 0 ? ics : rc.eval_ics), 0xe1);
  const Evaluation ev = evaluate_controller(rc.alt.plant, h.make(), z0, T, 1e-2, rc.task,
                                            rc.alt.cost.target, rc.alt.workers);
  Json j = ev.to_json(rc.task);
  j["horizon"] = T;
  {
    std::ofstream out(run.root / "effort_per_ic.csv");
    out << "ic,l1,l2,terminal_error,terminal_position_error\n";
    for (std::size_t i = 0; i < ev.effort.size(); ++i) {
      out << i << ',' << io::format_double(ev.effort[i].l1) << ',' << io::format_double(ev.effort[i].l2)
          << ',' << io::format_double(ev.terminal[i]) << ','
          << io::format_double(ev.terminal_position[i]) << '\n';
    }
  }
  if (rc.model_source == "learned" && rc.baseline.empty()) {
    const auto model = load_run_model(run, rc);
    const eval::ErrorBands b = model_error_bands(rc.alt.plant, *model, z0, 3.0, rc.alt.data_dt,
                                                 rc.alt.workers);
    eval::write_bands_csv((run.root / "error_bands.csv").string(), b);
    const auto at = [&](double t) {
      const auto k = static_cast<std::size_t>(std::llround(t / rc.alt.data_dt));
      return b.mean[std::min(k, b.mean.size() - 1)];
    };
    j["relative_error_at_training_horizon"] = at(rc.alt.data_horizon);
    j["relative_error_at_3s"] = at(3.0);
  }
  io::save_json(run.root / "evaluation.json", j);
  std::cout << j.dump(2) << '\n';
  return kExitOk;
}

inline int cmd_certify(const RunDir& run, eval::CertifyOptions opt) {
  const RunConfig rc = load_run_config(run);
  if (!rc.baseline.empty()) throw std::invalid_argument("certification needs an EB-PBC run");
  const auto model = load_run_model(run, rc);
  const EnergyShapingPolicy policy = load_run_policy(run);
  const Json summary = read_summary(run);
  opt.eps_diss = summary.value("eps_diss", 0.0);
  opt.rho = summary.value("rho", rc.alt.cost.rho);
  opt.seed = derive_seed(rc.alt.seed, 0xce);
  opt.workers = rc.alt.workers;
  const eval::CertificateReport r = eval::certify(AnalyticPlant(rc.alt.plant), *model, policy, opt);
  io::save_json(run.root / "certificate.json", r.to_json());
  r.write_samples_csv((run.root / "certificate_samples.csv").string());
  std::cout << (r.pass() ? "pass" : "fail") << '\n'
            << "xi " << io::format_double(r.xi) << '\n'
            << "eps_diss " << io::format_double(r.eps_diss) << '\n'
            << "gap radius " << io::format_double(r.gap_radius) << '\n'
            << "radius " << io::format_double(r.radius) << '\n'
            << "trajectories " << r.stayed << '/' << r.trajectories << " stayed in the sublevel set\n";
  return kExitOk;
}

inline int cmd_export_plots(const RunDir& run, int ics, double horizon) {
  const RunConfig rc = load_run_config(run);
  const fs::path dir = run.root / "plots";
  fs::create_directories(dir);
  const int n = rc.alt.plant.dof();
  const AnalyticPlant plant(rc.alt.plant);

  // Closed-loop phase trajectories on the plant.
  const ControllerHandle h = load_run_controller(run, rc);
  const double T = horizon > 0.0 ? horizon : rc.evaluation_horizon();
  const auto z0 = eval_ics(rc, static_cast<std::size_t>(ics), 0xe2);
  const Evaluation ev =
      evaluate_controller(rc.alt.plant, h.make(), z0, T, 1e-2, rc.task, rc.alt.cost.target, rc.alt.workers);
  {
    std::ofstream out(dir / "phase.csv");
    out << "ic,t";
    for (int i = 0; i < n; ++i) out << ",q" << i + 1;
    for (int i = 0; i < n; ++i) out << ",p" << i + 1;
    for (int i = 0; i < rc.alt.plant.inputs(); ++i) out << ",u" << i + 1;
    out << '\n';
    for (std::size_t c = 0; c < ev.trajectories.size(); ++c) {
      const Trajectory& tr = ev.trajectories[c];
      for (std::size_t k = 0; k < tr.size(); ++k) {
        out << c << ',' << io::format_double(tr.times[k]);
        for (Eigen::Index i = 0; i < tr.states[k].size(); ++i) out << ',' << io::format_double(tr.states[k](i));
        for (Eigen::Index i = 0; i < tr.inputs[k].size(); ++i) out << ',' << io::format_double(tr.inputs[k](i));
        out << '\n';
      }
    }
  }
  {
    std::vector<double> l2;
    for (const eval::Effort& e : ev.effort) l2.push_back(e.l2);
    const eval::Histogram hist = eval::histogram(l2, 16);
    std::ofstream out(dir / "effort_histogram.csv");
    out << "lo,hi,count\n";
    for (std::size_t b = 0; b < hist.counts.size(); ++b) {
      out << io::format_double(hist.edges[b]) << ',' << io::format_double(hist.edges[b + 1]) << ','
          << hist.counts[b] << '\n';
    }
  }

  // Potential landscape along the first joint (others at the target).
  if (rc.baseline.empty()) {
    const auto model = load_run_model(run, rc);
    const EnergyShapingPolicy policy = load_run_policy(run);
    const int points = 401;
    Matrix zs = Matrix::Zero(2 * n, points);
    for (int i = 0; i < points; ++i) {
      zs.col(i) = rc.alt.cost.target;
      zs(0, i) = -2.0 * M_PI + 4.0 * M_PI * i / (points - 1);
      zs.block(n, i, n, 1).setZero();
    }
    const auto sys = model->bind(nullptr);
    const auto truth = plant.bind(nullptr);
    const BoundPolicy pol = policy.bind(nullptr);
    const Matrix q = zs.topRows(n);
    const Matrix v_model = sys->potential(Var(q)).value();
    const Matrix v_true = truth->potential(Var(q)).value();
    const Matrix v_star = pol.added_potential(Var(q)).value();
    std::ofstream out(dir / "landscape.csv");
    out << "q1,V_model,V_true,V_star,V_d_model,V_d_true\n";
    for (int i = 0; i < points; ++i) {
      out << io::format_double(zs(0, i)) << ',' << io::format_double(v_model(0, i)) << ','
          << io::format_double(v_true(0, i)) << ',' << io::format_double(v_star(0, i)) << ','
          << io::format_double(v_model(0, i) + v_star(0, i)) << ','
          << io::format_double(v_true(0, i) + v_star(0, i)) << '\n';
    }
    if (rc.model_source == "learned") {
      const eval::ErrorBands b = model_error_bands(rc.alt.plant, *model, z0, 3.0, rc.alt.data_dt,
                                                   rc.alt.workers);
      eval::write_bands_csv((dir / "error_bands.csv").string(), b);
    }
  }
  if (fs::exists(run.history())) {
    fs::copy_file(run.history(), dir / "history.csv", fs::copy_options::overwrite_existing);
  }
  std::cout << "plot data written to " << dir.string() << '\n';
  return kExitOk;
}

// --- dispatch --------------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Co-learning port-Hamiltonian models and energy-shaping controllers"};
  app.require_subcommand(1);

  Common gen_c, sys_c, pol_c, alt_c;
  int gen_ics = 0;
  double gen_T = 0.15, gen_dt = 1e-2;
  std::vector<double> gen_levels{-2, -1, 0, 1, 2};
  std::string gen_out = "dataset";
  auto* gen = app.add_subcommand("gen-data", "simulate step-excited trajectories");
  gen_c.add_to(gen);
  gen->add_option("--ics", gen_ics, "initial states (default from mode)");
  gen->add_option("--T", gen_T, "trajectory length, s");
  gen->add_option("--dt", gen_dt, "knot spacing, s");
  gen->add_option("--levels", gen_levels, "constant input levels");
  gen->add_option("--out", gen_out, "dataset directory");

  std::string sys_data, sys_run = "run";
  int sys_epochs = -1;
  double sys_lr = -1.0;
  auto* sys = app.add_subcommand("train-system", "warm-up model training on step-excited data");
  sys_c.add_to(sys);
  sys->add_option("--data", sys_data, "dataset directory (generated when omitted)");
  sys->add_option("--epochs", sys_epochs, "training epochs");
  sys->add_option("--lr", sys_lr, "peak learning rate");
  sys->add_option("--run", sys_run, "run directory");

  std::string pol_model = "exact", pol_run = "run", pol_baseline;
  int pol_iters = -1;
  double pol_lr = -1.0, pol_horizon = -1.0, pol_lambda = -1.0, pol_rho = -1.0;
  bool pol_published = false;
  auto* pol = app.add_subcommand("train-policy", "optimize an EB-PBC policy or baseline gains");
  pol_c.add_to(pol);
  pol->add_option("--model", pol_model, "exact or a model checkpoint");
  pol->add_option("--baseline", pol_baseline, "pd-plus | standard-ebpbc")
      ->check(CLI::IsMember({"pd-plus", "standard-ebpbc"}));
  pol->add_flag("--published-gains", pol_published, "start baseline gains from published values");
  pol->add_option("--iterations", pol_iters, "optimizer iterations");
  pol->add_option("--lr", pol_lr, "peak learning rate");
  pol->add_option("--horizon", pol_horizon, "rollout horizon, s");
  pol->add_option("--lambda", pol_lambda, "dissipation regularizer weight");
  pol->add_option("--rho", pol_rho, "dissipation rate");
  pol->add_option("--run", pol_run, "run directory");

  std::string alt_run = "run";
  int alt_rounds = -1;
  auto* alt = app.add_subcommand("alternate", "warm-up then alternating model/policy rounds");
  alt_c.add_to(alt);
  alt->add_option("--rounds", alt_rounds, "alternation rounds");
  alt->add_option("--run", alt_run, "run directory");

  std::string ev_run = "run";
  int ev_ics = 0;
  double ev_T = 0.0;
  bool ev_verbose = false;
  auto* evc = app.add_subcommand("evaluate", "closed-loop metrics on the true plant");
  evc->add_option("--run", ev_run, "run directory")->required();
  evc->add_option("--ics", ev_ics, "initial states");
  evc->add_option("--horizon", ev_T, "rollout length, s");
  evc->add_flag("-v,--verbose", ev_verbose, "log progress");

  std::string cert_run = "run";
  eval::CertifyOptions cert_opt;
  auto* cert = app.add_subcommand("certify", "numerical dissipation certificate");
  cert->add_option("--run", cert_run, "run directory")->required();
  cert->add_option("--samples", cert_opt.samples, "sampled states");
  cert->add_option("--box", cert_opt.box, "half-width of the sampled box");
  cert->add_option("--trajectories", cert_opt.trajectories, "plant trajectories");
  cert->add_option("--horizon", cert_opt.horizon, "trajectory length, s");

  std::string plot_run = "run";
  int plot_ics = 16;
  double plot_T = 0.0;
  auto* plots = app.add_subcommand("export-plots", "plot-ready CSV files");
  plots->add_option("--run", plot_run, "run directory")->required();
  plots->add_option("--ics", plot_ics, "phase-plot initial states");
  plots->add_option("--horizon", plot_T, "rollout length, s");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitInvalid;
  }

  try {
    auto verbosity = [](bool v) { log::set_level(v ? log::Level::kInfo : log::Level::kWarning); };
    if (gen->parsed()) {
      verbosity(gen_c.verbose);
      RunConfig rc = gen_c.resolve();
      return cmd_gen_data(rc, gen_ics > 0 ? gen_ics : rc.alt.ics, gen_T, gen_dt, gen_levels, gen_out);
    }
    if (sys->parsed()) {
      verbosity(sys_c.verbose);
      RunConfig rc = sys_c.resolve();
      if (sys_epochs >= 0) rc.alt.warmup.epochs = sys_epochs;
      if (sys_lr > 0.0) rc.alt.warmup.adam.lr_max = sys_lr;
      return cmd_train_system(rc, sys_data, RunDir{sys_run});
    }
    if (pol->parsed()) {
      verbosity(pol_c.verbose);
      RunConfig rc = pol_c.resolve();
      rc.baseline = pol_baseline;
      if (pol_iters >= 0) rc.alt.phi.iterations = pol_iters;
      if (pol_lr > 0.0) rc.alt.phi.adam.lr_max = pol_lr;
      if (pol_horizon > 0.0) rc.alt.cost.horizon = pol_horizon;
      if (pol_lambda >= 0.0) rc.alt.cost.lambda_diss = pol_lambda;
      if (pol_rho > 0.0) rc.alt.cost.rho = pol_rho;
      return cmd_train_policy(rc, pol_model, RunDir{pol_run}, pol_published || rc.mode == "strict-paper");
    }
    if (alt->parsed()) {
      verbosity(alt_c.verbose);
      RunConfig rc = alt_c.resolve();
      if (alt_rounds >= 0) rc.alt.rounds = alt_rounds;
      return cmd_alternate(rc, RunDir{alt_run});
    }
    if (evc->parsed()) {
      verbosity(ev_verbose);
      return cmd_evaluate(RunDir{ev_run}, ev_ics, ev_T);
    }
    if (cert->parsed()) return cmd_certify(RunDir{cert_run}, cert_opt);
    if (plots->parsed()) return cmd_export_plots(RunDir{plot_run}, plot_ics, plot_T);
  } catch (const ad::NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvalid;
  }
  return kExitInvalid;
}

}  // namespace phc::cli
