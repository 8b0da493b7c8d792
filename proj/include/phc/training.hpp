#pragma once

// Losses, Adam with cosine annealing, and the warm-up / alternating
// optimization of a structured model and an energy-shaping policy.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "phc/autodiff.hpp"
#include "phc/control.hpp"
#include "phc/io.hpp"
#include "phc/log.hpp"
#include "phc/mlp.hpp"
#include "phc/odeint.hpp"
#include "phc/phmodel.hpp"
#include "phc/plants.hpp"

namespace phc {

/// Non-finite loss during training. Parameters are left at the last
/// finite state.
class TrainingAbort : public ad::NumericError {
 public:
  TrainingAbort(const std::string& what, int round) : ad::NumericError(what), round_(round) {}
  int round() const { return round_; }

 private:
  int round_;
};

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// splitmix64 finalizer, used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(base) ^ a) ^ b);
}

// --- policy cost -------------------------------------------------------------

enum class TaskKind { kStabilization, kSwingUp };

inline std::string task_name(TaskKind t) {
  return t == TaskKind::kStabilization ? "stabilization" : "swing-up";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "stabilization" || s == "stabilize") return TaskKind::kStabilization;
  if (s == "swing-up" || s == "swingup") return TaskKind::kSwingUp;
  throw std::invalid_argument("unknown task '" + s + "'");
}

struct CostConfig {
  TaskKind task = TaskKind::kStabilization;
  double eta = 1e-3;
  double sigma2 = 1e-3;
  Eigen::MatrixXd q_weight;  // 2n x 2n; empty means diag(100 on q, 10 on p)
  double lambda_diss = 1.0;
  double rho = 1e-3;
  double horizon = 3.0;
  double dt = 2e-2;
  Eigen::VectorXd target;  // z*, also z_d of the dissipation term
  bool wrap_angles = true;  // wrapped angle error in the stabilization terminal cost

  int dof() const { return static_cast<int>(target.size() / 2); }
  int steps() const { return step_count(horizon, dt); }

  Eigen::MatrixXd weight() const {
    if (q_weight.size() != 0) return q_weight;
    const int n = dof();
    Eigen::VectorXd d(2 * n);
    d << Eigen::VectorXd::Constant(n, 100.0), Eigen::VectorXd::Constant(n, 10.0);
    return d.asDiagonal();
  }

  void validate() const {
    if (target.size() == 0 || target.size() % 2 != 0) {
      throw std::invalid_argument("cost target must have 2n entries");
    }
    if (!(eta >= 0.0) || !(sigma2 > 0.0) || !(lambda_diss >= 0.0) || !(rho > 0.0)) {
      throw std::invalid_argument("cost weights must be positive");
    }
    const Eigen::MatrixXd w = weight();
    if (w.rows() != target.size() || w.cols() != target.size()) {
      throw std::invalid_argument("Q must be 2n x 2n");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (w + w.transpose()),
                                                      Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-12) throw std::invalid_argument("Q must be PSD");
    steps();
  }

  static CostConfig stabilization(Eigen::VectorXd target) {
    CostConfig c;
    c.task = TaskKind::kStabilization;
    c.target = std::move(target);
    return c;
  }

  static CostConfig swing_up(Eigen::VectorXd target) {
    CostConfig c;
    c.task = TaskKind::kSwingUp;
    c.wrap_angles = false;
    c.target = std::move(target);
    return c;
  }
};

/// Terms of the policy cost for a batch of N rollouts. Every term already
/// carries the 1/N of the batch mean.
class TaskCost {
 public:
  TaskCost(const CostConfig& cfg, int batch) : cfg_(cfg), steps_(cfg.steps()) {
    inv_n_ = 1.0 / static_cast<double>(batch);
    weight_ = cfg.weight();
  }

  int steps() const { return steps_; }

  /// z - z*, with wrapped angles when the config asks for it.
  Var state_error(const Var& z, bool wrap) const {
    const Var e = z - ad::constant_like(z, Matrix(cfg_.target));
    if (!wrap) return e;
    const Eigen::Index n = z.rows() / 2;
    return ad::concat_rows({ad::wrap_angle(ad::slice_rows(e, 0, n)), ad::slice_rows(e, n, n)});
  }

  /// Trapezoid-weighted effort at knot k: |u| summed over channels for
  /// stabilization, u^2 for swing-up.
  Var effort(int k, const Var& u) const {
    const double w = (k == 0 || k == steps_) ? 0.5 : 1.0;
    const Var per = cfg_.task == TaskKind::kStabilization ? ad::sum_rows(ad::abs(u))
                                                          : ad::sum_rows(ad::square(u));
    return (cfg_.eta * w * cfg_.dt * inv_n_) * per;
  }

  Var terminal(const Var& z) const {
    if (cfg_.task == TaskKind::kStabilization) {
      const Var e = state_error(z, cfg_.wrap_angles);
      return (inv_n_ / (2.0 * cfg_.sigma2)) * ad::sum_rows(ad::square(e));
    }
    const Var e = state_error(z, cfg_.wrap_angles);
    return inv_n_ * ad::sum_rows(e * ad::matmul(ad::constant_like(z, weight_), e));
  }

  /// lambda relu(dH_d/dt + rho |z - z_d|^2), averaged over all knots.
  Var dissipation(const Var& rate, const Var& z) const {
    const Var e = state_error(z, false);
    const double scale = cfg_.lambda_diss * inv_n_ / static_cast<double>(steps_ + 1);
    return scale * ad::relu(rate + cfg_.rho * ad::sum_rows(ad::square(e)));
  }

  bool regularized() const { return cfg_.lambda_diss > 0.0; }

 private:
  const CostConfig& cfg_;
  int steps_;
  double inv_n_;
  Eigen::MatrixXd weight_;
};

/// Rollout problem for the policy: closed loop of the learned model under
/// EB-PBC, task cost plus dissipation regularization.
class PolicyProblem {
 public:
  PolicyProblem(const PortHamiltonianSystem& model, const EnergyShapingPolicy& policy,
                const CostConfig& cost, int batch)
      : model_(&model), policy_(&policy), cost_(&cost), batch_(batch), cols_(batch) {}

  int columns() const { return cols_; }

  PolicyProblem select(const std::vector<int>& cols) const {
    PolicyProblem p = *this;
    p.cols_ = static_cast<int>(cols.size());
    return p;
  }

  class Bound {
   public:
    Bound(const PolicyProblem& p, ad::Tape* tape)
        : sys_(p.model_->bind(tape, false)),
          pol_(p.policy_->bind(tape, tape != nullptr)),
          cost_(*p.cost_, p.batch_) {}

    Var field(int, double t, const Var& z) const {
      last_ = closed_loop(*sys_, pol_, t, z);
      return last_.f;
    }

    Var knot_cost(int k, double t, const Var& z, const Var& f) const {
      const ClosedLoopEval e = f.same(last_.f) ? last_ : closed_loop(*sys_, pol_, t, z);
      return with_regularizer(k, e, z);
    }

    Var terminal_cost(double t, const Var& z) const {
      const ClosedLoopEval e = closed_loop(*sys_, pol_, t, z);
      return cost_.terminal(z) + with_regularizer(cost_.steps(), e, z);
    }

    std::vector<Var> trainable() const {
      return pol_.params().trainable() ? pol_.params().vars() : std::vector<Var>{};
    }

   private:
    Var with_regularizer(int k, const ClosedLoopEval& e, const Var& z) const {
      Var c = cost_.effort(k, e.u);
      if (cost_.regularized()) c = c + cost_.dissipation(e.energy_rate(), z);
      return c;
    }

    std::unique_ptr<BoundSystem> sys_;
    BoundPolicy pol_;
    TaskCost cost_;
    mutable ClosedLoopEval last_;
  };

  Bound bind(ad::Tape* tape) const { return Bound(*this, tape); }

 private:
  const PortHamiltonianSystem* model_;
  const EnergyShapingPolicy* policy_;
  const CostConfig* cost_;
  int batch_;
  int cols_;
};

enum class Baseline { kPdPlus, kStandardEbpbc };

inline std::string baseline_name(Baseline b) {
  return b == Baseline::kPdPlus ? "pd-plus" : "standard-ebpbc";
}

/// Gains kp, kd (each n x 1) of a baseline controller as trainable parameters.
inline ad::ParamSet baseline_gains(const Eigen::VectorXd& kp, const Eigen::VectorXd& kd) {
  ad::ParamSet p;
  p.add("kp", kp);
  p.add("kd", kd);
  return p;
}

/// Rollout problem for a baseline controller on the true plant; the task
/// cost only.
class GainProblem {
 public:
  GainProblem(PlantSpec plant, Baseline kind, const ad::ParamSet& gains,
              Eigen::VectorXd q_target, bool printed_sign, const CostConfig& cost, int batch)
      : plant_(std::move(plant)), kind_(kind), gains_(&gains), q_target_(std::move(q_target)),
        printed_(printed_sign), cost_(&cost), batch_(batch), cols_(batch) {}

  int columns() const { return cols_; }

  GainProblem select(const std::vector<int>& cols) const {
    GainProblem p = *this;
    p.cols_ = static_cast<int>(cols.size());
    return p;
  }

  class Bound {
   public:
    Bound(const GainProblem& p, ad::Tape* tape)
        : owner_(&p), plant_(p.plant_), params_(*p.gains_, tape, tape != nullptr),
          cost_(*p.cost_, p.batch_) {}

    Var control(const Var& z) const {
      const Var& kp = params_.at("kp");
      const Var& kd = params_.at("kd");
      if (owner_->kind_ == Baseline::kPdPlus) {
        return pd_plus_control(owner_->plant_, kp, kd, owner_->q_target_(0), z, owner_->printed_);
      }
      return standard_ebpbc_control(owner_->plant_, kp, kd, owner_->q_target_, z);
    }

    Var field(int, double, const Var& z) const {
      last_u_ = control(z);
      last_f_ = vector_field(plant_, z, last_u_);
      return last_f_;
    }

    Var knot_cost(int k, double, const Var& z, const Var& f) const {
      return cost_.effort(k, f.same(last_f_) ? last_u_ : control(z));
    }

    Var terminal_cost(double, const Var& z) const {
      return cost_.terminal(z) + cost_.effort(cost_.steps(), control(z));
    }

    std::vector<Var> trainable() const {
      return params_.trainable() ? params_.vars() : std::vector<Var>{};
    }

   private:
    const GainProblem* owner_;
    BoundPlant plant_;
    ad::BoundParams params_;
    TaskCost cost_;
    mutable Var last_u_;
    mutable Var last_f_;
  };

  Bound bind(ad::Tape* tape) const { return Bound(*this, tape); }

 private:
  PlantSpec plant_;
  Baseline kind_;
  const ad::ParamSet* gains_;
  Eigen::VectorXd q_target_;
  bool printed_;
  const CostConfig* cost_;
  int batch_;
  int cols_;
};

// --- system identification ---------------------------------------------------

/// Knot-aligned trajectory windows stacked column-wise.
struct SysIdBatch {
  Matrix z0;                    // 2n x N
  std::vector<Matrix> derivs;   // per knot, 2n x N
  std::vector<Matrix> inputs;   // per knot, m x N
  double dt = 0.0;

  int steps() const { return static_cast<int>(derivs.size()) - 1; }
  int columns() const { return static_cast<int>(z0.cols()); }

  static SysIdBatch from(const std::vector<const Trajectory*>& trs) {
    if (trs.empty()) throw std::invalid_argument("system-identification batch is empty");
    const std::size_t knots = trs.front()->size();
    if (knots < 2) throw std::invalid_argument("trajectories need at least two knots");
    SysIdBatch b;
    b.dt = trs.front()->dt();
    const auto cols = static_cast<Eigen::Index>(trs.size());
    const auto rows = static_cast<Eigen::Index>(trs.front()->states.front().size());
    const auto m = static_cast<Eigen::Index>(trs.front()->inputs.front().size());
    b.z0.resize(rows, cols);
    b.derivs.assign(knots, Matrix(rows, cols));
    b.inputs.assign(knots, Matrix(m, cols));
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Trajectory& tr = *trs[static_cast<std::size_t>(c)];
      if (tr.size() != knots || !tr.consistent()) {
        throw std::invalid_argument("batch trajectories must share their knot count");
      }
      if (std::abs(tr.dt() - b.dt) > 1e-12) {
        throw std::invalid_argument("batch trajectories must share dt");
      }
      b.z0.col(c) = tr.states.front();
      for (std::size_t k = 0; k < knots; ++k) {
        b.derivs[k].col(c) = tr.derivs[k];
        b.inputs[k].col(c) = tr.inputs[k];
      }
    }
    return b;
  }

  SysIdBatch select(const std::vector<int>& cols) const {
    SysIdBatch s;
    s.dt = dt;
    auto pick = [&](const Matrix& m) {
      Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
      for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(cols[j]);
      return out;
    };
    s.z0 = pick(z0);
    for (const Matrix& d : derivs) s.derivs.push_back(pick(d));
    for (const Matrix& u : inputs) s.inputs.push_back(pick(u));
    return s;
  }
};

/// Derivative matching along the model's own rollout from each window's
/// first state: mean over knots and windows of |z'_data - f_theta(z_hat, u)|^2.
/// Between knots the recorded input is interpolated linearly.
class SysIdProblem {
 public:
  SysIdProblem(const PortHamiltonianSystem& model, std::shared_ptr<const SysIdBatch> batch,
               bool trainable, double scale)
      : model_(&model), batch_(std::move(batch)), trainable_(trainable), scale_(scale) {}

  SysIdProblem(const PortHamiltonianSystem& model, std::shared_ptr<const SysIdBatch> batch,
               bool trainable = true)
      : SysIdProblem(model, batch, trainable,
                     1.0 / (static_cast<double>(batch->columns()) * (batch->steps() + 1))) {}

  int columns() const { return batch_->columns(); }

  SysIdProblem select(const std::vector<int>& cols) const {
    return SysIdProblem(*model_, std::make_shared<const SysIdBatch>(batch_->select(cols)),
                        trainable_, scale_);
  }

  class Bound {
   public:
    Bound(const SysIdProblem& p, ad::Tape* tape)
        : sys_(p.model_->bind(tape, p.trainable_ && tape != nullptr)),
          batch_(p.batch_),
          scale_(p.scale_) {}

    Var input(int k, double t, const Var& like) const {
      const double s = t / batch_->dt - k;
      const auto ku = static_cast<std::size_t>(k);
      if (s <= 1e-12 || ku + 1 >= batch_->inputs.size()) {
        return ad::constant_like(like, batch_->inputs[ku]);
      }
      return ad::constant_like(like, (1.0 - s) * batch_->inputs[ku] + s * batch_->inputs[ku + 1]);
    }

    Var field(int k, double t, const Var& z) const { return vector_field(*sys_, z, input(k, t, z)); }

    Var knot_cost(int k, double, const Var& z, const Var& f) const {
      return mismatch(static_cast<std::size_t>(k), z, f);
    }

    Var terminal_cost(double t, const Var& z) const {
      const int k = batch_->steps();
      return mismatch(static_cast<std::size_t>(k), z, vector_field(*sys_, z, input(k, t, z)));
    }

    std::vector<Var> trainable() const {
      const ad::BoundParams* p = sys_->params();
      return p != nullptr && p->trainable() ? p->vars() : std::vector<Var>{};
    }

   private:
    Var mismatch(std::size_t k, const Var& z, const Var& f) const {
      return scale_ * ad::sum_rows(ad::square(f - ad::constant_like(z, batch_->derivs[k])));
    }

    std::unique_ptr<BoundSystem> sys_;
    std::shared_ptr<const SysIdBatch> batch_;
    double scale_;
  };

  Bound bind(ad::Tape* tape) const { return Bound(*this, tape); }

  const SysIdBatch& batch() const { return *batch_; }

 private:
  const PortHamiltonianSystem* model_;
  std::shared_ptr<const SysIdBatch> batch_;
  bool trainable_;
  double scale_;
};

struct ExecOptions {
  int workers = 1;
  int chunk = 64;
  double divergence_threshold = 1e3;
};

struct SysIdLoss {
  double loss = 0.0;
  std::size_t skipped = 0;  // windows whose predicted rollout diverged
  std::vector<Matrix> gradient;
};

inline SysIdLoss system_id_loss(const PortHamiltonianSystem& model,
                                const std::vector<const Trajectory*>& windows,
                                bool want_gradient = false, const ExecOptions& exec = {}) {
  auto batch = std::make_shared<const SysIdBatch>(SysIdBatch::from(windows));
  const SysIdProblem problem(model, batch, want_gradient);
  EngineOptions opt;
  opt.dt = batch->dt;
  opt.steps = batch->steps();
  opt.t0 = 0.0;
  opt.chunk = exec.chunk;
  opt.workers = exec.workers;
  opt.divergence_threshold = exec.divergence_threshold;
  EngineResult r = differentiate_rollout(problem, batch->z0, opt, want_gradient);
  SysIdLoss out;
  out.loss = r.total;
  out.skipped = r.diverged();
  out.gradient = std::move(r.gradient);
  if (out.skipped == static_cast<std::size_t>(batch->columns())) {
    out.loss = std::numeric_limits<double>::infinity();
  }
  return out;
}

inline SysIdLoss system_id_loss(const PortHamiltonianSystem& model,
                                const std::vector<Trajectory>& windows,
                                bool want_gradient = false, const ExecOptions& exec = {}) {
  std::vector<const Trajectory*> ptrs;
  for (const Trajectory& t : windows) ptrs.push_back(&t);
  return system_id_loss(model, ptrs, want_gradient, exec);
}

// --- optimizer -----------------------------------------------------------------

struct AdamConfig {
  double lr_max = 1e-3;
  double lr_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

struct AdamState {
  ad::ParamSet m;
  ad::ParamSet v;
  long step = 0;
};

inline double cosine_lr(long step, long total, double lr_max, double lr_min) {
  if (total <= 0) return lr_max;
  if (step < 0 || step > total) throw std::invalid_argument("cosine_lr: step out of range");
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * frac));
}

/// Bias-corrected Adam with decoupled weight decay.
inline void adam_update(ad::ParamSet& params, const ad::ParamSet& grads, AdamState& state,
                        double lr, const AdamConfig& cfg) {
  if (!params.same_layout(grads)) throw ad::ShapeError("adam_update: gradient layout differs");
  if (state.step == 0 || !state.m.same_layout(params)) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
    state.step = 0;
  }
  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.second.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params.entry(i).second;
    const Matrix g = scale * grads.entry(i).second;
    Matrix& m = state.m.entry(i).second;
    Matrix& v = state.v.entry(i).second;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseAbs2();
    const Matrix mhat = m / c1;
    const Matrix vhat = v / c2;
    p -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps)).matrix();
    if (cfg.weight_decay != 0.0) p -= (lr * cfg.weight_decay) * p;
  }
}

/// Gradient list (in parameter order) as a ParamSet; zeros when empty.
inline ad::ParamSet gradient_set(const ad::ParamSet& layout, const std::vector<Matrix>& grads) {
  ad::ParamSet g = layout.zeros_like();
  if (grads.empty()) return g;
  if (grads.size() != layout.size()) throw ad::ShapeError("gradient count differs from parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) g.entry(i).second = grads[i];
  return g;
}

// --- run bookkeeping -----------------------------------------------------------

struct HistoryRow {
  int round = 0;
  std::string phase;  // warmup, theta-step, phi-step, gains
  int step = 0;
  double loss = kMissing;
  double lr = kMissing;
  double eps_diss = kMissing;
  double holdout = kMissing;
};

inline const char* history_header() {
  return "round,phase,step,loss,lr,eps_diss_measured,holdout_err";
}

inline std::string history_line(const HistoryRow& r) {
  auto num = [](double v) { return std::isnan(v) ? std::string() : io::format_double(v); };
  return std::to_string(r.round) + "," + r.phase + "," + std::to_string(r.step) + "," +
         num(r.loss) + "," + num(r.lr) + "," + num(r.eps_diss) + "," + num(r.holdout);
}

inline void write_history(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << history_header() << '\n';
  for (const HistoryRow& r : rows) out << history_line(r) << '\n';
}

inline std::vector<HistoryRow> read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<HistoryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1) {
      f.push_back(line.substr(start, pos - start));
    }
    f.push_back(line.substr(start));
    if (f.size() != 7) throw io::FormatError("history row has " + std::to_string(f.size()) + " fields");
    auto num = [](const std::string& s) { return s.empty() ? kMissing : std::stod(s); };
    rows.push_back({std::stoi(f[0]), f[1], std::stoi(f[2]), num(f[3]), num(f[4]), num(f[5]), num(f[6])});
  }
  return rows;
}

struct TrainRun {
  std::uint64_t seed = 0;
  AdamState theta_opt;
  AdamState phi_opt;
  std::vector<HistoryRow> history;
  double eps_diss = 0.0;          // latest measured dissipation residual
  double policy_fraction = 0.0;   // share of policy-excited windows in the latest theta step
  std::size_t skipped = 0;        // diverged predicted windows in the latest theta step
  std::function<void(const HistoryRow&)> on_row;

  void record(const HistoryRow& r) {
    history.push_back(r);
    if (on_row) on_row(r);
  }
};

// --- theta step ------------------------------------------------------------------

struct SysIdConfig {
  int epochs = 100;
  int batch_size = 64;
  AdamConfig adam{3e-3, 1e-5};
  ExecOptions exec;
};

/// Minibatch Adam on the system-identification loss; one history row per
/// epoch with the mean loss over the epoch. Returns the last epoch's loss.
inline double theta_step(StructuredPHModel& model, const std::vector<const Trajectory*>& data,
                         const SysIdConfig& cfg, TrainRun& run, int round,
                         const std::string& phase = "theta-step") {
  if (data.empty()) throw std::invalid_argument("theta_step: no training data");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw std::invalid_argument("theta_step: bad config");
  const std::size_t n = data.size();
  const std::size_t bs = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.batch_size));
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const long total = static_cast<long>(per_epoch) * cfg.epochs;
  std::mt19937_64 rng(derive_seed(run.seed, 0x7e7a, static_cast<std::uint64_t>(round) * 4 +
                                                         (phase == "warmup" ? 1 : 2)));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  run.theta_opt = AdamState{};
  long step = 0;
  double last = kMissing;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    double lr = cfg.adam.lr_max;
    std::size_t skipped = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t first = b * bs;
      const std::size_t count = std::min(bs, n - first);
      std::vector<const Trajectory*> mb;
      for (std::size_t j = 0; j < count; ++j) mb.push_back(data[order[first + j]]);
      const ad::ParamSet before = model.params;
      const SysIdLoss l = system_id_loss(model, mb, true, cfg.exec);
      if (!std::isfinite(l.loss)) {
        model.params = before;
        throw TrainingAbort("non-finite system-identification loss in round " +
                                std::to_string(round) + ", epoch " + std::to_string(epoch),
                            round);
      }
      sum += l.loss * static_cast<double>(count);
      skipped += l.skipped;
      lr = cosine_lr(step, total, cfg.adam.lr_max, cfg.adam.lr_min);
      adam_update(model.params, gradient_set(model.params, l.gradient), run.theta_opt, lr, cfg.adam);
      ++step;
      if (!model.params.all_finite()) {
        model.params = before;
        throw TrainingAbort("non-finite model parameters in round " + std::to_string(round), round);
      }
    }
    last = sum / static_cast<double>(n);
    run.skipped = skipped;
    HistoryRow row;
    row.round = round;
    row.phase = phase;
    row.step = epoch;
    row.loss = last;
    row.lr = lr;
    run.record(row);
  }
  return last;
}

inline double theta_step(StructuredPHModel& model, const std::vector<Trajectory>& data,
                         const SysIdConfig& cfg, TrainRun& run, int round,
                         const std::string& phase = "theta-step") {
  std::vector<const Trajectory*> ptrs;
  for (const Trajectory& t : data) ptrs.push_back(&t);
  return theta_step(model, ptrs, cfg, run, round, phase);
}

// --- phi step ----------------------------------------------------------------------

/// Initial states for one iteration, drawn from `seed`.
using IcSampler = std::function<std::vector<Eigen::VectorXd>(std::size_t count, std::uint64_t seed)>;

inline Matrix stack_columns(const std::vector<Eigen::VectorXd>& zs) {
  if (zs.empty()) throw std::invalid_argument("no initial states");
  Matrix m(zs.front().size(), static_cast<Eigen::Index>(zs.size()));
  for (std::size_t i = 0; i < zs.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = zs[i];
  return m;
}

struct PolicyTrainConfig {
  int iterations = 200;
  int batch_size = 64;
  AdamConfig adam{1e-3, 1e-5};
  ExecOptions exec;
  bool resample = true;  // fresh initial states every iteration
};

struct RolloutOptimization {
  double initial = kMissing;
  double final = kMissing;
  std::vector<Matrix> final_knots;  // knots of the last evaluated batch
};

/// Adam on a rollout cost whose trainable parameters are `params`.
/// `make_problem(cols)` builds the problem for a batch of `cols` columns.
template <class MakeProblem>
RolloutOptimization optimize_rollouts(ad::ParamSet& params, MakeProblem&& make_problem,
                                      const IcSampler& sampler, double horizon, double dt,
                                      const PolicyTrainConfig& cfg, AdamState& state,
                                      TrainRun& run, int round, const std::string& phase) {
  if (cfg.iterations < 0 || cfg.batch_size < 1) throw std::invalid_argument("bad policy config");
  EngineOptions opt;
  opt.dt = dt;
  opt.steps = step_count(horizon, dt);
  opt.chunk = cfg.exec.chunk;
  opt.workers = cfg.exec.workers;
  opt.divergence_threshold = cfg.exec.divergence_threshold;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::uint64_t stream = derive_seed(run.seed, 0xf1, static_cast<std::uint64_t>(round) * 8 +
                                                              (phase == "phi-step" ? 1 : 2));
  Matrix z0 = stack_columns(sampler(batch, derive_seed(stream, 0)));
  const auto problem = make_problem(static_cast<int>(batch));
  state = AdamState{};
  RolloutOptimization out;
  for (int it = 0; it < cfg.iterations; ++it) {
    if (cfg.resample && it > 0) z0 = stack_columns(sampler(batch, derive_seed(stream, static_cast<std::uint64_t>(it))));
    const ad::ParamSet before = params;
    const EngineResult r = differentiate_rollout(problem, z0, opt, true);
    if (!std::isfinite(r.total) || r.diverged() == batch) {
      params = before;
      throw TrainingAbort(phase + ": non-finite cost in round " + std::to_string(round) +
                              ", iteration " + std::to_string(it),
                          round);
    }
    if (it == 0) out.initial = r.total;
    const double lr = cosine_lr(it, cfg.iterations, cfg.adam.lr_max, cfg.adam.lr_min);
    adam_update(params, gradient_set(params, r.gradient), state, lr, cfg.adam);
    if (!params.all_finite()) {
      params = before;
      throw TrainingAbort(phase + ": non-finite parameters in round " + std::to_string(round), round);
    }
    HistoryRow row;
    row.round = round;
    row.phase = phase;
    row.step = it;
    row.loss = r.total;
    row.lr = lr;
    run.record(row);
  }
  // Cost and knots of the final parameters on the last batch.
  const EngineResult r = differentiate_rollout(problem, z0, opt, false);
  out.final = r.total;
  out.final_knots = r.knots;
  if (std::isnan(out.initial)) out.initial = r.total;
  return out;
}

/// max over samples of dH_d/dt + rho |z - z_d|^2 along the learned closed
/// loop, clipped below at 0. `knots[k]` holds the states at time t0 + k dt.
inline double dissipation_residual(const PortHamiltonianSystem& model,
                                   const EnergyShapingPolicy& policy,
                                   const std::vector<Matrix>& knots, double dt, double rho,
                                   const Eigen::VectorXd& target, double t0 = 0.0) {
  const auto sys = model.bind(nullptr);
  const BoundPolicy pol = policy.bind(nullptr);
  double worst = 0.0;
  for (std::size_t k = 0; k < knots.size(); ++k) {
    const Matrix& z = knots[k];
    const Matrix rate =
        closed_loop(*sys, pol, t0 + static_cast<double>(k) * dt, Var(z)).energy_rate().value();
    const Eigen::RowVectorXd dist = (z.colwise() - target).colwise().squaredNorm();
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      const double v = rate(0, c) + rho * dist(c);
      if (std::isfinite(v)) worst = std::max(worst, v);
    }
  }
  return worst;
}

struct PhiResult {
  double initial_cost = kMissing;
  double final_cost = kMissing;
  double eps_diss = 0.0;
};

/// Adam on the policy cost through rollouts of the frozen learned model.
inline PhiResult phi_step(const PortHamiltonianSystem& model, EnergyShapingPolicy& policy,
                          const IcSampler& sampler, const CostConfig& cost,
                          const PolicyTrainConfig& cfg, TrainRun& run, int round) {
  cost.validate();
  if (model.dof() != policy.config.dof || cost.dof() != policy.config.dof) {
    throw ad::ShapeError("phi_step: model, policy and cost dimensions differ");
  }
  auto make = [&](int cols) { return PolicyProblem(model, policy, cost, cols); };
  const RolloutOptimization o = optimize_rollouts(policy.params, make, sampler, cost.horizon,
                                                  cost.dt, cfg, run.phi_opt, run, round,
                                                  "phi-step");
  PhiResult res;
  res.initial_cost = o.initial;
  res.final_cost = o.final;
  res.eps_diss = dissipation_residual(model, policy, o.final_knots, cost.dt, cost.rho, cost.target);
  run.eps_diss = res.eps_diss;
  if (!run.history.empty() && run.history.back().phase == "phi-step") {
    run.history.back().eps_diss = res.eps_diss;
  }
  return res;
}

/// Optimizes baseline gains (kp, kd entries of `gains`) on the true plant.
inline RolloutOptimization optimize_gains(const PlantSpec& plant, Baseline kind,
                                          ad::ParamSet& gains, const Eigen::VectorXd& q_target,
                                          bool printed_sign, const IcSampler& sampler,
                                          const CostConfig& cost, const PolicyTrainConfig& cfg,
                                          TrainRun& run) {
  cost.validate();
  AdamState state;
  auto make = [&](int cols) {
    return GainProblem(plant, kind, gains, q_target, printed_sign, cost, cols);
  };
  return optimize_rollouts(gains, make, sampler, cost.horizon, cost.dt, cfg, state, run, 0,
                           "gains");
}

// --- alternation -------------------------------------------------------------------

struct AlternationConfig {
  PlantSpec plant;
  ModelConfig model;
  PolicyConfig policy;
  CostConfig cost;
  SysIdConfig warmup;
  SysIdConfig theta;
  PolicyTrainConfig phi;
  int rounds = 3;
  int ics = 64;
  int holdout_ics = 32;
  std::vector<double> levels{-2.0, -1.0, 0.0, 1.0, 2.0};
  double data_horizon = 0.15;
  double data_dt = 1e-2;
  double collect_horizon = 0.0;  // policy-excited rollouts; 0 means cost.horizon
  double policy_fraction = 0.5;  // share of policy-excited windows in theta steps
  double q_range = 2.0 * M_PI;
  double qdot_range = M_PI;
  bool anchor = true;  // pin the learned potential to the plant's value at q = 0
  std::uint64_t seed = 0;
  int workers = 1;
  std::filesystem::path run_dir;  // empty: nothing written

  void validate() const {
    if (rounds < 1) throw std::invalid_argument("rounds must be at least 1");
    if (ics < 1 || holdout_ics < 1) throw std::invalid_argument("need at least one initial state");
    if (!(policy_fraction >= 0.0 && policy_fraction < 1.0)) {
      throw std::invalid_argument("policy fraction must be in [0, 1)");
    }
    plant.validate();
    model.validate();
    policy.validate();
    cost.validate();
    if (model.dof != plant.dof() || policy.dof != plant.dof() || cost.dof() != plant.dof()) {
      throw ad::ShapeError("plant, model, policy and cost dimensions differ");
    }
    step_count(data_horizon, data_dt);
  }
};

struct AlternationResult {
  StructuredPHModel model;
  EnergyShapingPolicy policy;
  TrainRun run;
  std::vector<double> holdout;   // per round, after the theta step
  std::vector<double> eps_diss;  // per round, after the phi step
  std::vector<StructuredPHModel> round_models;
  std::vector<EnergyShapingPolicy> round_policies;
  Dataset step_data;
};

inline IcSampler plant_sampler(const AnalyticPlant& plant, double q_range, double qdot_range) {
  return [plant, q_range, qdot_range](std::size_t count, std::uint64_t seed) {
    return sample_ics(plant, count, seed, q_range, qdot_range);
  };
}

inline Controller policy_controller(const StructuredPHModel& model,
                                    const EnergyShapingPolicy& policy) {
  ControllerHandle h;
  h.kind = ControllerKind::kEbpbcLearned;
  h.model = std::make_shared<StructuredPHModel>(model);
  h.policy = std::make_shared<EnergyShapingPolicy>(policy);
  return h.make();
}

inline std::vector<const Trajectory*> pointers(const std::vector<Trajectory>& v) {
  std::vector<const Trajectory*> out;
  for (const Trajectory& t : v) out.push_back(&t);
  return out;
}

/// Warm-up on step-excited data, then `rounds` of policy-aware data
/// collection, a theta step on the mixture and a phi step.
inline AlternationResult alternate_optimize(const AlternationConfig& cfg) {
  cfg.validate();
  const AnalyticPlant plant(cfg.plant);
  const int n = plant.dof();
  const auto knots = static_cast<std::size_t>(step_count(cfg.data_horizon, cfg.data_dt) + 1);
  const double collect = cfg.collect_horizon > 0.0 ? cfg.collect_horizon : cfg.cost.horizon;
  BatchOptions bopt;
  bopt.workers = cfg.workers;

  AlternationResult res;
  res.run.seed = cfg.seed;
  res.model = StructuredPHModel(cfg.model, derive_seed(cfg.seed, 0xa1));
  res.policy = EnergyShapingPolicy(cfg.policy, derive_seed(cfg.seed, 0xa2));
  const auto checkpoints = cfg.run_dir / "checkpoints";
  auto flush = [&] {
    if (!cfg.run_dir.empty()) write_history(cfg.run_dir / "history.csv", res.run.history);
  };
  auto save = [&](int round, const char* what) {
    if (cfg.run_dir.empty()) return;
    const std::string stem = "round_" + std::to_string(round) + "_" + what + ".json";
    if (std::string(what) == "theta") {
      io::save_json(checkpoints / stem, io::model_to_json(res.model));
    } else {
      io::save_json(checkpoints / stem, io::policy_to_json(res.policy));
    }
    flush();
  };
  auto anchor = [&] {
    if (cfg.anchor) res.model.anchor_potential(phc::potential(plant, Eigen::VectorXd::Zero(n)));
  };

  // Phase 0: step-excited data and warm-up.
  const auto ics = sample_ics(plant, static_cast<std::size_t>(cfg.ics), derive_seed(cfg.seed, 0xb1),
                              cfg.q_range, cfg.qdot_range);
  res.step_data = step_excited_dataset(plant, ics, excitation_levels(cfg.levels, plant.inputs()),
                                       cfg.data_horizon, cfg.data_dt, bopt);
  if (res.step_data.failures > 0) {
    log::warning(std::to_string(res.step_data.failures) + " step-excited rollouts diverged");
  }
  try {
    theta_step(res.model, res.step_data.trajectories, cfg.warmup, res.run, 0, "warmup");
  } catch (const TrainingAbort&) {
    save(0, "theta");
    throw;
  }
  anchor();
  save(0, "theta");

  const auto holdout_ics = sample_ics(plant, static_cast<std::size_t>(cfg.holdout_ics),
                                      derive_seed(cfg.seed, 0xb2), cfg.q_range, cfg.qdot_range);
  const IcSampler sampler = plant_sampler(plant, cfg.q_range, cfg.qdot_range);
  std::mt19937_64 mix_rng(derive_seed(cfg.seed, 0xb3));

  for (int round = 1; round <= cfg.rounds; ++round) {
    try {
      // (a) policy-excited data on the true plant, mixed with step-excited data.
      const Controller u = policy_controller(res.model, res.policy);
      const std::string policy_id = "round_" + std::to_string(round - 1) + "_phi";
      const auto round_ics =
          sample_ics(plant, static_cast<std::size_t>(cfg.ics),
                     derive_seed(cfg.seed, 0xc1, static_cast<std::uint64_t>(round)), cfg.q_range,
                     cfg.qdot_range);
      const Dataset collected = split_windows(
          policy_excited_dataset(plant, u, round_ics, collect, cfg.data_dt, policy_id, bopt), knots);
      std::vector<const Trajectory*> mixed = pointers(res.step_data.trajectories);
      std::vector<std::size_t> pick(collected.size());
      for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
      std::shuffle(pick.begin(), pick.end(), mix_rng);
      const auto want = static_cast<std::size_t>(std::llround(
          static_cast<double>(mixed.size()) * cfg.policy_fraction / (1.0 - cfg.policy_fraction)));
      const std::size_t take = std::min(want, pick.size());
      for (std::size_t i = 0; i < take; ++i) mixed.push_back(&collected.trajectories[pick[i]]);
      res.run.policy_fraction = static_cast<double>(take) / static_cast<double>(mixed.size());
      theta_step(res.model, mixed, cfg.theta, res.run, round, "theta-step");
      anchor();

      // Held-out derivative error on fresh policy-excited data.
      const Dataset held = split_windows(
          policy_excited_dataset(plant, u, holdout_ics, collect, cfg.data_dt, policy_id, bopt), knots);
      double hold = kMissing;
      if (held.size() > 0) hold = system_id_loss(res.model, held.trajectories, false, cfg.theta.exec).loss;
      res.holdout.push_back(hold);
      if (!res.run.history.empty() && res.run.history.back().phase == "theta-step") {
        res.run.history.back().holdout = hold;
      } else {
        res.run.record({round, "theta-step", 0, kMissing, kMissing, kMissing, hold});
      }
      save(round, "theta");

      // (b) policy update on the learned model.
      const PhiResult pr = phi_step(res.model, res.policy, sampler, cfg.cost, cfg.phi, res.run, round);
      res.eps_diss.push_back(pr.eps_diss);
      save(round, "phi");
    } catch (const TrainingAbort& e) {
      flush();
      throw TrainingAbort(std::string(e.what()), round);
    }
    res.round_models.push_back(res.model);
    res.round_policies.push_back(res.policy);
  }
  flush();
  return res;
}

}  // namespace phc
