#pragma once

// Fixed-step RK4 integration: batched value-level rollouts, trajectory
// records, and a differentiable rollout engine that recomputes each step on
// a short local tape during the reverse sweep.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "phc/autodiff.hpp"
#include "phc/phmodel.hpp"

namespace phc {

class DivergenceError : public ad::NumericError {
 public:
  DivergenceError(const std::string& what, int step) : ad::NumericError(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// Knot-sampled record (z_k, dz_k, u_k) of one rollout.
struct Trajectory {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> derivs;
  std::vector<Eigen::VectorXd> inputs;

  std::size_t size() const { return times.size(); }
  int dof() const { return states.empty() ? 0 : static_cast<int>(states.front().size() / 2); }
  int input_dim() const { return inputs.empty() ? 0 : static_cast<int>(inputs.front().size()); }
  double dt() const { return times.size() < 2 ? 0.0 : times[1] - times[0]; }

  bool consistent() const {
    const std::size_t n = times.size();
    return states.size() == n && derivs.size() == n && inputs.size() == n;
  }

  /// Knots [first, first + count) as a trajectory of their own.
  Trajectory window(std::size_t first, std::size_t count) const {
    Trajectory w;
    for (std::size_t k = first; k < first + count && k < size(); ++k) {
      w.times.push_back(times[k]);
      w.states.push_back(states[k]);
      w.derivs.push_back(derivs[k]);
      w.inputs.push_back(inputs[k]);
    }
    return w;
  }
};

/// Autonomous controlled field f(z, u) on a batch (columns are samples).
using BatchField = std::function<Matrix(const Matrix& z, const Matrix& u)>;
/// Feedback law u(t, z) on a batch.
using Controller = std::function<Matrix(double t, const Matrix& z)>;

/// Field of a system with its parameters as they are now.
inline BatchField make_field(const PortHamiltonianSystem& sys) {
  std::shared_ptr<const BoundSystem> bound = sys.bind(nullptr);
  return [bound](const Matrix& z, const Matrix& u) {
    return vector_field(*bound, Var(z), Var(u)).value();
  };
}

inline Controller zero_controller(int inputs) {
  return [inputs](double, const Matrix& z) { return Matrix::Zero(inputs, z.cols()).eval(); };
}

inline Controller constant_controller(const Eigen::VectorXd& u) {
  return [u](double, const Matrix& z) { return u.replicate(1, z.cols()).eval(); };
}

/// One classical RK4 step with the input re-evaluated at every stage.
inline Matrix rk4_step(const BatchField& f, const Matrix& z, const Controller& u, double t,
                       double dt, int step = 0) {
  if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be positive");
  const double h = 0.5 * dt;
  const Matrix k1 = f(z, u(t, z));
  const Matrix z2 = z + h * k1;
  const Matrix k2 = f(z2, u(t + h, z2));
  const Matrix z3 = z + h * k2;
  const Matrix k3 = f(z3, u(t + h, z3));
  const Matrix z4 = z + dt * k3;
  const Matrix k4 = f(z4, u(t + dt, z4));
  Matrix out = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  if (!out.allFinite()) {
    throw DivergenceError("non-finite state at step " + std::to_string(step), step);
  }
  return out;
}

/// Number of steps for horizon T; T must be an integer multiple of dt.
inline int step_count(double horizon, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (horizon < 0.0) throw std::invalid_argument("horizon must be non-negative");
  const double k = horizon / dt;
  const double r = std::round(k);
  if (std::abs(k - r) > 1e-9 * std::max(1.0, k)) {
    throw std::invalid_argument("horizon is not an integer multiple of dt");
  }
  return static_cast<int>(r);
}

/// Closed-loop rollout of a single initial state.
inline Trajectory rollout(const BatchField& f, const Eigen::VectorXd& z0, const Controller& u,
                          double horizon, double dt, double t0 = 0.0) {
  const int steps = step_count(horizon, dt);
  Trajectory tr;
  Matrix z = z0;
  for (int k = 0; k <= steps; ++k) {
    const double t = t0 + k * dt;
    const Matrix uk = u(t, z);
    tr.times.push_back(t);
    tr.states.push_back(z.col(0));
    tr.inputs.push_back(uk.col(0));
    tr.derivs.push_back(f(z, uk).col(0));
    if (k < steps) z = rk4_step(f, z, u, t, dt, k);
  }
  return tr;
}

/// Rollout with a recorded input sequence held constant between knots.
inline Trajectory rollout_zoh(const BatchField& f, const Eigen::VectorXd& z0,
                              const std::vector<Eigen::VectorXd>& inputs, double dt,
                              double t0 = 0.0) {
  if (inputs.empty()) throw std::invalid_argument("rollout_zoh: empty input sequence");
  Trajectory tr;
  Matrix z = z0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const double t = t0 + static_cast<double>(k) * dt;
    const Matrix uk = inputs[k];
    tr.times.push_back(t);
    tr.states.push_back(z.col(0));
    tr.inputs.push_back(uk.col(0));
    tr.derivs.push_back(f(z, uk).col(0));
    if (k + 1 < inputs.size()) {
      z = rk4_step(f, z, [&uk](double, const Matrix&) { return uk; }, t, dt, static_cast<int>(k));
    }
  }
  return tr;
}

struct RolloutFailure {
  std::size_t index;
  int step;
};

struct BatchRollout {
  std::vector<Trajectory> trajectories;  // empty entries for failed rollouts
  std::vector<RolloutFailure> failures;

  bool ok(std::size_t i) const { return !trajectories[i].times.empty(); }
};

namespace detail {

/// Runs `body(chunk_index)` for every chunk on up to `workers` threads.
template <class Body>
void parallel_chunks(std::size_t chunks, int workers, Body&& body) {
  const std::size_t threads =
      std::min<std::size_t>(chunks, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) body(c);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = next++; c < chunks; c = next++) body(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline bool column_ok(const Matrix& z, Eigen::Index c, double threshold) {
  return z.col(c).allFinite() && z.col(c).norm() <= threshold;
}

}  // namespace detail

struct BatchOptions {
  int workers = 1;
  int chunk = 64;  // fixed so results do not depend on the worker count
  double divergence_threshold = std::numeric_limits<double>::infinity();
  double t0 = 0.0;
};

/// Independent closed-loop rollouts of many initial states, integrated in
/// fixed-size column blocks. Diverging rollouts are reported, not fatal.
inline BatchRollout rollout_batch(const BatchField& f, const std::vector<Eigen::VectorXd>& z0s,
                                  const Controller& u, double horizon, double dt,
                                  const BatchOptions& opt = {}) {
  if (z0s.empty()) throw std::invalid_argument("rollout_batch: empty batch");
  const int steps = step_count(horizon, dt);
  const std::size_t n = z0s.size();
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, opt.chunk));
  const std::size_t chunks = (n + chunk - 1) / chunk;
  BatchRollout out;
  out.trajectories.resize(n);
  std::vector<std::vector<RolloutFailure>> failures(chunks);

  detail::parallel_chunks(chunks, opt.workers, [&](std::size_t c) {
    const std::size_t first = c * chunk;
    const std::size_t count = std::min(chunk, n - first);
    Matrix z(z0s.front().size(), static_cast<Eigen::Index>(count));
    for (std::size_t j = 0; j < count; ++j) z.col(static_cast<Eigen::Index>(j)) = z0s[first + j];
    std::vector<int> failed_at(count, -1);
    std::vector<Trajectory> local(count);

    auto sanitize = [&](Matrix& m, int k) {
      for (std::size_t j = 0; j < count; ++j) {
        const auto col = static_cast<Eigen::Index>(j);
        if (failed_at[j] < 0 && !detail::column_ok(m, col, opt.divergence_threshold)) {
          failed_at[j] = k;
        }
        if (failed_at[j] >= 0) m.col(col).setZero();
      }
    };

    sanitize(z, 0);
    for (int k = 0; k <= steps; ++k) {
      const double t = opt.t0 + k * dt;
      const Matrix uk = u(t, z);
      const Matrix dz = f(z, uk);
      for (std::size_t j = 0; j < count; ++j) {
        if (failed_at[j] >= 0) continue;
        const auto col = static_cast<Eigen::Index>(j);
        local[j].times.push_back(t);
        local[j].states.push_back(z.col(col));
        local[j].inputs.push_back(uk.col(col));
        local[j].derivs.push_back(dz.col(col));
      }
      if (k == steps) break;
      Matrix next;
      try {
        next = rk4_step(f, z, u, t, dt, k);
      } catch (const ad::NumericError&) {
        // Locate the offending columns one at a time.
        next = Matrix(z.rows(), z.cols());
        for (Eigen::Index col = 0; col < z.cols(); ++col) {
          try {
            next.col(col) = rk4_step(f, z.col(col), u, t, dt, k);
          } catch (const ad::NumericError&) {
            next.col(col).setConstant(std::numeric_limits<double>::quiet_NaN());
          }
        }
      }
      z = std::move(next);
      sanitize(z, k + 1);
    }
    for (std::size_t j = 0; j < count; ++j) {
      if (failed_at[j] >= 0) {
        failures[c].push_back({first + j, failed_at[j]});
      } else {
        out.trajectories[first + j] = std::move(local[j]);
      }
    }
  });
  for (auto& fc : failures) out.failures.insert(out.failures.end(), fc.begin(), fc.end());
  return out;
}

// --- differentiable rollouts -------------------------------------------------

/// RK4 step of a traced field g(t, z); `k1` is g(t, z) if already computed.
template <class Field>
Var rk4_step(Field&& g, double t, const Var& z, double dt, const Var& k1) {
  const double h = 0.5 * dt;
  const Var k2 = g(t + h, z + h * k1);
  const Var k3 = g(t + h, z + h * k2);
  const Var k4 = g(t + dt, z + dt * k3);
  return z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

struct EngineOptions {
  double dt = 1e-2;
  int steps = 0;
  double t0 = 0.0;
  int chunk = 64;
  int workers = 1;
  double divergence_threshold = 1e3;
};

struct EngineResult {
  double total = 0.0;                  // sum of per-column costs
  std::vector<double> column_costs;    // diverged columns carry the batch maximum
  std::vector<int> diverged_at;        // -1 when the column stayed bounded
  std::vector<Matrix> knots;           // z_k for k = 0..steps
  std::vector<Matrix> gradient;        // one entry per trainable Var, in order
  std::size_t diverged() const {
    return static_cast<std::size_t>(
        std::count_if(diverged_at.begin(), diverged_at.end(), [](int k) { return k >= 0; }));
  }
};

/// Cost of a batch of rollouts z_{k+1} = RK4(z_k) and its gradient with
/// respect to trainable parameters.
///
/// `Problem` provides
///   - `int columns() const`
///   - `Problem select(const std::vector<int>& cols) const`
///   - `bind(ad::Tape*) const` returning an object with
///       `Var field(int k, double t, const Var& z) const`,
///       `Var knot_cost(int k, double t, const Var& z, const Var& f) const`
///         (1 x B, or an invalid Var for none),
///       `Var terminal_cost(double t, const Var& z) const` (1 x B, or invalid),
///       `std::vector<Var> trainable() const`.
///
/// The forward pass runs without a tape. The reverse pass processes columns
/// in fixed-size chunks and, inside each chunk, recomputes one step at a time
/// on a fresh tape, carrying the state adjoint backwards. Columns whose state
/// leaves the ball of radius `divergence_threshold` (or turns non-finite) are
/// excluded from the gradient and assigned the worst cost in the batch.
template <class Problem>
EngineResult differentiate_rollout(const Problem& problem, const Matrix& z0,
                                   const EngineOptions& opt, bool want_gradient = true) {
  const int steps = opt.steps;
  const int cols = static_cast<int>(z0.cols());
  if (problem.columns() != cols) throw ad::ShapeError("problem and initial states disagree");
  EngineResult res;
  res.diverged_at.assign(static_cast<std::size_t>(cols), -1);
  res.column_costs.assign(static_cast<std::size_t>(cols), 0.0);
  auto time_at = [&](int k) { return opt.t0 + k * opt.dt; };

  auto sanitize = [&](Matrix& z, int k) {
    for (int c = 0; c < cols; ++c) {
      auto& d = res.diverged_at[static_cast<std::size_t>(c)];
      if (d < 0 && !detail::column_ok(z, c, opt.divergence_threshold)) d = k;
      if (d >= 0) z.col(c).setZero();
    }
  };
  auto add_costs = [&](const Var& cost) {
    if (!cost.valid()) return;
    const Matrix& v = cost.value();
    for (int c = 0; c < cols; ++c) {
      res.column_costs[static_cast<std::size_t>(c)] += v.cols() == 1 ? v(0, 0) : v(0, c);
    }
  };

  // Forward pass, values only.
  {
    const auto bound = problem.bind(nullptr);
    Matrix z = z0;
    sanitize(z, 0);
    res.knots.reserve(static_cast<std::size_t>(steps + 1));
    for (int k = 0; k < steps; ++k) {
      res.knots.push_back(z);
      const double t = time_at(k);
      auto g = [&](double s, const Var& x) { return bound.field(k, s, x); };
      Matrix next;
      try {
        const Var zk(z);
        const Var f = bound.field(k, t, zk);
        const Var cost = bound.knot_cost(k, t, zk, f);
        next = rk4_step(g, t, zk, opt.dt, f).value();
        add_costs(cost);
      } catch (const ad::NumericError&) {
        next = Matrix(z.rows(), z.cols());
        for (int c = 0; c < cols; ++c) {
          const auto one = problem.select({c});
          const auto b1 = one.bind(nullptr);
          auto g1 = [&](double s, const Var& x) { return b1.field(k, s, x); };
          try {
            const Var zc(Matrix(z.col(c)));
            const Var f = b1.field(k, t, zc);
            const Var kc = b1.knot_cost(k, t, zc, f);
            if (kc.valid()) res.column_costs[static_cast<std::size_t>(c)] += kc.value()(0, 0);
            next.col(c) = rk4_step(g1, t, zc, opt.dt, f).value();
          } catch (const ad::NumericError&) {
            next.col(c).setConstant(std::numeric_limits<double>::quiet_NaN());
          }
        }
      }
      z = std::move(next);
      sanitize(z, k + 1);
    }
    res.knots.push_back(z);
    add_costs(bound.terminal_cost(time_at(steps), Var(z)));
  }

  std::vector<int> healthy;
  double worst = 0.0;
  bool any_healthy = false;
  for (int c = 0; c < cols; ++c) {
    if (res.diverged_at[static_cast<std::size_t>(c)] < 0) {
      healthy.push_back(c);
      const double v = res.column_costs[static_cast<std::size_t>(c)];
      if (std::isfinite(v)) {
        worst = any_healthy ? std::max(worst, v) : v;
        any_healthy = true;
      }
    }
  }
  for (int c = 0; c < cols; ++c) {
    if (res.diverged_at[static_cast<std::size_t>(c)] >= 0) {
      res.column_costs[static_cast<std::size_t>(c)] = worst;
    }
  }
  res.total = 0.0;
  for (double v : res.column_costs) res.total += v;
  if (!want_gradient) return res;

  // Reverse pass.
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, opt.chunk));
  const std::size_t chunks = (healthy.size() + chunk - 1) / chunk;
  std::vector<std::vector<Matrix>> partial(chunks);

  detail::parallel_chunks(chunks, opt.workers, [&](std::size_t ci) {
    const std::size_t first = ci * chunk;
    const std::size_t count = std::min(chunk, healthy.size() - first);
    std::vector<int> sel(healthy.begin() + static_cast<std::ptrdiff_t>(first),
                         healthy.begin() + static_cast<std::ptrdiff_t>(first + count));
    const auto sub = problem.select(sel);
    auto gather = [&](const Matrix& z) {
      Matrix out(z.rows(), static_cast<Eigen::Index>(sel.size()));
      for (std::size_t j = 0; j < sel.size(); ++j) {
        out.col(static_cast<Eigen::Index>(j)) = z.col(sel[j]);
      }
      return out;
    };
    std::vector<Matrix> acc;
    auto accumulate = [&](const ad::Tape& tape, const std::vector<Var>& params) {
      if (acc.empty()) {
        for (const Var& p : params) acc.push_back(tape.adjoint(p));
      } else {
        for (std::size_t i = 0; i < params.size(); ++i) acc[i] += tape.adjoint(params[i]);
      }
    };

    Matrix lambda;
    {
      ad::Tape tape;
      const auto bound = sub.bind(&tape);
      const Var z = tape.leaf(gather(res.knots.back()));
      const Var cost = bound.terminal_cost(time_at(steps), z);
      if (cost.valid() && cost.tape() == &tape) {
        std::vector<std::pair<Var, Matrix>> seeds{
            {cost, Matrix::Ones(cost.rows(), cost.cols())}};
        tape.backward(std::span<const std::pair<Var, Matrix>>(seeds));
      }
      lambda = tape.adjoint(z);
      accumulate(tape, bound.trainable());
    }
    for (int k = steps - 1; k >= 0; --k) {
      ad::Tape tape;
      const auto bound = sub.bind(&tape);
      const double t = time_at(k);
      const Var z = tape.leaf(gather(res.knots[static_cast<std::size_t>(k)]));
      auto g = [&](double s, const Var& x) { return bound.field(k, s, x); };
      const Var f = bound.field(k, t, z);
      const Var cost = bound.knot_cost(k, t, z, f);
      const Var next = rk4_step(g, t, z, opt.dt, f);
      std::vector<std::pair<Var, Matrix>> seeds;
      if (next.tape() == &tape) seeds.emplace_back(next, lambda);
      if (cost.valid() && cost.tape() == &tape) {
        seeds.emplace_back(cost, Matrix::Ones(cost.rows(), cost.cols()));
      }
      tape.backward(std::span<const std::pair<Var, Matrix>>(seeds));
      lambda = tape.adjoint(z);
      accumulate(tape, bound.trainable());
    }
    partial[ci] = std::move(acc);
  });

  for (auto& p : partial) {
    if (p.empty()) continue;
    if (res.gradient.empty()) {
      res.gradient = std::move(p);
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) res.gradient[i] += p[i];
    }
  }
  return res;
}

// --- CSV records -------------------------------------------------------------

inline std::string trajectory_csv_header(int n, int m) {
  std::string h = "t";
  for (int i = 1; i <= n; ++i) h += ",q" + std::to_string(i);
  for (int i = 1; i <= n; ++i) h += ",p" + std::to_string(i);
  for (int i = 1; i <= m; ++i) h += ",u" + std::to_string(i);
  for (int i = 1; i <= n; ++i) h += ",dq" + std::to_string(i);
  for (int i = 1; i <= n; ++i) h += ",dp" + std::to_string(i);
  return h;
}

inline void write_trajectory_csv(const std::string& path, const Trajectory& tr, int m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const int n = tr.dof();
  out << trajectory_csv_header(n, m) << '\n';
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << buf;
  };
  for (std::size_t k = 0; k < tr.size(); ++k) {
    put(tr.times[k]);
    for (Eigen::Index i = 0; i < tr.states[k].size(); ++i) {
      out << ',';
      put(tr.states[k](i));
    }
    for (Eigen::Index i = 0; i < tr.inputs[k].size(); ++i) {
      out << ',';
      put(tr.inputs[k](i));
    }
    for (Eigen::Index i = 0; i < tr.derivs[k].size(); ++i) {
      out << ',';
      put(tr.derivs[k](i));
    }
    out << '\n';
  }
}

inline Trajectory read_trajectory_csv(const std::string& path, int n, int m) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  std::getline(in, line);
  if (line != trajectory_csv_header(n, m)) {
    throw std::runtime_error(path + ": unexpected header '" + line + "'");
  }
  Trajectory tr;
  const int width = 1 + 2 * n + m + 2 * n;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (static_cast<int>(v.size()) != width) throw std::runtime_error(path + ": bad row width");
    tr.times.push_back(v[0]);
    tr.states.push_back(Eigen::Map<Eigen::VectorXd>(v.data() + 1, 2 * n));
    tr.inputs.push_back(Eigen::Map<Eigen::VectorXd>(v.data() + 1 + 2 * n, m));
    tr.derivs.push_back(Eigen::Map<Eigen::VectorXd>(v.data() + 1 + 2 * n + m, 2 * n));
  }
  return tr;
}

}  // namespace phc
