#pragma once

// Trajectory metrics and numerical certification of closed-loop dissipation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "phc/control.hpp"
#include "phc/io.hpp"
#include "phc/odeint.hpp"
#include "phc/phmodel.hpp"
#include "phc/plants.hpp"

namespace phc::eval {

inline constexpr double kGuardDenominator = 1e-9;
inline constexpr double kGuardedValue = 1e9;

struct RelativeError {
  double value = 0.0;
  bool guarded = false;  // denominator below the guard; value is capped
};

/// |z - zhat| / |z + zhat|.
inline RelativeError relative_error(const Eigen::VectorXd& z, const Eigen::VectorXd& zhat) {
  if (z.size() != zhat.size()) throw ad::ShapeError("relative_error: length mismatch");
  const double den = (z + zhat).norm();
  if (!(den >= kGuardDenominator)) return {kGuardedValue, true};
  return {(z - zhat).norm() / den, false};
}

struct Effort {
  double l1 = 0.0;  // integral of |u|, summed over channels
  double l2 = 0.0;  // integral of u^2, summed over channels
};

/// Trapezoid integrals of the recorded inputs.
inline Effort effort_metrics(const Trajectory& tr) {
  Effort e;
  for (std::size_t k = 0; k + 1 < tr.size(); ++k) {
    const double h = tr.times[k + 1] - tr.times[k];
    e.l1 += 0.5 * h * (tr.inputs[k].cwiseAbs().sum() + tr.inputs[k + 1].cwiseAbs().sum());
    e.l2 += 0.5 * h * (tr.inputs[k].squaredNorm() + tr.inputs[k + 1].squaredNorm());
  }
  return e;
}

inline Eigen::VectorXd wrapped_difference(const Eigen::VectorXd& q, const Eigen::VectorXd& q_ref) {
  Eigen::VectorXd d(q.size());
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const double x = q(i) - q_ref(i);
    d(i) = std::atan2(std::sin(x), std::cos(x));
  }
  return d;
}

/// |wrap(q - q*)| + |p - p*| at a state.
inline double state_error(const Eigen::VectorXd& z, const Eigen::VectorXd& target) {
  const Eigen::Index n = z.size() / 2;
  return wrapped_difference(z.head(n), target.head(n)).norm() + (z.tail(n) - target.tail(n)).norm();
}

/// |[wrap(q - q*); p - p*]| at a state.
inline double wrapped_norm(const Eigen::VectorXd& z, const Eigen::VectorXd& target) {
  const Eigen::Index n = z.size() / 2;
  Eigen::VectorXd e(z.size());
  e << wrapped_difference(z.head(n), target.head(n)), z.tail(n) - target.tail(n);
  return e.norm();
}

/// Wrapped angular distance on q plus Euclidean distance on p at the last knot.
inline double terminal_error(const Trajectory& tr, const Eigen::VectorXd& target) {
  if (tr.size() == 0) throw std::invalid_argument("terminal_error: empty trajectory");
  return state_error(tr.states.back(), target);
}

/// Wrapped angular distance on q only at the last knot.
inline double terminal_position_error(const Trajectory& tr, const Eigen::VectorXd& q_target) {
  if (tr.size() == 0) throw std::invalid_argument("terminal_position_error: empty trajectory");
  const Eigen::Index n = q_target.size();
  return wrapped_difference(tr.states.back().head(n), q_target).norm();
}

/// Linear-interpolation percentile (p in [0, 100]) of a sample.
inline double percentile(std::vector<double> v, double p) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct ErrorBands {
  std::vector<double> times;
  std::vector<double> mean;
  std::vector<double> lo;  // 2.5th percentile
  std::vector<double> hi;  // 97.5th percentile
  std::size_t guarded = 0;
};

/// Per-knot mean and empirical 95% band of the relative error.
inline ErrorBands error_bands(const std::vector<Trajectory>& truth,
                              const std::vector<Trajectory>& pred) {
  if (truth.size() != pred.size() || truth.empty()) {
    throw std::invalid_argument("error_bands: need matching, nonempty trajectory sets");
  }
  const std::size_t knots = truth.front().size();
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i].size() != knots || pred[i].size() != knots) {
      throw std::invalid_argument("error_bands: knots are not aligned");
    }
  }
  ErrorBands b;
  std::vector<double> col(truth.size());
  for (std::size_t k = 0; k < knots; ++k) {
    double sum = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const RelativeError e = relative_error(truth[i].states[k], pred[i].states[k]);
      if (e.guarded) ++b.guarded;
      col[i] = e.value;
      sum += e.value;
    }
    b.times.push_back(truth.front().times[k]);
    b.mean.push_back(sum / static_cast<double>(truth.size()));
    b.lo.push_back(percentile(col, 2.5));
    b.hi.push_back(percentile(col, 97.5));
  }
  return b;
}

inline void write_bands_csv(const std::string& path, const ErrorBands& b) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "t,mean,lo,hi\n";
  for (std::size_t k = 0; k < b.times.size(); ++k) {
    out << io::format_double(b.times[k]) << ',' << io::format_double(b.mean[k]) << ','
        << io::format_double(b.lo[k]) << ',' << io::format_double(b.hi[k]) << '\n';
  }
}

struct Histogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<std::size_t> counts;
};

inline Histogram histogram(const std::vector<double>& v, std::size_t bins) {
  if (v.empty() || bins == 0) throw std::invalid_argument("histogram: empty input");
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  const double lo = *mn;
  const double hi = *mx > *mn ? *mx : *mn + 1.0;
  Histogram h;
  for (std::size_t i = 0; i <= bins; ++i) {
    h.edges.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins));
  }
  h.counts.assign(bins, 0);
  for (double x : v) {
    auto b = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

inline Matrix stack_states(const std::vector<Eigen::VectorXd>& zs) {
  Matrix m(zs.front().size(), static_cast<Eigen::Index>(zs.size()));
  for (std::size_t i = 0; i < zs.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = zs[i];
  return m;
}

// --- low-discrepancy samples -----------------------------------------------------

inline double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

/// Halton points in the box center +- half_width (infinity-norm ball).
inline std::vector<Eigen::VectorXd> halton_box(std::size_t count, const Eigen::VectorXd& center,
                                               double half_width, std::uint64_t skip = 1) {
  static constexpr std::uint64_t kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};
  const Eigen::Index d = center.size();
  if (d > 12) throw std::invalid_argument("halton_box supports up to 12 dimensions");
  std::vector<Eigen::VectorXd> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Eigen::VectorXd z(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double u = radical_inverse(i + skip, kPrimes[j]);
      z(j) = center(j) + half_width * (2.0 * u - 1.0);
    }
    out.push_back(z);
  }
  return out;
}

// --- certification ---------------------------------------------------------------

struct CertifyOptions {
  double box = 2.0;             // half-width of the sampled box around z_d
  std::size_t samples = 10000;
  double rho = 1e-3;
  double eps_diss = 0.0;        // measured during training
  double t = 0.0;               // time at which K*(t, z) is evaluated for the samples
  std::size_t trajectories = 32;
  double horizon = 20.0;
  double dt = 1e-2;
  double rate_tolerance = 1e-12;  // relative to |grad H_d| |f|
  std::uint64_t seed = 0;
  int workers = 1;
};

struct CertSample {
  Eigen::VectorXd z;
  double rate_learned = 0.0;
  double rate_true = 0.0;
};

struct CertificateReport {
  std::size_t samples = 0;
  std::vector<CertSample> table;
  double c_f = 0.0;          // min singular value of the plant's F
  double c_f_model = 0.0;    // same for the model
  double grad_bound = 0.0;   // alpha_D
  double eps = 0.0;          // max |f_theta - f|
  double eps_r = 0.0;
  double eps_g = 0.0;
  double delta = 0.0;
  double xi = 0.0;
  double eps_diss = 0.0;
  double rho = 0.0;
  double radius = 0.0;       // sqrt((xi + eps_diss) / rho)
  double gap_radius = 0.0;   // sqrt(xi / rho)
  double sublevel = 0.0;     // H_d level of the smallest sublevel set containing the ball
  std::size_t rate_violations = 0;  // samples with dH_d/dt > 0 on the plant
  std::size_t trajectories = 0;
  std::size_t entered = 0;
  std::size_t stayed = 0;
  std::size_t diverged = 0;

  bool dissipative() const { return rate_violations == 0; }
  bool trajectories_ok() const { return trajectories > 0 && stayed == trajectories; }
  bool zero_gap() const { return eps <= 1e-10 && eps_r <= 1e-10 && eps_g <= 1e-10; }
  bool pass() const { return std::isfinite(xi) && trajectories_ok(); }

  io::Json to_json() const {
    io::Json j;
    j["samples"] = samples;
    j["c_F"] = c_f;
    j["c_F_model"] = c_f_model;
    j["grad_bound"] = grad_bound;
    j["eps"] = eps;
    j["eps_R"] = eps_r;
    j["eps_G"] = eps_g;
    j["delta"] = delta;
    j["xi"] = xi;
    j["eps_diss"] = eps_diss;
    j["rho"] = rho;
    j["radius"] = radius;
    j["gap_radius"] = gap_radius;
    j["sublevel"] = sublevel;
    j["rate_violations"] = rate_violations;
    j["trajectories"] = {{"tested", trajectories}, {"entered", entered},
                         {"stayed", stayed}, {"diverged", diverged}};
    j["verdict"] = {{"zero_gap", zero_gap()}, {"dissipative", dissipative()},
                    {"trajectories_ok", trajectories_ok()}, {"pass", pass()}};
    return j;
  }

  void write_samples_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    const Eigen::Index d = table.empty() ? 0 : table.front().z.size();
    for (Eigen::Index i = 0; i < d; ++i) out << "z" << i + 1 << ',';
    out << "rate_learned,rate_true\n";
    for (const CertSample& s : table) {
      for (Eigen::Index i = 0; i < d; ++i) out << io::format_double(s.z(i)) << ',';
      out << io::format_double(s.rate_learned) << ',' << io::format_double(s.rate_true) << '\n';
    }
  }
};

/// H_d = H + V* of the plant (or of a model) at a batch of states, 1 x B.
inline Eigen::RowVectorXd desired_energy(const PortHamiltonianSystem& sys,
                                         const EnergyShapingPolicy& policy, const Matrix& zs) {
  return desired_hamiltonian(*sys.bind(nullptr), policy.bind(nullptr), Var(zs)).value();
}

/// Measures the model gaps and the plant's closed-loop energy rate under the
/// learned EB-PBC on a box around z_d, derives the ultimate-bound radius and
/// checks that plant trajectories enter and remain in the matching sublevel set.
inline CertificateReport certify(const AnalyticPlant& plant, const PortHamiltonianSystem& model,
                                 const EnergyShapingPolicy& policy, const CertifyOptions& opt) {
  if (plant.dof() != model.dof() || plant.inputs() != model.inputs() ||
      plant.dof() != policy.config.dof || plant.inputs() != policy.config.inputs) {
    throw ad::ShapeError("certify: plant, model and policy dimensions differ");
  }
  if (!(opt.rho > 0.0) || opt.samples == 0) throw std::invalid_argument("certify: bad options");
  const int n = plant.dof();
  const Eigen::VectorXd zd = policy.config.target;
  CertificateReport rep;
  rep.samples = opt.samples;
  rep.rho = opt.rho;
  rep.eps_diss = std::max(0.0, opt.eps_diss);

  const auto pts = halton_box(opt.samples, zd, opt.box);
  const Matrix zs = stack_states(pts);
  const auto bp = plant.bind(nullptr);
  const auto bm = model.bind(nullptr);
  const BoundPolicy pol = policy.bind(nullptr);
  const Var z(zs);

  // Closed loop: input computed on the model, applied to both.
  const ClosedLoopEval learned = closed_loop(*bm, pol, opt.t, z);
  const Matrix u = learned.u.value();
  const Matrix f_model = learned.f.value();
  const Matrix f_model0 = vector_field(*bm, z, Var(Matrix::Zero(u.rows(), u.cols()))).value();
  const Matrix f_true = vector_field(*bp, z, Var(u)).value();
  const Matrix f_true0 = vector_field(*bp, z, Var(Matrix::Zero(u.rows(), u.cols()))).value();
  const Matrix rate_learned = learned.energy_rate().value();
  const StateGradient gh_true = bp->grad_hamiltonian(z);
  const Matrix ga = pol.grad_added_potential(positions(z)).value();
  Matrix grad_hd(2 * n, zs.cols());
  grad_hd << gh_true.dq.value() + ga, gh_true.dp.value();
  const Eigen::RowVectorXd rate_true = (grad_hd.array() * f_true.array()).colwise().sum();
  const Matrix gh_model = [&] {
    const StateGradient g = bm->grad_hamiltonian(z);
    Matrix m(2 * n, zs.cols());
    m << g.dq.value(), g.dp.value();
    return m;
  }();

  rep.c_f = std::numeric_limits<double>::infinity();
  rep.c_f_model = std::numeric_limits<double>::infinity();
  double xi = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const Eigen::VectorXd q = pts[i].head(n);
    rep.eps = std::max({rep.eps, (f_model.col(c) - f_true.col(c)).norm(),
                        (f_model0.col(c) - f_true0.col(c)).norm()});
    const Eigen::MatrixXd fp = structure_matrix(plant, q);
    const Eigen::MatrixXd fm = structure_matrix(model, q);
    rep.eps_r = std::max(rep.eps_r, (fm - fp).norm() == 0.0 ? 0.0
                                                            : Eigen::JacobiSVD<Eigen::MatrixXd>(fm - fp).singularValues()(0));
    const Eigen::MatrixXd dg = full_input_matrix(model, q) - full_input_matrix(plant, q);
    rep.eps_g = std::max(rep.eps_g, dg.norm() == 0.0 ? 0.0
                                                     : Eigen::JacobiSVD<Eigen::MatrixXd>(dg).singularValues()(0));
    rep.c_f = std::min(rep.c_f, Eigen::JacobiSVD<Eigen::MatrixXd>(fp).singularValues().minCoeff());
    rep.c_f_model = std::min(rep.c_f_model, Eigen::JacobiSVD<Eigen::MatrixXd>(fm).singularValues().minCoeff());
    rep.grad_bound = std::max({rep.grad_bound, gh_model.col(c).norm(), ga.col(c).norm()});
    const double dist2 = (pts[i] - zd).squaredNorm();
    const double rt = rate_true(c);
    xi = std::max(xi, rt + opt.rho * dist2 - rep.eps_diss);
    const double scale = grad_hd.col(c).norm() * f_true.col(c).norm();
    if (rt > opt.rate_tolerance * std::max(1.0, scale)) ++rep.rate_violations;
    rep.table.push_back({pts[i], rate_learned(0, c), rt});
  }
  rep.xi = std::isfinite(xi) ? xi : std::numeric_limits<double>::infinity();
  rep.delta = (rep.eps + rep.eps_r * rep.grad_bound) / rep.c_f;
  rep.radius = std::sqrt((rep.xi + rep.eps_diss) / rep.rho);
  rep.gap_radius = std::sqrt(rep.xi / rep.rho);

  // Smallest sublevel set of the plant's H_d containing the ball of that radius.
  {
    const auto ball = halton_box(4096, Eigen::VectorXd::Zero(2 * n), 1.0, 7);
    Matrix bz(2 * n, 0);
    std::vector<Eigen::VectorXd> kept;
    for (const Eigen::VectorXd& v : ball) {
      if (v.norm() <= 1.0) kept.push_back(zd + rep.radius * v);
      if (v.norm() > 1e-12) kept.push_back(zd + rep.radius * v / v.norm());
    }
    kept.push_back(zd);
    const Eigen::RowVectorXd h = desired_energy(plant, policy, stack_states(kept));
    rep.sublevel = h.maxCoeff();
  }

  // Plant trajectories from the box under the learned controller.
  {
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> d(-opt.box, opt.box);
    std::vector<Eigen::VectorXd> ics;
    for (std::size_t i = 0; i < opt.trajectories; ++i) {
      Eigen::VectorXd z0 = zd;
      for (Eigen::Index j = 0; j < z0.size(); ++j) z0(j) += d(rng);
      ics.push_back(z0);
    }
    ControllerHandle h;
    h.kind = ControllerKind::kEbpbcLearned;
    h.model = std::shared_ptr<const PortHamiltonianSystem>(model.clone());
    h.policy = std::make_shared<EnergyShapingPolicy>(policy);
    BatchOptions bo;
    bo.workers = opt.workers;
    bo.divergence_threshold = 1e6;
    const BatchRollout r = rollout_batch(make_field(plant), ics, h.make(), opt.horizon, opt.dt, bo);
    const double tol = 1e-9 * std::max(1.0, std::abs(rep.sublevel));
    rep.trajectories = ics.size();
    for (std::size_t i = 0; i < ics.size(); ++i) {
      if (!r.ok(i)) {
        ++rep.diverged;
        continue;
      }
      const Trajectory& tr = r.trajectories[i];
      Matrix states(2 * n, static_cast<Eigen::Index>(tr.size()));
      for (std::size_t k = 0; k < tr.size(); ++k) states.col(static_cast<Eigen::Index>(k)) = tr.states[k];
      const Eigen::RowVectorXd hd = desired_energy(plant, policy, states);
      Eigen::Index first = -1;
      for (Eigen::Index k = 0; k < hd.size(); ++k) {
        if (hd(k) <= rep.sublevel + tol) {
          first = k;
          break;
        }
      }
      if (first < 0) continue;
      ++rep.entered;
      bool stay = true;
      for (Eigen::Index k = first; k < hd.size(); ++k) stay = stay && hd(k) <= rep.sublevel + tol;
      if (stay) ++rep.stayed;
    }
  }
  return rep;
}

}  // namespace phc::eval
