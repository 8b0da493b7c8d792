#pragma once

// Energy-balancing passivity-based control on learned models, baseline
// controllers, and the closed-loop energy objects.

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

#include "phc/autodiff.hpp"
#include "phc/log.hpp"
#include "phc/odeint.hpp"
#include "phc/phmodel.hpp"
#include "phc/plants.hpp"

namespace phc {

class RankError : public ad::NumericError {
 public:
  using ad::NumericError::NumericError;
};

inline constexpr double kRegularizeCondition = 1e12;
inline constexpr double kRegularization = 1e-10;
inline constexpr double kSingularCondition = 1e15;

namespace detail {

inline void warn_regularized(double cond) {
  static std::atomic<bool> warned{false};
  if (!warned.exchange(true)) {
    log::warning("g^T g is ill-conditioned (cond " + std::to_string(cond) +
                 "); adding 1e-10 I before solving");
  }
}

/// Condition number of the symmetric positive semidefinite m x m matrix
/// whose entries are given per column; throws RankError when singular.
inline double worst_condition(const BatchMatrix& a, Eigen::Index cols) {
  double worst = 1.0;
  for (Eigen::Index c = 0; c < cols; ++c) {
    const Eigen::MatrixXd m = a.sample(c);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    const double hi = es.eigenvalues().maxCoeff();
    const double lo = es.eigenvalues().minCoeff();
    if (!(hi > 0.0) || !(lo > hi / kSingularCondition)) {
      throw RankError("input matrix does not have full column rank");
    }
    worst = std::max(worst, hi / lo);
  }
  return worst;
}

}  // namespace detail

/// (g^T g)^{-1} g^T v for a batch, v given as n x B. Supports m <= 2.
inline Var left_pseudo_inverse_apply(const BatchMatrix& g, const Var& v) {
  const int m = g.cols();
  if (m > 2) throw std::invalid_argument("left pseudo-inverse supports at most two inputs");
  BatchMatrix a(m, m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j <= i; ++j) {
      Var acc = g(0, i) * g(0, j);
      for (int r = 1; r < g.rows(); ++r) acc = acc + g(r, i) * g(r, j);
      a(i, j) = acc;
      a(j, i) = acc;
    }
  }
  const double cond = detail::worst_condition(a, v.cols());
  if (cond > kRegularizeCondition) {
    detail::warn_regularized(cond);
    for (int i = 0; i < m; ++i) a(i, i) = a(i, i) + kRegularization;
  }
  const Var rhs = apply_transpose(g, v);
  if (m == 1) return rhs / a(0, 0);
  const Var r1 = ad::row(rhs, 0);
  const Var r2 = ad::row(rhs, 1);
  const Var det = a(0, 0) * a(1, 1) - a(0, 1) * a(0, 1);
  return ad::concat_rows({(a(1, 1) * r1 - a(0, 1) * r2) / det,
                          (a(0, 0) * r2 - a(0, 1) * r1) / det});
}

namespace detail {

inline void check_dims(const BoundSystem& model, const BoundPolicy& policy) {
  if (model.dof() != policy.dof() || model.inputs() != policy.inputs()) {
    throw ad::ShapeError("model and policy dimensions differ");
  }
}

inline Var ebpbc_from_parts(const BatchMatrix& g, const Var& grad_added, const Var& hp,
                            const Var& gain) {
  return -left_pseudo_inverse_apply(g, grad_added) - gain * apply_transpose(g, hp);
}

}  // namespace detail

/// u = -(g^T g)^{-1} g^T dV*/dq - K*(t, z) g^T dH/dp, an m x B block.
inline Var ebpbc_control(const BoundSystem& model, const BoundPolicy& policy, double t,
                         const Var& z) {
  detail::check_dims(model, policy);
  const Var q = positions(z);
  return detail::ebpbc_from_parts(model.input_matrix(q), policy.grad_added_potential(q),
                                  model.grad_hamiltonian(z).dp, policy.damping_gain(t, z));
}

/// Closed-loop quantities at one batch of states with a single evaluation
/// of dH.
struct ClosedLoopEval {
  Var u;              // m x B
  Var f;              // 2n x B
  StateGradient grad_h;
  Var grad_added;     // dV*/dq, n x B

  /// dH_d/dt along f, 1 x B.
  Var energy_rate() const {
    return ad::sum_rows(ad::concat_rows({grad_h.dq + grad_added, grad_h.dp}) * f);
  }
};

inline ClosedLoopEval closed_loop(const BoundSystem& model, const BoundPolicy& policy, double t,
                                  const Var& z) {
  detail::check_dims(model, policy);
  ClosedLoopEval e;
  const Var q = positions(z);
  const BatchMatrix g = model.input_matrix(q);
  e.grad_h = model.grad_hamiltonian(z);
  e.grad_added = policy.grad_added_potential(q);
  e.u = detail::ebpbc_from_parts(g, e.grad_added, e.grad_h.dp, policy.damping_gain(t, z));
  const Var pdot = -e.grad_h.dq - apply(model.dissipation(q), e.grad_h.dp) + apply(g, e.u);
  e.f = ad::concat_rows({e.grad_h.dp, pdot});
  return e;
}

/// Gradient of H_d = H + V* as (dq, dp) blocks.
inline StateGradient desired_gradient(const BoundSystem& model, const BoundPolicy& policy,
                                      const Var& z) {
  StateGradient g = model.grad_hamiltonian(z);
  g.dq = g.dq + policy.grad_added_potential(positions(z));
  return g;
}

inline Var desired_hamiltonian(const BoundSystem& model, const BoundPolicy& policy,
                               const Var& z) {
  return model.hamiltonian(z) + policy.added_potential(positions(z));
}

/// dH_d/dt along the closed loop of the model, 1 x B.
inline Var closed_loop_energy_rate(const BoundSystem& model, const BoundPolicy& policy, double t,
                                   const Var& z) {
  return closed_loop(model, policy, t, z).energy_rate();
}

/// -(dH/dp^T D dH/dp + y^T K* y) with y = g^T dH/dp, 1 x B.
inline Var lemma_energy_rate(const BoundSystem& model, const BoundPolicy& policy, double t,
                             const Var& z) {
  const Var q = positions(z);
  const Var hp = model.grad_hamiltonian(z).dp;
  const Var y = apply_transpose(model.input_matrix(q), hp);
  const Var natural = ad::sum_rows(hp * apply(model.dissipation(q), hp));
  const Var injected = ad::sum_rows(policy.damping_gain(t, z) * ad::square(y));
  return -(natural + injected);
}

// --- single-sample views --------------------------------------------------

inline Eigen::VectorXd ebpbc_control(const PortHamiltonianSystem& model,
                                     const EnergyShapingPolicy& policy, double t,
                                     const Eigen::VectorXd& z) {
  return ebpbc_control(*model.bind(nullptr), policy.bind(nullptr), t, Var(Matrix(z)))
      .value()
      .col(0);
}

inline double desired_hamiltonian(const PortHamiltonianSystem& model,
                                  const EnergyShapingPolicy& policy, const Eigen::VectorXd& z) {
  return desired_hamiltonian(*model.bind(nullptr), policy.bind(nullptr), Var(Matrix(z))).scalar();
}

inline double closed_loop_energy_rate(const PortHamiltonianSystem& model,
                                      const EnergyShapingPolicy& policy, double t,
                                      const Eigen::VectorXd& z) {
  return closed_loop_energy_rate(*model.bind(nullptr), policy.bind(nullptr), t, Var(Matrix(z)))
      .scalar();
}

inline Eigen::VectorXd grad_added_potential(const EnergyShapingPolicy& policy,
                                            const Eigen::VectorXd& q) {
  return policy.bind(nullptr).grad_added_potential(Var(Matrix(q))).value().col(0);
}

/// Reference implementation with explicit F, G and G^+ matrices:
/// u = -G^+ F^T grad_z V* - K* G^T grad_z H.
inline Eigen::VectorXd ebpbc_control_reference(const PortHamiltonianSystem& model,
                                               const EnergyShapingPolicy& policy, double t,
                                               const Eigen::VectorXd& z) {
  const Eigen::Index n = z.size() / 2;
  const Eigen::VectorXd q = z.head(n);
  const Eigen::MatrixXd f = structure_matrix(model, q);
  const Eigen::MatrixXd g = full_input_matrix(model, q);
  const Eigen::MatrixXd gram = g.transpose() * g;
  const Eigen::MatrixXd pinv = gram.ldlt().solve(g.transpose());
  Eigen::VectorXd grad_va = Eigen::VectorXd::Zero(2 * n);
  grad_va.head(n) = grad_added_potential(policy, q);
  const Eigen::VectorXd grad_h = grad_hamiltonian(model, z);
  return -pinv * f.transpose() * grad_va -
         policy.damping_gain(t, z) * g.transpose() * grad_h;
}

/// F_d = F - G K* G^T, so that the closed loop reads F_d grad H_d.
inline Eigen::MatrixXd desired_structure_matrix(const PortHamiltonianSystem& model,
                                                const EnergyShapingPolicy& policy, double t,
                                                const Eigen::VectorXd& z) {
  const Eigen::Index n = z.size() / 2;
  const Eigen::MatrixXd g = full_input_matrix(model, z.head(n));
  return structure_matrix(model, z.head(n)) - g * policy.damping_gain(t, z) * g.transpose();
}

/// grad H_d = grad H + [dV*/dq ; 0] at one state.
inline Eigen::VectorXd desired_gradient(const PortHamiltonianSystem& model,
                                        const EnergyShapingPolicy& policy,
                                        const Eigen::VectorXd& z) {
  const Eigen::Index n = z.size() / 2;
  Eigen::VectorXd g = grad_hamiltonian(model, z);
  g.head(n) += grad_added_potential(policy, z.head(n));
  return g;
}

struct MatchingResidual {
  double annihilated = 0.0;  // |G_perp F^T grad H_a|
  double actuated = 0.0;     // |G^T grad H_a|
};

/// Residuals of the matching conditions for an added energy with gradient
/// `grad_ha` (2n entries) at configuration q.
inline MatchingResidual matching_residual(const PortHamiltonianSystem& model,
                                          const Eigen::VectorXd& q,
                                          const Eigen::VectorXd& grad_ha) {
  const Eigen::Index n = q.size();
  Eigen::MatrixXd g_perp = Eigen::MatrixXd::Zero(n, 2 * n);
  g_perp.leftCols(n).setIdentity();
  const Eigen::MatrixXd f = structure_matrix(model, q);
  const Eigen::MatrixXd g = full_input_matrix(model, q);
  return {(g_perp * f.transpose() * grad_ha).norm(), (g.transpose() * grad_ha).norm()};
}

/// Matching residuals of the policy's added potential H_a = V*(q).
inline MatchingResidual matching_residual(const PortHamiltonianSystem& model,
                                          const EnergyShapingPolicy& policy,
                                          const Eigen::VectorXd& z) {
  const Eigen::Index n = z.size() / 2;
  Eigen::VectorXd grad_ha = Eigen::VectorXd::Zero(2 * n);
  grad_ha.head(n) = grad_added_potential(policy, z.head(n));
  return matching_residual(model, z.head(n), grad_ha);
}

// --- baselines ---------------------------------------------------------------

/// PD with potential compensation on the torsional pendulum:
/// u = mgr sin q + k q - kp (q - q*) - kd qdot.
/// `printed_sign` instead evaluates -mgr sin q - k q + kp (q - q*) - kd qdot.
inline Var pd_plus_control(const PlantSpec& spec, const Var& kp, const Var& kd, double q_target,
                           const Var& z, bool printed_sign = false) {
  if (spec.kind != PlantKind::kTorsionalPendulum) {
    throw std::invalid_argument("PD+ needs a torsional-pendulum plant");
  }
  const Var q = positions(z);
  const Var qdot = momenta(z) / spec.at("J");
  const Var compensation =
      (spec.at("m") * spec.at("g") * spec.at("r")) * ad::sin(q) + spec.at("k") * q;
  if (printed_sign) return -compensation + kp * (q - q_target) - kd * qdot;
  return compensation - kp * (q - q_target) - kd * qdot;
}

/// Full potential compensation with quadratic shaping and damping on the
/// two-link arm: u = dV_g/dq + dV_e/dq - diag(kp)(q - q*) - diag(kd) qdot.
inline Var standard_ebpbc_control(const PlantSpec& spec, const Var& kp, const Var& kd,
                                  const Eigen::VectorXd& q_target, const Var& z) {
  if (spec.kind != PlantKind::kTwoLink) {
    throw std::invalid_argument("standard EB-PBC baseline needs a two-link plant");
  }
  const BoundPlant plant(spec);
  const Var q = positions(z);
  const Var qdot = apply(plant.mass_inverse(q), momenta(z));
  const Var target = ad::constant_like(z, Matrix(q_target));
  return plant.grad_gravity(q) + plant.grad_elastic(q) - kp * (q - target) - kd * qdot;
}

enum class ControllerKind { kEbpbcLearned, kPdPlus, kStandardEbpbc, kZero };

/// Everything needed to evaluate one controller on a batch of states.
struct ControllerHandle {
  ControllerKind kind = ControllerKind::kZero;
  std::shared_ptr<const PortHamiltonianSystem> model;
  std::shared_ptr<const EnergyShapingPolicy> policy;
  PlantSpec plant;
  Eigen::VectorXd kp;
  Eigen::VectorXd kd;
  Eigen::VectorXd target;  // q*
  bool printed_sign = false;
  int inputs = 1;

  Controller make() const {
    switch (kind) {
      case ControllerKind::kEbpbcLearned: {
        if (!model || !policy) throw std::invalid_argument("learned controller needs model and policy");
        std::shared_ptr<const BoundSystem> m = model->bind(nullptr);
        auto p = std::make_shared<const BoundPolicy>(policy->bind(nullptr));
        return [m, p](double t, const Matrix& z) { return ebpbc_control(*m, *p, t, Var(z)).value(); };
      }
      case ControllerKind::kPdPlus: {
        const PlantSpec spec = plant;
        const double kpv = kp(0), kdv = kd(0), qs = target(0);
        const bool printed = printed_sign;
        return [spec, kpv, kdv, qs, printed](double, const Matrix& z) {
          return pd_plus_control(spec, Var(kpv), Var(kdv), qs, Var(z), printed).value();
        };
      }
      case ControllerKind::kStandardEbpbc: {
        const PlantSpec spec = plant;
        const Matrix kpm = kp, kdm = kd;
        const Eigen::VectorXd qs = target;
        return [spec, kpm, kdm, qs](double, const Matrix& z) {
          return standard_ebpbc_control(spec, Var(kpm), Var(kdm), qs, Var(z)).value();
        };
      }
      case ControllerKind::kZero:
        return zero_controller(inputs);
    }
    throw std::invalid_argument("unknown controller kind");
  }
};

}  // namespace phc
