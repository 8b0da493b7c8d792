#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phc/control.hpp"

using phc::Matrix;
using phc::Var;
namespace ad = phc::ad;

namespace {

Eigen::VectorXd uniform(int n, std::mt19937_64& rng, double r) {
  std::uniform_real_distribution<double> d(-r, r);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

phc::StructuredPHModel model(int n, std::uint64_t seed) {
  phc::StructuredPHModel m(phc::ModelConfig::desk(n, n), seed);
  // keep the input map well away from singular
  const std::size_t last = m.config.input_net.layers.size() - 1;
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n * n);
  for (int i = 0; i < n; ++i) b(i * n + i) = 1.5;
  m.params[ad::bias_name("input", last)] = b;
  return m;
}

phc::EnergyShapingPolicy policy(int n, std::uint64_t seed, double kappa = 1e-4) {
  phc::PolicyConfig c = phc::PolicyConfig::desk(n, n, Eigen::VectorXd::Zero(2 * n));
  c.kappa = kappa;
  return phc::EnergyShapingPolicy(c, seed);
}

}  // namespace

TEST(Ebpbc, ConstantPotentialAndNoDampingGiveZeroInput) {
  const auto m = model(1, 1);
  auto pol = policy(1, 2, 0.0);
  for (auto& e : pol.params) e.second.setZero();
  // softplus(-inf) -> 0: push the damping output bias very negative
  const std::size_t last = pol.config.damping_net.layers.size() - 1;
  pol.params[ad::bias_name("injection", last)].setConstant(-800.0);
  const Eigen::VectorXd u = phc::ebpbc_control(m, pol, 0.0, Eigen::Vector2d(0.4, 1.0));
  EXPECT_EQ(u(0), 0.0);
}

TEST(Ebpbc, OneDofReductionMatchesGenericImplementation) {
  const auto m = model(1, 3);
  const auto pol = policy(1, 4);
  std::mt19937_64 rng(5);
  for (int s = 0; s < 200; ++s) {
    const Eigen::VectorXd z = uniform(2, rng, 3.0);
    const double t = 0.01 * s;
    const double g = phc::input_matrix(m, z.head(1))(0, 0);
    const double dv = phc::grad_added_potential(pol, z.head(1))(0);
    const double hp = phc::grad_hamiltonian(m, z)(1);
    const double k = pol.damping_gain(t, z)(0, 0);
    const double closed_form = -dv / g - k * g * hp;
    EXPECT_NEAR(phc::ebpbc_control(m, pol, t, z)(0), closed_form, 1e-12 * std::max(1.0, std::abs(closed_form)));
    EXPECT_NEAR(phc::ebpbc_control_reference(m, pol, t, z)(0), closed_form,
                1e-12 * std::max(1.0, std::abs(closed_form)));
  }
}

TEST(Ebpbc, TwoDofStructuredMatchesReference) {
  const auto m = model(2, 6);
  const auto pol = policy(2, 7);
  std::mt19937_64 rng(8);
  for (int s = 0; s < 200; ++s) {
    const Eigen::VectorXd z = uniform(4, rng, 3.0);
    const Eigen::VectorXd a = phc::ebpbc_control(m, pol, 0.1, z);
    const Eigen::VectorXd b = phc::ebpbc_control_reference(m, pol, 0.1, z);
    EXPECT_LT((a - b).norm(), 1e-10 * std::max(1.0, b.norm()));
  }
}

TEST(Ebpbc, RankDeficientInputMatrixIsRejected) {
  auto m = model(1, 9);
  for (auto& e : m.params) {
    if (e.first.rfind("input.", 0) == 0) e.second.setZero();
  }
  const auto pol = policy(1, 10);
  EXPECT_THROW(phc::ebpbc_control(m, pol, 0.0, Eigen::Vector2d(0.1, 0.2)), phc::RankError);
}

TEST(Ebpbc, ShapingTermScalesLinearly) {
  const auto m = model(1, 11);
  auto pol = policy(1, 12, 0.0);
  const std::size_t last = pol.config.damping_net.layers.size() - 1;
  for (auto& e : pol.params) {
    if (e.first.rfind("injection.", 0) == 0) e.second.setZero();
  }
  pol.params[ad::bias_name("injection", last)].setConstant(-800.0);
  auto scaled = pol;
  const std::size_t vlast = pol.config.potential_net.layers.size() - 1;
  scaled.params[ad::weight_name("shaping", vlast)] *= 3.0;
  scaled.params[ad::bias_name("shaping", vlast)] *= 3.0;
  const Eigen::Vector2d z(0.7, -0.2);
  EXPECT_NEAR(phc::ebpbc_control(m, scaled, 0, z)(0), 3.0 * phc::ebpbc_control(m, pol, 0, z)(0), 1e-12);
}

TEST(Ebpbc, ShapingOnlyEquilibriumIsMinimizerOfShapedPotential) {
  const phc::AnalyticPlant plant(phc::PlantSpec::torsional());
  auto pol = policy(1, 13, 0.0);
  const std::size_t last = pol.config.damping_net.layers.size() - 1;
  pol.params[ad::bias_name("injection", last)].setConstant(-800.0);
  for (auto& e : pol.params) {
    if (e.first.rfind("injection.W", 0) == 0) e.second.setZero();
  }
  // minimize V + V* on a grid, then refine with Newton on the gradient
  auto shaped_grad = [&](double q) {
    const Eigen::VectorXd qq = Eigen::VectorXd::Constant(1, q);
    return phc::grad_hamiltonian(plant, Eigen::Vector2d(q, 0))(0) + phc::grad_added_potential(pol, qq)(0);
  };
  double best = 0, best_v = 1e300;
  for (double q = -M_PI; q <= M_PI; q += 1e-3) {
    const double v = phc::potential(plant, Eigen::VectorXd::Constant(1, q)) +
                     pol.added_potential(Eigen::VectorXd::Constant(1, q));
    if (v < best_v) {
      best_v = v;
      best = q;
    }
  }
  for (int it = 0; it < 50; ++it) {
    const double h = 1e-6;
    const double d2 = (shaped_grad(best + h) - shaped_grad(best - h)) / (2 * h);
    best -= shaped_grad(best) / d2;
  }
  const Eigen::Vector2d zeq(best, 0.0);
  const Eigen::VectorXd u = phc::ebpbc_control(plant, pol, 0.0, zeq);
  EXPECT_LT(phc::vector_field(plant, zeq, u).norm(), 1e-8);
}

TEST(DesiredHamiltonian, IsHamiltonianPlusAddedPotential) {
  const auto m = model(2, 14);
  const auto pol = policy(2, 15);
  std::mt19937_64 rng(16);
  for (int s = 0; s < 50; ++s) {
    const Eigen::VectorXd z = uniform(4, rng, 2.0);
    EXPECT_DOUBLE_EQ(phc::desired_hamiltonian(m, pol, z) - phc::hamiltonian(m, z), pol.added_potential(z.head(2)));
  }
  auto zero = pol;
  for (auto& e : zero.params) e.second.setZero();
  const Eigen::Vector4d z(0.1, 0.2, 0.3, 0.4);
  EXPECT_EQ(phc::desired_hamiltonian(m, zero, z), phc::hamiltonian(m, z));
}

TEST(MatchingResidual, VanishesForPositionOnlyPotential) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = model(2, 20 + seed);
    const auto pol = policy(2, 30 + seed);
    std::mt19937_64 rng(seed);
    for (int s = 0; s < 200; ++s) {
      const Eigen::VectorXd z = uniform(4, rng, 3.0);
      const auto r = phc::matching_residual(m, pol, z);
      EXPECT_LT(r.annihilated, 1e-12);
      EXPECT_LT(r.actuated, 1e-12);
    }
  }
}

TEST(MatchingResidual, MomentumDependentEnergyIsDetected) {
  const auto m = model(1, 40);
  const Eigen::Vector2d z(0.3, 1.2);
  // H_a = p^2 has gradient (0, 2p)
  const auto r = phc::matching_residual(m, z.head(1), Eigen::Vector2d(0.0, 2 * z(1)));
  EXPECT_GT(r.annihilated + r.actuated, 1e-3);
}

TEST(EnergyRate, MatchesLemmaIdentityAndIsNonPositive) {
  for (int n : {1, 2}) {
    const auto m = model(n, 50 + static_cast<std::uint64_t>(n));
    const auto pol = policy(n, 60 + static_cast<std::uint64_t>(n));
    std::mt19937_64 rng(70);
    Matrix zs(2 * n, 300);
    for (int c = 0; c < 300; ++c) zs.col(c) = uniform(2 * n, rng, 3.0);
    const auto bm = m.bind(nullptr);
    const auto bp = pol.bind(nullptr);
    const Matrix rate = phc::closed_loop_energy_rate(*bm, bp, 0.2, Var(zs)).value();
    const Matrix lemma = phc::lemma_energy_rate(*bm, bp, 0.2, Var(zs)).value();
    for (int c = 0; c < 300; ++c) {
      EXPECT_NEAR(rate(0, c), lemma(0, c), 1e-10 * std::max(1.0, std::abs(lemma(0, c))));
      EXPECT_LE(rate(0, c), 1e-8);
    }
  }
}

TEST(ClosedLoop, FieldEqualsDesiredStructureTimesDesiredGradient) {
  for (int n : {1, 2}) {
    const auto m = model(n, 150 + static_cast<std::uint64_t>(n));
    const auto pol = policy(n, 160 + static_cast<std::uint64_t>(n));
    std::mt19937_64 rng(170);
    for (int i = 0; i < 200; ++i) {
      const Eigen::VectorXd z = uniform(2 * n, rng, 3.0);
      const Eigen::VectorXd u = phc::ebpbc_control(m, pol, 0.3, z);
      const Eigen::VectorXd f = phc::vector_field(m, z, u);
      const Eigen::VectorXd fd =
          phc::desired_structure_matrix(m, pol, 0.3, z) * phc::desired_gradient(m, pol, z);
      EXPECT_LT((f - fd).norm(), 1e-10 * std::max(1.0, f.norm()));
    }
  }
}

TEST(ClosedLoop, SharedEvaluationMatchesSeparateCalls) {
  const auto m = model(2, 180);
  const auto pol = policy(2, 181);
  std::mt19937_64 rng(182);
  Matrix zs(4, 20);
  for (int c = 0; c < 20; ++c) zs.col(c) = uniform(4, rng, 2.0);
  const auto bm = m.bind(nullptr);
  const auto bp = pol.bind(nullptr);
  const phc::ClosedLoopEval e = phc::closed_loop(*bm, bp, 0.1, Var(zs));
  const Matrix u = phc::ebpbc_control(*bm, bp, 0.1, Var(zs)).value();
  const Matrix f = phc::vector_field(*bm, Var(zs), Var(u)).value();
  EXPECT_LT((e.u.value() - u).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((e.f.value() - f).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EnergyRate, FiniteDifferenceAlongMicroStep) {
  const auto m = model(1, 80);
  const auto pol = policy(1, 81);
  const Eigen::Vector2d z(0.5, -0.8);
  const double rate = phc::closed_loop_energy_rate(m, pol, 0.0, z);
  const auto bm = m.bind(nullptr);
  const auto bp = pol.bind(nullptr);
  auto field = [&](const Matrix& x, const Matrix&) {
    return phc::vector_field(*bm, Var(x), phc::ebpbc_control(*bm, bp, 0.0, Var(x))).value();
  };
  double previous_err = 1e300;
  for (double dt : {1e-2, 1e-3}) {
    const Matrix next = phc::rk4_step(field, Matrix(z), phc::zero_controller(1), 0.0, dt);
    const double fd = (phc::desired_hamiltonian(m, pol, Eigen::Vector2d(next.col(0))) -
                       phc::desired_hamiltonian(m, pol, z)) / dt;
    const double err = std::abs(fd - rate);
    EXPECT_LT(err, 10 * dt * std::max(1.0, std::abs(rate)));
    EXPECT_LT(err, previous_err);
    previous_err = err;
  }
}

TEST(EnergyRate, ZeroAtCriticalPointOfDesiredEnergy) {
  const phc::AnalyticPlant plant(phc::PlantSpec::torsional());
  auto pol = policy(1, 90);
  for (auto& e : pol.params) {
    if (e.first.rfind("shaping.", 0) == 0) e.second.setZero();
  }
  EXPECT_EQ(phc::closed_loop_energy_rate(plant, pol, 0.0, Eigen::Vector2d::Zero()), 0.0);
}

TEST(PdPlus, VanishesAtOriginWithoutGains) {
  const auto spec = phc::PlantSpec::torsional();
  const Var u = phc::pd_plus_control(spec, Var(0.0), Var(0.0), M_PI, Var(Matrix(Eigen::Vector2d(0, 0))));
  EXPECT_EQ(u.scalar(), 0.0);
}

TEST(PdPlus, ClosedLoopPotentialIsQuadratic) {
  const auto spec = phc::PlantSpec::torsional();
  const phc::AnalyticPlant plant(spec);
  const double kp = 12.29;
  // With qdot = 0 the closed-loop restoring force is -kp (q - q*).
  for (double q : {-1.0, 0.5, 2.0, 3.5}) {
    const Eigen::Vector2d z(q, 0.0);
    const Var u = phc::pd_plus_control(spec, Var(kp), Var(6.3), M_PI, Var(Matrix(z)));
    const Eigen::VectorXd f = phc::vector_field(plant, z, Eigen::VectorXd::Constant(1, u.scalar()));
    EXPECT_NEAR(f(1), -kp * (q - M_PI), 1e-10);
  }
}

TEST(PdPlus, PublishedGainsStabilizeUpright) {
  const auto spec = phc::PlantSpec::torsional();
  const phc::AnalyticPlant plant(spec);
  phc::ControllerHandle h;
  h.kind = phc::ControllerKind::kPdPlus;
  h.plant = spec;
  h.kp = Eigen::VectorXd::Constant(1, 12.29);
  h.kd = Eigen::VectorXd::Constant(1, 6.30);
  h.target = Eigen::VectorXd::Constant(1, M_PI);
  const auto ics = phc::sample_ics(plant, 100, 3);
  const auto r = phc::rollout_batch(phc::make_field(plant), ics, h.make(), 10.0, 0.01);
  for (std::size_t i = 0; i < ics.size(); ++i) {
    ASSERT_TRUE(r.ok(i));
    const auto& zt = r.trajectories[i].states.back();
    EXPECT_LT(std::abs(zt(0) - M_PI), 1e-2);
  }
}

TEST(StandardEbpbc, CompensatesAtTargetAndStabilizes) {
  const auto spec = phc::PlantSpec::two_link();
  const phc::AnalyticPlant plant(spec);
  const Eigen::Vector2d target(M_PI, 0.0);
  const Eigen::Vector4d at_target(M_PI, 0.0, 0.0, 0.0);
  const Var u = phc::standard_ebpbc_control(spec, Var(Matrix(Eigen::Vector2d(28.9, 12.8))),
                                            Var(Matrix(Eigen::Vector2d(20.42, 0.96))), target,
                                            Var(Matrix(at_target)));
  const phc::BoundPlant bp(spec);
  const Matrix comp = (bp.grad_gravity(Var(Matrix(target))) + bp.grad_elastic(Var(Matrix(target)))).value();
  EXPECT_LT((u.value() - comp).norm(), 1e-12);

  phc::ControllerHandle h;
  h.kind = phc::ControllerKind::kStandardEbpbc;
  h.plant = spec;
  h.kp = Eigen::Vector2d(28.9, 12.8);
  h.kd = Eigen::Vector2d(20.42, 0.96);
  h.target = target;
  const auto ics = phc::sample_ics(plant, 20, 4);
  const auto r = phc::rollout_batch(phc::make_field(plant), ics, h.make(), 20.0, 0.01);
  for (std::size_t i = 0; i < ics.size(); ++i) {
    ASSERT_TRUE(r.ok(i));
    const auto& zt = r.trajectories[i].states.back();
    EXPECT_LT((zt.head(2) - target).norm(), 5e-2) << i;
  }
}

TEST(StandardEbpbc, ClosedLoopEnergyDecreases) {
  const auto spec = phc::PlantSpec::two_link();
  const phc::AnalyticPlant plant(spec);
  const Eigen::Vector2d kp(28.9, 12.8), kd(20.42, 0.96), target(M_PI, 0.0);
  phc::ControllerHandle h{phc::ControllerKind::kStandardEbpbc, nullptr, nullptr, spec, kp, kd, target};
  const auto tr = phc::rollout(phc::make_field(plant), phc::sample_ics(plant, 1, 9)[0], h.make(), 5.0, 0.005);
  auto energy = [&](const Eigen::VectorXd& z) {
    const Eigen::VectorXd e = z.head(2) - target;
    const Eigen::VectorXd v = plant.velocity(z);
    return 0.5 * v.dot(plant.mass_matrix(z.head(2)) * v) + 0.5 * e.dot(kp.asDiagonal() * e);
  };
  for (std::size_t k = 1; k < tr.size(); ++k) {
    EXPECT_LE(energy(tr.states[k]), energy(tr.states[k - 1]) + 1e-9);
  }
}
