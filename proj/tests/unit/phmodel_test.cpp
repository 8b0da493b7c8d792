#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phc/phmodel.hpp"
#include "phc/plants.hpp"

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

void zero_params(ad::ParamSet& p) {
  for (auto& e : p) e.second.setZero();
}

// Sets the last-layer bias of `<prefix>` so the network outputs `value`
// everywhere (all weights zeroed).
void constant_net(phc::StructuredPHModel& m, const std::string& prefix, const Eigen::VectorXd& value) {
  for (auto& e : m.params) {
    if (e.first.rfind(prefix + ".", 0) == 0) e.second.setZero();
  }
  const std::size_t last = (prefix == "mass"        ? m.config.mass_net
                            : prefix == "potential" ? m.config.potential_net
                            : prefix == "input"     ? m.config.input_net
                                                    : m.config.damping_net)
                               .layers.size() -
                           1;
  m.params[ad::bias_name(prefix, last)] = value;
}

phc::StructuredPHModel small_model(int n, int m, std::uint64_t seed, bool angles = false) {
  phc::ModelConfig c = phc::ModelConfig::desk(n, m, angles);
  return phc::StructuredPHModel(c, seed);
}

double fd_hamiltonian_dir(const phc::PortHamiltonianSystem& s, const Eigen::VectorXd& z, int i) {
  const double h = 1e-6;
  Eigen::VectorXd zp = z, zm = z;
  zp(i) += h;
  zm(i) -= h;
  return (phc::hamiltonian(s, zp) - phc::hamiltonian(s, zm)) / (2 * h);
}

}  // namespace

TEST(PhaseState, StackRoundTrip) {
  phc::PhaseState s{Eigen::Vector2d(1, 2), Eigen::Vector2d(3, 4)};
  EXPECT_TRUE(s.valid());
  const auto back = phc::PhaseState::from_stacked(s.stacked());
  EXPECT_EQ(back.q, s.q);
  EXPECT_EQ(back.p, s.p);
  EXPECT_THROW(phc::PhaseState::from_stacked(Eigen::VectorXd::Zero(3)), ad::ShapeError);
}

TEST(StructuredModel, MassInverseFromUnitFactor) {
  auto m = small_model(1, 1, 1);
  constant_net(m, "mass", Eigen::VectorXd::Constant(1, 1.0));
  EXPECT_DOUBLE_EQ(phc::mass_inverse(m, Eigen::VectorXd::Constant(1, 0.3))(0, 0), 1.0 + 1e-6);
  constant_net(m, "mass", Eigen::VectorXd::Constant(1, 2.0));
  EXPECT_NEAR(phc::mass_inverse(m, Eigen::VectorXd::Constant(1, -1.0))(0, 0), 4.0, 1e-5);
}

TEST(StructuredModel, MassAndDampingArePositiveForTwoDof) {
  auto m = small_model(2, 2, 2);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::VectorXd q = uniform(2, rng, 2 * M_PI);
    const Eigen::MatrixXd mi = phc::mass_inverse(m, q);
    const Eigen::MatrixXd d = phc::dissipation(m, q);
    EXPECT_EQ((mi - mi.transpose()).norm(), 0.0);
    EXPECT_EQ((d - d.transpose()).norm(), 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(mi), ed(d);
    EXPECT_GT(em.eigenvalues().minCoeff(), 0.0);
    EXPECT_GE(ed.eigenvalues().minCoeff(), -1e-14);
  }
}

TEST(StructuredModel, ZeroWeightNetsGiveZeroMaps) {
  auto m = small_model(2, 2, 4);
  zero_params(m.params);
  const Eigen::VectorXd q = Eigen::Vector2d(0.4, -1.0);
  EXPECT_TRUE(phc::input_matrix(m, q).isZero());
  EXPECT_TRUE(phc::dissipation(m, q).isZero());
  EXPECT_EQ(phc::potential(m, q), 0.0);
}

TEST(StructuredModel, AnchoringPinsPotentialAtOrigin) {
  auto m = small_model(1, 1, 5);
  m.anchor_potential(0.0);
  EXPECT_EQ(phc::potential(m, Eigen::VectorXd::Zero(1)), 0.0);
  m.anchor_potential(2.5);
  EXPECT_NEAR(phc::potential(m, Eigen::VectorXd::Zero(1)), 2.5, 1e-14);
}

TEST(StructuredModel, HamiltonianAtRestIsPotential) {
  auto m = small_model(2, 1, 6);
  const Eigen::Vector4d z(0.3, -0.2, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(phc::hamiltonian(m, z), phc::potential(m, z.head(2)));
}

TEST(StructuredModel, IdentityMassFreeParticle) {
  auto m = small_model(1, 1, 7);
  m.config.mass_floor = 0.0;
  constant_net(m, "mass", Eigen::VectorXd::Constant(1, 1.0));
  constant_net(m, "potential", Eigen::VectorXd::Zero(1));
  constant_net(m, "damping", Eigen::VectorXd::Zero(1));
  constant_net(m, "input", Eigen::VectorXd::Constant(1, 1.0));
  EXPECT_DOUBLE_EQ(phc::hamiltonian(m, Eigen::Vector2d(0.0, 2.0)), 2.0);
  const Eigen::VectorXd f =
      phc::vector_field(m, Eigen::Vector2d(0.0, 1.0), Eigen::VectorXd::Zero(1));
  EXPECT_DOUBLE_EQ(f(0), 1.0);
  EXPECT_DOUBLE_EQ(f(1), 0.0);
  const Eigen::VectorXd g = phc::grad_hamiltonian(m, Eigen::Vector2d(0.5, 3.0));
  EXPECT_DOUBLE_EQ(g(0), 0.0);
  EXPECT_DOUBLE_EQ(g(1), 3.0);
}

TEST(StructuredModel, GradientMatchesFiniteDifferences) {
  for (bool angles : {false, true}) {
    for (int n : {1, 2}) {
      auto m = small_model(n, n, 8 + static_cast<std::uint64_t>(n), angles);
      std::mt19937_64 rng(9);
      for (int s = 0; s < 100; ++s) {
        Eigen::VectorXd z(2 * n);
        z << uniform(n, rng, M_PI), uniform(n, rng, 2.0);
        const Eigen::VectorXd g = phc::grad_hamiltonian(m, z);
        for (int i = 0; i < 2 * n; ++i) {
          const double fd = fd_hamiltonian_dir(m, z, i);
          EXPECT_LE(std::abs(g(i) - fd), 1e-5 * std::max(1.0, std::abs(fd)));
        }
      }
    }
  }
}

TEST(StructuredModel, GradientIsDifferentiableInParameters) {
  auto m = small_model(2, 1, 10);
  const Eigen::Vector4d z(0.3, -0.7, 1.1, -0.4);
  ad::Tape tape;
  auto bound = m.bind(&tape, true);
  const auto g = bound->grad_hamiltonian(tape.constant(Matrix(Eigen::VectorXd(z))));
  const Var loss = ad::sum(ad::square(g.dq)) + ad::sum(ad::sin(g.dp));
  tape.backward(loss);
  const ad::ParamSet grads = bound->params()->gradient();
  const double h = 1e-6;
  std::size_t checked = 0;
  for (std::size_t idx = 0; idx < m.params.size(); ++idx) {
    const auto& name = m.params.entry(idx).first;
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(3, m.params[name].size()); ++k) {
      auto eval = [&](double delta) {
        phc::StructuredPHModel c = m;
        c.params[name](k) += delta;
        const auto b = c.bind(nullptr);
        const auto gg = b->grad_hamiltonian(Var(Matrix(Eigen::VectorXd(z))));
        return ad::sum(ad::square(gg.dq)).scalar() + ad::sum(ad::sin(gg.dp)).scalar();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      EXPECT_NEAR(grads[name](k), fd, 1e-5 * std::max(1.0, std::abs(fd))) << name << "[" << k << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 10u);
}

TEST(StructuredModel, PowerBalance) {
  auto m = small_model(2, 2, 11);
  std::mt19937_64 rng(12);
  for (int s = 0; s < 1000; ++s) {
    Eigen::VectorXd z(4);
    z << uniform(2, rng, M_PI), uniform(2, rng, 2.0);
    const Eigen::VectorXd u = uniform(2, rng, 2.0);
    const Eigen::VectorXd gh = phc::grad_hamiltonian(m, z);
    const double hdot = gh.dot(phc::vector_field(m, z, u));
    const Eigen::VectorXd hp = gh.tail(2);
    const double expected = u.dot(phc::input_matrix(m, z.head(2)).transpose() * hp) -
                            hp.dot(phc::dissipation(m, z.head(2)) * hp);
    EXPECT_NEAR(hdot, expected, 1e-10 * std::max(1.0, std::abs(expected)));
  }
}

TEST(StructuredModel, StructureMatrixProperties) {
  auto m = small_model(2, 1, 13);
  std::mt19937_64 rng(14);
  for (int s = 0; s < 1000; ++s) {
    const Eigen::VectorXd q = uniform(2, rng, 2 * M_PI);
    const Eigen::MatrixXd f = phc::structure_matrix(m, q);
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(4, 4);
    r.bottomRightCorner(2, 2) = phc::dissipation(m, q);
    EXPECT_LT((f + f.transpose() + 2 * r).norm(), 1e-15);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(f);
    EXPECT_GT(svd.singularValues().minCoeff(), 0.0);
  }
}

TEST(StructuredModel, EquilibriumOfHamiltonianHasZeroField) {
  // A quadratic model with critical point at the origin.
  auto m = small_model(1, 1, 15);
  constant_net(m, "mass", Eigen::VectorXd::Constant(1, 1.3));
  constant_net(m, "damping", Eigen::VectorXd::Zero(1));
  constant_net(m, "potential", Eigen::VectorXd::Constant(1, 0.7));
  const Eigen::VectorXd f = phc::vector_field(m, Eigen::Vector2d(0.2, 0.0), Eigen::VectorXd::Zero(1));
  EXPECT_EQ(f.norm(), 0.0);
}

TEST(StructuredModel, HamiltonianBoundedOnCompactBox) {
  auto m = small_model(1, 1, 16);
  double worst = 0.0;
  for (double q = -2 * M_PI; q <= 2 * M_PI; q += 0.1) {
    for (double p = -5; p <= 5; p += 0.25) {
      const double h = phc::hamiltonian(m, Eigen::Vector2d(q, p));
      ASSERT_TRUE(std::isfinite(h));
      worst = std::max(worst, std::abs(h));
    }
  }
  EXPECT_LT(worst, 1e6);
}

TEST(StructuredModel, ArchitectureMismatchIsRejected) {
  phc::ModelConfig c = phc::ModelConfig::desk(2, 1);
  c.mass_net = ad::Architecture::parse("2-8 tanh-1");
  EXPECT_THROW(phc::StructuredPHModel(c, 1), ad::ShapeError);
}

TEST(StructuredModel, PlanarPendulumGradientAtQuarterTurn) {
  const phc::AnalyticPlant plant(phc::PlantSpec::planar());
  const Eigen::VectorXd g = phc::grad_hamiltonian(plant, Eigen::Vector2d(M_PI / 2, 0.0));
  EXPECT_NEAR(g(0), 9.81, 1e-12);
}

TEST(Policy, ZeroWeightDampingIsLogTwo) {
  phc::PolicyConfig c = phc::PolicyConfig::desk(1, 1, Eigen::Vector2d(M_PI, 0));
  c.kappa = 0.0;
  phc::EnergyShapingPolicy pol(c, 1);
  zero_params(pol.params);
  EXPECT_NEAR(pol.damping_gain(0.3, Eigen::Vector2d(1, 2))(0, 0), std::log(2.0), 1e-15);
  EXPECT_EQ(pol.added_potential(Eigen::VectorXd::Constant(1, 0.5)), 0.0);
}

TEST(Policy, DampingRespectsFloor) {
  phc::PolicyConfig c = phc::PolicyConfig::desk(2, 2, Eigen::Vector4d::Zero());
  c.kappa = 0.1;
  phc::EnergyShapingPolicy pol(c, 2);
  std::mt19937_64 rng(3);
  for (int s = 0; s < 200; ++s) {
    Eigen::VectorXd z = uniform(4, rng, 10.0);
    const Eigen::MatrixXd k = pol.damping_gain(s * 0.01, z);
    EXPECT_GE(k.diagonal().minCoeff(), 0.1);
    EXPECT_EQ(k(0, 1), 0.0);
  }
}

TEST(Policy, ConfigValidation) {
  phc::PolicyConfig c = phc::PolicyConfig::desk(1, 1, Eigen::Vector2d::Zero());
  c.damping_net = ad::Architecture::parse("2-4 softplus-1 softplus");
  EXPECT_THROW(phc::EnergyShapingPolicy(c, 1), ad::ShapeError);
  c = phc::PolicyConfig::desk(1, 1, Eigen::Vector3d::Zero());
  EXPECT_THROW(phc::EnergyShapingPolicy(c, 1), ad::ShapeError);
}
