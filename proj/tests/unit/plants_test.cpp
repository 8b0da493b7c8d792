#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phc/plants.hpp"

using phc::Matrix;

namespace {

Eigen::VectorXd uniform(int n, std::mt19937_64& rng, double r) {
  std::uniform_real_distribution<double> d(-r, r);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

// Power balance dH/dt = u^T g^T dH/dp - dH/dp^T D dH/dp.
void expect_power_balance(const phc::AnalyticPlant& plant, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = plant.dof();
  for (int s = 0; s < 500; ++s) {
    Eigen::VectorXd z(2 * n);
    z << uniform(n, rng, 2 * M_PI), uniform(n, rng, 3.0);
    const Eigen::VectorXd u = uniform(plant.inputs(), rng, 2.0);
    const Eigen::VectorXd gh = phc::grad_hamiltonian(plant, z);
    const Eigen::VectorXd hp = gh.tail(n);
    const double lhs = gh.dot(phc::vector_field(plant, z, u));
    const double rhs = u.dot(phc::input_matrix(plant, z.head(n)).transpose() * hp) -
                       hp.dot(phc::dissipation(plant, z.head(n)) * hp);
    EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::abs(rhs)));
  }
}

void expect_gradient_matches_fd(const phc::AnalyticPlant& plant, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = plant.dof();
  for (int s = 0; s < 100; ++s) {
    Eigen::VectorXd z(2 * n);
    z << uniform(n, rng, 2 * M_PI), uniform(n, rng, 3.0);
    const Eigen::VectorXd g = phc::grad_hamiltonian(plant, z);
    for (int i = 0; i < 2 * n; ++i) {
      Eigen::VectorXd zp = z, zm = z;
      zp(i) += 1e-6;
      zm(i) -= 1e-6;
      const double fd = (phc::hamiltonian(plant, zp) - phc::hamiltonian(plant, zm)) / 2e-6;
      EXPECT_NEAR(g(i), fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

}  // namespace

TEST(PlanarPendulum, RestIsEquilibrium) {
  const phc::AnalyticPlant p(phc::PlantSpec::planar());
  EXPECT_EQ(phc::vector_field(p, Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1)).norm(), 0.0);
}

TEST(PlanarPendulum, QuarterTurnAcceleration) {
  const phc::AnalyticPlant p(phc::PlantSpec::planar());
  const Eigen::VectorXd f = phc::vector_field(p, Eigen::Vector2d(M_PI / 2, 0), Eigen::VectorXd::Zero(1));
  EXPECT_NEAR(f(1), -9.81, 1e-12);
}

TEST(PlanarPendulum, PowerBalanceAndGradient) {
  const phc::AnalyticPlant p(phc::PlantSpec::random_planar(11));
  expect_power_balance(p, 1);
  expect_gradient_matches_fd(p, 2);
  std::mt19937_64 rng(3);
  const double ml2 = p.spec().at("m") * p.spec().at("l") * p.spec().at("l");
  for (int s = 0; s < 100; ++s) {
    const Eigen::VectorXd z = uniform(2, rng, 3.0);
    const double u = uniform(1, rng, 2.0)(0);
    const double hdot = phc::grad_hamiltonian(p, z).dot(phc::vector_field(p, z, Eigen::VectorXd::Constant(1, u)));
    EXPECT_NEAR(hdot, u * p.spec().at("b") * z(1) / ml2, 1e-12 * std::max(1.0, std::abs(hdot)));
  }
}

TEST(PlanarPendulum, RandomParametersRespectBounds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = phc::PlantSpec::random_planar(seed);
    for (const char* k : {"m", "l", "b"}) {
      EXPECT_GE(s.at(k), 0.5);
      EXPECT_LE(s.at(k), 2.0);
    }
  }
  EXPECT_EQ(phc::PlantSpec::random_planar(4).params, phc::PlantSpec::random_planar(4).params);
}

TEST(TorsionalPendulum, EquilibriumAndEnergy) {
  const phc::AnalyticPlant p(phc::PlantSpec::torsional());
  EXPECT_EQ(phc::vector_field(p, Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(1)).norm(), 0.0);
  EXPECT_NEAR(phc::hamiltonian(p, Eigen::Vector2d(M_PI, 0)), 2 * 9.81 + 0.5 * 0.5 * M_PI * M_PI, 1e-12);
  expect_power_balance(p, 4);
  expect_gradient_matches_fd(p, 5);
}

TEST(TorsionalPendulum, UnforcedEnergyDecays) {
  const phc::AnalyticPlant p(phc::PlantSpec::torsional());
  std::mt19937_64 rng(6);
  for (int s = 0; s < 200; ++s) {
    const Eigen::VectorXd z = uniform(2, rng, 4.0);
    const double hdot = phc::grad_hamiltonian(p, z).dot(phc::vector_field(p, z, Eigen::VectorXd::Zero(1)));
    EXPECT_NEAR(hdot, -0.01 * z(1) * z(1), 1e-12);
    EXPECT_LE(hdot, 0.0);
  }
}

TEST(TwoLink, InertiaMatrix) {
  const phc::AnalyticPlant p(phc::PlantSpec::two_link());
  const Eigen::MatrixXd m = p.mass_matrix(Eigen::Vector2d(0.3, 0.0));
  EXPECT_NEAR(m(0, 0), 0.25 + 1.25 + 1.0 / 6.0 + 2 * 0.5, 1e-12);
  EXPECT_NEAR(m(0, 1), 0.25 + 1.0 / 12.0 + 0.5, 1e-12);
  EXPECT_NEAR(m(1, 1), 0.25 + 1.0 / 12.0, 1e-12);
  std::mt19937_64 rng(7);
  for (int s = 0; s < 10000; ++s) {
    const Eigen::VectorXd q = uniform(2, rng, 2 * M_PI);
    const Eigen::MatrixXd mm = p.mass_matrix(q);
    EXPECT_NEAR(mm(0, 1), mm(1, 0), 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mm);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(TwoLink, PowerBalanceAndGradient) {
  auto spec = phc::PlantSpec::two_link();
  spec.params["d1"] = 0.2;
  spec.params["d2"] = 0.05;
  const phc::AnalyticPlant p(spec);
  expect_power_balance(p, 8);
  expect_gradient_matches_fd(p, 9);
}

TEST(TwoLink, ConservativeRolloutKeepsEnergy) {
  auto spec = phc::PlantSpec::two_link();
  spec.params["Ks1"] = 0.0;
  spec.params["Ks2"] = 0.0;
  const phc::AnalyticPlant p(spec);
  const Eigen::VectorXd z0 = phc::sample_ics(p, 1, 10)[0];
  const auto tr = phc::rollout(phc::make_field(p), z0, phc::zero_controller(2), 3.0, 1e-3);
  EXPECT_LT(std::abs(phc::hamiltonian(p, tr.states.back()) - phc::hamiltonian(p, z0)), 1e-6);
}

TEST(PlantSpec, ValidationRejectsNonPhysicalParameters) {
  auto s = phc::PlantSpec::planar(-1.0);
  EXPECT_THROW(phc::AnalyticPlant{s}, phc::ParameterError);
  s = phc::PlantSpec::torsional();
  s.params["D"] = -0.1;
  EXPECT_THROW(phc::AnalyticPlant{s}, phc::ParameterError);
  EXPECT_THROW(phc::parse_plant_kind("cart-pole"), std::invalid_argument);
}

TEST(SampleIcs, DeterministicAndBounded) {
  const phc::AnalyticPlant p(phc::PlantSpec::two_link());
  const auto a = phc::sample_ics(p, 200, 42);
  const auto b = phc::sample_ics(p, 200, 42);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    const Eigen::VectorXd v = p.velocity(a[i]);
    for (int j = 0; j < 2; ++j) {
      EXPECT_LE(std::abs(a[i](j)), 2 * M_PI);
      EXPECT_LE(std::abs(v(j)), M_PI + 1e-9);
    }
  }
  EXPECT_THROW(phc::sample_ics(p, 0, 1), std::invalid_argument);
}

TEST(SampleIcs, MeanAngleNearZero) {
  const phc::AnalyticPlant p(phc::PlantSpec::planar());
  const auto s = phc::sample_ics(p, 100000, 1);
  double mean = 0;
  for (const auto& z : s) mean += z(0);
  EXPECT_LT(std::abs(mean / 100000.0), 0.05);
}

TEST(Datasets, StepExcitedLayout) {
  const phc::AnalyticPlant p(phc::PlantSpec::planar());
  const auto ics = phc::sample_ics(p, 16, 1);
  const auto levels = phc::excitation_levels({-2, -1, 0, 1, 2}, 1);
  const auto ds = phc::step_excited_dataset(p, ics, levels, 0.15, 0.01);
  ASSERT_EQ(ds.size(), 80u);
  const auto f = phc::make_field(p);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& tr = ds.trajectories[i];
    ASSERT_EQ(tr.size(), 16u);
    EXPECT_EQ(tr.inputs[0], ds.levels[i]);
    EXPECT_EQ(tr.states[0], ics[i / 5]);
    for (std::size_t k = 0; k < tr.size(); ++k) EXPECT_EQ(tr.derivs[k], f(tr.states[k], tr.inputs[k]).col(0));
  }
}

TEST(Datasets, ZeroLevelIsUnforced) {
  const phc::AnalyticPlant p(phc::PlantSpec::torsional());
  const auto ics = phc::sample_ics(p, 4, 2);
  const auto ds = phc::step_excited_dataset(p, ics, {Eigen::VectorXd::Zero(1)}, 0.1, 0.01);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto ref = phc::rollout(phc::make_field(p), ics[i], phc::zero_controller(1), 0.1, 0.01);
    EXPECT_EQ(ds.trajectories[i].states.back(), ref.states.back());
  }
}

TEST(Datasets, TwoInputLevelsAreSubsampledProduct) {
  const auto levels = phc::excitation_levels({-2, -1, 0, 1, 2}, 2);
  EXPECT_EQ(levels.size(), 25u);
  const auto small = phc::excitation_levels({-2, -1, 0, 1, 2}, 2, 10);
  EXPECT_EQ(small.size(), 10u);
  EXPECT_EQ(phc::excitation_levels({-1, 1}, 1).size(), 2u);
}

TEST(Datasets, PolicyExcitedRecordsController) {
  const phc::AnalyticPlant p(phc::PlantSpec::torsional());
  const auto ics = phc::sample_ics(p, 5, 3);
  const phc::Controller c = [](double t, const Matrix& z) {
    return (-2.0 * z.bottomRows(1).array() + std::sin(t)).matrix().eval();
  };
  const auto ds = phc::policy_excited_dataset(p, c, ics, 0.5, 0.01, "test");
  ASSERT_EQ(ds.size(), 5u);
  for (const auto& tr : ds.trajectories) {
    for (std::size_t k = 0; k < tr.size(); ++k) {
      EXPECT_NEAR(tr.inputs[k](0), c(tr.times[k], tr.states[k])(0, 0), 1e-12);
    }
  }
}

TEST(Datasets, WindowsOverlapAtBoundaries) {
  const phc::AnalyticPlant p(phc::PlantSpec::planar());
  const auto ds = phc::policy_excited_dataset(p, phc::zero_controller(1), phc::sample_ics(p, 2, 1), 0.45, 0.01);
  const auto w = phc::split_windows(ds, 16);
  ASSERT_EQ(w.size(), 6u);
  EXPECT_EQ(w.trajectories[0].states.back(), w.trajectories[1].states.front());
  EXPECT_NEAR(w.horizon, 0.15, 1e-15);
}
