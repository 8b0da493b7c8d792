// Small end-to-end run on the torsional pendulum: learn a model from
// step-excited data, train a swing-up policy on it, then check the result on
// the true plant and certify the closed loop.

#include <iostream>

#include "phc/eval.hpp"
#include "phc/training.hpp"

using namespace phc;

int main() {
  const AnalyticPlant plant(PlantSpec::torsional());
  const Eigen::Vector2d target(M_PI, 0.0);
  const std::uint64_t seed = 1;

  // Model from 32 initial states x 5 input levels.
  const auto ics = sample_ics(plant, 32, seed);
  const Dataset data = step_excited_dataset(plant, ics, excitation_levels({-2, -1, 0, 1, 2}, 1), 0.15, 1e-2);
  StructuredPHModel model(ModelConfig::desk(1, 1, false), seed);
  TrainRun run;
  run.seed = seed;
  SysIdConfig sys;
  sys.epochs = 30;
  theta_step(model, data.trajectories, sys, run, 0, "warmup");
  model.anchor_potential(potential(plant, Eigen::VectorXd::Zero(1)));
  std::cout << "model loss after warm-up: " << run.history.back().loss << '\n';

  const auto probe = sample_ics(plant, 16, seed + 1);
  std::vector<Trajectory> truth, pred;
  for (const auto& z0 : probe) {
    truth.push_back(rollout(make_field(plant), z0, zero_controller(1), 0.15, 1e-2));
    pred.push_back(rollout(make_field(model), z0, zero_controller(1), 0.15, 1e-2));
  }
  std::cout << "relative state error at 0.15 s: " << eval::error_bands(truth, pred).mean.back() << '\n';

  // Policy on the learned model.
  EnergyShapingPolicy policy(PolicyConfig::desk(1, 1, target), seed);
  CostConfig cost = CostConfig::swing_up(target);
  cost.horizon = 1.0;
  PolicyTrainConfig pcfg;
  pcfg.iterations = 20;
  pcfg.batch_size = 16;
  pcfg.adam = {1e-2, 1e-5};
  pcfg.resample = false;
  const PhiResult pr = phi_step(model, policy, plant_sampler(plant, M_PI, 1.0), cost, pcfg, run, 1);
  std::cout << "policy cost " << pr.initial_cost << " -> " << pr.final_cost << '\n';

  // Closed loop on the true plant.
  const Controller u = policy_controller(model, policy);
  BatchOptions bo;
  bo.divergence_threshold = 1e3;
  const BatchRollout closed = rollout_batch(make_field(plant), probe, u, 3.0, 1e-2, bo);
  double effort = 0.0;
  for (const Trajectory& tr : closed.trajectories) {
    if (tr.size() > 0) effort += eval::effort_metrics(tr).l2;
  }
  std::cout << "mean closed-loop effort over 3 s: " << effort / static_cast<double>(probe.size()) << " ("
            << closed.failures.size() << " diverged)\n";

  eval::CertifyOptions opt;
  opt.samples = 2000;
  opt.trajectories = 8;
  opt.horizon = 5.0;
  opt.eps_diss = pr.eps_diss;
  const eval::CertificateReport rep = eval::certify(plant, model, policy, opt);
  std::cout << "certificate: " << (rep.pass() ? "pass" : "fail") << ", xi " << rep.xi << ", radius "
            << rep.radius << '\n';
  return 0;
}
