// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: trains the four architectures at desk scale and checks
// the oracle, analytic, ordering, multimodality, invariant, and
// training-consistency gates. Prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmbeam/diffusion.hpp"
#include "dmbeam/env.hpp"
#include "dmbeam/harness.hpp"
#include "dmbeam/predictors.hpp"
#include "dmbeam/training.hpp"

using namespace dmbeam;

namespace {

struct CriterionResult {
  bool pass = false;
  std::string detail;
};

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// Criterion 1: WMMSE SE >= 0.99 x brute-force grid SE on 50 random
// instances with N=2, K=2, grid delta = P/200.
CriterionResult criterion_oracle_equivalence() {
  const ScenarioConfig sc = ScenarioConfig::from_snr_db(2, 2, 10.0, 0.0, 404);
  Environment env(sc);
  Rng rng(404);
  double min_ratio = 1e300;
  int failures = 0;
  for (int i = 0; i < 50; ++i) {
    const ChannelMatrix h = env.sample_channel(rng);
    const double w_se = env.wmmse(h).se_trace.back();
    const BruteForceResult bf = brute_force_power(
        h, sc.noise_power, sc.power_budget, sc.power_budget / 200);
    const double ratio = w_se / bf.se;
    min_ratio = std::min(min_ratio, ratio);
    failures += ratio < 0.99;
  }
  std::ostringstream os;
  os << "min WMMSE/brute ratio " << min_ratio << " over 50 instances, "
     << failures << " below 0.99";
  return {failures == 0, os.str()};
}

// Criterion 2: every pipeline reaches the single-user closed form.
CriterionResult criterion_single_user() {
  ExperimentConfig cfg;
  cfg.n_users = 1;
  cfg.n_train = 32;
  cfg.n_test = 16;
  cfg.n_candidates = 4;
  cfg.train.epochs = 2;
  cfg.train.batch_size = 16;
  cfg.rho_list = {0.0};
  cfg.seeds = {1};

  const ScenarioConfig sc = cfg.scenario(0.0, 1);
  Environment env(sc);
  const auto test = make_dataset(sc, cfg.n_test, kTestSetTag);

  double worst = 0.0;
  auto track = [&](double se, double closed) {
    worst = std::max(worst, std::abs(se - closed));
  };

  for (const auto& h : test) {
    const double closed = std::log2(
        1.0 + sc.power_budget * h.h.col(0).squaredNorm() / sc.noise_power);
    track(env.wmmse(h).se_trace.back(), closed);
    track(brute_force_power(h, sc.noise_power, sc.power_budget,
                            sc.power_budget / 100)
              .se,
          closed);
  }

  for (ArchKind kind :
       {ArchKind::DmFnn, ArchKind::DmGnn, ArchKind::Fnn, ArchKind::Gnn}) {
    ParamStore params;
    run_cell(cfg, {kind, 0.0, 1}, nullptr, &params);
    ArchDescriptor desc;
    desc.kind = kind;
    desc.n_antennas = cfg.n_antennas;
    desc.n_users = 1;
    Rng rng(99);
    const DiffusionSchedule sched = cfg.train.schedule();
    for (const auto& h : test) {
      const double closed = std::log2(
          1.0 + sc.power_budget * h.h.col(0).squaredNorm() / sc.noise_power);
      double se = 0.0;
      if (arch_uses_diffusion(kind)) {
        const auto net = make_noise_predictor(desc);
        const PowerAllocation p =
            sample_action(*net, params, h, sched, rng, cfg.n_candidates, env);
        se = se_of_action(h, p, sc.noise_power);
      } else {
        const auto net = make_direct_policy(desc);
        const Eigen::VectorXd raw =
            predict_one(*net, params, compute_state_features(h));
        se = se_of_action(h, normalize_power(raw, sc.power_budget),
                          sc.noise_power);
      }
      track(se, closed);
    }
  }
  std::ostringstream os;
  os << "max |SE - log2(1 + P*||h||^2/sigma2)| = " << worst
     << " across WMMSE, brute force, DM-FNN, DM-GNN, FNN, GNN";
  return {worst <= 1e-3, os.str()};
}

// Criterion 3: seed-averaged ordering at rho >= 0.8, full desk scale.
CriterionResult criterion_fig3_ordering() {
  ExperimentConfig cfg;  // desk-scale defaults: 2048/512, 5 seeds
  cfg.rho_list = {0.8, 0.95};
  cfg.output_dir = (std::filesystem::temp_directory_path() /
                    ("dmbeam-acceptance-" + std::to_string(::getpid())))
                       .string();
  const auto records = run_sweep(cfg, 0, &std::cerr);

  std::map<std::pair<std::string, double>, std::vector<double>> by_cell;
  for (const auto& r : records)
    by_cell[std::make_pair(r.architecture, r.rho)].push_back(r.se_ratio);
  auto mean = [&](const std::string& a, double rho) {
    const auto& v = by_cell.at(std::make_pair(a, rho));
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
  };
  auto win_rate = [&](const std::string& a, const std::string& b, double rho) {
    const auto& va = by_cell.at(std::make_pair(a, rho));
    const auto& vb = by_cell.at(std::make_pair(b, rho));
    int wins = 0;
    for (std::size_t i = 0; i < va.size(); ++i) wins += va[i] > vb[i];
    return wins;
  };

  bool pass = true;
  std::ostringstream os;
  for (double rho : cfg.rho_list) {
    const double dm_gnn = mean("DM-GNN", rho), gnn = mean("GNN", rho);
    const double dm_fnn = mean("DM-FNN", rho), fnn = mean("FNN", rho);
    const int w_gnn = win_rate("DM-GNN", "GNN", rho);
    const int w_fnn = win_rate("DM-FNN", "FNN", rho);
    pass = pass && dm_gnn > gnn && dm_fnn > fnn && gnn >= fnn && w_gnn >= 3 &&
           w_fnn >= 3;
    os << "rho=" << rho << ": DM-GNN " << dm_gnn << " vs GNN " << gnn << " ("
       << w_gnn << "/5 wins), DM-FNN " << dm_fnn << " vs FNN " << fnn << " ("
       << w_fnn << "/5 wins); ";
  }
  os << "csv at " << cfg.output_dir << "/results.csv";
  return {pass, os.str()};
}

// Criterion 4: multimodality mechanism at rho = 1.
CriterionResult criterion_multimodality() {
  ExperimentConfig cfg;
  cfg.n_train = 1024;
  cfg.n_test = 64;
  cfg.rho_list = {1.0};
  cfg.seeds = {1};

  const ScenarioConfig sc = cfg.scenario(1.0, 1);
  Environment env(sc);
  const auto test = make_dataset(sc, cfg.n_test, kTestSetTag);
  const double budget = sc.power_budget;

  // (a) the brute-force oracle confirms a vertex optimum
  const double delta = budget / 50;
  const BruteForceResult bf =
      brute_force_power(test[0], sc.noise_power, budget, delta);
  const bool vertex_ok = bf.best.p.maxCoeff() >= budget - delta - 1e-9;

  // (b) trained DM-GNN places >= 0.9 P on one user in >= 60% of draws
  const auto train_set = make_dataset(sc, cfg.n_train, kTrainSetTag);
  TrainConfig tc = cfg.train;
  tc.seed = 777;
  const DiffusionSchedule sched = tc.schedule();
  ArchDescriptor desc;
  desc.kind = ArchKind::DmGnn;
  desc.n_antennas = cfg.n_antennas;
  desc.n_users = cfg.n_users;
  GnnNoisePredictor net(desc);
  Environment train_env(sc);
  const ParamStore params =
      train_model_based_unsup(net, train_set, train_env, sched, tc);

  Rng rng(4040);
  int hits8 = 0, hits1 = 0, draws = 0;
  for (const auto& h : test) {
    for (int rep = 0; rep < 3; ++rep) {
      const PowerAllocation p8 =
          sample_action(net, params, h, sched, rng, cfg.n_candidates, env);
      const PowerAllocation p1 =
          sample_action(net, params, h, sched, rng, 1, env);
      hits8 += p8.p.maxCoeff() >= 0.9 * budget;
      hits1 += p1.p.maxCoeff() >= 0.9 * budget;
      ++draws;
    }
  }
  const double frac8 = static_cast<double>(hits8) / draws;
  const double frac1 = static_cast<double>(hits1) / draws;

  // (c) the direct GNN outputs near-equal powers on identical channels
  ArchDescriptor gdesc;
  gdesc.kind = ArchKind::Gnn;
  gdesc.n_antennas = cfg.n_antennas;
  gdesc.n_users = cfg.n_users;
  GnnDirectPolicy gnn(gdesc);
  Environment bl_env(sc);
  const ParamStore gparams = train_direct_baseline(gnn, train_set, bl_env, tc);
  double max_comp = 0.0;
  for (const auto& h : test) {
    const Eigen::VectorXd raw =
        predict_one(gnn, gparams, compute_state_features(h));
    max_comp = std::max(max_comp, normalize_power(raw, budget).p.maxCoeff());
  }

  std::ostringstream os;
  os << "vertex optimum max-p " << bf.best.p.maxCoeff() << "/" << budget
     << "; DM-GNN >=0.9P draws: " << frac8 * 100 << "% (best-of-"
     << cfg.n_candidates << "; single-chain " << frac1 * 100
     << "%); direct GNN max component " << max_comp << " (bound "
     << 0.3 * budget << ")";
  const bool pass = vertex_ok && frac8 >= 0.6 && max_comp <= 0.3 * budget;
  return {pass, os.str()};
}

// Criterion 5: invariant suites.
CriterionResult criterion_invariants() {
  const auto results = run_invariant_suite();
  bool pass = true;
  std::ostringstream os;
  for (const auto& [name, ok] : results) {
    pass = pass && ok;
    if (!ok) os << "FAILED: " << name << "; ";
  }
  if (pass) os << results.size() << " invariant checks passed";
  return {pass, os.str()};
}

// Criterion 6: model-free reduction is bit-exact and the Lagrangian variant
// meets the constraint tolerance.
CriterionResult criterion_training_consistency() {
  std::ostringstream os;
  bool pass = true;

  {
    const ScenarioConfig sc = ScenarioConfig::from_snr_db(8, 4, 10.0, 0.0, 7);
    Environment env1(sc), env2(sc);
    Rng crng(44);
    const auto ds = env1.sample_channels(128, crng);
    ArchDescriptor d;
    d.kind = ArchKind::DmGnn;
    d.n_antennas = 8;
    d.n_users = 4;
    GnnNoisePredictor net(d);
    ValueNet vnet(ArchDescriptor{ArchKind::Value, 8, 4, {256, 256}, 3, 64, 32});
    TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 64;
    tc.seed = 11;
    const DiffusionSchedule sched = tc.schedule();
    const ParamStore mb = train_model_based_unsup(net, ds, env1, sched, tc);
    const ModelFreeResult mf =
        train_model_free_unsup(net, vnet, ds, env2, sched, tc, true);
    const bool identical = mb.values() == mf.policy.values();
    pass = pass && identical;
    os << "exact-value-oracle reduction bit-identical: "
       << (identical ? "yes" : "NO") << "; ";
  }

  {
    const ScenarioConfig sc = ScenarioConfig::from_snr_db(4, 3, 10.0, 0.2, 8);
    Environment env(sc);
    Rng crng(45);
    const auto ds = env.sample_channels(64, crng);
    ArchDescriptor d;
    d.kind = ArchKind::DmFnn;
    d.n_antennas = 4;
    d.n_users = 3;
    d.hidden = {128, 128};
    FnnNoisePredictor net(d);
    const double budget = sc.power_budget;

    ConstraintSet sum_cs;
    sum_cs.add({"sum_power",
                [budget](const Eigen::VectorXd& p, const ChannelMatrix&) {
                  return p.sum() - budget;
                },
                [](const Eigen::VectorXd& p, const ChannelMatrix&) {
                  return Eigen::VectorXd::Ones(p.size()).eval();
                }});
    TrainConfig tc;
    tc.epochs = 400;
    tc.batch_size = 64;
    tc.seed = 13;
    tc.action_improve_steps = 4;
    TrainTrace trace;
    const ParamStore params = train_lagrangian(net, ds, env, sum_cs,
                                               tc.schedule(), tc, 0.5, &trace);
    double mean_violation = 0.0;
    for (const auto& raw : trace.final_buffer.raw)
      mean_violation += std::max(0.0, softplus_map(raw).sum() - budget);
    mean_violation /= static_cast<double>(trace.final_buffer.size());

    // violations of raw model samples, reported alongside
    Rng srng(21);
    double sampled_violation = 0.0;
    for (const auto& h : ds) {
      const Eigen::VectorXd p =
          sample_constrained_action(net, params, h, tc.schedule(), srng);
      sampled_violation += std::max(0.0, p.sum() - budget);
    }
    sampled_violation /= static_cast<double>(ds.size());

    ConstraintSet min_cs;
    for (int k = 0; k < 3; ++k) {
      min_cs.add({"min_power_" + std::to_string(k),
                  [budget, k](const Eigen::VectorXd& p, const ChannelMatrix&) {
                    return 0.05 * budget - p[k];
                  },
                  [k](const Eigen::VectorXd& p, const ChannelMatrix&) {
                    Eigen::VectorXd g = Eigen::VectorXd::Zero(p.size());
                    g[k] = -1.0;
                    return g;
                  }});
    }
    TrainConfig tc2 = tc;
    tc2.seed = 14;
    TrainTrace trace2;
    train_lagrangian(net, ds, env, min_cs, tc2.schedule(), tc2, 0.5, &trace2);
    double min_violation = 0.0;
    long long terms = 0;
    for (const auto& raw : trace2.final_buffer.raw) {
      const Eigen::VectorXd p = softplus_map(raw);
      for (int k = 0; k < 3; ++k) {
        min_violation += std::max(0.0, 0.05 * budget - p[k]);
        ++terms;
      }
    }
    min_violation /= static_cast<double>(terms);

    const double tol = 1e-3 * budget;
    const bool lag_ok = mean_violation <= tol && min_violation <= tol;
    pass = pass && lag_ok;
    os << "Lagrangian training-set mean violations: sum-power "
       << mean_violation << ", min-power " << min_violation << " (tol " << tol
       << "; raw sampled-action mean violation " << sampled_violation << ")";
  }
  return {pass, os.str()};
}

}  // namespace

int main() {
  struct Entry {
    const char* name;
    CriterionResult (*fn)();
  };
  const std::vector<Entry> criteria = {
      {"oracle equivalence (WMMSE vs brute force)",
       &criterion_oracle_equivalence},
      {"single-user analytic checks", &criterion_single_user},
      {"correlation-sweep ordering", &criterion_fig3_ordering},
      {"multimodality mechanism at full correlation",
       &criterion_multimodality},
      {"invariant suites", &criterion_invariants},
      {"training-regime consistency", &criterion_training_consistency},
  };

  bool all_pass = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult r;
    try {
      r = criteria[i].fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    all_pass = all_pass && r.pass;
    std::printf("criterion %zu (%s): %s -- %s [%.1fs]\n", i + 1,
                criteria[i].name, r.pass ? "PASS" : "FAIL", r.detail.c_str(),
                elapsed_s(t0));
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
