// SPDX-License-Identifier: Apache-2.0
//
// dmbeam CLI: train one model, evaluate a checkpoint, run the full
// correlation sweep, compare WMMSE against the brute-force oracle, or run
// the built-in invariant suite.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "dmbeam/diffusion.hpp"
#include "dmbeam/env.hpp"
#include "dmbeam/harness.hpp"
#include "dmbeam/predictors.hpp"
#include "dmbeam/training.hpp"

namespace {

using namespace dmbeam;

void apply_env_overrides(ExperimentConfig& cfg) {
  if (const char* dir = std::getenv(kOutputDirEnv)) cfg.output_dir = dir;
}

ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig cfg =
      path.empty() ? ExperimentConfig{} : ExperimentConfig::from_json_file(path);
  apply_env_overrides(cfg);
  return cfg;
}

int cmd_train(const std::string& config_path, const std::string& arch_name,
              double rho, std::uint64_t seed, const std::string& out_path) {
  ExperimentConfig cfg = load_config(config_path);
  SweepCell cell{arch_kind_from_name(arch_name), rho, seed};

  std::cerr << "training " << arch_kind_name(cell.arch) << " rho=" << rho
            << " seed=" << seed << " (" << cfg.n_train << " channels)\n";
  ParamStore params;
  TrainTrace trace;
  const EvalRecord rec = run_cell(cfg, cell, nullptr, &params, &trace);
  if (!trace.buffer_mean_se.empty())
    std::cerr << "buffer mean SE " << trace.buffer_mean_se.front() << " -> "
              << trace.buffer_mean_se.back() << " over "
              << trace.buffer_mean_se.size() << " epochs, "
              << trace.improvement_gradient_calls << " env gradient calls\n";
  else if (!trace.loss.empty())
    std::cerr << trace.loss.size() << " optimizer steps, "
              << trace.improvement_gradient_calls << " env gradient calls\n";

  CheckpointMeta meta;
  meta.arch.kind = cell.arch;
  meta.arch.n_antennas = cfg.n_antennas;
  meta.arch.n_users = cfg.n_users;
  meta.seed = seed;
  meta.diffusion_steps = cfg.train.diffusion_steps;
  meta.beta_start = cfg.train.beta_start;
  meta.beta_end = cfg.train.beta_end;
  meta.optimizer = cfg.train.optimizer;
  save_checkpoint(params, meta, out_path);

  std::cout << "arch=" << rec.architecture << " rho=" << rec.rho
            << " seed=" << rec.seed << " mean_se=" << rec.mean_se
            << " wmmse_se=" << rec.wmmse_se << " se_ratio=" << rec.se_ratio
            << " checkpoint=" << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path,
             double rho, std::uint64_t seed, int n_candidates) {
  ExperimentConfig cfg = load_config(config_path);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ScenarioConfig sc = cfg.scenario(rho, seed);
  Environment env(sc);
  const auto test_set = make_dataset(sc, cfg.n_test, kTestSetTag);
  Rng rng(Rng::mix(seed, 0xeba1eba1ULL));

  EvalSummary s;
  if (arch_uses_diffusion(ckpt.meta.arch.kind)) {
    const auto net = make_noise_predictor(ckpt.meta.arch);
    const ParamStore params = adopt_params(ckpt, ckpt.meta.arch);
    const DiffusionSchedule sched = make_schedule(
        ckpt.meta.diffusion_steps, ckpt.meta.beta_start, ckpt.meta.beta_end);
    const DmSamplingPolicy policy(*net, params, sched,
                                  n_candidates > 0 ? n_candidates
                                                   : cfg.n_candidates);
    s = evaluate(policy, test_set, env, rng);
  } else {
    const auto net = make_direct_policy(ckpt.meta.arch);
    const ParamStore params = adopt_params(ckpt, ckpt.meta.arch);
    const DirectNetPolicy policy(*net, params);
    s = evaluate(policy, test_set, env, rng);
  }
  std::cout << "arch=" << arch_kind_name(ckpt.meta.arch.kind) << " rho=" << rho
            << " seed=" << seed << " mean_se=" << s.mean_se
            << " wmmse_se=" << s.wmmse_se << " se_ratio=" << s.se_ratio
            << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  apply_env_overrides(cfg);
  const auto records = run_sweep(cfg, 0, &std::cerr);
  std::cout << "wrote " << records.size() << " records to " << cfg.output_dir
            << "/results.csv\n";
  return 0;
}

int cmd_oracle(int antennas, int users, double snr_db, double rho,
               std::uint64_t seed, int instances, int grid_levels) {
  const ScenarioConfig sc =
      ScenarioConfig::from_snr_db(antennas, users, snr_db, rho, seed);
  Environment env(sc);
  Rng rng(Rng::mix(seed, 0x0eac1eULL));
  const double delta = sc.power_budget / grid_levels;

  double min_ratio = 1e300;
  std::cout << "instance,wmmse_se,brute_force_se,ratio\n";
  for (int i = 0; i < instances; ++i) {
    const ChannelMatrix h = env.sample_channel(rng);
    const double w_se = env.wmmse(h).se_trace.back();
    const BruteForceResult bf =
        brute_force_power(h, sc.noise_power, sc.power_budget, delta);
    const double ratio = w_se / bf.se;
    min_ratio = std::min(min_ratio, ratio);
    std::cout << i << ',' << w_se << ',' << bf.se << ',' << ratio << "\n";
  }
  std::cout << "min_ratio=" << min_ratio << "\n";
  return 0;
}

int cmd_selftest() {
  const auto results = run_invariant_suite();
  bool all_ok = true;
  for (const auto& [name, ok] : results) {
    std::cout << (ok ? "PASS" : "FAIL") << "  " << name << "\n";
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffusion-policy beamforming benchmark"};
  app.require_subcommand(1);

  std::string config_path, arch_name = "DM-GNN", out_path = "model.ckpt";
  std::string ckpt_path, out_dir;
  double rho = 0.0, snr_db = 10.0;
  std::uint64_t seed = 1;
  int n_candidates = 0, antennas = 2, users = 2, instances = 20,
      grid_levels = 200;

  auto* train = app.add_subcommand("train", "train one architecture cell");
  train->add_option("--config", config_path, "experiment config JSON");
  train->add_option("--arch", arch_name, "DM-FNN | DM-GNN | FNN | GNN");
  train->add_option("--rho", rho, "channel correlation weight")->required();
  train->add_option("--seed", seed, "cell seed");
  train->add_option("--out", out_path, "checkpoint output path");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path, "experiment config JSON");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  eval->add_option("--rho", rho, "channel correlation weight")->required();
  eval->add_option("--seed", seed, "test-set seed");
  eval->add_option("--n-candidates", n_candidates,
                   "reverse chains per state (diffusion models)");

  auto* sweep = app.add_subcommand("sweep", "run the full correlation sweep");
  sweep->add_option("--config", config_path, "experiment config JSON");
  sweep->add_option("--out-dir", out_dir, "output directory");

  auto* oracle =
      app.add_subcommand("oracle", "WMMSE vs brute-force grid search");
  oracle->add_option("--antennas", antennas, "BS antennas");
  oracle->add_option("--users", users, "users (<= 4)");
  oracle->add_option("--snr-db", snr_db, "SNR in dB");
  oracle->add_option("--rho", rho, "channel correlation weight");
  oracle->add_option("--seed", seed, "rng seed");
  oracle->add_option("--instances", instances, "number of channels");
  oracle->add_option("--grid-levels", grid_levels, "levels per user (<= 200)");

  app.add_subcommand("selftest", "run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (app.got_subcommand("train"))
      return cmd_train(config_path, arch_name, rho, seed, out_path);
    if (app.got_subcommand("eval"))
      return cmd_eval(config_path, ckpt_path, rho, seed, n_candidates);
    if (app.got_subcommand("sweep")) return cmd_sweep(config_path, out_dir);
    if (app.got_subcommand("oracle"))
      return cmd_oracle(antennas, users, snr_db, rho, seed, instances,
                        grid_levels);
    if (app.got_subcommand("selftest")) return cmd_selftest();
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
