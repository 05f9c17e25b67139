// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include "dmbeam/env.hpp"
#include "dmbeam/predictors.hpp"
#include "dmbeam/rng.hpp"

namespace dmbeam {

// Per-step noise variances and cumulative products, 1-indexed by step t.
struct DiffusionSchedule {
  int steps = 0;                 // T
  Eigen::VectorXd beta;          // beta[t-1] for step t
  Eigen::VectorXd alpha;         // 1 - beta
  Eigen::VectorXd alpha_bar;     // running product of alpha

  double beta_at(int t) const { return beta[t - 1]; }
  double alpha_at(int t) const { return alpha[t - 1]; }
  double alpha_bar_at(int t) const { return alpha_bar[t - 1]; }
};

inline constexpr int kDefaultDiffusionSteps = 50;
inline constexpr double kDefaultBetaStart = 1e-4;
// With T = 50 this drives alpha_bar[T] below 0.05, so the terminal forward
// state is close to pure noise.
inline constexpr double kDefaultBetaEnd = 0.12;

// Linear beta ramp from beta_start to beta_end over T steps.
DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end);
DiffusionSchedule default_schedule();

struct NoisySample {
  Eigen::VectorXd x;
  int t = 0;
};

// Closed-form forward noising:
// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.
NoisySample forward_diffuse(const Eigen::VectorXd& x0, int t,
                            const Eigen::VectorXd& eps,
                            const DiffusionSchedule& sched);

// One reverse denoising step; stochastic for t > 1, deterministic at t = 1.
Eigen::VectorXd reverse_step(const Eigen::VectorXd& x_t, int t,
                             const Eigen::VectorXd& eps_hat,
                             const DiffusionSchedule& sched, Rng& rng);

// Batched variant; one chain per row, noise drawn row-major per step.
Eigen::MatrixXd reverse_step_batch(const Eigen::MatrixXd& x_t, int t,
                                   const Eigen::MatrixXd& eps_hat,
                                   const DiffusionSchedule& sched, Rng& rng);

// Full reverse chains from x_T ~ N(0, I), conditioned per row on the state
// behind `features`. Returns raw (pre-normalization) x_0, one row per chain.
Eigen::MatrixXd sample_raw_chains(const NoisePredictor& net,
                                  const ParamStore& params,
                                  const FeatureBatch& features,
                                  const DiffusionSchedule& sched, Rng& rng);

struct SampleDiagnostics {
  Eigen::MatrixXd candidate_raw;   // n_candidates x K
  Eigen::VectorXd candidate_se;
  int best_index = 0;
};

// Draws n_candidates independent reverse chains for one state, normalizes
// each terminal x_0 onto the power simplex, and returns the candidate with
// the highest achieved SE (best-of-N exploration at inference).
PowerAllocation sample_action(const NoisePredictor& net,
                              const ParamStore& params,
                              const ChannelMatrix& state,
                              const DiffusionSchedule& sched, Rng& rng,
                              int n_candidates, Environment& env,
                              SampleDiagnostics* diagnostics = nullptr);

}  // namespace dmbeam
