// SPDX-License-Identifier: Apache-2.0
#include "dmbeam/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace dmbeam {

DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw std::invalid_argument("schedule needs at least 2 steps");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");

  DiffusionSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    s.beta[t] = beta_start + (beta_end - beta_start) * t / (steps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

DiffusionSchedule default_schedule() {
  return make_schedule(kDefaultDiffusionSteps, kDefaultBetaStart,
                       kDefaultBetaEnd);
}

NoisySample forward_diffuse(const Eigen::VectorXd& x0, int t,
                            const Eigen::VectorXd& eps,
                            const DiffusionSchedule& sched) {
  if (t < 1 || t > sched.steps)
    throw std::invalid_argument("step index out of range");
  if (eps.size() != x0.size())
    throw std::invalid_argument("noise dimension mismatch");
  const double ab = sched.alpha_bar_at(t);
  NoisySample out;
  out.t = t;
  out.x = std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
  return out;
}

Eigen::VectorXd reverse_step(const Eigen::VectorXd& x_t, int t,
                             const Eigen::VectorXd& eps_hat,
                             const DiffusionSchedule& sched, Rng& rng) {
  if (t < 1 || t > sched.steps)
    throw std::invalid_argument("step index out of range");
  if (eps_hat.size() != x_t.size())
    throw std::invalid_argument("noise dimension mismatch");
  const double beta = sched.beta_at(t);
  const double ab = sched.alpha_bar_at(t);
  Eigen::VectorXd x =
      (x_t - beta / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(sched.alpha_at(t));
  if (t > 1) {
    const double sigma = std::sqrt(beta);
    for (int i = 0; i < x.size(); ++i) x[i] += sigma * rng.normal();
  }
  return x;
}

Eigen::MatrixXd reverse_step_batch(const Eigen::MatrixXd& x_t, int t,
                                   const Eigen::MatrixXd& eps_hat,
                                   const DiffusionSchedule& sched, Rng& rng) {
  if (t < 1 || t > sched.steps)
    throw std::invalid_argument("step index out of range");
  const double beta = sched.beta_at(t);
  const double ab = sched.alpha_bar_at(t);
  Eigen::MatrixXd x =
      (x_t - beta / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(sched.alpha_at(t));
  if (t > 1) {
    const double sigma = std::sqrt(beta);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) += sigma * rng.normal();
  }
  return x;
}

Eigen::MatrixXd sample_raw_chains(const NoisePredictor& net,
                                  const ParamStore& params,
                                  const FeatureBatch& features,
                                  const DiffusionSchedule& sched, Rng& rng) {
  const int b = features.batch();
  const int k = net.descriptor().n_users;
  Eigen::MatrixXd x(b, k);
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < k; ++c) x(r, c) = rng.normal();
  for (int t = sched.steps; t >= 1; --t) {
    const Eigen::MatrixXd eps_hat = net.predict(params, features, x, t);
    x = reverse_step_batch(x, t, eps_hat, sched, rng);
  }
  return x;
}

PowerAllocation sample_action(const NoisePredictor& net,
                              const ParamStore& params,
                              const ChannelMatrix& state,
                              const DiffusionSchedule& sched, Rng& rng,
                              int n_candidates, Environment& env,
                              SampleDiagnostics* diagnostics) {
  if (n_candidates < 1)
    throw std::invalid_argument("n_candidates must be >= 1");
  const StateFeatures f = compute_state_features(state);
  const FeatureBatch batch = FeatureBatch::replicate(f, n_candidates);
  const Eigen::MatrixXd raw = sample_raw_chains(net, params, batch, sched, rng);

  int best = 0;
  double best_se = -1.0;
  Eigen::VectorXd ses(n_candidates);
  for (int i = 0; i < n_candidates; ++i) {
    const PowerAllocation p =
        normalize_power(raw.row(i).transpose(), env.budget());
    const double se = env.se_of_action(state, p);
    ses[i] = se;
    if (se > best_se) {
      best_se = se;
      best = i;
    }
  }
  if (diagnostics) {
    diagnostics->candidate_raw = raw;
    diagnostics->candidate_se = ses;
    diagnostics->best_index = best;
  }
  return normalize_power(raw.row(best).transpose(), env.budget());
}

}  // namespace dmbeam
