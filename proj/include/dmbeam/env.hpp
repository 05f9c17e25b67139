// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "dmbeam/rng.hpp"

namespace dmbeam {

// MU-MISO downlink scenario: N-antenna base station, K single-antenna users,
// total power budget P, receiver noise power sigma2, inter-user channel
// correlation rho in [0, 1].
struct ScenarioConfig {
  int n_antennas = 8;
  int n_users = 4;
  double power_budget = 10.0;
  double noise_power = 1.0;
  double rho = 0.0;
  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument
  double snr_db() const;

  // SNR is P / sigma2 with sigma2 fixed to 1.
  static ScenarioConfig from_snr_db(int n_antennas, int n_users, double snr_db,
                                    double rho, std::uint64_t seed);
};

// Complex N x K channel realization; column k is user k's channel vector.
struct ChannelMatrix {
  Eigen::MatrixXcd h;

  int n_antennas() const { return static_cast<int>(h.rows()); }
  int n_users() const { return static_cast<int>(h.cols()); }
  bool all_finite() const;
};

// K nonnegative per-user transmit powers on the budget simplex.
struct PowerAllocation {
  Eigen::VectorXd p;
  double budget = 0.0;

  PowerAllocation() = default;
  PowerAllocation(Eigen::VectorXd powers, double budget_watts);

  int n_users() const { return static_cast<int>(p.size()); }
  double total() const { return p.sum(); }
};

// Complex N x K beamforming matrix; column k serves user k.
struct BeamformingMatrix {
  Eigen::MatrixXcd w;

  double total_power() const { return w.squaredNorm(); }
};

struct WmmseResult {
  BeamformingMatrix w;
  int iterations = 0;
  bool converged = false;
  std::vector<double> se_trace;  // SE after each outer iteration
};

struct BruteForceResult {
  PowerAllocation best;
  double se = 0.0;
  std::int64_t points_evaluated = 0;
};

// h_k = sqrt(rho) * c + sqrt(1 - rho) * g_k with c shared across users and
// per-user g_k, all entries i.i.d. CN(0, 1). Columns with vanishing norm are
// redrawn. E[||h_k||^2] = N independently of rho.
ChannelMatrix sample_channel(const ScenarioConfig& cfg, Rng& rng);

// w_k = sqrt(p_k) * v_k / ||v_k||,
// v_k = (I + (1/sigma2) * sum_j p_j h_j h_j^H)^{-1} h_k.
BeamformingMatrix recover_beamformer(const ChannelMatrix& h,
                                     const PowerAllocation& p, double sigma2);

// Sum over users of log2(1 + SINR_k) in bits/s/Hz.
double spectral_efficiency(const ChannelMatrix& h, const BeamformingMatrix& w,
                           double sigma2);

// Softplus-ratio map onto the budget simplex: p_k = P * s(raw_k) / sum s(raw).
// Smooth everywhere, so action improvement can differentiate through it.
PowerAllocation normalize_power(const Eigen::VectorXd& raw, double budget);

// Jacobian dp/draw of normalize_power, K x K.
Eigen::MatrixXd normalize_power_jacobian(const Eigen::VectorXd& raw,
                                         double budget);

// Raw vector that normalize_power maps back to the given powers exactly
// (up to the clamp at raw = -9 for zero powers).
Eigen::VectorXd raw_from_powers(const Eigen::VectorXd& powers, double budget);

double softplus(double x);
double softplus_inverse(double y);

// SE achieved by an arbitrary nonnegative power vector through the
// structure-recovered beamformer. Does not require sum(p) <= budget; this is
// the function se_gradient differentiates.
double sum_se_for_powers(const ChannelMatrix& h, const Eigen::VectorXd& powers,
                         double sigma2);

// SE of the structure-recovered beamformer for a feasible allocation.
double se_of_action(const ChannelMatrix& h, const PowerAllocation& p,
                    double sigma2);

// Analytic gradient of sum_se_for_powers with respect to the powers.
Eigen::VectorXd se_gradient(const ChannelMatrix& h,
                            const Eigen::VectorXd& powers, double sigma2);

// Block-coordinate WMMSE ascent from equal-power MRT; the transmit step
// solves its quadratic subproblem by bisection on the power multiplier.
WmmseResult wmmse(const ChannelMatrix& h, double sigma2, double budget,
                  int max_iter = 150, double tol = 1e-6);

// Exhaustive search over the simplex grid {p : p_k = m_k * delta}. Rejects
// K > 4 and more than 200 levels per user.
BruteForceResult brute_force_power(const ChannelMatrix& h, double sigma2,
                                   double budget, double grid_resolution);

// Scenario plus black-box call counters; one instance per worker, counters
// are not synchronized.
class Environment {
 public:
  explicit Environment(ScenarioConfig cfg);

  const ScenarioConfig& cfg() const { return cfg_; }
  double sigma2() const { return cfg_.noise_power; }
  double budget() const { return cfg_.power_budget; }

  ChannelMatrix sample_channel(Rng& rng) const;
  std::vector<ChannelMatrix> sample_channels(int count, Rng& rng) const;

  double se_of_powers(const ChannelMatrix& h, const Eigen::VectorXd& powers);
  double se_of_action(const ChannelMatrix& h, const PowerAllocation& p);
  Eigen::VectorXd se_gradient(const ChannelMatrix& h,
                              const Eigen::VectorXd& powers);
  WmmseResult wmmse(const ChannelMatrix& h, int max_iter = 150,
                    double tol = 1e-6);

  PowerAllocation equal_power() const;

  std::uint64_t se_value_calls() const { return se_value_calls_; }
  std::uint64_t se_gradient_calls() const { return se_gradient_calls_; }
  void reset_counters();

 private:
  ScenarioConfig cfg_;
  std::uint64_t se_value_calls_ = 0;
  std::uint64_t se_gradient_calls_ = 0;
};

}  // namespace dmbeam
