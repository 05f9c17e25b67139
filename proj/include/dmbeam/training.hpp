// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "dmbeam/diffusion.hpp"
#include "dmbeam/env.hpp"
#include "dmbeam/predictors.hpp"

namespace dmbeam {

enum class LearningMethod {
  Supervised,
  ModelBasedUnsup,
  ModelFreeUnsup,
  ReinforcementLearning,
};

std::string learning_method_name(LearningMethod m);

struct TaskDescriptor {
  bool is_markov = false;
  bool has_labels = false;
  bool has_model = false;
};

// Markov task -> RL; labeled -> supervised; known objective -> model-based
// unsupervised; otherwise model-free unsupervised.
LearningMethod select_method(const TaskDescriptor& task);

struct TrainConfig {
  int epochs = 24;
  int batch_size = 128;
  double learning_rate = 1e-3;
  int action_improve_steps = 2;
  double action_step_size = 0.6;
  int diffusion_steps = kDefaultDiffusionSteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  std::uint64_t seed = 1;
  std::string optimizer = "adam";  // "adam" or "sgd"
  double refresh_fraction = 0.25;  // share of buffer resampled per epoch

  void validate() const;
  DiffusionSchedule schedule() const;
};

// Per-sample best raw action found so far; se always equals the true SE of
// the normalized stored action.
struct ActionBuffer {
  std::vector<Eigen::VectorXd> raw;
  std::vector<double> se;

  std::size_t size() const { return raw.size(); }
  double mean_se() const;
};

struct TrainTrace {
  std::vector<double> loss;            // per optimizer step
  std::vector<double> buffer_mean_se;  // per epoch (buffer-based regimes)
  std::vector<double> multipliers;     // final Lagrange multipliers
  ActionBuffer final_buffer;           // buffer state after the last epoch
  std::uint64_t improvement_gradient_calls = 0;
};

// Adaptive per-parameter step sizes (Adam) with an SGD fallback.
class Optimizer {
 public:
  Optimizer(const std::string& kind, std::size_t n, double lr);
  void step(std::vector<double>& params, const Eigen::VectorXd& grad);

 private:
  bool adam_ = true;
  double lr_;
  long long t_ = 0;
  Eigen::VectorXd m_, v_;
};

struct LabeledExample {
  ChannelMatrix state;
  Eigen::VectorXd raw_action;  // raw (pre-normalization) diffusion target
};

// Noise-MSE diffusion training on labeled raw actions.
ParamStore train_supervised(const NoisePredictor& net,
                            const std::vector<LabeledExample>& dataset,
                            const DiffusionSchedule& sched,
                            const TrainConfig& cfg,
                            TrainTrace* trace = nullptr);

// Raw-space hill climbing of the true SE through normalize_power; a step is
// kept only when it improves the sample's SE, so buffer SE never decreases.
void improve_actions(Environment& env,
                     const std::vector<ChannelMatrix>& states,
                     ActionBuffer& buffer, int steps, double step_size);

ActionBuffer make_equal_power_buffer(Environment& env,
                                     const std::vector<ChannelMatrix>& states);

// Model-based unsupervised training: per epoch, refresh part of the buffer
// from the current model (keeping the better action per sample), hill-climb
// the buffer, then run one noise-prediction pass on the buffer actions.
ParamStore train_model_based_unsup(const NoisePredictor& net,
                                   const std::vector<ChannelMatrix>& dataset,
                                   Environment& env,
                                   const DiffusionSchedule& sched,
                                   const TrainConfig& cfg,
                                   TrainTrace* trace = nullptr);

// Differentiable constraint g(p, state) <= 0.
struct Constraint {
  std::string name;
  std::function<double(const Eigen::VectorXd& p, const ChannelMatrix&)> eval;
  std::function<Eigen::VectorXd(const Eigen::VectorXd& p,
                                const ChannelMatrix&)>
      grad_p;
};

class ConstraintSet {
 public:
  // Throws if the constraint has no gradient (non-differentiable).
  void add(Constraint c);
  const std::vector<Constraint>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

 private:
  std::vector<Constraint> items_;
};

// Elementwise softplus action map used when the simplex normalization is
// replaced by multiplier-based constraint handling.
Eigen::VectorXd softplus_map(const Eigen::VectorXd& raw);

// Same epoch loop as model-based training, but the improvement objective is
// SE - sum_i lambda_i * max(0, g_i) and multipliers ascend on the mean
// constraint values (projected at zero).
ParamStore train_lagrangian(const NoisePredictor& net,
                            const std::vector<ChannelMatrix>& dataset,
                            Environment& env, const ConstraintSet& constraints,
                            const DiffusionSchedule& sched,
                            const TrainConfig& cfg, double multiplier_lr,
                            TrainTrace* trace = nullptr);

// Terminal action of one reverse chain under the softplus map (Lagrangian
// regimes do not renormalize).
Eigen::VectorXd sample_constrained_action(const NoisePredictor& net,
                                          const ParamStore& params,
                                          const ChannelMatrix& state,
                                          const DiffusionSchedule& sched,
                                          Rng& rng);

struct ModelFreeResult {
  ParamStore policy;
  ParamStore value;
};

// Alternating training: fit the value network on observed (state, action,
// SE) tuples from model samples plus random exploration, improve buffer
// actions by ascending the value estimate, then run the noise pass. The
// environment is used as a black box (SE values only) except when
// use_exact_value_oracle is set, which reproduces the model-based run.
ModelFreeResult train_model_free_unsup(const NoisePredictor& net,
                                       const ValueNet& value_net,
                                       const std::vector<ChannelMatrix>& data,
                                       Environment& env,
                                       const DiffusionSchedule& sched,
                                       const TrainConfig& cfg,
                                       bool use_exact_value_oracle = false,
                                       TrainTrace* trace = nullptr);

// Gradient ascent on mean SE through the normalization layer. Runs
// epochs * action_improve_steps dataset passes so the count of environment
// gradient calls matches diffusion-model training on the same config.
ParamStore train_direct_baseline(const DirectPolicy& policy,
                                 const std::vector<ChannelMatrix>& dataset,
                                 Environment& env, const TrainConfig& cfg,
                                 TrainTrace* trace = nullptr);

}  // namespace dmbeam
