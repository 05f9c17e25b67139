// SPDX-License-Identifier: Apache-2.0
#include "dmbeam/training.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

namespace dmbeam {

namespace {

constexpr double kRawClip = 6.0;

// Fixed stream tags so the regimes consume independent randomness; skipping
// one stream (e.g. value fitting) cannot shift any other.
constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamRefresh = 2;
constexpr std::uint64_t kStreamNoise = 3;
constexpr std::uint64_t kStreamValue = 4;
constexpr std::uint64_t kStreamValueInit = 5;

struct SampleScore {
  double objective = 0.0;
  double se = 0.0;
};

struct EngineHooks {
  std::function<SampleScore(int idx, const Eigen::VectorXd& p)> score;
  std::function<Eigen::VectorXd(int idx, const Eigen::VectorXd& p)> grad;
  std::function<Eigen::VectorXd(const Eigen::VectorXd& raw)> to_powers;
  std::function<Eigen::VectorXd(const Eigen::VectorXd& raw,
                                const Eigen::VectorXd& grad_p)>
      pullback;
  // Optional; runs at the top of each epoch (value fitting, multiplier
  // updates). May rescore the buffer objectives in place.
  std::function<void(int epoch, std::vector<double>& objectives)> epoch_begin;
  // Optional; observes every refresh draw (for value-net replay).
  std::function<void(int idx, const Eigen::VectorXd& p, double se)>
      on_refresh_sample;
};

Eigen::VectorXd clip_raw(Eigen::VectorXd raw) {
  for (int i = 0; i < raw.size(); ++i)
    raw[i] = std::clamp(raw[i], -kRawClip, kRawClip);
  return raw;
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j =
        static_cast<std::size_t>(rng.index_below(static_cast<std::uint64_t>(i)));
    std::swap(idx[i - 1], idx[j]);
  }
}

// One pass of noise-MSE training over the given raw targets.
void noise_pass(const NoisePredictor& net, ParamStore& params, Optimizer& opt,
                const std::vector<StateFeatures>& feats,
                const std::vector<Eigen::VectorXd>& raws,
                const DiffusionSchedule& sched, const TrainConfig& cfg,
                Rng& rng, TrainTrace* trace) {
  const int n = static_cast<int>(raws.size());
  const int k = static_cast<int>(raws.front().size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  shuffle_indices(order, rng);

  Eigen::VectorXd grad(params.size());
  for (int start = 0; start < n; start += cfg.batch_size) {
    const int b = std::min(cfg.batch_size, n - start);
    const std::vector<int> batch_idx(order.begin() + start,
                                     order.begin() + start + b);
    const int t = 1 + static_cast<int>(rng.index_below(
                          static_cast<std::uint64_t>(sched.steps)));
    const double ab = sched.alpha_bar_at(t);

    Eigen::MatrixXd eps(b, k), x_t(b, k);
    for (int r = 0; r < b; ++r) {
      const Eigen::VectorXd& x0 = raws[static_cast<std::size_t>(batch_idx[r])];
      for (int c = 0; c < k; ++c) {
        eps(r, c) = rng.normal();
        x_t(r, c) = std::sqrt(ab) * x0[c] + std::sqrt(1.0 - ab) * eps(r, c);
      }
    }
    const FeatureBatch fb = FeatureBatch::gather(feats, batch_idx);
    std::unique_ptr<ForwardCache> cache;
    const Eigen::MatrixXd eps_hat =
        net.predict_cached(params, fb, x_t, t, cache);
    const Eigen::MatrixXd diff = eps_hat - eps;
    const double loss = diff.squaredNorm() / b;
    if (trace) trace->loss.push_back(loss);

    grad.setZero();
    const Eigen::MatrixXd upstream = 2.0 / b * diff;
    net.backprop(params, *cache, upstream, grad, nullptr);
    opt.step(params.values(), grad);
  }
}

struct ScoredBuffer {
  ActionBuffer base;
  std::vector<double> objective;
};

void improve_pass(const EngineHooks& hooks, ScoredBuffer& buf, int steps,
                  double step_size, TrainTrace* trace) {
  const int n = static_cast<int>(buf.base.size());
  for (int i = 0; i < n; ++i) {
    for (int s = 0; s < steps; ++s) {
      const Eigen::VectorXd p = hooks.to_powers(buf.base.raw[i]);
      const Eigen::VectorXd gp = hooks.grad(i, p);
      if (trace) ++trace->improvement_gradient_calls;
      const Eigen::VectorXd graw = hooks.pullback(buf.base.raw[i], gp);
      const Eigen::VectorXd cand =
          clip_raw(buf.base.raw[i] + step_size * graw);
      const SampleScore sc = hooks.score(i, hooks.to_powers(cand));
      if (sc.objective > buf.objective[static_cast<std::size_t>(i)]) {
        buf.base.raw[static_cast<std::size_t>(i)] = cand;
        buf.base.se[static_cast<std::size_t>(i)] = sc.se;
        buf.objective[static_cast<std::size_t>(i)] = sc.objective;
      }
    }
  }
}

void refresh_pass(const NoisePredictor& net, const ParamStore& params,
                  const std::vector<StateFeatures>& feats,
                  const DiffusionSchedule& sched, const EngineHooks& hooks,
                  ScoredBuffer& buf, int epoch, double refresh_fraction,
                  Rng& rng) {
  const int n = static_cast<int>(buf.base.size());
  const int period =
      std::max(1, static_cast<int>(std::lround(1.0 / refresh_fraction)));
  std::vector<int> subset;
  for (int i = 0; i < n; ++i)
    if (i % period == epoch % period) subset.push_back(i);
  if (subset.empty()) return;

  const FeatureBatch fb = FeatureBatch::gather(feats, subset);
  const Eigen::MatrixXd raw = sample_raw_chains(net, params, fb, sched, rng);
  for (std::size_t r = 0; r < subset.size(); ++r) {
    const int i = subset[r];
    const Eigen::VectorXd cand =
        clip_raw(raw.row(static_cast<Eigen::Index>(r)).transpose());
    const SampleScore sc = hooks.score(i, hooks.to_powers(cand));
    if (hooks.on_refresh_sample)
      hooks.on_refresh_sample(i, hooks.to_powers(cand), sc.se);
    if (sc.objective > buf.objective[static_cast<std::size_t>(i)]) {
      buf.base.raw[static_cast<std::size_t>(i)] = cand;
      buf.base.se[static_cast<std::size_t>(i)] = sc.se;
      buf.objective[static_cast<std::size_t>(i)] = sc.objective;
    }
  }
}

// Shared epoch loop behind the unsupervised regimes. The hooks decide how
// candidate actions are scored and how improvement gradients are obtained;
// everything else (streams, refresh cadence, noise pass) is identical, which
// is what makes the model-free run with an exact value oracle reproduce the
// model-based run bit for bit.
ParamStore run_buffer_training(const NoisePredictor& net,
                               const std::vector<ChannelMatrix>& dataset,
                               const DiffusionSchedule& sched,
                               const TrainConfig& cfg,
                               const EngineHooks& hooks, ScoredBuffer& buf,
                               TrainTrace* trace) {
  std::vector<StateFeatures> feats;
  feats.reserve(dataset.size());
  for (const auto& h : dataset) feats.push_back(compute_state_features(h));

  const Rng root(cfg.seed);
  Rng rng_init = root.fork(kStreamInit);
  Rng rng_refresh = root.fork(kStreamRefresh);
  Rng rng_noise = root.fork(kStreamNoise);

  ParamStore params = net.make_params(rng_init);
  Optimizer opt(cfg.optimizer, params.size(), cfg.learning_rate);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (hooks.epoch_begin) hooks.epoch_begin(epoch, buf.objective);
    refresh_pass(net, params, feats, sched, hooks, buf, epoch,
                 cfg.refresh_fraction, rng_refresh);
    improve_pass(hooks, buf, cfg.action_improve_steps, cfg.action_step_size,
                 trace);
    noise_pass(net, params, opt, feats, buf.base.raw, sched, cfg, rng_noise,
               trace);
    if (trace) trace->buffer_mean_se.push_back(buf.base.mean_se());
  }
  if (trace) trace->final_buffer = buf.base;
  return params;
}

EngineHooks model_based_hooks(Environment& env,
                              const std::vector<ChannelMatrix>& states) {
  EngineHooks hooks;
  hooks.to_powers = [&env](const Eigen::VectorXd& raw) {
    return normalize_power(raw, env.budget()).p;
  };
  hooks.pullback = [&env](const Eigen::VectorXd& raw,
                          const Eigen::VectorXd& gp) -> Eigen::VectorXd {
    return normalize_power_jacobian(raw, env.budget()).transpose() * gp;
  };
  hooks.score = [&env, &states](int idx, const Eigen::VectorXd& p) {
    const double se = env.se_of_powers(states[static_cast<std::size_t>(idx)], p);
    return SampleScore{se, se};
  };
  hooks.grad = [&env, &states](int idx, const Eigen::VectorXd& p) {
    return env.se_gradient(states[static_cast<std::size_t>(idx)], p);
  };
  return hooks;
}

ScoredBuffer make_scored_buffer(const EngineHooks& hooks, int n, int k) {
  ScoredBuffer buf;
  buf.base.raw.assign(static_cast<std::size_t>(n), Eigen::VectorXd::Zero(k));
  buf.base.se.resize(static_cast<std::size_t>(n));
  buf.objective.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const SampleScore sc = hooks.score(i, hooks.to_powers(buf.base.raw[i]));
    buf.base.se[static_cast<std::size_t>(i)] = sc.se;
    buf.objective[static_cast<std::size_t>(i)] = sc.objective;
  }
  return buf;
}

}  // namespace

std::string learning_method_name(LearningMethod m) {
  switch (m) {
    case LearningMethod::Supervised: return "supervised";
    case LearningMethod::ModelBasedUnsup: return "model-based-unsupervised";
    case LearningMethod::ModelFreeUnsup: return "model-free-unsupervised";
    case LearningMethod::ReinforcementLearning: return "reinforcement-learning";
  }
  return "?";
}

LearningMethod select_method(const TaskDescriptor& task) {
  if (task.is_markov) return LearningMethod::ReinforcementLearning;
  if (task.has_labels) return LearningMethod::Supervised;
  if (task.has_model) return LearningMethod::ModelBasedUnsup;
  return LearningMethod::ModelFreeUnsup;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("learning_rate must be > 0");
  if (action_improve_steps < 0)
    throw std::invalid_argument("action_improve_steps must be >= 0");
  if (!(action_step_size > 0.0))
    throw std::invalid_argument("action_step_size must be > 0");
  if (!(refresh_fraction > 0.0 && refresh_fraction <= 1.0))
    throw std::invalid_argument("refresh_fraction must lie in (0, 1]");
  if (optimizer != "adam" && optimizer != "sgd")
    throw std::invalid_argument("optimizer must be 'adam' or 'sgd'");
  make_schedule(diffusion_steps, beta_start, beta_end);  // validates range
}

DiffusionSchedule TrainConfig::schedule() const {
  return make_schedule(diffusion_steps, beta_start, beta_end);
}

double ActionBuffer::mean_se() const {
  if (se.empty()) return 0.0;
  double acc = 0.0;
  for (double v : se) acc += v;
  return acc / static_cast<double>(se.size());
}

Optimizer::Optimizer(const std::string& kind, std::size_t n, double lr)
    : adam_(kind != "sgd"), lr_(lr) {
  if (adam_) {
    m_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    v_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  }
}

void Optimizer::step(std::vector<double>& params, const Eigen::VectorXd& grad) {
  if (static_cast<std::size_t>(grad.size()) != params.size())
    throw std::invalid_argument("gradient size mismatch");
  if (!adam_) {
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i] -= lr_ * grad[static_cast<Eigen::Index>(i)];
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    m_[ii] = b1 * m_[ii] + (1.0 - b1) * grad[ii];
    v_[ii] = b2 * v_[ii] + (1.0 - b2) * grad[ii] * grad[ii];
    params[i] -= lr_ * (m_[ii] / c1) / (std::sqrt(v_[ii] / c2) + eps);
  }
}

ParamStore train_supervised(const NoisePredictor& net,
                            const std::vector<LabeledExample>& dataset,
                            const DiffusionSchedule& sched,
                            const TrainConfig& cfg, TrainTrace* trace) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("dataset must be nonempty");

  std::vector<StateFeatures> feats;
  std::vector<Eigen::VectorXd> raws;
  feats.reserve(dataset.size());
  raws.reserve(dataset.size());
  for (const auto& ex : dataset) {
    feats.push_back(compute_state_features(ex.state));
    raws.push_back(ex.raw_action);
  }

  const Rng root(cfg.seed);
  Rng rng_init = root.fork(kStreamInit);
  Rng rng_noise = root.fork(kStreamNoise);
  ParamStore params = net.make_params(rng_init);
  Optimizer opt(cfg.optimizer, params.size(), cfg.learning_rate);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch)
    noise_pass(net, params, opt, feats, raws, sched, cfg, rng_noise, trace);
  return params;
}

ActionBuffer make_equal_power_buffer(Environment& env,
                                     const std::vector<ChannelMatrix>& states) {
  ActionBuffer buf;
  const int k = env.cfg().n_users;
  buf.raw.assign(states.size(), Eigen::VectorXd::Zero(k));
  buf.se.resize(states.size());
  for (std::size_t i = 0; i < states.size(); ++i)
    buf.se[i] = env.se_of_action(states[i],
                                 normalize_power(buf.raw[i], env.budget()));
  return buf;
}

void improve_actions(Environment& env,
                     const std::vector<ChannelMatrix>& states,
                     ActionBuffer& buffer, int steps, double step_size) {
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (states.size() != buffer.size())
    throw std::invalid_argument("buffer/state size mismatch");
  const EngineHooks hooks = model_based_hooks(env, states);
  ScoredBuffer buf;
  buf.base = buffer;
  buf.objective = buffer.se;
  improve_pass(hooks, buf, steps, step_size, nullptr);
  buffer = std::move(buf.base);
}

ParamStore train_model_based_unsup(const NoisePredictor& net,
                                   const std::vector<ChannelMatrix>& dataset,
                                   Environment& env,
                                   const DiffusionSchedule& sched,
                                   const TrainConfig& cfg, TrainTrace* trace) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("dataset must be nonempty");
  const EngineHooks hooks = model_based_hooks(env, dataset);
  ScoredBuffer buf = make_scored_buffer(hooks, static_cast<int>(dataset.size()),
                                        env.cfg().n_users);
  return run_buffer_training(net, dataset, sched, cfg, hooks, buf, trace);
}

void ConstraintSet::add(Constraint c) {
  if (!c.eval) throw std::invalid_argument("constraint needs an eval function");
  if (!c.grad_p)
    throw std::invalid_argument("constraint '" + c.name +
                                "' is not differentiable");
  items_.push_back(std::move(c));
}

Eigen::VectorXd softplus_map(const Eigen::VectorXd& raw) {
  Eigen::VectorXd p(raw.size());
  for (int i = 0; i < raw.size(); ++i) p[i] = softplus(raw[i]);
  return p;
}

ParamStore train_lagrangian(const NoisePredictor& net,
                            const std::vector<ChannelMatrix>& dataset,
                            Environment& env, const ConstraintSet& constraints,
                            const DiffusionSchedule& sched,
                            const TrainConfig& cfg, double multiplier_lr,
                            TrainTrace* trace) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("dataset must be nonempty");
  if (!(multiplier_lr > 0.0))
    throw std::invalid_argument("multiplier_lr must be > 0");

  std::vector<double> lambda(constraints.size(), 0.0);

  EngineHooks hooks;
  hooks.to_powers = [](const Eigen::VectorXd& raw) { return softplus_map(raw); };
  hooks.pullback = [](const Eigen::VectorXd& raw,
                      const Eigen::VectorXd& gp) -> Eigen::VectorXd {
    Eigen::VectorXd out(raw.size());
    for (int i = 0; i < raw.size(); ++i)
      out[i] = gp[i] / (1.0 + std::exp(-raw[i]));
    return out;
  };
  hooks.score = [&](int idx, const Eigen::VectorXd& p) {
    const ChannelMatrix& h = dataset[static_cast<std::size_t>(idx)];
    const double se = env.se_of_powers(h, p);
    double penalty = 0.0;
    for (std::size_t i = 0; i < constraints.size(); ++i)
      penalty +=
          lambda[i] * std::max(0.0, constraints.items()[i].eval(p, h));
    return SampleScore{se - penalty, se};
  };
  hooks.grad = [&](int idx, const Eigen::VectorXd& p) {
    const ChannelMatrix& h = dataset[static_cast<std::size_t>(idx)];
    Eigen::VectorXd g = env.se_gradient(h, p);
    for (std::size_t i = 0; i < constraints.size(); ++i) {
      if (constraints.items()[i].eval(p, h) > 0.0)
        g -= lambda[i] * constraints.items()[i].grad_p(p, h);
    }
    return g;
  };

  ScoredBuffer buf = make_scored_buffer(hooks, static_cast<int>(dataset.size()),
                                        env.cfg().n_users);

  hooks.epoch_begin = [&](int epoch, std::vector<double>& objectives) {
    if (epoch == 0) return;
    // Multipliers ascend on the mean violations over the buffer, so lambda
    // keeps growing until every training action is feasible and is untouched
    // when no constraint is ever violated.
    for (std::size_t i = 0; i < constraints.size(); ++i) {
      double mean_violation = 0.0;
      for (std::size_t s = 0; s < buf.base.size(); ++s)
        mean_violation += std::max(
            0.0, constraints.items()[i].eval(hooks.to_powers(buf.base.raw[s]),
                                             dataset[s]));
      mean_violation /= static_cast<double>(buf.base.size());
      lambda[i] = std::max(0.0, lambda[i] + multiplier_lr * mean_violation);
    }
    // Multipliers changed, so the stored objectives must be rescored.
    for (std::size_t s = 0; s < buf.base.size(); ++s)
      objectives[s] =
          hooks.score(static_cast<int>(s), hooks.to_powers(buf.base.raw[s]))
              .objective;
  };

  ParamStore params =
      run_buffer_training(net, dataset, sched, cfg, hooks, buf, trace);
  if (trace) trace->multipliers = lambda;
  return params;
}

Eigen::VectorXd sample_constrained_action(const NoisePredictor& net,
                                          const ParamStore& params,
                                          const ChannelMatrix& state,
                                          const DiffusionSchedule& sched,
                                          Rng& rng) {
  const FeatureBatch fb =
      FeatureBatch::replicate(compute_state_features(state), 1);
  const Eigen::MatrixXd raw = sample_raw_chains(net, params, fb, sched, rng);
  return softplus_map(raw.row(0).transpose());
}

ModelFreeResult train_model_free_unsup(const NoisePredictor& net,
                                       const ValueNet& value_net,
                                       const std::vector<ChannelMatrix>& data,
                                       Environment& env,
                                       const DiffusionSchedule& sched,
                                       const TrainConfig& cfg,
                                       bool use_exact_value_oracle,
                                       TrainTrace* trace) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("dataset must be nonempty");

  const Rng root(cfg.seed);
  Rng rng_value = root.fork(kStreamValue);
  Rng rng_value_init = root.fork(kStreamValueInit);

  std::vector<StateFeatures> feats;
  feats.reserve(data.size());
  for (const auto& h : data) feats.push_back(compute_state_features(h));

  ParamStore value_params = value_net.make_params(rng_value_init);
  Optimizer value_opt(cfg.optimizer, value_params.size(), cfg.learning_rate);

  struct Tuple {
    int idx;
    Eigen::VectorXd p;
    double se;
  };
  std::deque<Tuple> replay;
  const std::size_t replay_cap = 4096;

  EngineHooks hooks = model_based_hooks(env, data);
  ScoredBuffer buf =
      make_scored_buffer(hooks, static_cast<int>(data.size()),
                         env.cfg().n_users);

  if (!use_exact_value_oracle) {
    // Black-box mode: SE values still come from the environment (scalar
    // observations), but improvement gradients come from the value network.
    hooks.grad = [&](int idx, const Eigen::VectorXd& p) -> Eigen::VectorXd {
      const FeatureBatch fb = FeatureBatch::gather(feats, {idx});
      Eigen::MatrixXd powers(1, p.size());
      powers.row(0) = p.transpose();
      std::unique_ptr<ForwardCache> cache;
      value_net.predict_cached(value_params, fb, powers, cache);
      Eigen::VectorXd pgrad(value_params.size());
      pgrad.setZero();
      Eigen::MatrixXd dpow;
      value_net.backprop(value_params, *cache, Eigen::VectorXd::Ones(1), pgrad,
                         &dpow);
      return dpow.row(0).transpose();
    };
    hooks.on_refresh_sample = [&](int idx, const Eigen::VectorXd& p,
                                  double se) {
      replay.push_back({idx, p, se});
      if (replay.size() > replay_cap) replay.pop_front();
    };
    hooks.epoch_begin = [&](int /*epoch*/, std::vector<double>&) {
      // Exploration tuples: random raw actions scored by the black box.
      const int explore =
          std::min<int>(256, static_cast<int>(data.size()));
      for (int i = 0; i < explore; ++i) {
        const int idx = static_cast<int>(rng_value.index_below(data.size()));
        Eigen::VectorXd raw(env.cfg().n_users);
        for (int c = 0; c < raw.size(); ++c) raw[c] = 3.0 * rng_value.normal();
        const Eigen::VectorXd p = hooks.to_powers(raw);
        replay.push_back({idx, p, env.se_of_powers(data[idx], p)});
        if (replay.size() > replay_cap) replay.pop_front();
      }
      // Current buffer actions anchor the fit near the operating point.
      for (std::size_t s = 0; s < buf.base.size(); ++s) {
        replay.push_back({static_cast<int>(s),
                          hooks.to_powers(buf.base.raw[s]), buf.base.se[s]});
        if (replay.size() > replay_cap) replay.pop_front();
      }
      // A few squared-error passes over the replay.
      const int n = static_cast<int>(replay.size());
      std::vector<int> order(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      Eigen::VectorXd grad(value_params.size());
      for (int pass = 0; pass < 2; ++pass) {
        shuffle_indices(order, rng_value);
        for (int start = 0; start < n; start += cfg.batch_size) {
          const int b = std::min(cfg.batch_size, n - start);
          std::vector<int> fidx(static_cast<std::size_t>(b));
          Eigen::MatrixXd powers(b, env.cfg().n_users);
          Eigen::VectorXd target(b);
          for (int r = 0; r < b; ++r) {
            const Tuple& tup =
                replay[static_cast<std::size_t>(order[start + r])];
            fidx[static_cast<std::size_t>(r)] = tup.idx;
            powers.row(r) = tup.p.transpose();
            target[r] = tup.se;
          }
          const FeatureBatch fb = FeatureBatch::gather(feats, fidx);
          std::unique_ptr<ForwardCache> cache;
          const Eigen::VectorXd pred =
              value_net.predict_cached(value_params, fb, powers, cache);
          const Eigen::VectorXd diff = pred - target;
          grad.setZero();
          value_net.backprop(value_params, *cache, 2.0 / b * diff, grad,
                             nullptr);
          value_opt.step(value_params.values(), grad);
        }
      }
    };
  }

  ModelFreeResult res{ParamStore{}, ParamStore{}};
  res.policy = run_buffer_training(net, data, sched, cfg, hooks, buf, trace);
  res.value = std::move(value_params);
  return res;
}

ParamStore train_direct_baseline(const DirectPolicy& policy,
                                 const std::vector<ChannelMatrix>& dataset,
                                 Environment& env, const TrainConfig& cfg,
                                 TrainTrace* trace) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("dataset must be nonempty");

  std::vector<StateFeatures> feats;
  feats.reserve(dataset.size());
  for (const auto& h : dataset) feats.push_back(compute_state_features(h));

  const Rng root(cfg.seed);
  Rng rng_init = root.fork(kStreamInit);
  Rng rng_shuffle = root.fork(kStreamNoise);

  ParamStore params = policy.make_params(rng_init);
  Optimizer opt(cfg.optimizer, params.size(), cfg.learning_rate);

  const int n = static_cast<int>(dataset.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  // Matched budget with diffusion training: one environment gradient per
  // sample per (epoch, improvement step).
  const int passes = cfg.epochs * cfg.action_improve_steps;
  Eigen::VectorXd grad(params.size());
  for (int pass = 0; pass < passes; ++pass) {
    shuffle_indices(order, rng_shuffle);
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int b = std::min(cfg.batch_size, n - start);
      const std::vector<int> batch_idx(order.begin() + start,
                                       order.begin() + start + b);
      const FeatureBatch fb = FeatureBatch::gather(feats, batch_idx);
      std::unique_ptr<ForwardCache> cache;
      const Eigen::MatrixXd raw = policy.predict_cached(params, fb, cache);

      Eigen::MatrixXd upstream(b, raw.cols());
      double mean_se = 0.0;
      for (int r = 0; r < b; ++r) {
        const ChannelMatrix& h =
            dataset[static_cast<std::size_t>(batch_idx[r])];
        const Eigen::VectorXd raw_r = raw.row(r).transpose();
        const PowerAllocation p = normalize_power(raw_r, env.budget());
        mean_se += env.se_of_action(h, p);
        const Eigen::VectorXd gp = env.se_gradient(h, p.p);
        if (trace) ++trace->improvement_gradient_calls;
        const Eigen::VectorXd graw =
            normalize_power_jacobian(raw_r, env.budget()).transpose() * gp;
        upstream.row(r) = (-1.0 / b) * graw.transpose();  // ascend mean SE
      }
      if (trace) trace->loss.push_back(-mean_se / b);
      grad.setZero();
      policy.backprop(params, *cache, upstream, grad);
      opt.step(params.values(), grad);
    }
  }
  return params;
}

}  // namespace dmbeam
