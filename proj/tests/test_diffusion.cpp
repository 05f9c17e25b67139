// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "dmbeam/diffusion.hpp"

using namespace dmbeam;

TEST_SUITE_BEGIN("diffusion");

TEST_CASE("make_schedule: arithmetic, defaults, validation") {
  const DiffusionSchedule s2 = make_schedule(2, 0.5, 0.5);
  CHECK(s2.alpha_bar_at(1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s2.alpha_bar_at(2) == doctest::Approx(0.25).epsilon(1e-15));

  const DiffusionSchedule d = default_schedule();
  CHECK(d.steps == 50);
  CHECK(d.alpha_bar_at(d.steps) < 0.05);
  for (int t = 2; t <= d.steps; ++t)
    CHECK(d.alpha_bar_at(t) < d.alpha_bar_at(t - 1));

  CHECK_THROWS_AS(make_schedule(1, 1e-4, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), std::invalid_argument);
}

TEST_CASE("forward_diffuse: closed-form arithmetic") {
  const DiffusionSchedule s = make_schedule(2, 0.5, 0.5);  // alpha_bar_2 = 1/4
  Eigen::VectorXd x0(3), eps(3);
  x0 << 1.0, -2.0, 0.5;
  eps << 0.3, 0.1, -0.7;
  const NoisySample xt = forward_diffuse(x0, 2, eps, s);
  const Eigen::VectorXd expect = 0.5 * x0 + std::sqrt(0.75) * eps;
  CHECK((xt.x - expect).lpNorm<Eigen::Infinity>() < 1e-15);
  CHECK(xt.t == 2);

  const NoisySample pure = forward_diffuse(x0, 2, Eigen::VectorXd::Zero(3), s);
  CHECK((pure.x - 0.5 * x0).lpNorm<Eigen::Infinity>() < 1e-15);

  CHECK_THROWS_AS(forward_diffuse(x0, 0, eps, s), std::invalid_argument);
  CHECK_THROWS_AS(forward_diffuse(x0, 3, eps, s), std::invalid_argument);
  CHECK_THROWS_AS(forward_diffuse(x0, 1, Eigen::VectorXd::Zero(2), s),
                  std::invalid_argument);
}

TEST_CASE("forward_diffuse: closed form matches iterative simulation") {
  // For x0 = 0 the terminal variance telescopes to 1 - alpha_bar[T].
  const DiffusionSchedule s = default_schedule();
  Rng rng(7);
  double acc = 0.0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    double x = 0.0;
    for (int t = 1; t <= s.steps; ++t)
      x = std::sqrt(s.alpha_at(t)) * x + std::sqrt(s.beta_at(t)) * rng.normal();
    acc += x * x;
  }
  const double var = acc / trials;
  CHECK(var == doctest::Approx(1.0 - s.alpha_bar_at(s.steps)).epsilon(0.02));
}

TEST_CASE("reverse_step: deterministic final step and mean formula") {
  const DiffusionSchedule s = default_schedule();
  Rng rng(11);
  Eigen::VectorXd x_t(4), eps_hat(4);
  for (int i = 0; i < 4; ++i) {
    x_t[i] = rng.normal();
    eps_hat[i] = rng.normal();
  }

  // t = 1 injects no noise: two calls agree exactly and no rng state is used.
  Rng a(3), b(4);
  const Eigen::VectorXd p1 = reverse_step(x_t, 1, eps_hat, s, a);
  const Eigen::VectorXd p2 = reverse_step(x_t, 1, eps_hat, s, b);
  CHECK(p1 == p2);
  const Eigen::VectorXd mean1 =
      (x_t - s.beta_at(1) / std::sqrt(1.0 - s.alpha_bar_at(1)) * eps_hat) /
      std::sqrt(s.alpha_at(1));
  CHECK((p1 - mean1).lpNorm<Eigen::Infinity>() < 1e-15);

  // eps_hat = 0 at t > 1: the deterministic part is x_t / sqrt(alpha_t).
  Rng c(9), d(9);
  const Eigen::VectorXd out =
      reverse_step(x_t, 10, Eigen::VectorXd::Zero(4), s, c);
  Eigen::VectorXd z(4);
  for (int i = 0; i < 4; ++i) z[i] = d.normal();  // same draws as inside
  const Eigen::VectorXd det = out - std::sqrt(s.beta_at(10)) * z;
  CHECK((det - x_t / std::sqrt(s.alpha_at(10))).lpNorm<Eigen::Infinity>() <
        1e-12);
}

TEST_CASE("reverse_step: matches the two-coefficient posterior mean") {
  // With eps_hat the true noise, the deterministic part of the reverse step
  // equals the DDPM posterior mean evaluated at the implied x0 estimate.
  const DiffusionSchedule s = default_schedule();
  Rng rng(13);
  Eigen::VectorXd x0(3), eps(3);
  for (int i = 0; i < 3; ++i) {
    x0[i] = rng.normal();
    eps[i] = rng.normal();
  }
  for (int t : {2, 10, 50}) {
    const NoisySample xt = forward_diffuse(x0, t, eps, s);
    Rng r1(77), r2(77);
    const Eigen::VectorXd out = reverse_step(xt.x, t, eps, s, r1);
    Eigen::VectorXd z(3);
    for (int i = 0; i < 3; ++i) z[i] = r2.normal();
    const Eigen::VectorXd det = out - std::sqrt(s.beta_at(t)) * z;

    const double ab_t = s.alpha_bar_at(t);
    const double ab_prev = (t > 1) ? s.alpha_bar_at(t - 1) : 1.0;
    const Eigen::VectorXd x0_hat =
        (xt.x - std::sqrt(1.0 - ab_t) * eps) / std::sqrt(ab_t);
    const Eigen::VectorXd posterior_mean =
        (std::sqrt(ab_prev) * s.beta_at(t) / (1.0 - ab_t)) * x0_hat +
        (std::sqrt(s.alpha_at(t)) * (1.0 - ab_prev) / (1.0 - ab_t)) * xt.x;
    CHECK((det - posterior_mean).lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("reverse chain with oracle noise reduces the distance to x0") {
  const DiffusionSchedule s = default_schedule();
  Rng rng(17);
  double err_chain = 0.0, err_xt = 0.0;
  const int trials = 1000;
  for (int i = 0; i < trials; ++i) {
    Eigen::VectorXd x0(4);
    for (int c = 0; c < 4; ++c) x0[c] = 2.0 * rng.normal();
    Eigen::VectorXd x(4);
    for (int c = 0; c < 4; ++c) x[c] = rng.normal();  // x_T ~ N(0, I)
    err_xt += (x - x0).squaredNorm();
    for (int t = s.steps; t >= 1; --t) {
      const double ab = s.alpha_bar_at(t);
      const Eigen::VectorXd oracle_eps =
          (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
      x = reverse_step(x, t, oracle_eps, s, rng);
    }
    err_chain += (x - x0).squaredNorm();
  }
  CHECK(err_chain / trials < err_xt / trials);
}

TEST_CASE("sample_action: determinism and best-of-N contract") {
  ScenarioConfig sc = ScenarioConfig::from_snr_db(4, 3, 10.0, 0.3, 19);
  Environment env(sc);
  Rng crng(19);
  const ChannelMatrix h = env.sample_channel(crng);
  ArchDescriptor desc;
  desc.kind = ArchKind::DmFnn;
  desc.n_antennas = 4;
  desc.n_users = 3;
  desc.hidden = {16, 16};
  FnnNoisePredictor net(desc);
  const DiffusionSchedule sched = make_schedule(10, 1e-3, 0.2);

  // zero predictor, frozen rng: bit-identical across runs
  ParamStore zero(net.blocks());
  Rng r1(23), r2(23);
  const PowerAllocation a1 = sample_action(net, zero, h, sched, r1, 1, env);
  const PowerAllocation a2 = sample_action(net, zero, h, sched, r2, 1, env);
  CHECK(a1.p == a2.p);

  Rng ri(29);
  ParamStore params = net.make_params(ri);
  Rng r3(31);
  SampleDiagnostics diag;
  const PowerAllocation best =
      sample_action(net, params, h, sched, r3, 8, env, &diag);
  CHECK(diag.candidate_se.size() == 8);
  const double best_se = env.se_of_action(h, best);
  for (int i = 0; i < 8; ++i) CHECK(best_se >= diag.candidate_se[i] - 1e-12);
  CHECK(best_se ==
        doctest::Approx(diag.candidate_se[diag.best_index]).epsilon(1e-12));
  CHECK(best.n_users() == 3);
  CHECK(best.total() == doctest::Approx(10.0).epsilon(1e-9));

  CHECK_THROWS_AS(sample_action(net, params, h, sched, r3, 0, env),
                  std::invalid_argument);
}

TEST_SUITE_END();
