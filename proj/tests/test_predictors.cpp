// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>

#include "dmbeam/predictors.hpp"

using namespace dmbeam;

namespace {

ChannelMatrix channel_for(int n, int k, double rho, std::uint64_t seed) {
  ScenarioConfig sc = ScenarioConfig::from_snr_db(n, k, 10.0, rho, seed);
  Rng rng(seed + 1000);
  return sample_channel(sc, rng);
}

// Central finite-difference check of an analytic gradient on random
// coordinates of the flat parameter vector.
void check_param_gradient(ParamStore& params, const Eigen::VectorXd& analytic,
                          const std::function<double()>& loss, Rng& rng,
                          int probes, double step = 1e-5,
                          double rel_tol = 1e-3) {
  for (int i = 0; i < probes; ++i) {
    const std::size_t idx = rng.index_below(params.size());
    const double saved = params.values()[idx];
    params.values()[idx] = saved + step;
    const double hi = loss();
    params.values()[idx] = saved - step;
    const double lo = loss();
    params.values()[idx] = saved;
    const double fd = (hi - lo) / (2.0 * step);
    const double scale = std::max({1e-6, std::abs(fd), std::abs(analytic[idx])});
    CHECK(std::abs(fd - analytic[idx]) / scale < rel_tol);
  }
}

}  // namespace

TEST_SUITE_BEGIN("predictors");

TEST_CASE("timestep embeddings are deterministic and distinct") {
  const int dim = 32;
  const Eigen::VectorXd e1 = timestep_embedding(7, dim);
  CHECK(e1 == timestep_embedding(7, dim));
  for (int a = 1; a <= 50; ++a)
    for (int b = a + 1; b <= 50; ++b)
      CHECK((timestep_embedding(a, dim) - timestep_embedding(b, dim))
                .lpNorm<Eigen::Infinity>() > 1e-6);
  CHECK_THROWS_AS(timestep_embedding(1, 3), std::invalid_argument);
}

TEST_CASE("state features are antenna-unitary invariants for the GNN") {
  const ChannelMatrix h = channel_for(4, 3, 0.4, 1);
  const StateFeatures f = compute_state_features(h);
  CHECK(f.fnn.size() == 2 * 4 * 3);
  CHECK(f.node.size() == 3);
  CHECK(f.edge.rows() == 9);
  for (int c = 0; c < 3; ++c)
    CHECK(f.node[c] == doctest::Approx(h.h.col(c).squaredNorm()));
  // edge(j*K+k) = h_j^H h_k; hermitian symmetry of the gram
  for (int j = 0; j < 3; ++j)
    for (int c = 0; c < 3; ++c) {
      CHECK(f.edge(j * 3 + c, 0) == doctest::Approx(f.edge(c * 3 + j, 0)));
      CHECK(f.edge(j * 3 + c, 1) == doctest::Approx(-f.edge(c * 3 + j, 1)));
    }
}

TEST_CASE("param store: layout, deterministic init, shape comparison") {
  ArchDescriptor desc;
  desc.kind = ArchKind::Fnn;
  desc.n_antennas = 3;
  desc.n_users = 2;
  desc.hidden = {8};
  FnnDirectPolicy net(desc);
  Rng r1(5), r2(5), r3(6);
  ParamStore a = net.make_params(r1);
  ParamStore b = net.make_params(r2);
  ParamStore c = net.make_params(r3);
  CHECK(a.values() == b.values());
  CHECK(a.values() != c.values());
  CHECK(a.same_shape(c));
  CHECK(a.size() == 12 * 8 + 8 + 8 * 2 + 2);
}

TEST_CASE("fnn noise predictor: zero weights, purity, gradient checks") {
  ArchDescriptor desc;
  desc.kind = ArchKind::DmFnn;
  desc.n_antennas = 3;
  desc.n_users = 2;
  desc.hidden = {16, 16};
  FnnNoisePredictor net(desc);
  const ChannelMatrix h = channel_for(3, 2, 0.2, 3);
  const StateFeatures f = compute_state_features(h);
  Eigen::VectorXd x_t(2);
  x_t << 0.4, -1.1;

  ParamStore zero(net.blocks());
  CHECK(predict_one(net, zero, f, x_t, 3).norm() == 0.0);

  Rng ri(9);
  ParamStore params = net.make_params(ri);
  const Eigen::VectorXd o1 = predict_one(net, params, f, x_t, 3);
  const Eigen::VectorXd o2 = predict_one(net, params, f, x_t, 3);
  CHECK(o1 == o2);
  CHECK(o1.allFinite());

  // scalar loss 0.5 * ||out - target||^2 over a batch of 3
  const FeatureBatch fb = FeatureBatch::replicate(f, 3);
  Eigen::MatrixXd xt(3, 2);
  xt << 0.4, -1.1, 0.0, 0.7, -0.3, 0.2;
  Eigen::MatrixXd target(3, 2);
  target << 1.0, 0.0, -0.5, 0.25, 0.1, 0.9;
  const int t = 5;
  auto loss = [&] {
    const Eigen::MatrixXd out = net.predict(params, fb, xt, t);
    return 0.5 * (out - target).squaredNorm();
  };
  std::unique_ptr<ForwardCache> cache;
  const Eigen::MatrixXd out = net.predict_cached(params, fb, xt, t, cache);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
  Eigen::MatrixXd xt_grad;
  net.backprop(params, *cache, out - target, grad, &xt_grad);

  Rng probe(13);
  check_param_gradient(params, grad, loss, probe, 20);

  // gradient with respect to x_t
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) {
      const double saved = xt(r, c);
      xt(r, c) = saved + 1e-5;
      const double hi = loss();
      xt(r, c) = saved - 1e-5;
      const double lo = loss();
      xt(r, c) = saved;
      const double fd = (hi - lo) / 2e-5;
      CHECK(xt_grad(r, c) ==
            doctest::Approx(fd).epsilon(1e-3).scale(std::max(1.0, std::abs(fd))));
    }
}

TEST_CASE("gnn noise predictor: K=1, symmetry, equivariance, gradients") {
  ArchDescriptor d1;
  d1.kind = ArchKind::DmGnn;
  d1.n_antennas = 4;
  d1.n_users = 1;
  d1.gnn_width = 16;
  GnnNoisePredictor single(d1);
  Rng r1(21);
  ParamStore p1 = single.make_params(r1);
  const ChannelMatrix h1 = channel_for(4, 1, 0.0, 5);
  const Eigen::VectorXd out1 = predict_one(
      single, p1, compute_state_features(h1), Eigen::VectorXd::Constant(1, 0.3),
      2);
  CHECK(out1.size() == 1);
  CHECK(out1.allFinite());

  ArchDescriptor desc;
  desc.kind = ArchKind::DmGnn;
  desc.n_antennas = 4;
  desc.n_users = 4;
  desc.gnn_width = 24;
  GnnNoisePredictor net(desc);
  Rng r2(23);
  ParamStore params = net.make_params(r2);

  // identical users, identical x_t entries -> identical outputs
  ScenarioConfig scc = ScenarioConfig::from_snr_db(4, 4, 10.0, 1.0, 29);
  Rng rc(29);
  const ChannelMatrix hsym = sample_channel(scc, rc);
  const Eigen::VectorXd sym_out =
      predict_one(net, params, compute_state_features(hsym),
                  Eigen::VectorXd::Constant(4, 0.5), 3);
  for (int c = 1; c < 4; ++c)
    CHECK(sym_out[c] == doctest::Approx(sym_out[0]).epsilon(1e-12));

  // user-permutation equivariance
  const ChannelMatrix h = channel_for(4, 4, 0.4, 31);
  Eigen::VectorXd x_t(4);
  x_t << 0.2, -0.6, 1.1, 0.0;
  const Eigen::VectorXd base =
      predict_one(net, params, compute_state_features(h), x_t, 7);
  const std::vector<int> perm = {2, 0, 3, 1};
  ChannelMatrix hp;
  hp.h.resize(4, 4);
  Eigen::VectorXd x_tp(4);
  for (int c = 0; c < 4; ++c) {
    hp.h.col(c) = h.h.col(perm[c]);
    x_tp[c] = x_t[perm[c]];
  }
  const Eigen::VectorXd permuted =
      predict_one(net, params, compute_state_features(hp), x_tp, 7);
  for (int c = 0; c < 4; ++c)
    CHECK(std::abs(permuted[c] - base[perm[c]]) < 1e-9);

  // antenna-permutation invariance (features are inner products only)
  ChannelMatrix ha;
  ha.h = h.h;
  ha.h.row(0).swap(ha.h.row(2));
  ha.h.row(1).swap(ha.h.row(3));
  const Eigen::VectorXd ant =
      predict_one(net, params, compute_state_features(ha), x_t, 7);
  CHECK((ant - base).lpNorm<Eigen::Infinity>() < 1e-12);

  // parameter and x_t gradient check
  const StateFeatures f = compute_state_features(h);
  const FeatureBatch fb = FeatureBatch::replicate(f, 2);
  Eigen::MatrixXd xt(2, 4);
  xt << 0.2, -0.6, 1.1, 0.0, -0.4, 0.3, 0.8, -1.2;
  Eigen::MatrixXd target = Eigen::MatrixXd::Constant(2, 4, 0.25);
  const int t = 4;
  auto loss = [&] {
    const Eigen::MatrixXd out = net.predict(params, fb, xt, t);
    return 0.5 * (out - target).squaredNorm();
  };
  std::unique_ptr<ForwardCache> cache;
  const Eigen::MatrixXd out = net.predict_cached(params, fb, xt, t, cache);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
  Eigen::MatrixXd xt_grad;
  net.backprop(params, *cache, out - target, grad, &xt_grad);
  Rng probe(37);
  check_param_gradient(params, grad, loss, probe, 20);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c) {
      const double saved = xt(r, c);
      xt(r, c) = saved + 1e-5;
      const double hi = loss();
      xt(r, c) = saved - 1e-5;
      const double lo = loss();
      xt(r, c) = saved;
      const double fd = (hi - lo) / 2e-5;
      CHECK(xt_grad(r, c) ==
            doctest::Approx(fd).epsilon(1e-3).scale(std::max(1.0, std::abs(fd))));
    }
}

TEST_CASE("direct policies: zero init equal split, equivariance, gradients") {
  ArchDescriptor fd;
  fd.kind = ArchKind::Fnn;
  fd.n_antennas = 3;
  fd.n_users = 3;
  fd.hidden = {16};
  FnnDirectPolicy fnn(fd);
  const ChannelMatrix h = channel_for(3, 3, 0.3, 41);
  const StateFeatures f = compute_state_features(h);

  ParamStore zero(fnn.blocks());
  const Eigen::VectorXd raw0 = predict_one(fnn, zero, f);
  CHECK(raw0.norm() == 0.0);
  const PowerAllocation eq = normalize_power(raw0, 9.0);
  for (int c = 0; c < 3; ++c) CHECK(eq.p[c] == doctest::Approx(3.0));

  // FNN direct gradient check
  Rng ri(43);
  ParamStore params = fnn.make_params(ri);
  const FeatureBatch fb = FeatureBatch::replicate(f, 2);
  Eigen::MatrixXd target = Eigen::MatrixXd::Constant(2, 3, 0.5);
  auto loss = [&] {
    const Eigen::MatrixXd out = fnn.predict(params, fb);
    return 0.5 * (out - target).squaredNorm();
  };
  std::unique_ptr<ForwardCache> cache;
  const Eigen::MatrixXd out = fnn.predict_cached(params, fb, cache);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
  fnn.backprop(params, *cache, out - target, grad);
  Rng probe(47);
  check_param_gradient(params, grad, loss, probe, 20);

  // GNN direct: equivariance of the final normalized allocation
  ArchDescriptor gd;
  gd.kind = ArchKind::Gnn;
  gd.n_antennas = 3;
  gd.n_users = 3;
  gd.gnn_width = 16;
  GnnDirectPolicy gnn(gd);
  Rng rg(53);
  ParamStore gp = gnn.make_params(rg);
  const Eigen::VectorXd raw = predict_one(gnn, gp, f);
  const PowerAllocation p = normalize_power(raw, 9.0);
  const std::vector<int> perm = {1, 2, 0};
  ChannelMatrix hp;
  hp.h.resize(3, 3);
  for (int c = 0; c < 3; ++c) hp.h.col(c) = h.h.col(perm[c]);
  const Eigen::VectorXd raw_p =
      predict_one(gnn, gp, compute_state_features(hp));
  const PowerAllocation pp = normalize_power(raw_p, 9.0);
  for (int c = 0; c < 3; ++c)
    CHECK(std::abs(pp.p[c] - p.p[perm[c]]) < 1e-9);
}

TEST_CASE("value network: determinism and gradients in p and params") {
  ArchDescriptor desc;
  desc.kind = ArchKind::Value;
  desc.n_antennas = 3;
  desc.n_users = 2;
  desc.hidden = {16, 16};
  ValueNet net(desc);
  Rng ri(59);
  ParamStore params = net.make_params(ri);
  const ChannelMatrix h = channel_for(3, 2, 0.2, 61);
  const FeatureBatch fb =
      FeatureBatch::replicate(compute_state_features(h), 2);
  Eigen::MatrixXd powers(2, 2);
  powers << 4.0, 6.0, 2.5, 7.5;

  const Eigen::VectorXd v1 = net.predict(params, fb, powers);
  CHECK(v1 == net.predict(params, fb, powers));

  auto loss = [&] { return net.predict(params, fb, powers).sum(); };
  std::unique_ptr<ForwardCache> cache;
  net.predict_cached(params, fb, powers, cache);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
  Eigen::MatrixXd dp;
  net.backprop(params, *cache, Eigen::VectorXd::Ones(2), grad, &dp);
  Rng probe(67);
  check_param_gradient(params, grad, loss, probe, 20);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const double saved = powers(r, c);
      powers(r, c) = saved + 1e-5;
      const double hi = loss();
      powers(r, c) = saved - 1e-5;
      const double lo = loss();
      powers(r, c) = saved;
      const double fd = (hi - lo) / 2e-5;
      CHECK(dp(r, c) ==
            doctest::Approx(fd).epsilon(1e-3).scale(std::max(1.0, std::abs(fd))));
    }
}

TEST_CASE("arch_blocks matches every architecture's parameter layout") {
  for (ArchKind kind : {ArchKind::DmFnn, ArchKind::DmGnn, ArchKind::Fnn,
                        ArchKind::Gnn, ArchKind::Value}) {
    ArchDescriptor d;
    d.kind = kind;
    d.n_antennas = 4;
    d.n_users = 3;
    const auto blocks = arch_blocks(d);
    std::size_t total = 0;
    for (const auto& b : blocks) total += b.size();
    CHECK(total > 0);
    if (kind == ArchKind::DmFnn || kind == ArchKind::DmGnn)
      CHECK(ParamStore(make_noise_predictor(d)->blocks()).size() == total);
    else if (kind == ArchKind::Fnn || kind == ArchKind::Gnn)
      CHECK(ParamStore(make_direct_policy(d)->blocks()).size() == total);
  }
  CHECK(arch_kind_from_name("dm-gnn") == ArchKind::DmGnn);
  CHECK_THROWS_AS(arch_kind_from_name("mlp"), std::invalid_argument);
}

TEST_SUITE_END();
