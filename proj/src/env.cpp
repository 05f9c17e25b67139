// SPDX-License-Identifier: Apache-2.0
#include "dmbeam/env.hpp"

#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <stdexcept>

namespace dmbeam {

namespace {

constexpr double kDegenerateNorm = 1e-12;

Eigen::MatrixXcd regularized_gram(const ChannelMatrix& h,
                                  const Eigen::VectorXd& powers,
                                  double sigma2) {
  const int n = h.n_antennas();
  Eigen::MatrixXcd a = Eigen::MatrixXcd::Identity(n, n);
  a.noalias() +=
      (1.0 / sigma2) * (h.h * powers.asDiagonal() * h.h.adjoint());
  return a;
}

void check_power_column_compat(const ChannelMatrix& h,
                               const Eigen::VectorXd& powers) {
  if (powers.size() != h.n_users())
    throw std::invalid_argument("power vector length != number of users");
  for (int k = 0; k < h.n_users(); ++k) {
    if (powers[k] > 0.0 && h.h.col(k).norm() < kDegenerateNorm)
      throw std::domain_error(
          "degenerate channel: zero column with positive power");
  }
}

}  // namespace

void ScenarioConfig::validate() const {
  if (n_antennas < 1) throw std::invalid_argument("n_antennas must be >= 1");
  if (n_users < 1) throw std::invalid_argument("n_users must be >= 1");
  if (!(power_budget > 0.0))
    throw std::invalid_argument("power_budget must be > 0");
  if (!(noise_power > 0.0))
    throw std::invalid_argument("noise_power must be > 0");
  if (!(rho >= 0.0 && rho <= 1.0))
    throw std::invalid_argument("rho must lie in [0, 1]");
}

double ScenarioConfig::snr_db() const {
  return 10.0 * std::log10(power_budget / noise_power);
}

ScenarioConfig ScenarioConfig::from_snr_db(int n_antennas, int n_users,
                                           double snr_db, double rho,
                                           std::uint64_t seed) {
  ScenarioConfig cfg;
  cfg.n_antennas = n_antennas;
  cfg.n_users = n_users;
  cfg.noise_power = 1.0;
  cfg.power_budget = std::pow(10.0, snr_db / 10.0);
  cfg.rho = rho;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

bool ChannelMatrix::all_finite() const {
  return h.array().isFinite().all();
}

PowerAllocation::PowerAllocation(Eigen::VectorXd powers, double budget_watts)
    : p(std::move(powers)), budget(budget_watts) {
  if (!(budget > 0.0)) throw std::invalid_argument("budget must be > 0");
  if ((p.array() < 0.0).any())
    throw std::invalid_argument("powers must be nonnegative");
  if (p.sum() > budget + 1e-9)
    throw std::invalid_argument("powers exceed the budget");
}

ChannelMatrix sample_channel(const ScenarioConfig& cfg, Rng& rng) {
  cfg.validate();
  const int n = cfg.n_antennas;
  const int k = cfg.n_users;
  const double ws = std::sqrt(cfg.rho);
  const double wd = std::sqrt(1.0 - cfg.rho);

  ChannelMatrix out;
  out.h.resize(n, k);
  while (true) {
    Eigen::VectorXcd shared(n);
    for (int i = 0; i < n; ++i) shared[i] = rng.cnormal();
    for (int c = 0; c < k; ++c) {
      for (int i = 0; i < n; ++i)
        out.h(i, c) = ws * shared[i] + wd * rng.cnormal();
    }
    bool degenerate = false;
    for (int c = 0; c < k; ++c)
      degenerate = degenerate || out.h.col(c).norm() < kDegenerateNorm;
    if (!degenerate) break;
  }
  return out;
}

BeamformingMatrix recover_beamformer(const ChannelMatrix& h,
                                     const PowerAllocation& p, double sigma2) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma2 must be > 0");
  check_power_column_compat(h, p.p);

  const Eigen::MatrixXcd a = regularized_gram(h, p.p, sigma2);
  const Eigen::MatrixXcd v = a.llt().solve(h.h);

  BeamformingMatrix out;
  out.w.setZero(h.n_antennas(), h.n_users());
  for (int k = 0; k < h.n_users(); ++k) {
    if (p.p[k] <= 0.0) continue;
    const double nv = v.col(k).norm();
    out.w.col(k) = std::sqrt(p.p[k]) / nv * v.col(k);
  }
  return out;
}

double spectral_efficiency(const ChannelMatrix& h, const BeamformingMatrix& w,
                           double sigma2) {
  if (w.w.rows() != h.h.rows() || w.w.cols() != h.h.cols())
    throw std::invalid_argument("beamformer shape does not match channel");
  const int k = h.n_users();
  const Eigen::MatrixXcd y = h.h.adjoint() * w.w;  // y(k, j) = h_k^H w_j
  double se = 0.0;
  for (int u = 0; u < k; ++u) {
    const double signal = std::norm(y(u, u));
    double interference = sigma2;
    for (int j = 0; j < k; ++j) {
      if (j != u) interference += std::norm(y(u, j));
    }
    se += std::log2(1.0 + signal / interference);
  }
  return se;
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double softplus_inverse(double y) {
  // log(exp(y) - 1), stable for small and large y
  if (y <= 0.0) throw std::invalid_argument("softplus_inverse needs y > 0");
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

PowerAllocation normalize_power(const Eigen::VectorXd& raw, double budget) {
  if (!(budget > 0.0)) throw std::invalid_argument("budget must be > 0");
  if (!raw.array().isFinite().all())
    throw std::invalid_argument("raw action must be finite");
  Eigen::VectorXd s(raw.size());
  for (int i = 0; i < raw.size(); ++i) s[i] = softplus(raw[i]);
  const double total = s.sum();
  return PowerAllocation(budget / total * s, budget);
}

Eigen::MatrixXd normalize_power_jacobian(const Eigen::VectorXd& raw,
                                         double budget) {
  const int k = static_cast<int>(raw.size());
  Eigen::VectorXd s(k), sp(k);
  for (int i = 0; i < k; ++i) {
    s[i] = softplus(raw[i]);
    sp[i] = 1.0 / (1.0 + std::exp(-raw[i]));  // softplus' = sigmoid
  }
  const double total = s.sum();
  const Eigen::VectorXd p = budget / total * s;
  Eigen::MatrixXd jac(k, k);
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < k; ++c) {
      const double kron = (r == c) ? budget : 0.0;
      jac(r, c) = sp[c] / total * (kron - p[r]);
    }
  }
  return jac;
}

Eigen::VectorXd raw_from_powers(const Eigen::VectorXd& powers, double /*budget*/) {
  if ((powers.array() < 0.0).any())
    throw std::invalid_argument("powers must be nonnegative");
  const double total = powers.sum();
  if (!(total > 0.0)) throw std::invalid_argument("powers must not all be 0");
  // Choose softplus values summing to K*ln2 so shares are preserved.
  const double scale = static_cast<double>(powers.size()) * M_LN2 / total;
  Eigen::VectorXd raw(powers.size());
  for (int i = 0; i < powers.size(); ++i) {
    const double s = scale * powers[i];
    raw[i] = (s < softplus(-9.0)) ? -9.0 : softplus_inverse(s);
  }
  return raw;
}

double sum_se_for_powers(const ChannelMatrix& h, const Eigen::VectorXd& powers,
                         double sigma2) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma2 must be > 0");
  if ((powers.array() < 0.0).any())
    throw std::invalid_argument("powers must be nonnegative");
  check_power_column_compat(h, powers);

  const int k = h.n_users();
  const Eigen::MatrixXcd a = regularized_gram(h, powers, sigma2);
  const Eigen::MatrixXcd v = a.llt().solve(h.h);
  const Eigen::MatrixXcd corr = h.h.adjoint() * v;  // corr(k, j) = h_k^H v_j

  // q(k, j) = |h_k^H u_j|^2 with u_j = v_j / ||v_j||; smooth in p including
  // the p_j = 0 boundary, so the same expressions back the gradient.
  Eigen::VectorXd vnorm2(k);
  for (int j = 0; j < k; ++j) vnorm2[j] = v.col(j).squaredNorm();

  double se = 0.0;
  for (int u = 0; u < k; ++u) {
    double signal = 0.0;
    double interference = sigma2;
    for (int j = 0; j < k; ++j) {
      if (powers[j] <= 0.0 || vnorm2[j] <= 0.0) continue;
      const double q = std::norm(corr(u, j)) / vnorm2[j];
      if (j == u)
        signal = powers[j] * q;
      else
        interference += powers[j] * q;
    }
    se += std::log2(1.0 + signal / interference);
  }
  return se;
}

double se_of_action(const ChannelMatrix& h, const PowerAllocation& p,
                    double sigma2) {
  return sum_se_for_powers(h, p.p, sigma2);
}

Eigen::VectorXd se_gradient(const ChannelMatrix& h,
                            const Eigen::VectorXd& powers, double sigma2) {
  check_power_column_compat(h, powers);
  const int k = h.n_users();
  const Eigen::MatrixXcd a = regularized_gram(h, powers, sigma2);
  const Eigen::MatrixXcd v = a.llt().solve(h.h);
  const Eigen::MatrixXcd corr = h.h.adjoint() * v;  // corr(k, j) = h_k^H v_j
  const Eigen::MatrixXcd vv = v.adjoint() * v;      // vv(j, m) = v_j^H v_m

  Eigen::VectorXd vnorm2(k);
  for (int j = 0; j < k; ++j) vnorm2[j] = vv(j, j).real();

  // dv_j/dp_m = -(1/sigma2) corr(m, j) v_m, hence
  // d corr(u, j)/dp_m = -(1/sigma2) corr(m, j) corr(u, m)
  // d||v_j||^2/dp_m  = -(2/sigma2) Re(corr(m, j) vv(j, m)).
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(k, k);
  for (int u = 0; u < k; ++u)
    for (int j = 0; j < k; ++j)
      if (vnorm2[j] > 0.0) q(u, j) = std::norm(corr(u, j)) / vnorm2[j];

  Eigen::VectorXd sig(k), intf(k);
  for (int u = 0; u < k; ++u) {
    sig[u] = powers[u] * q(u, u);
    double acc = sigma2;
    for (int j = 0; j < k; ++j)
      if (j != u) acc += powers[j] * q(u, j);
    intf[u] = acc;
  }

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(k);
  for (int m = 0; m < k; ++m) {
    // dq(u, j)/dp_m for all (u, j)
    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(k, k);
    for (int j = 0; j < k; ++j) {
      if (vnorm2[j] <= 0.0) continue;
      const double dn = -2.0 / sigma2 * (corr(m, j) * vv(j, m)).real();
      for (int u = 0; u < k; ++u) {
        const std::complex<double> dcorr =
            -1.0 / sigma2 * corr(m, j) * corr(u, m);
        const double dnum = 2.0 * (std::conj(corr(u, j)) * dcorr).real();
        dq(u, j) = (dnum - q(u, j) * dn) / vnorm2[j];
      }
    }
    double acc = 0.0;
    for (int u = 0; u < k; ++u) {
      double dsig = powers[u] * dq(u, u);
      if (u == m) dsig += q(u, u);
      double dintf = 0.0;
      for (int j = 0; j < k; ++j) {
        if (j == u) continue;
        dintf += powers[j] * dq(u, j);
        if (j == m) dintf += q(u, j);
      }
      acc += M_LOG2E * (dsig * intf[u] - sig[u] * dintf) /
             (intf[u] * (intf[u] + sig[u]));
    }
    grad[m] = acc;
  }
  return grad;
}

namespace {

// Total transmit power of the WMMSE transmit step as a function of the
// Lagrange multiplier mu, from the eigendecomposition of the weighted Gram.
double wmmse_power_at(const Eigen::VectorXd& eigvals,
                      const Eigen::MatrixXcd& proj,
                      const Eigen::VectorXd& gain2, double mu) {
  double total = 0.0;
  for (int k = 0; k < proj.cols(); ++k) {
    double col = 0.0;
    for (int n = 0; n < proj.rows(); ++n) {
      const double d = eigvals[n] + mu;
      col += std::norm(proj(n, k)) / (d * d);
    }
    total += gain2[k] * col;
  }
  return total;
}

}  // namespace

WmmseResult wmmse(const ChannelMatrix& h, double sigma2, double budget,
                  int max_iter, double tol) {
  if (max_iter < 1) throw std::invalid_argument("max_iter must be >= 1");
  if (!(tol > 0.0)) throw std::invalid_argument("tol must be > 0");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma2 must be > 0");
  if (!(budget > 0.0)) throw std::invalid_argument("budget must be > 0");

  const int n = h.n_antennas();
  const int k = h.n_users();

  // Equal-power start along the structure-recovered (regularized MRT)
  // directions; the monotone block ascent then never falls below the
  // equal-power structured SE.
  WmmseResult res;
  res.w.w.setZero(n, k);
  {
    Eigen::MatrixXcd a = Eigen::MatrixXcd::Identity(n, n);
    for (int c = 0; c < k; ++c) {
      if (h.h.col(c).norm() > kDegenerateNorm)
        a += budget / (k * sigma2) * (h.h.col(c) * h.h.col(c).adjoint());
    }
    const Eigen::MatrixXcd v = a.llt().solve(h.h);
    for (int c = 0; c < k; ++c) {
      const double nv = v.col(c).norm();
      if (nv > kDegenerateNorm)
        res.w.w.col(c) = std::sqrt(budget / k) / nv * v.col(c);
    }
  }

  double prev_se = spectral_efficiency(h, res.w, sigma2);
  res.se_trace.push_back(prev_se);

  for (int it = 1; it <= max_iter; ++it) {
    res.iterations = it;
    const Eigen::MatrixXcd y = h.h.adjoint() * res.w.w;

    Eigen::VectorXcd u(k);
    Eigen::VectorXd msw(k);  // MSE weights 1/e_k
    for (int c = 0; c < k; ++c) {
      double denom = sigma2;
      for (int j = 0; j < k; ++j) denom += std::norm(y(c, j));
      u[c] = y(c, c) / denom;
      const double e = 1.0 - std::norm(y(c, c)) / denom;
      msw[c] = 1.0 / e;
    }

    Eigen::MatrixXcd gram = Eigen::MatrixXcd::Zero(n, n);
    for (int c = 0; c < k; ++c)
      gram.noalias() +=
          msw[c] * std::norm(u[c]) * h.h.col(c) * h.h.col(c).adjoint();

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> eig(gram);
    const Eigen::VectorXd eigvals = eig.eigenvalues().cwiseMax(0.0);
    const Eigen::MatrixXcd proj = eig.eigenvectors().adjoint() * h.h;

    Eigen::VectorXd gain2(k);
    for (int c = 0; c < k; ++c) gain2[c] = msw[c] * msw[c] * std::norm(u[c]);

    // Power is decreasing in mu; pick the smallest feasible multiplier.
    double mu = 0.0;
    const double p0 = wmmse_power_at(eigvals, proj, gain2, 0.0);
    if (!(p0 <= budget)) {
      double lo = 0.0, hi = 1e-6;
      while (wmmse_power_at(eigvals, proj, gain2, hi) > budget) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e18) break;
      }
      while (hi - lo > 1e-8 * std::max(1.0, hi)) {
        const double mid = 0.5 * (lo + hi);
        if (wmmse_power_at(eigvals, proj, gain2, mid) > budget)
          lo = mid;
        else
          hi = mid;
      }
      mu = hi;  // feasible side of the bracket
    }

    for (int c = 0; c < k; ++c) {
      const Eigen::VectorXcd scaled =
          proj.col(c).array() / (eigvals.array() + mu);
      res.w.w.col(c) = msw[c] * u[c] * (eig.eigenvectors() * scaled);
    }

    const double se = spectral_efficiency(h, res.w, sigma2);
    res.se_trace.push_back(se);
    if (se - prev_se < tol) {
      res.converged = true;
      break;
    }
    prev_se = se;
  }

  // Single-user MRT safeguard: w_k = 0 is absorbing for the block updates,
  // so vertex optima are unreachable from the interior initialization. Keep
  // the better of the converged iterate and the best single-user solution.
  int best_user = -1;
  double best_vertex_se = res.se_trace.back();
  for (int c = 0; c < k; ++c) {
    const double nh2 = h.h.col(c).squaredNorm();
    const double se_c = std::log2(1.0 + budget * nh2 / sigma2);
    if (se_c > best_vertex_se) {
      best_vertex_se = se_c;
      best_user = c;
    }
  }
  if (best_user >= 0) {
    res.w.w.setZero();
    res.w.w.col(best_user) = std::sqrt(budget) / h.h.col(best_user).norm() *
                             h.h.col(best_user);
    res.se_trace.push_back(spectral_efficiency(h, res.w, sigma2));
  }
  return res;
}

BruteForceResult brute_force_power(const ChannelMatrix& h, double sigma2,
                                   double budget, double grid_resolution) {
  const int k = h.n_users();
  if (k > 4)
    throw std::invalid_argument("brute_force_power supports at most 4 users");
  if (!(grid_resolution > 0.0))
    throw std::invalid_argument("grid_resolution must be > 0");
  const long long levels = std::llround(budget / grid_resolution);
  if (levels < 1 || levels > 200)
    throw std::invalid_argument(
        "grid_resolution must divide the budget into 1..200 levels per user");

  const double delta = budget / static_cast<double>(levels);
  Eigen::VectorXd best = Eigen::VectorXd::Zero(k);
  double best_se = -1.0;
  std::int64_t count = 0;

  Eigen::VectorXd point(k);
  // Enumerate all m with sum(m) == levels, lexicographically.
  std::vector<long long> m(static_cast<std::size_t>(k), 0);
  auto evaluate_point = [&]() {
    for (int i = 0; i < k; ++i) point[i] = delta * static_cast<double>(m[i]);
    const double se = sum_se_for_powers(h, point, sigma2);
    ++count;
    if (se > best_se) {
      best_se = se;
      best = point;
    }
  };
  std::function<void(int, long long)> walk = [&](int idx, long long left) {
    if (idx == k - 1) {
      m[idx] = left;
      evaluate_point();
      return;
    }
    for (long long v = 0; v <= left; ++v) {
      m[idx] = v;
      walk(idx + 1, left - v);
    }
  };
  walk(0, levels);

  BruteForceResult res;
  res.best = PowerAllocation(best, budget);
  res.se = best_se;
  res.points_evaluated = count;
  return res;
}

Environment::Environment(ScenarioConfig cfg) : cfg_(cfg) { cfg_.validate(); }

ChannelMatrix Environment::sample_channel(Rng& rng) const {
  return dmbeam::sample_channel(cfg_, rng);
}

std::vector<ChannelMatrix> Environment::sample_channels(int count,
                                                        Rng& rng) const {
  std::vector<ChannelMatrix> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(sample_channel(rng));
  return out;
}

double Environment::se_of_powers(const ChannelMatrix& h,
                                 const Eigen::VectorXd& powers) {
  ++se_value_calls_;
  return sum_se_for_powers(h, powers, cfg_.noise_power);
}

double Environment::se_of_action(const ChannelMatrix& h,
                                 const PowerAllocation& p) {
  ++se_value_calls_;
  return dmbeam::se_of_action(h, p, cfg_.noise_power);
}

Eigen::VectorXd Environment::se_gradient(const ChannelMatrix& h,
                                         const Eigen::VectorXd& powers) {
  ++se_gradient_calls_;
  return dmbeam::se_gradient(h, powers, cfg_.noise_power);
}

WmmseResult Environment::wmmse(const ChannelMatrix& h, int max_iter,
                               double tol) {
  return dmbeam::wmmse(h, cfg_.noise_power, cfg_.power_budget, max_iter, tol);
}

PowerAllocation Environment::equal_power() const {
  return PowerAllocation(
      Eigen::VectorXd::Constant(cfg_.n_users,
                                cfg_.power_budget / cfg_.n_users),
      cfg_.power_budget);
}

void Environment::reset_counters() {
  se_value_calls_ = 0;
  se_gradient_calls_ = 0;
}

}  // namespace dmbeam
