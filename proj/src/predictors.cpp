// SPDX-License-Identifier: Apache-2.0
#include "dmbeam/predictors.hpp"

#include <cmath>
#include <stdexcept>

namespace dmbeam {

namespace {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

Eigen::MatrixXd silu_mat(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) { return silu(v); });
}

Eigen::MatrixXd silu_grad_mat(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) { return silu_grad(v); });
}

std::vector<ParamBlockSpec> mlp_blocks(const std::vector<int>& dims,
                                       const std::string& prefix) {
  std::vector<ParamBlockSpec> blocks;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i];
    const int out = dims[i + 1];
    blocks.push_back({prefix + ".w" + std::to_string(i), out, in,
                      1.0 / std::sqrt(static_cast<double>(in))});
    blocks.push_back({prefix + ".b" + std::to_string(i), out, 1, 0.0});
  }
  return blocks;
}

struct MlpCache final : ForwardCache {
  Eigen::MatrixXd x;
  std::vector<Eigen::MatrixXd> z;  // pre-activations per layer
  std::vector<Eigen::MatrixXd> a;  // activations per hidden layer
};

Eigen::MatrixXd mlp_forward(const ParamStore& params,
                            const std::vector<int>& dims,
                            const Eigen::MatrixXd& x, MlpCache* cache) {
  const int layers = static_cast<int>(dims.size()) - 1;
  if (x.cols() != dims.front())
    throw std::invalid_argument("input width does not match architecture");
  if (cache) {
    cache->x = x;
    cache->z.resize(layers);
    cache->a.resize(layers - 1);
  }
  Eigen::MatrixXd act = x;
  for (int i = 0; i < layers; ++i) {
    const auto w = params.mat(2 * i);
    const auto b = params.mat(2 * i + 1);
    Eigen::MatrixXd z = act * w.transpose();
    z.rowwise() += b.col(0).transpose();
    if (cache) cache->z[i] = z;
    if (i + 1 < layers) {
      act = silu_mat(z);
      if (cache) cache->a[i] = act;
    } else {
      act = std::move(z);
    }
  }
  return act;
}

void mlp_backward(const ParamStore& params, const std::vector<int>& dims,
                  const MlpCache& cache, const Eigen::MatrixXd& upstream,
                  Eigen::VectorXd& grad, Eigen::MatrixXd* input_grad) {
  const int layers = static_cast<int>(dims.size()) - 1;
  std::size_t offset = 0;
  std::vector<std::size_t> w_off(layers), b_off(layers);
  for (int i = 0; i < layers; ++i) {
    w_off[i] = offset;
    offset += static_cast<std::size_t>(dims[i + 1]) * dims[i];
    b_off[i] = offset;
    offset += static_cast<std::size_t>(dims[i + 1]);
  }

  Eigen::MatrixXd dz = upstream;  // output layer is linear
  for (int i = layers - 1; i >= 0; --i) {
    const Eigen::MatrixXd& input = (i == 0) ? cache.x : cache.a[i - 1];
    Eigen::Map<Eigen::MatrixXd> dw(grad.data() + w_off[i], dims[i + 1],
                                   dims[i]);
    Eigen::Map<Eigen::VectorXd> db(grad.data() + b_off[i], dims[i + 1]);
    dw.noalias() += dz.transpose() * input;
    db.noalias() += dz.colwise().sum().transpose();
    if (i == 0) {
      if (input_grad) input_grad->noalias() = dz * params.mat(0);
      break;
    }
    Eigen::MatrixXd da = dz * params.mat(2 * i);
    dz = da.cwiseProduct(silu_grad_mat(cache.z[i - 1]));
  }
}

}  // namespace

std::string arch_kind_name(ArchKind kind) {
  switch (kind) {
    case ArchKind::DmFnn: return "DM-FNN";
    case ArchKind::DmGnn: return "DM-GNN";
    case ArchKind::Fnn: return "FNN";
    case ArchKind::Gnn: return "GNN";
    case ArchKind::Value: return "VALUE";
  }
  return "?";
}

ArchKind arch_kind_from_name(const std::string& name) {
  std::string up;
  for (char c : name) up.push_back(static_cast<char>(std::toupper(c)));
  if (up == "DM-FNN" || up == "DM_FNN" || up == "DMFNN") return ArchKind::DmFnn;
  if (up == "DM-GNN" || up == "DM_GNN" || up == "DMGNN") return ArchKind::DmGnn;
  if (up == "FNN") return ArchKind::Fnn;
  if (up == "GNN") return ArchKind::Gnn;
  if (up == "VALUE") return ArchKind::Value;
  throw std::invalid_argument("unknown architecture name: " + name);
}

bool arch_uses_diffusion(ArchKind kind) {
  return kind == ArchKind::DmFnn || kind == ArchKind::DmGnn;
}

ParamStore::ParamStore(std::vector<ParamBlockSpec> blocks)
    : blocks_(std::move(blocks)) {
  offsets_.reserve(blocks_.size());
  std::size_t total = 0;
  for (const auto& b : blocks_) {
    offsets_.push_back(total);
    total += b.size();
  }
  values_.assign(total, 0.0);
}

Eigen::Map<Eigen::MatrixXd> ParamStore::mat(int block) {
  const auto& b = blocks_.at(static_cast<std::size_t>(block));
  return {values_.data() + offsets_[static_cast<std::size_t>(block)], b.rows,
          b.cols};
}

Eigen::Map<const Eigen::MatrixXd> ParamStore::mat(int block) const {
  const auto& b = blocks_.at(static_cast<std::size_t>(block));
  return {values_.data() + offsets_[static_cast<std::size_t>(block)], b.rows,
          b.cols};
}

void ParamStore::fill_random(Rng& rng) {
  std::size_t idx = 0;
  for (const auto& b : blocks_) {
    for (std::size_t i = 0; i < b.size(); ++i, ++idx)
      values_[idx] = (b.init_scale == 0.0) ? 0.0 : b.init_scale * rng.normal();
  }
}

bool ParamStore::same_shape(const ParamStore& other) const {
  if (blocks_.size() != other.blocks_.size()) return false;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].rows != other.blocks_[i].rows ||
        blocks_[i].cols != other.blocks_[i].cols)
      return false;
  }
  return true;
}

Eigen::VectorXd timestep_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0)
    throw std::invalid_argument("embedding dim must be even and >= 2");
  Eigen::VectorXd emb(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    emb[2 * i] = std::sin(t * freq);
    emb[2 * i + 1] = std::cos(t * freq);
  }
  return emb;
}

StateFeatures compute_state_features(const ChannelMatrix& h) {
  const int n = h.n_antennas();
  const int k = h.n_users();
  StateFeatures f;
  f.fnn.resize(2 * n * k);
  for (int c = 0; c < k; ++c) {
    for (int r = 0; r < n; ++r) {
      f.fnn[c * n + r] = h.h(r, c).real();
      f.fnn[n * k + c * n + r] = h.h(r, c).imag();
    }
  }
  const Eigen::MatrixXcd gram = h.h.adjoint() * h.h;  // gram(j, k) = h_j^H h_k
  f.node.resize(k);
  for (int c = 0; c < k; ++c) f.node[c] = gram(c, c).real();
  f.edge.resize(k * k, 2);
  for (int j = 0; j < k; ++j) {
    for (int c = 0; c < k; ++c) {
      f.edge(j * k + c, 0) = gram(j, c).real();
      f.edge(j * k + c, 1) = gram(j, c).imag();
    }
  }
  return f;
}

FeatureBatch FeatureBatch::from(const std::vector<StateFeatures>& rows) {
  std::vector<int> idx(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) idx[i] = static_cast<int>(i);
  return gather(rows, idx);
}

FeatureBatch FeatureBatch::gather(const std::vector<StateFeatures>& rows,
                                  const std::vector<int>& indices) {
  if (rows.empty() || indices.empty())
    throw std::invalid_argument("empty feature batch");
  const auto& first = rows.front();
  FeatureBatch b;
  const int n = static_cast<int>(indices.size());
  b.fnn.resize(n, first.fnn.size());
  b.node.resize(n, first.node.size());
  b.edge_re.resize(n, first.edge.rows());
  b.edge_im.resize(n, first.edge.rows());
  for (int i = 0; i < n; ++i) {
    const auto& f = rows.at(static_cast<std::size_t>(indices[i]));
    b.fnn.row(i) = f.fnn.transpose();
    b.node.row(i) = f.node.transpose();
    b.edge_re.row(i) = f.edge.col(0).transpose();
    b.edge_im.row(i) = f.edge.col(1).transpose();
  }
  return b;
}

FeatureBatch FeatureBatch::replicate(const StateFeatures& row, int copies) {
  std::vector<StateFeatures> rows{row};
  std::vector<int> idx(static_cast<std::size_t>(copies), 0);
  return gather(rows, idx);
}

ParamStore NoisePredictor::make_params(Rng& rng) const {
  ParamStore p(blocks());
  p.fill_random(rng);
  return p;
}

ParamStore DirectPolicy::make_params(Rng& rng) const {
  ParamStore p(blocks());
  p.fill_random(rng);
  return p;
}

// ---------------------------------------------------------------------------
// FNN family

FnnNoisePredictor::FnnNoisePredictor(ArchDescriptor desc) : desc_(desc) {
  const int in = 2 * desc_.n_antennas * desc_.n_users + desc_.n_users +
                 desc_.temb_dim;
  dims_.push_back(in);
  for (int h : desc_.hidden) dims_.push_back(h);
  dims_.push_back(desc_.n_users);
}

std::vector<ParamBlockSpec> FnnNoisePredictor::blocks() const {
  return mlp_blocks(dims_, "fnn");
}

Eigen::MatrixXd FnnNoisePredictor::assemble_input(const FeatureBatch& f,
                                                  const Eigen::MatrixXd& x_t,
                                                  int t) const {
  const int b = f.batch();
  const int nf = static_cast<int>(f.fnn.cols());
  const int k = desc_.n_users;
  Eigen::MatrixXd x(b, nf + k + desc_.temb_dim);
  x.leftCols(nf) = f.fnn;
  x.middleCols(nf, k) = x_t;
  x.rightCols(desc_.temb_dim).rowwise() =
      timestep_embedding(t, desc_.temb_dim).transpose();
  return x;
}

Eigen::MatrixXd FnnNoisePredictor::predict(const ParamStore& params,
                                           const FeatureBatch& f,
                                           const Eigen::MatrixXd& x_t,
                                           int t) const {
  return mlp_forward(params, dims_, assemble_input(f, x_t, t), nullptr);
}

Eigen::MatrixXd FnnNoisePredictor::predict_cached(
    const ParamStore& params, const FeatureBatch& f, const Eigen::MatrixXd& x_t,
    int t, std::unique_ptr<ForwardCache>& cache) const {
  auto c = std::make_unique<MlpCache>();
  Eigen::MatrixXd out =
      mlp_forward(params, dims_, assemble_input(f, x_t, t), c.get());
  cache = std::move(c);
  return out;
}

void FnnNoisePredictor::backprop(const ParamStore& params,
                                 const ForwardCache& cache,
                                 const Eigen::MatrixXd& upstream,
                                 Eigen::VectorXd& param_grad,
                                 Eigen::MatrixXd* x_t_grad) const {
  const auto& c = dynamic_cast<const MlpCache&>(cache);
  if (!x_t_grad) {
    mlp_backward(params, dims_, c, upstream, param_grad, nullptr);
    return;
  }
  Eigen::MatrixXd dx;
  mlp_backward(params, dims_, c, upstream, param_grad, &dx);
  const int nf = 2 * desc_.n_antennas * desc_.n_users;
  *x_t_grad = dx.middleCols(nf, desc_.n_users);
}

FnnDirectPolicy::FnnDirectPolicy(ArchDescriptor desc) : desc_(desc) {
  dims_.push_back(2 * desc_.n_antennas * desc_.n_users);
  for (int h : desc_.hidden) dims_.push_back(h);
  dims_.push_back(desc_.n_users);
}

std::vector<ParamBlockSpec> FnnDirectPolicy::blocks() const {
  return mlp_blocks(dims_, "fnn");
}

Eigen::MatrixXd FnnDirectPolicy::predict(const ParamStore& params,
                                         const FeatureBatch& f) const {
  return mlp_forward(params, dims_, f.fnn, nullptr);
}

Eigen::MatrixXd FnnDirectPolicy::predict_cached(
    const ParamStore& params, const FeatureBatch& f,
    std::unique_ptr<ForwardCache>& cache) const {
  auto c = std::make_unique<MlpCache>();
  Eigen::MatrixXd out = mlp_forward(params, dims_, f.fnn, c.get());
  cache = std::move(c);
  return out;
}

void FnnDirectPolicy::backprop(const ParamStore& params,
                               const ForwardCache& cache,
                               const Eigen::MatrixXd& upstream,
                               Eigen::VectorXd& param_grad) const {
  const auto& c = dynamic_cast<const MlpCache&>(cache);
  mlp_backward(params, dims_, c, upstream, param_grad, nullptr);
}

// ---------------------------------------------------------------------------
// GNN family: message passing on the complete user graph with shared
// per-node networks; equivariant to user permutation by construction.

namespace {

struct GnnCache final : ForwardCache {
  Eigen::MatrixXd e_in;                 // (BK) x embed_in
  Eigen::MatrixXd z_e;                  // (BK) x W
  std::vector<Eigen::MatrixXd> h;       // rounds+1 of (BK) x W
  std::vector<Eigen::MatrixXd> m_in;    // (BP) x (W+2)
  std::vector<Eigen::MatrixXd> m_z;     // (BP) x W
  std::vector<Eigen::MatrixXd> u_in;    // (BK) x 2W
  std::vector<Eigen::MatrixXd> u_z;     // (BK) x W
};

struct GnnLayout {
  int users = 0;
  int width = 0;
  int rounds = 0;
  int embed_in = 0;
  int pairs = 0;  // K * (K - 1)

  // pair index for sender j -> receiver k, j != k
  int pair(int k, int j) const {
    return k * (users - 1) + (j < k ? j : j - 1);
  }
};

std::vector<ParamBlockSpec> gnn_blocks(const GnnLayout& g) {
  std::vector<ParamBlockSpec> blocks;
  const double es = 1.0 / std::sqrt(static_cast<double>(g.embed_in));
  blocks.push_back({"gnn.embed.w", g.width, g.embed_in, es});
  blocks.push_back({"gnn.embed.b", g.width, 1, 0.0});
  const double ms = 1.0 / std::sqrt(static_cast<double>(g.width + 2));
  const double us = 1.0 / std::sqrt(static_cast<double>(2 * g.width));
  for (int r = 0; r < g.rounds; ++r) {
    const std::string p = "gnn.round" + std::to_string(r);
    blocks.push_back({p + ".msg.w", g.width, g.width + 2, ms});
    blocks.push_back({p + ".msg.b", g.width, 1, 0.0});
    blocks.push_back({p + ".upd.w", g.width, 2 * g.width, us});
    blocks.push_back({p + ".upd.b", g.width, 1, 0.0});
  }
  blocks.push_back({"gnn.read.w", 1, g.width, 1.0 / std::sqrt(g.width)});
  blocks.push_back({"gnn.read.b", 1, 1, 0.0});
  return blocks;
}

GnnLayout gnn_layout(const ArchDescriptor& d, bool diffusion_conditioned) {
  GnnLayout g;
  g.users = d.n_users;
  g.width = d.gnn_width;
  g.rounds = d.gnn_rounds;
  g.embed_in = diffusion_conditioned ? 2 + d.temb_dim : 1;
  g.pairs = d.n_users * (d.n_users - 1);
  return g;
}

Eigen::MatrixXd gnn_forward(const ParamStore& params, const ArchDescriptor& d,
                            const GnnLayout& g, const FeatureBatch& f,
                            const Eigen::MatrixXd* x_t, int t,
                            GnnCache* cache) {
  const int b = f.batch();
  const int k = g.users;
  const int w = g.width;
  const double scale = 1.0 / static_cast<double>(d.n_antennas);

  Eigen::MatrixXd e_in(b * k, g.embed_in);
  Eigen::VectorXd temb;
  if (x_t) temb = timestep_embedding(t, d.temb_dim);
  for (int i = 0; i < b; ++i) {
    for (int c = 0; c < k; ++c) {
      e_in(i * k + c, 0) = f.node(i, c) * scale;
      if (x_t) {
        e_in(i * k + c, 1) = (*x_t)(i, c);
        e_in.row(i * k + c).tail(d.temb_dim) = temb.transpose();
      }
    }
  }

  Eigen::MatrixXd z_e = e_in * params.mat(0).transpose();
  z_e.rowwise() += params.mat(1).col(0).transpose();
  Eigen::MatrixXd h = silu_mat(z_e);

  if (cache) {
    cache->e_in = e_in;
    cache->z_e = z_e;
    cache->h.clear();
    cache->h.push_back(h);
    cache->m_in.resize(g.rounds);
    cache->m_z.resize(g.rounds);
    cache->u_in.resize(g.rounds);
    cache->u_z.resize(g.rounds);
  }

  for (int r = 0; r < g.rounds; ++r) {
    Eigen::MatrixXd agg = Eigen::MatrixXd::Zero(b * k, w);
    if (g.pairs > 0) {
      Eigen::MatrixXd m_in(b * g.pairs, w + 2);
      for (int i = 0; i < b; ++i) {
        for (int c = 0; c < k; ++c) {
          for (int j = 0; j < k; ++j) {
            if (j == c) continue;
            const int row = i * g.pairs + g.pair(c, j);
            m_in.row(row).head(w) = h.row(i * k + j);
            m_in(row, w) = f.edge_re(i, j * k + c) * scale;
            m_in(row, w + 1) = f.edge_im(i, j * k + c) * scale;
          }
        }
      }
      Eigen::MatrixXd m_z = m_in * params.mat(2 + 4 * r).transpose();
      m_z.rowwise() += params.mat(3 + 4 * r).col(0).transpose();
      const Eigen::MatrixXd m_a = silu_mat(m_z);
      for (int i = 0; i < b; ++i) {
        for (int c = 0; c < k; ++c) {
          auto row = agg.row(i * k + c);
          for (int j = 0; j < k; ++j) {
            if (j == c) continue;
            row += m_a.row(i * g.pairs + g.pair(c, j));
          }
        }
      }
      if (cache) {
        cache->m_in[r] = std::move(m_in);
        cache->m_z[r] = std::move(m_z);
      }
    }
    Eigen::MatrixXd u_in(b * k, 2 * w);
    u_in.leftCols(w) = h;
    u_in.rightCols(w) = agg;
    Eigen::MatrixXd u_z = u_in * params.mat(4 + 4 * r).transpose();
    u_z.rowwise() += params.mat(5 + 4 * r).col(0).transpose();
    h = silu_mat(u_z);
    if (cache) {
      cache->u_in[r] = std::move(u_in);
      cache->u_z[r] = std::move(u_z);
      cache->h.push_back(h);
    }
  }

  const auto read_w = params.mat(2 + 4 * g.rounds);
  const double read_b = params.mat(3 + 4 * g.rounds)(0, 0);
  Eigen::MatrixXd out(b, k);
  for (int i = 0; i < b; ++i)
    for (int c = 0; c < k; ++c)
      out(i, c) = h.row(i * k + c).dot(read_w.row(0)) + read_b;
  return out;
}

void gnn_backward(const ParamStore& params, const ArchDescriptor& /*d*/,
                  const GnnLayout& g, const GnnCache& cache,
                  const Eigen::MatrixXd& upstream, Eigen::VectorXd& grad,
                  Eigen::MatrixXd* x_t_grad) {
  const int b = static_cast<int>(upstream.rows());
  const int k = g.users;
  const int w = g.width;

  std::vector<std::size_t> off(static_cast<std::size_t>(4 + 4 * g.rounds));
  {
    const auto blocks = gnn_blocks(g);
    std::size_t total = 0;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      off[i] = total;
      total += blocks[i].size();
    }
  }
  auto grad_mat = [&](int block, int rows, int cols) {
    return Eigen::Map<Eigen::MatrixXd>(grad.data() + off[block], rows, cols);
  };

  // readout
  const auto read_w = params.mat(2 + 4 * g.rounds);
  Eigen::MatrixXd dh = Eigen::MatrixXd::Zero(b * k, w);
  {
    auto d_read_w = grad_mat(2 + 4 * g.rounds, 1, w);
    auto d_read_b = grad_mat(3 + 4 * g.rounds, 1, 1);
    const Eigen::MatrixXd& h_last = cache.h.back();
    for (int i = 0; i < b; ++i) {
      for (int c = 0; c < k; ++c) {
        dh.row(i * k + c) = upstream(i, c) * read_w.row(0);
        d_read_w.row(0) += upstream(i, c) * h_last.row(i * k + c);
        d_read_b(0, 0) += upstream(i, c);
      }
    }
  }

  for (int r = g.rounds - 1; r >= 0; --r) {
    const Eigen::MatrixXd du_z =
        dh.cwiseProduct(silu_grad_mat(cache.u_z[r]));
    grad_mat(4 + 4 * r, w, 2 * w).noalias() +=
        du_z.transpose() * cache.u_in[r];
    grad_mat(5 + 4 * r, w, 1).noalias() +=
        du_z.colwise().sum().transpose();
    const Eigen::MatrixXd du_in = du_z * params.mat(4 + 4 * r);
    dh = du_in.leftCols(w);
    if (g.pairs > 0) {
      Eigen::MatrixXd dm_a(b * g.pairs, w);
      for (int i = 0; i < b; ++i)
        for (int c = 0; c < k; ++c)
          for (int j = 0; j < k; ++j) {
            if (j == c) continue;
            dm_a.row(i * g.pairs + g.pair(c, j)) =
                du_in.row(i * k + c).tail(w);
          }
      const Eigen::MatrixXd dm_z =
          dm_a.cwiseProduct(silu_grad_mat(cache.m_z[r]));
      grad_mat(2 + 4 * r, w, w + 2).noalias() +=
          dm_z.transpose() * cache.m_in[r];
      grad_mat(3 + 4 * r, w, 1).noalias() +=
          dm_z.colwise().sum().transpose();
      const Eigen::MatrixXd dm_in = dm_z * params.mat(2 + 4 * r);
      for (int i = 0; i < b; ++i)
        for (int c = 0; c < k; ++c)
          for (int j = 0; j < k; ++j) {
            if (j == c) continue;
            dh.row(i * k + j) +=
                dm_in.row(i * g.pairs + g.pair(c, j)).head(w);
          }
    }
  }

  const Eigen::MatrixXd dz_e = dh.cwiseProduct(silu_grad_mat(cache.z_e));
  grad_mat(0, w, g.embed_in).noalias() += dz_e.transpose() * cache.e_in;
  grad_mat(1, w, 1).noalias() += dz_e.colwise().sum().transpose();
  if (x_t_grad) {
    const Eigen::MatrixXd de_in = dz_e * params.mat(0);
    x_t_grad->resize(b, k);
    for (int i = 0; i < b; ++i)
      for (int c = 0; c < k; ++c) (*x_t_grad)(i, c) = de_in(i * k + c, 1);
  }
}

}  // namespace

GnnNoisePredictor::GnnNoisePredictor(ArchDescriptor desc) : desc_(desc) {}

std::vector<ParamBlockSpec> GnnNoisePredictor::blocks() const {
  return gnn_blocks(gnn_layout(desc_, true));
}

Eigen::MatrixXd GnnNoisePredictor::predict(const ParamStore& params,
                                           const FeatureBatch& f,
                                           const Eigen::MatrixXd& x_t,
                                           int t) const {
  return gnn_forward(params, desc_, gnn_layout(desc_, true), f, &x_t, t,
                     nullptr);
}

Eigen::MatrixXd GnnNoisePredictor::predict_cached(
    const ParamStore& params, const FeatureBatch& f, const Eigen::MatrixXd& x_t,
    int t, std::unique_ptr<ForwardCache>& cache) const {
  auto c = std::make_unique<GnnCache>();
  Eigen::MatrixXd out =
      gnn_forward(params, desc_, gnn_layout(desc_, true), f, &x_t, t, c.get());
  cache = std::move(c);
  return out;
}

void GnnNoisePredictor::backprop(const ParamStore& params,
                                 const ForwardCache& cache,
                                 const Eigen::MatrixXd& upstream,
                                 Eigen::VectorXd& param_grad,
                                 Eigen::MatrixXd* x_t_grad) const {
  const auto& c = dynamic_cast<const GnnCache&>(cache);
  gnn_backward(params, desc_, gnn_layout(desc_, true), c, upstream, param_grad,
               x_t_grad);
}

GnnDirectPolicy::GnnDirectPolicy(ArchDescriptor desc) : desc_(desc) {}

std::vector<ParamBlockSpec> GnnDirectPolicy::blocks() const {
  return gnn_blocks(gnn_layout(desc_, false));
}

Eigen::MatrixXd GnnDirectPolicy::predict(const ParamStore& params,
                                         const FeatureBatch& f) const {
  return gnn_forward(params, desc_, gnn_layout(desc_, false), f, nullptr, 0,
                     nullptr);
}

Eigen::MatrixXd GnnDirectPolicy::predict_cached(
    const ParamStore& params, const FeatureBatch& f,
    std::unique_ptr<ForwardCache>& cache) const {
  auto c = std::make_unique<GnnCache>();
  Eigen::MatrixXd out = gnn_forward(params, desc_, gnn_layout(desc_, false), f,
                                    nullptr, 0, c.get());
  cache = std::move(c);
  return out;
}

void GnnDirectPolicy::backprop(const ParamStore& params,
                               const ForwardCache& cache,
                               const Eigen::MatrixXd& upstream,
                               Eigen::VectorXd& param_grad) const {
  const auto& c = dynamic_cast<const GnnCache&>(cache);
  gnn_backward(params, desc_, gnn_layout(desc_, false), c, upstream,
               param_grad, nullptr);
}

// ---------------------------------------------------------------------------
// Value network

ValueNet::ValueNet(ArchDescriptor desc) : desc_(desc) {
  desc_.kind = ArchKind::Value;
  dims_.push_back(2 * desc_.n_antennas * desc_.n_users + desc_.n_users);
  for (int h : desc_.hidden) dims_.push_back(h);
  dims_.push_back(1);
}

std::vector<ParamBlockSpec> ValueNet::blocks() const {
  return mlp_blocks(dims_, "value");
}

ParamStore ValueNet::make_params(Rng& rng) const {
  ParamStore p(blocks());
  p.fill_random(rng);
  return p;
}

Eigen::VectorXd ValueNet::predict(const ParamStore& params,
                                  const FeatureBatch& f,
                                  const Eigen::MatrixXd& powers) const {
  Eigen::MatrixXd x(f.batch(), dims_.front());
  x.leftCols(f.fnn.cols()) = f.fnn;
  x.rightCols(desc_.n_users) = powers;
  return mlp_forward(params, dims_, x, nullptr).col(0);
}

Eigen::VectorXd ValueNet::predict_cached(
    const ParamStore& params, const FeatureBatch& f,
    const Eigen::MatrixXd& powers, std::unique_ptr<ForwardCache>& cache) const {
  Eigen::MatrixXd x(f.batch(), dims_.front());
  x.leftCols(f.fnn.cols()) = f.fnn;
  x.rightCols(desc_.n_users) = powers;
  auto c = std::make_unique<MlpCache>();
  Eigen::VectorXd out = mlp_forward(params, dims_, x, c.get()).col(0);
  cache = std::move(c);
  return out;
}

void ValueNet::backprop(const ParamStore& params, const ForwardCache& cache,
                        const Eigen::VectorXd& upstream,
                        Eigen::VectorXd& param_grad,
                        Eigen::MatrixXd* powers_grad) const {
  const auto& c = dynamic_cast<const MlpCache&>(cache);
  if (!powers_grad) {
    mlp_backward(params, dims_, c, upstream, param_grad, nullptr);
    return;
  }
  Eigen::MatrixXd dx;
  mlp_backward(params, dims_, c, upstream, param_grad, &dx);
  *powers_grad = dx.rightCols(desc_.n_users);
}

std::unique_ptr<NoisePredictor> make_noise_predictor(
    const ArchDescriptor& desc) {
  switch (desc.kind) {
    case ArchKind::DmFnn: return std::make_unique<FnnNoisePredictor>(desc);
    case ArchKind::DmGnn: return std::make_unique<GnnNoisePredictor>(desc);
    default:
      throw std::invalid_argument("architecture is not a noise predictor");
  }
}

std::unique_ptr<DirectPolicy> make_direct_policy(const ArchDescriptor& desc) {
  switch (desc.kind) {
    case ArchKind::Fnn: return std::make_unique<FnnDirectPolicy>(desc);
    case ArchKind::Gnn: return std::make_unique<GnnDirectPolicy>(desc);
    default:
      throw std::invalid_argument("architecture is not a direct policy");
  }
}

std::vector<ParamBlockSpec> arch_blocks(const ArchDescriptor& desc) {
  switch (desc.kind) {
    case ArchKind::DmFnn:
    case ArchKind::DmGnn: return make_noise_predictor(desc)->blocks();
    case ArchKind::Fnn:
    case ArchKind::Gnn: return make_direct_policy(desc)->blocks();
    case ArchKind::Value: return ValueNet(desc).blocks();
  }
  throw std::invalid_argument("unknown architecture kind");
}

Eigen::VectorXd predict_one(const NoisePredictor& net, const ParamStore& p,
                            const StateFeatures& f, const Eigen::VectorXd& x_t,
                            int t) {
  const FeatureBatch batch = FeatureBatch::replicate(f, 1);
  Eigen::MatrixXd xt(1, x_t.size());
  xt.row(0) = x_t.transpose();
  return net.predict(p, batch, xt, t).row(0).transpose();
}

Eigen::VectorXd predict_one(const DirectPolicy& net, const ParamStore& p,
                            const StateFeatures& f) {
  const FeatureBatch batch = FeatureBatch::replicate(f, 1);
  return net.predict(p, batch).row(0).transpose();
}

}  // namespace dmbeam
