// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "dmbeam/env.hpp"
#include "dmbeam/rng.hpp"

namespace dmbeam {

enum class ArchKind { DmFnn, DmGnn, Fnn, Gnn, Value };

std::string arch_kind_name(ArchKind kind);
ArchKind arch_kind_from_name(const std::string& name);
bool arch_uses_diffusion(ArchKind kind);

// Network shape description; serialized into checkpoints.
struct ArchDescriptor {
  ArchKind kind = ArchKind::DmGnn;
  int n_antennas = 8;
  int n_users = 4;
  std::vector<int> hidden = {256, 256};  // FNN-family hidden widths
  int gnn_rounds = 3;
  int gnn_width = 64;
  int temb_dim = 32;

  bool operator==(const ArchDescriptor&) const = default;
};

// One named parameter array inside the flat store. Weight blocks carry the
// init scale 1/sqrt(fan_in); bias blocks use scale 0.
struct ParamBlockSpec {
  std::string name;
  int rows = 0;
  int cols = 1;
  double init_scale = 0.0;

  std::size_t size() const {
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }
};

// Flat parameter vector with named matrix views (column-major blocks).
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(std::vector<ParamBlockSpec> blocks);

  std::size_t size() const { return values_.size(); }
  const std::vector<ParamBlockSpec>& blocks() const { return blocks_; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  Eigen::Map<Eigen::MatrixXd> mat(int block);
  Eigen::Map<const Eigen::MatrixXd> mat(int block) const;

  void fill_random(Rng& rng);  // N(0, scale^2) per block, zeros for biases

  bool same_shape(const ParamStore& other) const;

 private:
  std::vector<ParamBlockSpec> blocks_;
  std::vector<std::size_t> offsets_;
  std::vector<double> values_;
};

// Sinusoidal embedding of the diffusion step index; distinct per step.
Eigen::VectorXd timestep_embedding(int t, int dim);

// Per-channel inputs for both predictor families. FNN consumes the flattened
// real/imaginary channel entries; the GNN consumes user-graph node features
// ||h_k||^2 and directed edge features (Re, Im) of h_j^H h_k, which are
// invariant to any unitary applied to the antenna dimension.
struct StateFeatures {
  Eigen::VectorXd fnn;      // 2*N*K
  Eigen::VectorXd node;     // K
  Eigen::MatrixXd edge;     // (K*K) x 2, row j*K + k holds h_j^H h_k
};

StateFeatures compute_state_features(const ChannelMatrix& h);

// Row-per-sample feature matrices for batched evaluation.
struct FeatureBatch {
  Eigen::MatrixXd fnn;      // B x 2NK
  Eigen::MatrixXd node;     // B x K
  Eigen::MatrixXd edge_re;  // B x K*K
  Eigen::MatrixXd edge_im;  // B x K*K

  int batch() const { return static_cast<int>(node.rows()); }

  static FeatureBatch from(const std::vector<StateFeatures>& rows);
  static FeatureBatch gather(const std::vector<StateFeatures>& rows,
                             const std::vector<int>& indices);
  static FeatureBatch replicate(const StateFeatures& row, int copies);
};

struct ForwardCache {
  virtual ~ForwardCache() = default;
};

// Conditional noise predictor eps_hat(x_t, t | state); one row per sample.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;

  virtual const ArchDescriptor& descriptor() const = 0;
  virtual std::vector<ParamBlockSpec> blocks() const = 0;

  ParamStore make_params(Rng& rng) const;

  virtual Eigen::MatrixXd predict(const ParamStore& params,
                                  const FeatureBatch& features,
                                  const Eigen::MatrixXd& x_t, int t) const = 0;

  virtual Eigen::MatrixXd predict_cached(
      const ParamStore& params, const FeatureBatch& features,
      const Eigen::MatrixXd& x_t, int t,
      std::unique_ptr<ForwardCache>& cache) const = 0;

  // Accumulates batch-summed parameter gradients for upstream dL/deps_hat;
  // optionally also returns dL/dx_t.
  virtual void backprop(const ParamStore& params, const ForwardCache& cache,
                        const Eigen::MatrixXd& upstream,
                        Eigen::VectorXd& param_grad,
                        Eigen::MatrixXd* x_t_grad) const = 0;
};

// State-to-raw-power policy without diffusion conditioning.
class DirectPolicy {
 public:
  virtual ~DirectPolicy() = default;

  virtual const ArchDescriptor& descriptor() const = 0;
  virtual std::vector<ParamBlockSpec> blocks() const = 0;

  ParamStore make_params(Rng& rng) const;

  virtual Eigen::MatrixXd predict(const ParamStore& params,
                                  const FeatureBatch& features) const = 0;
  virtual Eigen::MatrixXd predict_cached(
      const ParamStore& params, const FeatureBatch& features,
      std::unique_ptr<ForwardCache>& cache) const = 0;
  virtual void backprop(const ParamStore& params, const ForwardCache& cache,
                        const Eigen::MatrixXd& upstream,
                        Eigen::VectorXd& param_grad) const = 0;
};

class FnnNoisePredictor final : public NoisePredictor {
 public:
  explicit FnnNoisePredictor(ArchDescriptor desc);

  const ArchDescriptor& descriptor() const override { return desc_; }
  std::vector<ParamBlockSpec> blocks() const override;
  Eigen::MatrixXd predict(const ParamStore&, const FeatureBatch&,
                          const Eigen::MatrixXd&, int) const override;
  Eigen::MatrixXd predict_cached(const ParamStore&, const FeatureBatch&,
                                 const Eigen::MatrixXd&, int,
                                 std::unique_ptr<ForwardCache>&) const override;
  void backprop(const ParamStore&, const ForwardCache&, const Eigen::MatrixXd&,
                Eigen::VectorXd&, Eigen::MatrixXd*) const override;

 private:
  Eigen::MatrixXd assemble_input(const FeatureBatch&, const Eigen::MatrixXd&,
                                 int t) const;
  ArchDescriptor desc_;
  std::vector<int> dims_;
};

class GnnNoisePredictor final : public NoisePredictor {
 public:
  explicit GnnNoisePredictor(ArchDescriptor desc);

  const ArchDescriptor& descriptor() const override { return desc_; }
  std::vector<ParamBlockSpec> blocks() const override;
  Eigen::MatrixXd predict(const ParamStore&, const FeatureBatch&,
                          const Eigen::MatrixXd&, int) const override;
  Eigen::MatrixXd predict_cached(const ParamStore&, const FeatureBatch&,
                                 const Eigen::MatrixXd&, int,
                                 std::unique_ptr<ForwardCache>&) const override;
  void backprop(const ParamStore&, const ForwardCache&, const Eigen::MatrixXd&,
                Eigen::VectorXd&, Eigen::MatrixXd*) const override;

 private:
  ArchDescriptor desc_;
};

class FnnDirectPolicy final : public DirectPolicy {
 public:
  explicit FnnDirectPolicy(ArchDescriptor desc);

  const ArchDescriptor& descriptor() const override { return desc_; }
  std::vector<ParamBlockSpec> blocks() const override;
  Eigen::MatrixXd predict(const ParamStore&,
                          const FeatureBatch&) const override;
  Eigen::MatrixXd predict_cached(const ParamStore&, const FeatureBatch&,
                                 std::unique_ptr<ForwardCache>&) const override;
  void backprop(const ParamStore&, const ForwardCache&, const Eigen::MatrixXd&,
                Eigen::VectorXd&) const override;

 private:
  ArchDescriptor desc_;
  std::vector<int> dims_;
};

class GnnDirectPolicy final : public DirectPolicy {
 public:
  explicit GnnDirectPolicy(ArchDescriptor desc);

  const ArchDescriptor& descriptor() const override { return desc_; }
  std::vector<ParamBlockSpec> blocks() const override;
  Eigen::MatrixXd predict(const ParamStore&,
                          const FeatureBatch&) const override;
  Eigen::MatrixXd predict_cached(const ParamStore&, const FeatureBatch&,
                                 std::unique_ptr<ForwardCache>&) const override;
  void backprop(const ParamStore&, const ForwardCache&, const Eigen::MatrixXd&,
                Eigen::VectorXd&) const override;

 private:
  ArchDescriptor desc_;
};

// Scalar SE estimate from (state features, power vector); differentiable in
// both the parameters and the powers.
class ValueNet {
 public:
  explicit ValueNet(ArchDescriptor desc);

  const ArchDescriptor& descriptor() const { return desc_; }
  std::vector<ParamBlockSpec> blocks() const;
  ParamStore make_params(Rng& rng) const;

  Eigen::VectorXd predict(const ParamStore&, const FeatureBatch&,
                          const Eigen::MatrixXd& powers) const;
  Eigen::VectorXd predict_cached(const ParamStore&, const FeatureBatch&,
                                 const Eigen::MatrixXd& powers,
                                 std::unique_ptr<ForwardCache>&) const;
  void backprop(const ParamStore&, const ForwardCache&,
                const Eigen::VectorXd& upstream, Eigen::VectorXd& param_grad,
                Eigen::MatrixXd* powers_grad) const;

 private:
  ArchDescriptor desc_;
  std::vector<int> dims_;
};

std::unique_ptr<NoisePredictor> make_noise_predictor(
    const ArchDescriptor& desc);
std::unique_ptr<DirectPolicy> make_direct_policy(const ArchDescriptor& desc);

// Parameter layout for any architecture kind (checkpoint loading).
std::vector<ParamBlockSpec> arch_blocks(const ArchDescriptor& desc);

// Single-sample conveniences (tests, CLI).
Eigen::VectorXd predict_one(const NoisePredictor& net, const ParamStore& p,
                            const StateFeatures& f, const Eigen::VectorXd& x_t,
                            int t);
Eigen::VectorXd predict_one(const DirectPolicy& net, const ParamStore& p,
                            const StateFeatures& f);

}  // namespace dmbeam
