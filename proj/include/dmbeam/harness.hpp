// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "dmbeam/diffusion.hpp"
#include "dmbeam/env.hpp"
#include "dmbeam/predictors.hpp"
#include "dmbeam/training.hpp"

namespace dmbeam {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kCsvHeader =
    "architecture,rho,seed,mean_se,wmmse_se,se_ratio,n_candidates";
inline constexpr const char* kOutputDirEnv = "DMBEAM_OUT_DIR";
inline constexpr const char* kThreadsEnv = "DMBEAM_THREADS";

// Full sweep description; serialized as a versioned JSON document.
struct ExperimentConfig {
  int version = kConfigVersion;
  int n_antennas = 8;
  int n_users = 4;
  double snr_db = 10.0;
  std::vector<double> rho_list = {0.0, 0.2, 0.4, 0.6, 0.8, 0.95};
  std::vector<ArchKind> architectures = {ArchKind::DmFnn, ArchKind::DmGnn,
                                         ArchKind::Fnn, ArchKind::Gnn};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int n_train = 2048;
  int n_test = 512;
  int n_candidates = 8;
  TrainConfig train;
  std::string output_dir = "out";

  void validate() const;
  ScenarioConfig scenario(double rho, std::uint64_t seed) const;
  std::string to_json_text() const;
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_json_file(const std::string& path);
};

struct EvalRecord {
  std::string architecture;
  double rho = 0.0;
  std::uint64_t seed = 0;
  double mean_se = 0.0;
  double wmmse_se = 0.0;
  double se_ratio = 0.0;
  int n_candidates = 1;
};

struct SweepCell {
  ArchKind arch;
  double rho = 0.0;
  std::uint64_t seed = 0;
};

std::vector<SweepCell> enumerate_cells(const ExperimentConfig& cfg);

// Deterministic datasets: a given (scenario, rho, seed) always yields the
// same channels, independent of architecture and worker schedule.
std::vector<ChannelMatrix> make_dataset(const ScenarioConfig& cfg, int count,
                                        std::uint64_t stream_tag);
inline constexpr std::uint64_t kTrainSetTag = 0x7261696eULL;
inline constexpr std::uint64_t kTestSetTag = 0x74657374ULL;

// Evaluation-side policy abstraction: per-sample achieved SE over a test set.
class ActionPolicy {
 public:
  virtual ~ActionPolicy() = default;
  virtual std::string name() const = 0;
  // wmmse_se holds the per-sample WMMSE SEs on the same test set.
  virtual std::vector<double> achieved_se(
      const std::vector<ChannelMatrix>& test, Environment& env, Rng& rng,
      const std::vector<double>& wmmse_se) const = 0;
};

class DmSamplingPolicy final : public ActionPolicy {
 public:
  DmSamplingPolicy(const NoisePredictor& net, const ParamStore& params,
                   const DiffusionSchedule& sched, int n_candidates);
  std::string name() const override;
  std::vector<double> achieved_se(const std::vector<ChannelMatrix>&,
                                  Environment&, Rng&,
                                  const std::vector<double>&) const override;

 private:
  const NoisePredictor& net_;
  const ParamStore& params_;
  DiffusionSchedule sched_;
  int n_candidates_;
};

class DirectNetPolicy final : public ActionPolicy {
 public:
  DirectNetPolicy(const DirectPolicy& net, const ParamStore& params);
  std::string name() const override;
  std::vector<double> achieved_se(const std::vector<ChannelMatrix>&,
                                  Environment&, Rng&,
                                  const std::vector<double>&) const override;

 private:
  const DirectPolicy& net_;
  const ParamStore& params_;
};

// Oracle pass-through: reports the WMMSE SEs themselves (ratio exactly 1).
class WmmsePassthroughPolicy final : public ActionPolicy {
 public:
  std::string name() const override { return "WMMSE"; }
  std::vector<double> achieved_se(const std::vector<ChannelMatrix>&,
                                  Environment&, Rng&,
                                  const std::vector<double>&) const override;
};

class EqualPowerPolicy final : public ActionPolicy {
 public:
  std::string name() const override { return "EQUAL"; }
  std::vector<double> achieved_se(const std::vector<ChannelMatrix>&,
                                  Environment&, Rng&,
                                  const std::vector<double>&) const override;
};

struct EvalSummary {
  double mean_se = 0.0;
  double wmmse_se = 0.0;
  double se_ratio = 0.0;
};

std::vector<double> wmmse_se_per_sample(const std::vector<ChannelMatrix>& test,
                                        Environment& env);

// Means over the test set of the policy SE and the WMMSE SE, plus their
// ratio. Reuses precomputed per-sample WMMSE SEs when provided.
EvalSummary evaluate(const ActionPolicy& policy,
                     const std::vector<ChannelMatrix>& test, Environment& env,
                     Rng& rng,
                     const std::vector<double>* wmmse_cache = nullptr);

// Trains one (architecture, rho, seed) cell and evaluates it.
EvalRecord run_cell(const ExperimentConfig& cfg, const SweepCell& cell,
                    const std::vector<double>* wmmse_cache = nullptr,
                    ParamStore* params_out = nullptr,
                    TrainTrace* trace_out = nullptr);

// Full experiment: trains every cell, evaluates against WMMSE on the shared
// test sets, writes results.csv (and a best-effort SVG plot) under
// cfg.output_dir, and returns the records sorted by (architecture, rho,
// seed). n_threads <= 0 picks the hardware concurrency; output does not
// depend on the worker count.
std::vector<EvalRecord> run_sweep(const ExperimentConfig& cfg,
                                  int n_threads = 0,
                                  std::ostream* log = nullptr);

void emit_results(const std::vector<EvalRecord>& records,
                  const std::string& csv_path);
std::vector<EvalRecord> parse_results(const std::string& csv_path);

// Best-effort vector plot of mean SE ratio vs rho per architecture.
bool write_se_ratio_plot(const std::vector<EvalRecord>& records,
                         const std::string& svg_path);

// ---------------------------------------------------------------------------
// Checkpoints: versioned container with a JSON metadata header and a raw
// little-endian float64 parameter payload (see README for the byte layout).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  ArchDescriptor arch;
  std::uint64_t seed = 0;
  int diffusion_steps = kDefaultDiffusionSteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  std::string optimizer = "adam";
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { VersionMismatch, Corrupt, ShapeMismatch };
  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  ParamStore params;
  CheckpointMeta meta;
};

void save_checkpoint(const ParamStore& params, const CheckpointMeta& meta,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Rejects a checkpoint whose architecture does not match the expectation.
ParamStore adopt_params(Checkpoint ckpt, const ArchDescriptor& expected);

// Programmatic invariant suite backing the `selftest` CLI verb; returns
// (name, passed) pairs.
std::vector<std::pair<std::string, bool>> run_invariant_suite();

}  // namespace dmbeam
