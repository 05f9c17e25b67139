// SPDX-License-Identifier: Apache-2.0
#include "dmbeam/harness.hpp"

#include <json.hpp>

#include <unistd.h>

#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

namespace dmbeam {

namespace {

using nlohmann::json;

constexpr char kCheckpointMagic[8] = {'D', 'M', 'B', 'M', 'C', 'K', 'P', '1'};
constexpr int kEvalChunk = 256;  // test states per batched sampling call

std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json arch_to_json(const ArchDescriptor& d) {
  json j;
  j["kind"] = arch_kind_name(d.kind);
  j["n_antennas"] = d.n_antennas;
  j["n_users"] = d.n_users;
  j["hidden"] = d.hidden;
  j["gnn_rounds"] = d.gnn_rounds;
  j["gnn_width"] = d.gnn_width;
  j["temb_dim"] = d.temb_dim;
  return j;
}

ArchDescriptor arch_from_json(const json& j) {
  ArchDescriptor d;
  d.kind = arch_kind_from_name(j.at("kind").get<std::string>());
  d.n_antennas = j.at("n_antennas").get<int>();
  d.n_users = j.at("n_users").get<int>();
  d.hidden = j.at("hidden").get<std::vector<int>>();
  d.gnn_rounds = j.at("gnn_rounds").get<int>();
  d.gnn_width = j.at("gnn_width").get<int>();
  d.temb_dim = j.at("temb_dim").get<int>();
  return d;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto work = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv(kThreadsEnv)) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace

void ExperimentConfig::validate() const {
  if (version > kConfigVersion)
    throw std::invalid_argument("config version is newer than this build");
  if (rho_list.empty()) throw std::invalid_argument("rho list must be nonempty");
  for (double r : rho_list)
    if (!(r >= 0.0 && r <= 1.0))
      throw std::invalid_argument("rho values must lie in [0, 1]");
  if (architectures.empty())
    throw std::invalid_argument("architecture list must be nonempty");
  for (ArchKind a : architectures)
    if (a == ArchKind::Value)
      throw std::invalid_argument("VALUE is not a sweep architecture");
  if (seeds.empty()) throw std::invalid_argument("seed list must be nonempty");
  if (n_train < 1 || n_test < 1)
    throw std::invalid_argument("dataset sizes must be >= 1");
  if (n_candidates < 1)
    throw std::invalid_argument("n_candidates must be >= 1");
  scenario(rho_list.front(), seeds.front()).validate();
  train.validate();
}

ScenarioConfig ExperimentConfig::scenario(double rho,
                                          std::uint64_t seed) const {
  ScenarioConfig sc =
      ScenarioConfig::from_snr_db(n_antennas, n_users, snr_db, rho, seed);
  return sc;
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["version"] = version;
  j["scenario"] = {{"n_antennas", n_antennas},
                   {"n_users", n_users},
                   {"snr_db", snr_db}};
  std::vector<std::string> arch_names;
  for (ArchKind a : architectures) arch_names.push_back(arch_kind_name(a));
  j["sweep"] = {{"rho", rho_list},       {"architectures", arch_names},
                {"seeds", seeds},        {"n_train", n_train},
                {"n_test", n_test},      {"n_candidates", n_candidates}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"action_improve_steps", train.action_improve_steps},
                {"action_step_size", train.action_step_size},
                {"diffusion_steps", train.diffusion_steps},
                {"beta_start", train.beta_start},
                {"beta_end", train.beta_end},
                {"optimizer", train.optimizer},
                {"refresh_fraction", train.refresh_fraction}};
  j["output_dir"] = output_dir;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    cfg.version = j.value("version", kConfigVersion);
    if (j.contains("scenario")) {
      const auto& s = j["scenario"];
      cfg.n_antennas = s.value("n_antennas", cfg.n_antennas);
      cfg.n_users = s.value("n_users", cfg.n_users);
      cfg.snr_db = s.value("snr_db", cfg.snr_db);
    }
    if (j.contains("sweep")) {
      const auto& s = j["sweep"];
      if (s.contains("rho")) cfg.rho_list = s["rho"].get<std::vector<double>>();
      if (s.contains("architectures")) {
        cfg.architectures.clear();
        for (const auto& name : s["architectures"])
          cfg.architectures.push_back(
              arch_kind_from_name(name.get<std::string>()));
      }
      if (s.contains("seeds"))
        cfg.seeds = s["seeds"].get<std::vector<std::uint64_t>>();
      cfg.n_train = s.value("n_train", cfg.n_train);
      cfg.n_test = s.value("n_test", cfg.n_test);
      cfg.n_candidates = s.value("n_candidates", cfg.n_candidates);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      cfg.train.epochs = t.value("epochs", cfg.train.epochs);
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.learning_rate =
          t.value("learning_rate", cfg.train.learning_rate);
      cfg.train.action_improve_steps =
          t.value("action_improve_steps", cfg.train.action_improve_steps);
      cfg.train.action_step_size =
          t.value("action_step_size", cfg.train.action_step_size);
      cfg.train.diffusion_steps =
          t.value("diffusion_steps", cfg.train.diffusion_steps);
      cfg.train.beta_start = t.value("beta_start", cfg.train.beta_start);
      cfg.train.beta_end = t.value("beta_end", cfg.train.beta_end);
      cfg.train.optimizer = t.value("optimizer", cfg.train.optimizer);
      cfg.train.refresh_fraction =
          t.value("refresh_fraction", cfg.train.refresh_fraction);
    }
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config field error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::vector<SweepCell> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<SweepCell> cells;
  for (ArchKind a : cfg.architectures)
    for (double rho : cfg.rho_list)
      for (std::uint64_t seed : cfg.seeds) cells.push_back({a, rho, seed});
  return cells;
}

std::vector<ChannelMatrix> make_dataset(const ScenarioConfig& cfg, int count,
                                        std::uint64_t stream_tag) {
  Rng rng(Rng::mix(Rng::mix(cfg.seed, Rng::hash_double(cfg.rho)), stream_tag));
  std::vector<ChannelMatrix> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(sample_channel(cfg, rng));
  return out;
}

DmSamplingPolicy::DmSamplingPolicy(const NoisePredictor& net,
                                   const ParamStore& params,
                                   const DiffusionSchedule& sched,
                                   int n_candidates)
    : net_(net), params_(params), sched_(sched), n_candidates_(n_candidates) {
  if (n_candidates < 1)
    throw std::invalid_argument("n_candidates must be >= 1");
}

std::string DmSamplingPolicy::name() const {
  return arch_kind_name(net_.descriptor().kind);
}

std::vector<double> DmSamplingPolicy::achieved_se(
    const std::vector<ChannelMatrix>& test, Environment& env, Rng& rng,
    const std::vector<double>& /*wmmse_se*/) const {
  const int n = static_cast<int>(test.size());
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int start = 0; start < n; start += kEvalChunk) {
    const int chunk = std::min(kEvalChunk, n - start);
    std::vector<StateFeatures> feats;
    feats.reserve(static_cast<std::size_t>(chunk));
    for (int i = 0; i < chunk; ++i)
      feats.push_back(compute_state_features(test[start + i]));
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(chunk) * n_candidates_);
    for (int i = 0; i < chunk; ++i)
      for (int c = 0; c < n_candidates_; ++c) rows.push_back(i);
    const FeatureBatch fb = FeatureBatch::gather(feats, rows);
    const Eigen::MatrixXd raw =
        sample_raw_chains(net_, params_, fb, sched_, rng);
    for (int i = 0; i < chunk; ++i) {
      double best = -1.0;
      for (int c = 0; c < n_candidates_; ++c) {
        const Eigen::VectorXd r =
            raw.row(static_cast<Eigen::Index>(i) * n_candidates_ + c)
                .transpose();
        const double se = env.se_of_action(
            test[start + i], normalize_power(r, env.budget()));
        best = std::max(best, se);
      }
      out[static_cast<std::size_t>(start + i)] = best;
    }
  }
  return out;
}

DirectNetPolicy::DirectNetPolicy(const DirectPolicy& net,
                                 const ParamStore& params)
    : net_(net), params_(params) {}

std::string DirectNetPolicy::name() const {
  return arch_kind_name(net_.descriptor().kind);
}

std::vector<double> DirectNetPolicy::achieved_se(
    const std::vector<ChannelMatrix>& test, Environment& env, Rng& /*rng*/,
    const std::vector<double>& /*wmmse_se*/) const {
  const int n = static_cast<int>(test.size());
  std::vector<double> out(static_cast<std::size_t>(n));
  std::vector<StateFeatures> feats;
  feats.reserve(test.size());
  for (const auto& h : test) feats.push_back(compute_state_features(h));
  const FeatureBatch fb = FeatureBatch::from(feats);
  const Eigen::MatrixXd raw = net_.predict(params_, fb);
  for (int i = 0; i < n; ++i) {
    const PowerAllocation p =
        normalize_power(raw.row(i).transpose(), env.budget());
    out[static_cast<std::size_t>(i)] = env.se_of_action(test[i], p);
  }
  return out;
}

std::vector<double> WmmsePassthroughPolicy::achieved_se(
    const std::vector<ChannelMatrix>& /*test*/, Environment& /*env*/,
    Rng& /*rng*/, const std::vector<double>& wmmse_se) const {
  return wmmse_se;
}

std::vector<double> EqualPowerPolicy::achieved_se(
    const std::vector<ChannelMatrix>& test, Environment& env, Rng& /*rng*/,
    const std::vector<double>& /*wmmse_se*/) const {
  std::vector<double> out;
  out.reserve(test.size());
  const PowerAllocation p = env.equal_power();
  for (const auto& h : test) out.push_back(env.se_of_action(h, p));
  return out;
}

std::vector<double> wmmse_se_per_sample(const std::vector<ChannelMatrix>& test,
                                        Environment& env) {
  std::vector<double> out;
  out.reserve(test.size());
  for (const auto& h : test) out.push_back(env.wmmse(h).se_trace.back());
  return out;
}

EvalSummary evaluate(const ActionPolicy& policy,
                     const std::vector<ChannelMatrix>& test, Environment& env,
                     Rng& rng, const std::vector<double>* wmmse_cache) {
  if (test.empty()) throw std::invalid_argument("test set must be nonempty");
  const std::vector<double> wmmse_se =
      wmmse_cache ? *wmmse_cache : wmmse_se_per_sample(test, env);
  const std::vector<double> se = policy.achieved_se(test, env, rng, wmmse_se);

  EvalSummary s;
  double acc = 0.0, acc_w = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    acc += se[i];
    acc_w += wmmse_se[i];
  }
  s.mean_se = acc / static_cast<double>(test.size());
  s.wmmse_se = acc_w / static_cast<double>(test.size());
  s.se_ratio = s.mean_se / s.wmmse_se;
  return s;
}

EvalRecord run_cell(const ExperimentConfig& cfg, const SweepCell& cell,
                    const std::vector<double>* wmmse_cache,
                    ParamStore* params_out, TrainTrace* trace_out) {
  const ScenarioConfig sc = cfg.scenario(cell.rho, cell.seed);
  Environment env(sc);
  const std::vector<ChannelMatrix> train_set =
      make_dataset(sc, cfg.n_train, kTrainSetTag);
  const std::vector<ChannelMatrix> test_set =
      make_dataset(sc, cfg.n_test, kTestSetTag);

  TrainConfig tc = cfg.train;
  tc.seed = Rng::mix(Rng::mix(cell.seed, static_cast<std::uint64_t>(cell.arch) + 17),
                     Rng::hash_double(cell.rho));
  const DiffusionSchedule sched = tc.schedule();

  ArchDescriptor desc;
  desc.kind = cell.arch;
  desc.n_antennas = cfg.n_antennas;
  desc.n_users = cfg.n_users;

  Rng eval_rng(Rng::mix(tc.seed, 0xeba1eba1ULL));

  EvalRecord rec;
  rec.architecture = arch_kind_name(cell.arch);
  rec.rho = cell.rho;
  rec.seed = cell.seed;

  EvalSummary summary;
  if (arch_uses_diffusion(cell.arch)) {
    const auto net = make_noise_predictor(desc);
    ParamStore params =
        train_model_based_unsup(*net, train_set, env, sched, tc, trace_out);
    const DmSamplingPolicy policy(*net, params, sched, cfg.n_candidates);
    summary = evaluate(policy, test_set, env, eval_rng, wmmse_cache);
    rec.n_candidates = cfg.n_candidates;
    if (params_out) *params_out = std::move(params);
  } else {
    const auto net = make_direct_policy(desc);
    ParamStore params = train_direct_baseline(*net, train_set, env, tc,
                                              trace_out);
    const DirectNetPolicy policy(*net, params);
    summary = evaluate(policy, test_set, env, eval_rng, wmmse_cache);
    rec.n_candidates = 1;
    if (params_out) *params_out = std::move(params);
  }
  rec.mean_se = summary.mean_se;
  rec.wmmse_se = summary.wmmse_se;
  rec.se_ratio = summary.se_ratio;
  return rec;
}

std::vector<EvalRecord> run_sweep(const ExperimentConfig& cfg, int n_threads,
                                  std::ostream* log) {
  cfg.validate();
  const int threads = resolve_threads(n_threads);
  const std::vector<SweepCell> cells = enumerate_cells(cfg);

  // Phase 1: per-(rho, seed) WMMSE on the shared test sets; identical for
  // every architecture by construction.
  std::vector<std::pair<double, std::uint64_t>> combos;
  std::map<std::pair<double, std::uint64_t>, std::size_t> combo_index;
  for (double rho : cfg.rho_list)
    for (std::uint64_t seed : cfg.seeds) {
      combo_index.emplace(std::make_pair(rho, seed), combos.size());
      combos.emplace_back(rho, seed);
    }
  std::vector<std::vector<double>> wmmse_store(combos.size());
  std::mutex log_mutex;
  parallel_for(static_cast<int>(combos.size()), threads, [&](int i) {
    const auto& [rho, seed] = combos[static_cast<std::size_t>(i)];
    const ScenarioConfig sc = cfg.scenario(rho, seed);
    Environment env(sc);
    const auto test_set = make_dataset(sc, cfg.n_test, kTestSetTag);
    wmmse_store[static_cast<std::size_t>(i)] =
        wmmse_se_per_sample(test_set, env);
    if (log) {
      std::lock_guard<std::mutex> lock(log_mutex);
      *log << "[wmmse] rho=" << rho << " seed=" << seed << " done\n";
    }
  });

  // Phase 2: train and evaluate every cell.
  std::vector<EvalRecord> records(cells.size());
  parallel_for(static_cast<int>(cells.size()), threads, [&](int i) {
    const SweepCell& cell = cells[static_cast<std::size_t>(i)];
    const auto& wmmse =
        wmmse_store[combo_index.at(std::make_pair(cell.rho, cell.seed))];
    records[static_cast<std::size_t>(i)] = run_cell(cfg, cell, &wmmse);
    if (log) {
      std::lock_guard<std::mutex> lock(log_mutex);
      const EvalRecord& r = records[static_cast<std::size_t>(i)];
      *log << "[cell " << (i + 1) << "/" << cells.size() << "] "
           << r.architecture << " rho=" << r.rho << " seed=" << r.seed
           << " se_ratio=" << r.se_ratio << "\n";
    }
  });

  std::sort(records.begin(), records.end(),
            [](const EvalRecord& a, const EvalRecord& b) {
              if (a.architecture != b.architecture)
                return a.architecture < b.architecture;
              if (a.rho != b.rho) return a.rho < b.rho;
              return a.seed < b.seed;
            });

  std::filesystem::create_directories(cfg.output_dir);
  emit_results(records, cfg.output_dir + "/results.csv");
  write_se_ratio_plot(records, cfg.output_dir + "/se_ratio.svg");
  return records;
}

void emit_results(const std::vector<EvalRecord>& records,
                  const std::string& csv_path) {
  if (records.empty()) throw std::invalid_argument("no records to emit");
  std::vector<EvalRecord> sorted = records;
  std::sort(sorted.begin(), sorted.end(),
            [](const EvalRecord& a, const EvalRecord& b) {
              if (a.architecture != b.architecture)
                return a.architecture < b.architecture;
              if (a.rho != b.rho) return a.rho < b.rho;
              return a.seed < b.seed;
            });
  const std::filesystem::path path(csv_path);
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + csv_path);
  out << kCsvHeader << "\n";
  for (const auto& r : sorted) {
    out << r.architecture << ',' << format_double(r.rho) << ',' << r.seed
        << ',' << format_double(r.mean_se) << ',' << format_double(r.wmmse_se)
        << ',' << format_double(r.se_ratio) << ',' << r.n_candidates << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + csv_path);
}

std::vector<EvalRecord> parse_results(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw std::runtime_error("unexpected CSV header in " + csv_path);
  std::vector<EvalRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 7)
      throw std::runtime_error("malformed CSV row: " + line);
    EvalRecord r;
    r.architecture = fields[0];
    r.rho = std::strtod(fields[1].c_str(), nullptr);
    r.seed = std::strtoull(fields[2].c_str(), nullptr, 10);
    r.mean_se = std::strtod(fields[3].c_str(), nullptr);
    r.wmmse_se = std::strtod(fields[4].c_str(), nullptr);
    r.se_ratio = std::strtod(fields[5].c_str(), nullptr);
    r.n_candidates = std::atoi(fields[6].c_str());
    records.push_back(std::move(r));
  }
  return records;
}

bool write_se_ratio_plot(const std::vector<EvalRecord>& records,
                         const std::string& svg_path) {
  try {
    // Seed-averaged ratio per (architecture, rho).
    std::map<std::string, std::map<double, std::pair<double, int>>> series;
    for (const auto& r : records) {
      auto& cell = series[r.architecture][r.rho];
      cell.first += r.se_ratio;
      cell.second += 1;
    }
    double x_min = 1e300, x_max = -1e300, y_min = 1e300, y_max = -1e300;
    for (const auto& [name, pts] : series) {
      for (const auto& [rho, acc] : pts) {
        const double y = acc.first / acc.second;
        x_min = std::min(x_min, rho);
        x_max = std::max(x_max, rho);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
      }
    }
    if (!(x_max > x_min)) x_max = x_min + 1.0;
    y_min = std::min(y_min - 0.02, 0.98 * y_min);
    y_max = std::max(y_max + 0.02, 1.0);

    const double w = 640, h = 440, ml = 70, mr = 20, mt = 20, mb = 50;
    auto sx = [&](double x) {
      return ml + (x - x_min) / (x_max - x_min) * (w - ml - mr);
    };
    auto sy = [&](double y) {
      return h - mb - (y - y_min) / (y_max - y_min) * (h - mt - mb);
    };
    const std::vector<std::string> palette = {"#1f77b4", "#d62728", "#2ca02c",
                                              "#ff7f0e", "#9467bd", "#8c564b"};

    const std::filesystem::path path(svg_path);
    if (path.has_parent_path())
      std::filesystem::create_directories(path.parent_path());
    std::ofstream out(svg_path, std::ios::trunc);
    if (!out) return false;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
        << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
        << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr
        << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
        << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
      const double yv = y_min + (y_max - y_min) * i / 5.0;
      out << "<text x=\"" << ml - 8 << "\" y=\"" << sy(yv) + 4
          << "\" font-size=\"11\" text-anchor=\"end\">"
          << json(std::round(yv * 1000) / 1000).dump() << "</text>\n";
      const double xv = x_min + (x_max - x_min) * i / 5.0;
      out << "<text x=\"" << sx(xv) << "\" y=\"" << h - mb + 18
          << "\" font-size=\"11\" text-anchor=\"middle\">"
          << json(std::round(xv * 100) / 100).dump() << "</text>\n";
    }
    out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12
        << "\" font-size=\"13\" text-anchor=\"middle\">channel correlation "
           "weight</text>\n";
    out << "<text x=\"16\" y=\"" << (mt + h - mb) / 2
        << "\" font-size=\"13\" transform=\"rotate(-90 16 "
        << (mt + h - mb) / 2 << ")\" text-anchor=\"middle\">SE ratio vs "
           "WMMSE</text>\n";
    int idx = 0;
    for (const auto& [name, pts] : series) {
      const std::string& color = palette[idx % palette.size()];
      out << "<polyline fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"2\" points=\"";
      for (const auto& [rho, acc] : pts)
        out << sx(rho) << "," << sy(acc.first / acc.second) << " ";
      out << "\"/>\n";
      out << "<text x=\"" << w - mr - 120 << "\" y=\"" << mt + 16 + 16 * idx
          << "\" font-size=\"12\" fill=\"" << color << "\">" << name
          << "</text>\n";
      ++idx;
    }
    out << "</svg>\n";
    return static_cast<bool>(out);
  } catch (...) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json meta_to_json(const CheckpointMeta& meta) {
  json j;
  j["format_version"] = kCheckpointVersion;
  j["arch"] = arch_to_json(meta.arch);
  j["seed"] = meta.seed;
  j["schedule"] = {{"steps", meta.diffusion_steps},
                   {"beta_start", meta.beta_start},
                   {"beta_end", meta.beta_end}};
  j["optimizer"] = meta.optimizer;
  return j;
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta meta;
  meta.arch = arch_from_json(j.at("arch"));
  meta.seed = j.at("seed").get<std::uint64_t>();
  meta.diffusion_steps = j.at("schedule").at("steps").get<int>();
  meta.beta_start = j.at("schedule").at("beta_start").get<double>();
  meta.beta_end = j.at("schedule").at("beta_end").get<double>();
  meta.optimizer = j.at("optimizer").get<std::string>();
  return meta;
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return static_cast<bool>(in);
}

}  // namespace

void save_checkpoint(const ParamStore& params, const CheckpointMeta& meta,
                     const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

  const std::string meta_text = meta_to_json(meta).dump();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod(out, kCheckpointVersion);
  write_pod(out, std::uint32_t{0});
  write_pod(out, static_cast<std::uint64_t>(meta_text.size()));
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  write_pod(out, static_cast<std::uint64_t>(params.size()));
  out.write(reinterpret_cast<const char*>(params.data()),
            static_cast<std::streamsize>(params.size() * sizeof(double)));
  const std::uint64_t checksum =
      fnv1a64(reinterpret_cast<const unsigned char*>(params.data()),
              params.size() * sizeof(double));
  write_pod(out, checksum);
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "not a checkpoint file: " + path);
  std::uint32_t version = 0, reserved = 0;
  if (!read_pod(in, version) || !read_pod(in, reserved))
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "truncated checkpoint header: " + path);
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "unsupported checkpoint version " +
                              std::to_string(version));
  std::uint64_t meta_len = 0;
  if (!read_pod(in, meta_len) || meta_len > (1ULL << 20))
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "bad metadata length: " + path);
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in)
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "truncated metadata: " + path);
  CheckpointMeta meta;
  try {
    meta = meta_from_json(json::parse(meta_text));
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          std::string("metadata parse error: ") + e.what());
  }

  std::uint64_t count = 0;
  if (!read_pod(in, count))
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "truncated parameter count: " + path);
  ParamStore params(arch_blocks(meta.arch));
  if (params.size() != count)
    throw CheckpointError(
        CheckpointError::Kind::Corrupt,
        "parameter count does not match the stored architecture");
  in.read(reinterpret_cast<char*>(params.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in)
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "truncated parameter payload: " + path);
  std::uint64_t checksum = 0;
  if (!read_pod(in, checksum))
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "missing checksum: " + path);
  const std::uint64_t actual =
      fnv1a64(reinterpret_cast<const unsigned char*>(params.data()),
              params.size() * sizeof(double));
  if (checksum != actual)
    throw CheckpointError(CheckpointError::Kind::Corrupt,
                          "checksum mismatch: " + path);
  return Checkpoint{std::move(params), std::move(meta)};
}

ParamStore adopt_params(Checkpoint ckpt, const ArchDescriptor& expected) {
  if (!(ckpt.meta.arch == expected))
    throw CheckpointError(
        CheckpointError::Kind::ShapeMismatch,
        "checkpoint architecture does not match the expected descriptor");
  return std::move(ckpt.params);
}

// ---------------------------------------------------------------------------
// Invariant suite (selftest verb)

namespace {

bool check_schedule() {
  const DiffusionSchedule s = default_schedule();
  for (int t = 2; t <= s.steps; ++t)
    if (!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1))) return false;
  return s.alpha_bar_at(s.steps) < 0.05;
}

bool check_diffusion_identities() {
  Rng rng(7);
  const DiffusionSchedule s = default_schedule();
  Eigen::VectorXd x0(4), eps(4);
  for (int i = 0; i < 4; ++i) {
    x0[i] = rng.normal();
    eps[i] = rng.normal();
  }
  const int t = 20;
  const NoisySample xt = forward_diffuse(x0, t, eps, s);
  const Eigen::VectorXd expect = std::sqrt(s.alpha_bar_at(t)) * x0 +
                                 std::sqrt(1.0 - s.alpha_bar_at(t)) * eps;
  if ((xt.x - expect).lpNorm<Eigen::Infinity>() > 1e-12) return false;

  // Deterministic part of the reverse step equals the DDPM posterior mean
  // with the epsilon-implied x0 estimate.
  Rng z1(11), z2(11);
  const Eigen::VectorXd prev = reverse_step(xt.x, 1, eps, s, z1);
  const double ab = s.alpha_bar_at(1);
  const Eigen::VectorXd x0_hat =
      (xt.x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
  (void)z2;
  const Eigen::VectorXd mean_direct =
      (xt.x - s.beta_at(1) / std::sqrt(1.0 - ab) * eps) /
      std::sqrt(s.alpha_at(1));
  return (prev - mean_direct).lpNorm<Eigen::Infinity>() < 1e-12 &&
         x0_hat.allFinite();
}

bool check_normalization() {
  Rng rng(3);
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd raw(4);
    for (int i = 0; i < 4; ++i) raw[i] = 4.0 * rng.normal();
    const PowerAllocation p = normalize_power(raw, 10.0);
    if (std::abs(p.total() - 10.0) > 1e-9) return false;
    if ((p.p.array() < 0.0).any()) return false;
  }
  return true;
}

bool check_env_gradient() {
  ScenarioConfig sc = ScenarioConfig::from_snr_db(4, 3, 10.0, 0.3, 21);
  Rng rng(5);
  for (int it = 0; it < 5; ++it) {
    const ChannelMatrix h = sample_channel(sc, rng);
    Eigen::VectorXd p(3);
    for (int i = 0; i < 3; ++i) p[i] = rng.uniform(0.5, 4.0);
    const Eigen::VectorXd g = se_gradient(h, p, sc.noise_power);
    for (int i = 0; i < 3; ++i) {
      Eigen::VectorXd hi = p, lo = p;
      hi[i] += 1e-5;
      lo[i] -= 1e-5;
      const double fd = (sum_se_for_powers(h, hi, sc.noise_power) -
                         sum_se_for_powers(h, lo, sc.noise_power)) /
                        2e-5;
      if (std::abs(fd - g[i]) > 1e-4 * std::max(1.0, std::abs(fd)))
        return false;
    }
  }
  return true;
}

bool check_gnn_equivariance() {
  ArchDescriptor desc;
  desc.kind = ArchKind::DmGnn;
  desc.n_antennas = 4;
  desc.n_users = 3;
  GnnNoisePredictor net(desc);
  Rng rng(9);
  const ParamStore params = net.make_params(rng);
  ScenarioConfig sc = ScenarioConfig::from_snr_db(4, 3, 10.0, 0.4, 2);
  const ChannelMatrix h = sample_channel(sc, rng);
  Eigen::VectorXd x_t(3);
  for (int i = 0; i < 3; ++i) x_t[i] = rng.normal();
  const Eigen::VectorXd out =
      predict_one(net, params, compute_state_features(h), x_t, 5);

  const std::vector<int> perm = {2, 0, 1};
  ChannelMatrix hp;
  hp.h.resize(h.h.rows(), h.h.cols());
  Eigen::VectorXd x_tp(3);
  for (int c = 0; c < 3; ++c) {
    hp.h.col(c) = h.h.col(perm[c]);
    x_tp[c] = x_t[perm[c]];
  }
  const Eigen::VectorXd outp =
      predict_one(net, params, compute_state_features(hp), x_tp, 5);
  for (int c = 0; c < 3; ++c)
    if (std::abs(outp[c] - out[perm[c]]) > 1e-9) return false;

  // Antenna permutation leaves the features, hence the output, unchanged.
  ChannelMatrix ha;
  ha.h = h.h;
  ha.h.row(0).swap(ha.h.row(3));
  const Eigen::VectorXd outa =
      predict_one(net, params, compute_state_features(ha), x_t, 5);
  return (outa - out).lpNorm<Eigen::Infinity>() < 1e-9;
}

bool check_buffer_monotone() {
  ScenarioConfig sc = ScenarioConfig::from_snr_db(4, 2, 10.0, 0.5, 31);
  Environment env(sc);
  Rng rng(13);
  const auto states = env.sample_channels(8, rng);
  ArchDescriptor desc;
  desc.kind = ArchKind::DmFnn;
  desc.n_antennas = 4;
  desc.n_users = 2;
  desc.hidden = {32, 32};
  FnnNoisePredictor net(desc);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.diffusion_steps = 8;
  TrainTrace trace;
  train_model_based_unsup(net, states, env, tc.schedule(), tc, &trace);
  for (std::size_t i = 1; i < trace.buffer_mean_se.size(); ++i)
    if (trace.buffer_mean_se[i] < trace.buffer_mean_se[i - 1]) return false;
  return trace.buffer_mean_se.size() == 3;
}

bool check_checkpoint_roundtrip() {
  ArchDescriptor desc;
  desc.kind = ArchKind::Fnn;
  desc.n_antennas = 3;
  desc.n_users = 2;
  desc.hidden = {16};
  FnnDirectPolicy net(desc);
  Rng rng(17);
  const ParamStore params = net.make_params(rng);
  CheckpointMeta meta;
  meta.arch = desc;
  meta.seed = 17;
  const std::string path =
      (std::filesystem::temp_directory_path() /
       ("dmbeam-selftest-ckpt-" + std::to_string(::getpid()) + ".bin"))
          .string();
  save_checkpoint(params, meta, path);
  const Checkpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  return back.params.values() == params.values() &&
         back.meta.arch == desc;
}

bool check_csv_roundtrip() {
  std::vector<EvalRecord> records;
  Rng rng(23);
  for (int i = 0; i < 6; ++i) {
    EvalRecord r;
    r.architecture = (i % 2) ? "GNN" : "DM-GNN";
    r.rho = 0.1 * i;
    r.seed = static_cast<std::uint64_t>(10 - i);
    r.mean_se = rng.uniform(2.0, 9.0);
    r.wmmse_se = r.mean_se / rng.uniform(0.8, 0.99);
    r.se_ratio = r.mean_se / r.wmmse_se;
    r.n_candidates = 8;
    records.push_back(r);
  }
  const std::string path =
      (std::filesystem::temp_directory_path() /
       ("dmbeam-selftest-csv-" + std::to_string(::getpid()) + ".csv"))
          .string();
  emit_results(records, path);
  const auto parsed = parse_results(path);
  std::ifstream in1(path);
  std::stringstream first;
  first << in1.rdbuf();
  emit_results(records, path);
  std::ifstream in2(path);
  std::stringstream second;
  second << in2.rdbuf();
  std::filesystem::remove(path);
  if (first.str() != second.str()) return false;
  if (parsed.size() != records.size()) return false;
  for (const auto& r : parsed) {
    bool found = false;
    for (const auto& o : records)
      found = found || (o.architecture == r.architecture && o.rho == r.rho &&
                        o.seed == r.seed && o.mean_se == r.mean_se &&
                        o.wmmse_se == r.wmmse_se && o.se_ratio == r.se_ratio);
    if (!found) return false;
  }
  return true;
}

bool check_wmmse_monotone() {
  ScenarioConfig sc = ScenarioConfig::from_snr_db(4, 3, 10.0, 0.2, 41);
  Rng rng(29);
  for (int it = 0; it < 5; ++it) {
    const ChannelMatrix h = sample_channel(sc, rng);
    const WmmseResult res = wmmse(h, sc.noise_power, sc.power_budget);
    for (std::size_t i = 1; i < res.se_trace.size(); ++i)
      if (res.se_trace[i] < res.se_trace[i - 1] - 1e-8) return false;
    if (res.w.total_power() > sc.power_budget + 1e-6) return false;
  }
  return true;
}

bool check_unitary_invariance() {
  ScenarioConfig sc = ScenarioConfig::from_snr_db(6, 3, 10.0, 0.5, 57);
  Rng rng(31);
  for (int it = 0; it < 5; ++it) {
    const ChannelMatrix h = sample_channel(sc, rng);
    Eigen::MatrixXcd g(6, 6);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) g(r, c) = rng.cnormal();
    const Eigen::HouseholderQR<Eigen::MatrixXcd> qr(g);
    const Eigen::MatrixXcd q = qr.householderQ();
    ChannelMatrix hu;
    hu.h = q * h.h;
    Eigen::VectorXd raw(3);
    for (int i = 0; i < 3; ++i) raw[i] = rng.normal();
    const PowerAllocation p = normalize_power(raw, sc.power_budget);
    const double a = se_of_action(h, p, sc.noise_power);
    const double b = se_of_action(hu, p, sc.noise_power);
    if (std::abs(a - b) > 1e-9) return false;
  }
  return true;
}

}  // namespace

std::vector<std::pair<std::string, bool>> run_invariant_suite() {
  std::vector<std::pair<std::string, bool>> results;
  results.emplace_back("schedule monotone, terminal alpha_bar < 0.05",
                       check_schedule());
  results.emplace_back("forward/reverse diffusion identities",
                       check_diffusion_identities());
  results.emplace_back("normalization feasibility", check_normalization());
  results.emplace_back("se_gradient matches finite differences",
                       check_env_gradient());
  results.emplace_back("GNN permutation equivariance + antenna invariance",
                       check_gnn_equivariance());
  results.emplace_back("buffer SE monotonicity", check_buffer_monotone());
  results.emplace_back("checkpoint round-trip", check_checkpoint_roundtrip());
  results.emplace_back("CSV round-trip and determinism", check_csv_roundtrip());
  results.emplace_back("WMMSE trace monotone and feasible",
                       check_wmmse_monotone());
  results.emplace_back("unitary invariance of the SE objective",
                       check_unitary_invariance());
  return results;
}

}  // namespace dmbeam
