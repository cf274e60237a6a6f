#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "delia/runio.hpp"
#include "delia/sample.hpp"
#include "delia/trainer.hpp"
#include "delia/vocab.hpp"

namespace delia::experiment {

// Flat key-value experiment config. Every knob of every module appears here;
// unknown keys are rejected and the hash covers the normalized effective
// document (defaults merged with overrides).
struct ExperimentConfig {
  runio::KvConfig kv;
  uint64_t hash = 0;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);

  std::string snapshot() const { return kv.normalized(); }

  int64_t geti(const std::string& key) const;
  double getd(const std::string& key) const;
  std::string gets(const std::string& key) const;
  std::vector<int64_t> int_list(const std::string& key) const;
  std::vector<double> double_list(const std::string& key) const;
};

const std::map<std::string, std::string>& config_defaults();

extern const char* const kStageOrder[7];  // synth pretrain train probe eval theory report

struct StageResult {
  std::string name;
  bool ok = false;
  bool skipped = false;  // already complete in the target directory
  std::string error;
};

struct ExperimentResult {
  std::string dir;
  runio::RunManifest manifest;
  std::vector<StageResult> stages;
  bool all_ok = false;
};

// Executes the requested stages plus their incomplete prerequisites, in
// order, resuming from the manifest in `dir`. An empty stage list means the
// whole pipeline. Completed stages are skipped when their artifacts verify;
// a failing stage leaves a failure marker and stops the pipeline.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& dir,
                                const std::vector<std::string>& stages = {});

// Aggregated tables and figures from one or more finished experiment
// directories. Directories must hold the same config apart from `seeds`.
void write_report(const std::vector<std::string>& experiment_dirs, const std::string& out_dir);

// Categorical-world verification sweep, one row per world and metric.
runio::Csv theory_report(uint64_t seed, int64_t worlds, int64_t world_size, double eps_inf,
                         const std::vector<double>& kl_targets);

// out root precedence: explicit flag, then DELIA_OUT_ROOT, then "delia-out"
std::string resolve_out_root(const std::string& flag_value);

// fresh model trained on the diverse pool alone, full-parameter scope
model::ModelState pretrain_base(const ExperimentConfig& cfg, const vocab::Vocabulary& v,
                                std::vector<data::Sample> diverse,
                                trainer::RunRecord* record = nullptr);

// rehydrates a persisted run (metrics_<name>.csv plus <name>.json) and its
// diverse scale
std::pair<trainer::RunRecord, int64_t> load_run_record(const std::string& run_dir,
                                                       const std::string& name);

}  // namespace delia::experiment
