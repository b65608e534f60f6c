#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peaklab/dataset.hpp"
#include "peaklab/editors.hpp"
#include "peaklab/metrics.hpp"
#include "peaklab/microlm.hpp"
#include "peaklab/train.hpp"

namespace peak::pipeline {

struct EvalOptions {
  double tau = 0.02;
  std::vector<dataset::FalseSet> false_sets{dataset::FalseSet::kHard,
                                            dataset::FalseSet::kRandom};
  bool pooled_thresholds = false;
  bool filter_all_prompts = false;
};

struct EditorRun {
  std::string label;
  std::string editor;  // "identity" | "rome" | "ft"
  editors::ROMEConfig rome;
  editors::FTConfig ft;
  std::optional<editors::APPConfig> app;
};

struct RunConfig {
  std::uint64_t master_seed = 1;
  std::string out_dir;
  dataset::SyntheticWorldConfig world;
  microlm::ModelConfig model;
  microlm::TrainConfig train;
  EvalOptions eval;
  std::vector<EditorRun> runs;

  void validate() const;  // throws ErrorCode::kConfig
};

// Default experiment: identity sanity run, plain and coupled editors.
RunConfig default_run_config();

RunConfig load_run_config(const std::string& path);
std::string run_config_hash(const RunConfig& config);

// Effective seeds; every derived seed is label-independent so runs that
// differ only in coupling weights see identical randomness.
std::uint64_t world_seed(const RunConfig& config);
std::uint64_t model_seed(const RunConfig& config);
std::uint64_t train_seed(const RunConfig& config);
std::uint64_t edit_seed(const RunConfig& config, std::uint64_t editor_seed,
                        int instance_index);

// Stage entry points. All artifact paths live under config.out_dir.
void cmd_gen(const RunConfig& config);
void cmd_train(const RunConfig& config);
void cmd_edit(const RunConfig& config, const std::vector<std::string>& labels,
              int threads);
void cmd_eval(const RunConfig& config, const std::vector<std::string>& labels,
              int threads);
void cmd_report(const std::string& out_dir);

// Runs gen+train+edit+eval in sequence (used by tests and the acceptance
// suite; the CLI wires the same functions to subcommands).
void run_full_pipeline(const RunConfig& config, int threads = 1);

// Artifact layout helpers.
std::string world_path(const RunConfig& config);
std::string corpus_path(const RunConfig& config);
std::string base_model_path(const RunConfig& config);
std::string filtered_path(const RunConfig& config);
std::string aggregate_csv_path(const RunConfig& config);

// Edited snapshots are stored as deltas against the base model: only the
// touched weight matrix is kept, verified against the base checksum.
void save_model_delta(const microlm::ModelParams& base,
                      const microlm::ModelParams& edited,
                      const std::string& path);
microlm::ModelParams apply_model_delta(const microlm::ModelParams& base,
                                       const std::string& path);

struct AggregateResult {
  std::vector<metrics::ReportRow> rows;
  std::string csv;
};

}  // namespace peak::pipeline
