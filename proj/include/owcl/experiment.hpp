#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "owcl/dataset.hpp"
#include "owcl/learn.hpp"
#include "owcl/metrics.hpp"

// Experiment orchestration: config parsing/validation/hashing, the sequential
// train -> snapshot -> evaluate pipeline, rule-based re-evaluation of saved
// runs, and CSV aggregation across runs. All stochasticity flows from the
// config seed; repeated runs are byte-identical.

namespace owcl::harness {

struct ExperimentConfig {
  std::string dataset = "shapes";  // shapes | gaussian | idx
  int tasks = 5;
  int classes_per_task = 2;
  int side = 16;           // shapes
  int dim = 8;             // gaussian
  double separation = 6.0; // gaussian
  int train_per_class = 200;
  int test_per_class = 100;
  int ood_classes = 0;     // open-world holdout classes
  double noise = 0.35;     // shapes
  double blurry_fraction = 0.0;
  std::string idx_images;
  std::string idx_labels;
  double idx_test_fraction = 0.2;

  std::string method = "hat_plain";
  std::vector<std::string> rules = {"concat"};
  double odin_tau = 2.0;
  double odin_eps = 0.002;
  double nu = 0.1;  // tempered WP temperature
  double tau = 5.0; // tempered TP temperature

  learn::TrainConfig train;
  std::uint64_t seed = 1;
  std::uint64_t class_order_seed = 0;  // 0: keep the generator's order
};

ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical form: sorted keys, fixed layout; hashes and reruns key off it.
std::string config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);
void validate_config(const ExperimentConfig& cfg);

data::TaskStream build_stream(const ExperimentConfig& cfg);

struct RunResult {
  metrics::MetricsReport report;
  metrics::RunLedger ledger;
};

// Trains tasks sequentially, snapshots after each task, evaluates the first
// configured rule, and writes config.json, checkpoints/task_k, scores/
// stage_k.csv, predictions.csv, memory.bin, and metrics.json under out_dir.
RunResult run_experiment(const ExperimentConfig& cfg,
                         const std::filesystem::path& out_dir);

struct EvalOptions {
  std::string rule = "concat";  // concat | more | more_msp | tempered | odin | calibrated
  double odin_tau = 2.0;
  double odin_eps = 0.002;
  double nu = 0.1;
  double tau = 5.0;
};

// Re-evaluates a finished run directory under a rule; writes
// predictions_<rule>.csv and metrics_<rule>.json next to the run artifacts.
metrics::MetricsReport evaluate_run(const std::filesystem::path& run_dir,
                                    const EvalOptions& opts);

// Aggregates metrics.json files found one level under runs_dir.
std::string report_runs_csv(const std::filesystem::path& runs_dir);

}  // namespace owcl::harness
