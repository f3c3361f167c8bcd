#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

// Evaluation aggregates: rank-statistic AUC with half-credit ties, average and
// average-incremental AUC, forgetting rate, and micro-averaged accuracy.

namespace owcl::metrics {

// Probability that a random in-distribution score exceeds a random OOD score,
// ties counted one half. Throws on an empty side.
double auc(std::span<const double> ind_scores, std::span<const double> ood_scores);

double average_auc(std::span<const double> per_task_auc);

// Accuracy matrices indexed [task][stage]; entries in percent, defined for
// stage >= task. til uses the task-restricted prediction, cil the global rule.
struct RunLedger {
  std::vector<std::vector<double>> til_acc;
  std::vector<std::vector<double>> cil_acc;
  std::vector<double> stage_auc;      // stages 1..T-1 (no OOD after the last)
  std::vector<double> final_task_auc; // per-task AUC after the final task
};

// Mean stage AUC over stages before the last task. Throws on single-task runs.
double ai_auc(std::span<const double> stage_auc);
double ai_auc(const RunLedger& ledger);

// Mean of (A_k^init - A_k^t) over k < t, on the given accuracy matrix.
// t is 1-based (number of tasks learned); requires t >= 2.
double forgetting_rate(const std::vector<std::vector<double>>& acc, int t);

double average_accuracy(long correct, long total);  // percent

// Spearman rank correlation with average ranks on ties.
double spearman(std::span<const double> a, std::span<const double> b);

struct MetricsReport {
  double cil_acc = 0.0;
  double til_acc = 0.0;
  double avg_auc = 0.0;
  double ai_auc = 0.0;
  double forgetting = 0.0;      // on the task-restricted matrix
  double forgetting_cil = 0.0;  // on the global-rule matrix
  std::vector<double> per_task_cil;
  std::vector<double> per_task_til;
  std::vector<double> per_task_auc;
  std::uint64_t seed = 0;
  std::string config_hash;
};

std::string metrics_report_to_json(const MetricsReport& report);

}  // namespace owcl::metrics
