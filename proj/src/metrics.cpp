#include "owcl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace owcl::metrics {

double auc(std::span<const double> ind_scores,
           std::span<const double> ood_scores) {
  if (ind_scores.empty() || ood_scores.empty())
    throw std::invalid_argument("auc: empty score list");
  // Rank-sum with midranks for ties: U / (n_ind * n_ood).
  struct Entry {
    double score;
    bool ind;
  };
  std::vector<Entry> all;
  all.reserve(ind_scores.size() + ood_scores.size());
  for (double s : ind_scores) all.push_back({s, true});
  for (double s : ood_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });
  double rank_sum_ind = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (all[k].ind) rank_sum_ind += midrank;
    i = j;
  }
  const double n1 = static_cast<double>(ind_scores.size());
  const double n0 = static_cast<double>(ood_scores.size());
  const double u = rank_sum_ind - n1 * (n1 + 1.0) / 2.0;
  return u / (n1 * n0);
}

double average_auc(std::span<const double> per_task_auc) {
  if (per_task_auc.empty())
    throw std::invalid_argument("average_auc: empty input");
  return std::accumulate(per_task_auc.begin(), per_task_auc.end(), 0.0) /
         static_cast<double>(per_task_auc.size());
}

double ai_auc(std::span<const double> stage_auc) {
  if (stage_auc.empty())
    throw std::invalid_argument("ai_auc: needs at least two tasks");
  return std::accumulate(stage_auc.begin(), stage_auc.end(), 0.0) /
         static_cast<double>(stage_auc.size());
}

double ai_auc(const RunLedger& ledger) { return ai_auc(ledger.stage_auc); }

double forgetting_rate(const std::vector<std::vector<double>>& acc, int t) {
  if (t < 2) throw std::invalid_argument("forgetting_rate: t must be >= 2");
  double sum = 0.0;
  for (int k = 0; k + 1 < t; ++k)
    sum += acc.at(k).at(k) - acc.at(k).at(t - 1);
  return sum / static_cast<double>(t - 1);
}

double average_accuracy(long correct, long total) {
  if (total <= 0) throw std::invalid_argument("average_accuracy: no samples");
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

std::vector<double> midranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && v[order[j]] == v[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mid;
    i = j;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman: need matched lists of length >= 2");
  const std::vector<double> ra = midranks(a);
  const std::vector<double> rb = midranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

std::string metrics_report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["cil_acc"] = report.cil_acc;
  j["til_acc"] = report.til_acc;
  j["avg_auc"] = report.avg_auc;
  j["ai_auc"] = report.ai_auc;
  j["forgetting"] = report.forgetting;
  j["forgetting_cil"] = report.forgetting_cil;
  nlohmann::json per_task = nlohmann::json::array();
  for (std::size_t k = 0; k < report.per_task_cil.size(); ++k) {
    nlohmann::json t;
    t["task"] = k;
    t["cil_acc"] = report.per_task_cil[k];
    t["til_acc"] = report.per_task_til[k];
    t["auc"] = k < report.per_task_auc.size() ? report.per_task_auc[k] : 0.0;
    per_task.push_back(t);
  }
  j["per_task"] = per_task;
  j["seed"] = report.seed;
  j["config_hash"] = report.config_hash;
  return j.dump(2) + "\n";
}

}  // namespace owcl::metrics
