#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "owcl/metrics.hpp"

using namespace owcl::metrics;

namespace {

// O(n*m) pair count with half credit on ties.
double brute_force_auc(const std::vector<double>& ind,
                       const std::vector<double>& ood) {
  double wins = 0.0;
  for (double i : ind)
    for (double o : ood) {
      if (i > o)
        wins += 1.0;
      else if (i == o)
        wins += 0.5;
    }
  return wins / (static_cast<double>(ind.size()) * static_cast<double>(ood.size()));
}

}  // namespace

TEST_CASE("auc: separation, ties, and the brute-force oracle") {
  CHECK(auc(std::vector<double>{0.9, 0.8}, std::vector<double>{0.1, 0.2}) ==
        doctest::Approx(1.0));
  CHECK(auc(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}) ==
        doctest::Approx(0.5));
  CHECK_THROWS_AS(auc(std::vector<double>{}, std::vector<double>{0.1}),
                  std::invalid_argument);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> quant(0, 9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> ind(23), ood(31);
    // Quantized scores force plenty of ties.
    for (double& v : ind) v = quant(rng) / 10.0;
    for (double& v : ood) v = quant(rng) / 10.0;
    CHECK(std::abs(auc(ind, ood) - brute_force_auc(ind, ood)) <= 1e-12);
  }
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
  std::mt19937_64 rng(15);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> ind(20), ood(20);
    for (double& v : ind) v = u(rng);
    for (double& v : ood) v = u(rng);
    const double base = auc(ind, ood);
    auto transform = [](double v) { return std::exp(0.5 * v) + 3.0; };
    std::vector<double> ind_t(ind), ood_t(ood);
    for (double& v : ind_t) v = transform(v);
    for (double& v : ood_t) v = transform(v);
    CHECK(auc(ind_t, ood_t) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("average_auc and ai_auc") {
  CHECK(average_auc(std::vector<double>{1.0, 0.5}) == doctest::Approx(0.75));
  CHECK(average_auc(std::vector<double>{0.61}) == doctest::Approx(0.61));
  const std::vector<double> perm_a{0.9, 0.6, 0.8}, perm_b{0.8, 0.9, 0.6};
  CHECK(average_auc(perm_a) == doctest::Approx(average_auc(perm_b)));

  // ai_auc: mean over stages before the last task.
  CHECK(ai_auc(std::vector<double>{0.9, 0.7}) == doctest::Approx(0.8));
  CHECK(ai_auc(std::vector<double>{1.0, 1.0, 1.0}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(ai_auc(std::vector<double>{}), std::invalid_argument);

  RunLedger ledger;
  ledger.stage_auc = {0.9, 0.7};
  CHECK(ai_auc(ledger) == doctest::Approx(0.8));
}

TEST_CASE("forgetting_rate") {
  // A_init = [90, 80], accuracies after task 3 = [85, 78] -> 3.5.
  std::vector<std::vector<double>> acc{
      {90.0, 88.0, 85.0}, {0.0, 80.0, 78.0}, {0.0, 0.0, 70.0}};
  CHECK(forgetting_rate(acc, 3) == doctest::Approx(3.5));

  std::vector<std::vector<double>> frozen{
      {90.0, 90.0, 90.0}, {0.0, 80.0, 80.0}, {0.0, 0.0, 70.0}};
  CHECK(forgetting_rate(frozen, 3) == doctest::Approx(0.0));
  CHECK_THROWS_AS(forgetting_rate(acc, 1), std::invalid_argument);
}

TEST_CASE("average_accuracy") {
  CHECK(average_accuracy(10, 10) == doctest::Approx(100.0));
  CHECK(average_accuracy(0, 25) == doctest::Approx(0.0));
  CHECK_THROWS_AS(average_accuracy(0, 0), std::invalid_argument);

  // Coin flips on two balanced classes land near 50% (binomial bound).
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> coin(0, 1);
  long correct = 0;
  const long n = 4000;
  for (long i = 0; i < n; ++i)
    if (coin(rng) == coin(rng)) ++correct;
  const double acc_pct = average_accuracy(correct, n);
  CHECK(acc_pct > 45.0);
  CHECK(acc_pct < 55.0);

  // Equal-sized classes: micro equals macro.
  const double micro = average_accuracy(30 + 20, 50 + 50);
  const double macro = 0.5 * (average_accuracy(30, 50) + average_accuracy(20, 50));
  CHECK(micro == doctest::Approx(macro));
}

TEST_CASE("spearman rank correlation") {
  const std::vector<double> a{1.0, 2.0, 3.0, 4.0};
  CHECK(spearman(a, a) == doctest::Approx(1.0));
  const std::vector<double> rev{4.0, 3.0, 2.0, 1.0};
  CHECK(spearman(a, rev) == doctest::Approx(-1.0));
  // Monotone transform of one side preserves the rank correlation.
  const std::vector<double> warped{1.0, 8.0, 27.0, 64.0};
  CHECK(spearman(a, warped) == doctest::Approx(1.0));
  CHECK_THROWS_AS(spearman(std::vector<double>{1.0}, std::vector<double>{1.0}),
                  std::invalid_argument);
}

TEST_CASE("metrics report serializes to stable JSON") {
  MetricsReport report;
  report.cil_acc = 81.25;
  report.til_acc = 95.5;
  report.avg_auc = 0.91;
  report.ai_auc = 0.88;
  report.forgetting = 0.0;
  report.per_task_cil = {80.0, 82.5};
  report.per_task_til = {96.0, 95.0};
  report.per_task_auc = {0.9, 0.92};
  report.seed = 7;
  report.config_hash = "abc123";
  const std::string a = metrics_report_to_json(report);
  const std::string b = metrics_report_to_json(report);
  CHECK(a == b);
  CHECK(a.find("\"cil_acc\"") != std::string::npos);
  CHECK(a.find("\"config_hash\"") != std::string::npos);
  CHECK(a.find("abc123") != std::string::npos);
}
