#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "owcl/nn.hpp"

// Prediction rules over frozen per-task snapshots: concatenated argmax,
// Mahalanobis-coefficient scoring, ODIN post-processing, output calibration,
// and the tempered softmax rule. Pure functions; parallel across samples.

namespace owcl::infer {

inline constexpr double kMdFloor = 1e-9;   // Mahalanobis distance floor
inline constexpr double kCovEps = 1e-6;    // ridge added before inversion

// Per-class feature means with the task-shared covariance; the regularized
// inverse is cached at fit time.
struct ClassStats {
  std::vector<nn::Vec> means;
  nn::Matrix cov;
  nn::Matrix cov_inv;  // (cov + eps I)^-1
  double eps = kCovEps;
};

// means from Eq-style per-class averages; covariance is the mean of the
// per-class sample covariances.
ClassStats fit_class_stats(const std::vector<std::vector<nn::Vec>>& per_class,
                           double eps = kCovEps);

// SPD inverse via Cholesky; throws on a non-positive pivot.
nn::Matrix invert_spd(const nn::Matrix& m);

// sqrt((x - mu)^T cov_inv (x - mu)).
double mahalanobis(const nn::Vec& x, const nn::Vec& mu, const nn::Matrix& cov_inv);

// max over classes of 1 / MD, capped at 1 / kMdFloor when x sits on a mean.
double more_coefficient(const ClassStats& stats, const nn::Vec& feat);

struct GlobalLabel {
  int task = 0;
  int cls = 0;
  bool operator==(const GlobalLabel&) const = default;
};

// Global argmax over concatenated per-task outputs; ties resolve to the
// lowest (task, class) index. Throws when no tasks are given.
GlobalLabel predict_concat(const std::vector<nn::Vec>& per_task_logits);

struct MorePrediction {
  GlobalLabel label;
  double ood_score = 0.0;  // max coefficient-weighted probability; higher = IND
};

// per_task_probs exclude the reserved ood entry; coefficients come from
// more_coefficient per task.
MorePrediction predict_more(const std::vector<nn::Vec>& per_task_probs,
                            const std::vector<double>& coefficients);

struct OdinParams {
  double tau = 1.0;  // temperature, > 0
  double eps = 0.0;  // input perturbation magnitude, >= 0
};

// A differentiable per-task logit map: value(x) and the input gradient of
// sum(dlogits * logits).
struct DiffFn {
  std::function<nn::Vec(std::span<const double>)> value;
  std::function<nn::Vec(std::span<const double>, std::span<const double>)> vjp;
};

// Temperature-scaled softmax after one signed-gradient step that increases
// the top class's temperature-scaled confidence.
nn::Vec odin_postprocess(std::span<const double> x, const DiffFn& task_model,
                         const OdinParams& params);

struct CalibrationParams {
  std::vector<double> alpha;  // per-task scale, default 1
  std::vector<double> beta;   // per-task shift, default 0
};

struct CalibSample {
  std::vector<nn::Vec> logits;  // one vector per task
  GlobalLabel truth;
};

struct CalibConfig {
  double lr = 0.01;
  int iters = 160;
  int batch = 15;
  std::uint64_t seed = 0;
};

// Gradient-descent fit of (alpha, beta) minimizing cross-entropy of
// softmax over the concatenated calibrated logits. Returns the iterate with
// the lowest full-set loss; defaults (and a warning note) when the memory
// spans fewer than two tasks.
CalibrationParams calibrate(std::span<const CalibSample> memory,
                            const CalibConfig& cfg = {});

double calibrated_cross_entropy(std::span<const CalibSample> memory,
                                const CalibrationParams& params);

GlobalLabel predict_calibrated(const std::vector<nn::Vec>& per_task_logits,
                               const CalibrationParams& params);

// WP per task = softmax(f/nu); TP proportional to max softmax(f/tau);
// argmax of WP * TP. Defaults nu = 0.1, tau = 5.
GlobalLabel predict_tempered(const std::vector<nn::Vec>& per_task_logits,
                             double nu = 0.1, double tau = 5.0);

// Maximum entry over the concatenated per-task softmax vectors.
double ood_score_msp(const std::vector<nn::Vec>& per_task_softmax);

}  // namespace owcl::infer
