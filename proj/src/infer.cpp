#include "owcl/infer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <random>
#include <stdexcept>

namespace owcl::infer {

namespace {

// Lower Cholesky factor of an SPD matrix.
nn::Matrix cholesky(const nn::Matrix& m) {
  if (m.rows != m.cols) throw std::invalid_argument("cholesky: not square");
  const int n = m.rows;
  nn::Matrix l(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double sum = m.at(i, j);
      for (int k = 0; k < j; ++k) sum -= l.at(i, k) * l.at(j, k);
      if (i == j) {
        if (sum <= 0.0)
          throw std::runtime_error("cholesky: matrix not positive definite");
        l.at(i, i) = std::sqrt(sum);
      } else {
        l.at(i, j) = sum / l.at(j, j);
      }
    }
  }
  return l;
}

}  // namespace

nn::Matrix invert_spd(const nn::Matrix& m) {
  const nn::Matrix l = cholesky(m);
  const int n = m.rows;
  // Solve L L^T X = I column by column.
  nn::Matrix inv(n, n);
  std::vector<double> y(n), x(n);
  for (int col = 0; col < n; ++col) {
    for (int i = 0; i < n; ++i) {
      double sum = (i == col) ? 1.0 : 0.0;
      for (int k = 0; k < i; ++k) sum -= l.at(i, k) * y[k];
      y[i] = sum / l.at(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
      double sum = y[i];
      for (int k = i + 1; k < n; ++k) sum -= l.at(k, i) * x[k];
      x[i] = sum / l.at(i, i);
    }
    for (int i = 0; i < n; ++i) inv.at(i, col) = x[i];
  }
  return inv;
}

ClassStats fit_class_stats(const std::vector<std::vector<nn::Vec>>& per_class,
                           double eps) {
  if (per_class.empty() || per_class.front().empty())
    throw std::invalid_argument("fit_class_stats: empty class data");
  const int dim = static_cast<int>(per_class.front().front().size());
  ClassStats stats;
  stats.eps = eps;
  stats.cov = nn::Matrix(dim, dim);
  for (const auto& feats : per_class) {
    if (feats.empty())
      throw std::invalid_argument("fit_class_stats: class without samples");
    nn::Vec mu(dim, 0.0);
    for (const nn::Vec& f : feats)
      for (int d = 0; d < dim; ++d) mu[d] += f[d];
    for (double& v : mu) v /= static_cast<double>(feats.size());
    // Per-class sample covariance, then averaged across classes.
    const double inv_n = 1.0 / static_cast<double>(feats.size());
    for (const nn::Vec& f : feats)
      for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
          stats.cov.at(i, j) += inv_n * (f[i] - mu[i]) * (f[j] - mu[j]);
    stats.means.push_back(std::move(mu));
  }
  const double inv_c = 1.0 / static_cast<double>(per_class.size());
  for (double& v : stats.cov.a) v *= inv_c;
  nn::Matrix ridged = stats.cov;
  for (int i = 0; i < dim; ++i) ridged.at(i, i) += eps;
  stats.cov_inv = invert_spd(ridged);
  return stats;
}

double mahalanobis(const nn::Vec& x, const nn::Vec& mu, const nn::Matrix& cov_inv) {
  const int n = static_cast<int>(x.size());
  if (static_cast<int>(mu.size()) != n || cov_inv.rows != n)
    throw std::invalid_argument("mahalanobis: dimension mismatch");
  double q = 0.0;
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < n; ++j) row += cov_inv.at(i, j) * (x[j] - mu[j]);
    q += (x[i] - mu[i]) * row;
  }
  return std::sqrt(std::max(0.0, q));
}

double more_coefficient(const ClassStats& stats, const nn::Vec& feat) {
  double best = 0.0;
  for (const nn::Vec& mu : stats.means) {
    const double md = std::max(kMdFloor, mahalanobis(feat, mu, stats.cov_inv));
    best = std::max(best, 1.0 / md);
  }
  return best;
}

GlobalLabel predict_concat(const std::vector<nn::Vec>& per_task_logits) {
  if (per_task_logits.empty())
    throw std::invalid_argument("predict_concat: no tasks learned");
  GlobalLabel best{0, 0};
  double best_v = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < static_cast<int>(per_task_logits.size()); ++k)
    for (int j = 0; j < static_cast<int>(per_task_logits[k].size()); ++j)
      if (per_task_logits[k][j] > best_v) {
        best_v = per_task_logits[k][j];
        best = GlobalLabel{k, j};
      }
  return best;
}

MorePrediction predict_more(const std::vector<nn::Vec>& per_task_probs,
                            const std::vector<double>& coefficients) {
  if (per_task_probs.size() != coefficients.size())
    throw std::invalid_argument("predict_more: coefficient per task required");
  std::vector<nn::Vec> weighted(per_task_probs.size());
  for (std::size_t k = 0; k < per_task_probs.size(); ++k) {
    weighted[k] = per_task_probs[k];
    for (double& v : weighted[k]) v *= coefficients[k];
  }
  MorePrediction out;
  out.label = predict_concat(weighted);
  out.ood_score = weighted[out.label.task][out.label.cls];
  return out;
}

nn::Vec odin_postprocess(std::span<const double> x, const DiffFn& task_model,
                         const OdinParams& params) {
  if (!(params.tau > 0.0))
    throw std::invalid_argument("odin_postprocess: nonpositive temperature");
  if (params.eps < 0.0)
    throw std::invalid_argument("odin_postprocess: negative noise magnitude");
  const nn::Vec logits = task_model.value(x);
  if (params.eps == 0.0) return nn::softmax(logits, params.tau);

  // d log s(x; tau)_yhat / d logits = (e_yhat - s) / tau.
  const nn::Vec s = nn::softmax(logits, params.tau);
  int yhat = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[yhat]) yhat = static_cast<int>(j);
  nn::Vec dlogits(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j)
    dlogits[j] = ((j == static_cast<std::size_t>(yhat) ? 1.0 : 0.0) - s[j]) / params.tau;
  const nn::Vec grad = task_model.vjp(x, dlogits);

  nn::Vec perturbed(x.begin(), x.end());
  for (std::size_t i = 0; i < perturbed.size(); ++i) {
    const double sign_neg_grad = grad[i] > 0.0 ? -1.0 : (grad[i] < 0.0 ? 1.0 : 0.0);
    perturbed[i] -= params.eps * sign_neg_grad;
  }
  return nn::softmax(task_model.value(perturbed), params.tau);
}

namespace {

double calib_loss_and_grad(std::span<const CalibSample> batch,
                           const CalibrationParams& p, std::vector<double>* da,
                           std::vector<double>* db) {
  const int t = static_cast<int>(p.alpha.size());
  if (da) da->assign(t, 0.0);
  if (db) db->assign(t, 0.0);
  double loss = 0.0;
  for (const CalibSample& s : batch) {
    nn::Vec concat;
    std::vector<int> task_of;
    for (int k = 0; k < t; ++k)
      for (double v : s.logits[k]) {
        concat.push_back(p.alpha[k] * v + p.beta[k]);
        task_of.push_back(k);
      }
    int target = 0, idx = 0;
    for (int k = 0; k < s.truth.task; ++k) idx += static_cast<int>(s.logits[k].size());
    target = idx + s.truth.cls;
    const nn::Vec probs = nn::softmax(concat);
    loss -= std::log(std::max(probs[target], 1e-300));
    if (!da) continue;
    int flat = 0;
    for (int k = 0; k < t; ++k)
      for (double v : s.logits[k]) {
        const double g = probs[flat] - (flat == target ? 1.0 : 0.0);
        (*da)[k] += g * v;
        (*db)[k] += g;
        ++flat;
      }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  if (da)
    for (int k = 0; k < t; ++k) {
      (*da)[k] *= inv;
      (*db)[k] *= inv;
    }
  return loss * inv;
}

}  // namespace

CalibrationParams calibrate(std::span<const CalibSample> memory,
                            const CalibConfig& cfg) {
  if (memory.empty()) throw std::invalid_argument("calibrate: empty memory");
  const int t = static_cast<int>(memory.front().logits.size());
  CalibrationParams p;
  p.alpha.assign(t, 1.0);
  p.beta.assign(t, 0.0);

  bool multi_task = false;
  for (const CalibSample& s : memory)
    if (s.truth.task != memory.front().truth.task) multi_task = true;
  if (!multi_task) {
    std::cerr << "calibrate: memory spans a single task; returning defaults\n";
    return p;
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(memory.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  CalibrationParams best = p;
  double best_loss = calib_loss_and_grad(memory, p, nullptr, nullptr);
  std::vector<CalibSample> batch;
  std::size_t cursor = order.size();
  std::vector<double> da, db;
  for (int it = 0; it < cfg.iters; ++it) {
    batch.clear();
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(memory[order[cursor++]]);
    }
    calib_loss_and_grad(batch, p, &da, &db);
    for (int k = 0; k < t; ++k) {
      p.alpha[k] -= cfg.lr * da[k];
      p.beta[k] -= cfg.lr * db[k];
    }
    const double full = calib_loss_and_grad(memory, p, nullptr, nullptr);
    if (full < best_loss) {
      best_loss = full;
      best = p;
    }
  }
  return best;
}

double calibrated_cross_entropy(std::span<const CalibSample> memory,
                                const CalibrationParams& params) {
  return calib_loss_and_grad(memory, params, nullptr, nullptr);
}

GlobalLabel predict_calibrated(const std::vector<nn::Vec>& per_task_logits,
                               const CalibrationParams& params) {
  std::vector<nn::Vec> adjusted(per_task_logits.size());
  for (std::size_t k = 0; k < per_task_logits.size(); ++k) {
    adjusted[k] = per_task_logits[k];
    for (double& v : adjusted[k]) v = params.alpha[k] * v + params.beta[k];
  }
  return predict_concat(adjusted);
}

GlobalLabel predict_tempered(const std::vector<nn::Vec>& per_task_logits,
                             double nu, double tau) {
  if (!(nu > 0.0) || !(tau > 0.0))
    throw std::invalid_argument("predict_tempered: nonpositive temperature");
  const int t = static_cast<int>(per_task_logits.size());
  std::vector<double> tp(t);
  double z = 0.0;
  std::vector<nn::Vec> wp(t);
  for (int k = 0; k < t; ++k) {
    wp[k] = nn::softmax(per_task_logits[k], nu);
    const nn::Vec coarse = nn::softmax(per_task_logits[k], tau);
    tp[k] = *std::max_element(coarse.begin(), coarse.end());
    z += tp[k];
  }
  std::vector<nn::Vec> combined(t);
  for (int k = 0; k < t; ++k) {
    combined[k] = wp[k];
    for (double& v : combined[k]) v *= tp[k] / z;
  }
  return predict_concat(combined);
}

double ood_score_msp(const std::vector<nn::Vec>& per_task_softmax) {
  if (per_task_softmax.empty())
    throw std::invalid_argument("ood_score_msp: no tasks");
  double best = -std::numeric_limits<double>::infinity();
  for (const nn::Vec& p : per_task_softmax)
    for (double v : p) best = std::max(best, v);
  return best;
}

}  // namespace owcl::infer
