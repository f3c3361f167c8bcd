#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "owcl/nn.hpp"

// Parameter isolation for sequential task training. HAT: per-neuron sigmoid
// attention masks on every trunk layer, gradient blocking through accumulated
// binary masks, and the sparsity regularizer. Supermasks: frozen base weights
// with per-task top-p score masks trained by edge popup. Per-task heads live
// outside the trunk, so the unprotected last layer is architectural.

namespace owcl::til {

// ---------------------------------------------------------------------------
// HAT

struct HatConfig {
  double s = 500.0;      // sigmoid slope; fixed, no annealing
  double lambda = 0.75;  // sparsity regularization weight
};

struct HatState {
  HatConfig cfg;
  std::vector<nn::Vec> embeddings;               // current task, per trunk layer
  std::vector<nn::Vec> accumulated;              // binary, monotone in task index
  std::vector<std::vector<nn::Vec>> task_masks;  // binary snapshot per finished task
  bool capacity_exhausted = false;
};

// layer_widths = output width of each trunk layer. Embeddings start near zero
// so the soft masks open at 0.5.
HatState make_hat(const std::vector<int>& layer_widths, HatConfig cfg,
                  std::uint64_t seed);

// Fresh embeddings for the next task.
void hat_reset_embeddings(HatState& state, std::uint64_t seed);

// a = sigmoid(s * e), element-wise. Requires s > 0.
nn::Vec hat_mask(const nn::Vec& e, double s);

std::vector<nn::Vec> hat_soft_masks(const HatState& state);

nn::Vec binarize(const nn::Vec& a, double threshold = 0.5);

// Scale dw[l](i,j) by (1 - min(acc[l][i], acc[l-1][j])) and db[l](i) by
// (1 - acc[l][i]). The input is treated as always active.
void hat_grad_block(const HatState& state, std::vector<nn::Matrix>& dw,
                    std::vector<nn::Vec>& db);

// lambda * sum a_i(1 - acc_i) / sum (1 - acc_i), summed over layers and units.
// Returns 0 and sets *exhausted when the denominator vanishes.
double hat_reg(const std::vector<nn::Vec>& soft_masks,
               const std::vector<nn::Vec>& accumulated, double lambda,
               bool* exhausted = nullptr);

// d reg / d a_i = lambda * (1 - acc_i) / sum(1 - acc); constant in a.
std::vector<nn::Vec> hat_reg_mask_grad(const std::vector<nn::Vec>& accumulated,
                                       double lambda);

// Element-wise max of the (binary) accumulated mask and the soft task mask,
// binarized at 0.5.
nn::Vec hat_accumulate(const nn::Vec& accumulated, const nn::Vec& a_k);

// Multiplier that undoes the slope-s sigmoid saturation on embedding
// gradients, so embeddings train as if the mask had unit slope.
double hat_embedding_compensation(double e, double s);

// Binarize the current mask, snapshot it as this task's mask, fold it into
// the accumulated mask, and flag exhausted capacity.
void hat_finish_task(HatState& state);

// ---------------------------------------------------------------------------
// Supermasks (edge popup)

struct SupermaskState {
  double p = 0.5;                                   // fraction of weights kept
  std::vector<nn::Matrix> scores;                   // current task, per layer
  std::vector<std::vector<nn::Matrix>> task_masks;  // binary, immutable per task
};

// Scores start uniform in [-0.5, 0.5]; the base net itself stays outside and
// is frozen by contract.
SupermaskState make_supermask(const nn::DenseNet& base, double p,
                              std::uint64_t seed);

void sup_reset_scores(SupermaskState& state, const nn::DenseNet& base,
                      std::uint64_t seed);

// Exactly ceil(p * n) ones per layer; ties broken by lowest flat index.
std::vector<nn::Matrix> top_p_masks(const std::vector<nn::Matrix>& scores,
                                    double p);

// One SGD step of edge popup on a batch: forward with W (x) top_p(scores),
// cross-entropy through `head`, straight-through gradient to the scores
// (mask treated as identity), head updated, base weights untouched.
// Returns the mean batch loss; throws on non-finite scores.
double edge_popup_step(const nn::DenseNet& base, SupermaskState& state,
                       nn::DenseNet& head, std::span<const nn::Vec> xs,
                       std::span<const int> ys, double lr);

void sup_finish_task(SupermaskState& state);

}  // namespace owcl::til
