#include "owcl/til.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace owcl::til {

HatState make_hat(const std::vector<int>& layer_widths, HatConfig cfg,
                  std::uint64_t seed) {
  HatState state;
  state.cfg = cfg;
  state.accumulated.reserve(layer_widths.size());
  for (int w : layer_widths) state.accumulated.emplace_back(w, 0.0);
  state.embeddings.resize(layer_widths.size());
  hat_reset_embeddings(state, seed);
  return state;
}

void hat_reset_embeddings(HatState& state, std::uint64_t seed) {
  // Units start open but near the gate boundary: the sparsity regularizer can
  // prune what the task loss does not defend, while features stay alive from
  // the first step.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.002, 0.010);
  for (std::size_t l = 0; l < state.accumulated.size(); ++l) {
    state.embeddings[l].assign(state.accumulated[l].size(), 0.0);
    for (double& e : state.embeddings[l]) e = u(rng);
  }
}

nn::Vec hat_mask(const nn::Vec& e, double s) {
  if (!(s > 0.0)) throw std::invalid_argument("hat_mask: s must be positive");
  nn::Vec a(e.size());
  for (std::size_t i = 0; i < e.size(); ++i)
    a[i] = 1.0 / (1.0 + std::exp(-s * e[i]));
  return a;
}

std::vector<nn::Vec> hat_soft_masks(const HatState& state) {
  std::vector<nn::Vec> masks;
  masks.reserve(state.embeddings.size());
  for (const nn::Vec& e : state.embeddings)
    masks.push_back(hat_mask(e, state.cfg.s));
  return masks;
}

nn::Vec binarize(const nn::Vec& a, double threshold) {
  nn::Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = a[i] > threshold ? 1.0 : 0.0;
  return out;
}

void hat_grad_block(const HatState& state, std::vector<nn::Matrix>& dw,
                    std::vector<nn::Vec>& db) {
  if (dw.size() != state.accumulated.size())
    throw std::invalid_argument("hat_grad_block: layer count mismatch");
  for (std::size_t l = 0; l < dw.size(); ++l) {
    const nn::Vec& above = state.accumulated[l];
    const nn::Vec* below = l > 0 ? &state.accumulated[l - 1] : nullptr;
    nn::Matrix& g = dw[l];
    if (static_cast<std::size_t>(g.rows) != above.size())
      throw std::invalid_argument("hat_grad_block: shape mismatch");
    for (int i = 0; i < g.rows; ++i) {
      for (int j = 0; j < g.cols; ++j) {
        const double prev = below ? (*below)[j] : 1.0;
        g.at(i, j) *= 1.0 - std::min(above[i], prev);
      }
      db[l][i] *= 1.0 - above[i];
    }
  }
}

double hat_reg(const std::vector<nn::Vec>& soft_masks,
               const std::vector<nn::Vec>& accumulated, double lambda,
               bool* exhausted) {
  double num = 0.0, den = 0.0;
  for (std::size_t l = 0; l < soft_masks.size(); ++l) {
    if (soft_masks[l].size() != accumulated[l].size())
      throw std::invalid_argument("hat_reg: shape mismatch");
    for (std::size_t i = 0; i < soft_masks[l].size(); ++i) {
      num += soft_masks[l][i] * (1.0 - accumulated[l][i]);
      den += 1.0 - accumulated[l][i];
    }
  }
  if (den == 0.0) {
    if (exhausted) *exhausted = true;
    return 0.0;
  }
  return lambda * num / den;
}

std::vector<nn::Vec> hat_reg_mask_grad(const std::vector<nn::Vec>& accumulated,
                                       double lambda) {
  double den = 0.0;
  for (const nn::Vec& acc : accumulated)
    for (double a : acc) den += 1.0 - a;
  std::vector<nn::Vec> grad(accumulated.size());
  for (std::size_t l = 0; l < accumulated.size(); ++l) {
    grad[l].assign(accumulated[l].size(), 0.0);
    if (den == 0.0) continue;
    for (std::size_t i = 0; i < accumulated[l].size(); ++i)
      grad[l][i] = lambda * (1.0 - accumulated[l][i]) / den;
  }
  return grad;
}

nn::Vec hat_accumulate(const nn::Vec& accumulated, const nn::Vec& a_k) {
  if (accumulated.size() != a_k.size())
    throw std::invalid_argument("hat_accumulate: shape mismatch");
  nn::Vec out(accumulated.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::max(accumulated[i], a_k[i]);
  return binarize(out);
}

double hat_embedding_compensation(double e, double s) {
  const double se = std::clamp(s * e, -50.0, 50.0);
  return (std::cosh(se) + 1.0) / (s * (std::cosh(e) + 1.0));
}

void hat_finish_task(HatState& state) {
  std::vector<nn::Vec> mask;
  mask.reserve(state.embeddings.size());
  for (std::size_t l = 0; l < state.embeddings.size(); ++l)
    mask.push_back(binarize(hat_mask(state.embeddings[l], state.cfg.s)));
  for (std::size_t l = 0; l < mask.size(); ++l)
    state.accumulated[l] = hat_accumulate(state.accumulated[l], mask[l]);
  state.task_masks.push_back(std::move(mask));
  bool full = true;
  for (const nn::Vec& acc : state.accumulated)
    for (double a : acc) full = full && a >= 1.0;
  state.capacity_exhausted = full;
}

// ---------------------------------------------------------------------------

SupermaskState make_supermask(const nn::DenseNet& base, double p,
                              std::uint64_t seed) {
  if (!(p > 0.0 && p <= 1.0))
    throw std::invalid_argument("make_supermask: p must be in (0, 1]");
  SupermaskState state;
  state.p = p;
  sup_reset_scores(state, base, seed);
  return state;
}

void sup_reset_scores(SupermaskState& state, const nn::DenseNet& base,
                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  state.scores.clear();
  for (const nn::Layer& layer : base.layers) {
    nn::Matrix v(layer.w.rows, layer.w.cols);
    for (double& x : v.a) x = u(rng);
    state.scores.push_back(std::move(v));
  }
}

std::vector<nn::Matrix> top_p_masks(const std::vector<nn::Matrix>& scores,
                                    double p) {
  if (!(p > 0.0 && p <= 1.0))
    throw std::invalid_argument("top_p_masks: p must be in (0, 1]");
  std::vector<nn::Matrix> masks;
  masks.reserve(scores.size());
  for (const nn::Matrix& v : scores) {
    const std::size_t n = v.a.size();
    const std::size_t keep =
        std::min(n, static_cast<std::size_t>(std::ceil(p * static_cast<double>(n))));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Descending score, lowest flat index first among equals.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return v.a[a] > v.a[b];
    });
    nn::Matrix m(v.rows, v.cols);
    for (std::size_t r = 0; r < keep; ++r) m.a[order[r]] = 1.0;
    masks.push_back(std::move(m));
  }
  return masks;
}

double edge_popup_step(const nn::DenseNet& base, SupermaskState& state,
                       nn::DenseNet& head, std::span<const nn::Vec> xs,
                       std::span<const int> ys, double lr) {
  if (xs.empty() || xs.size() != ys.size())
    throw std::invalid_argument("edge_popup_step: bad batch");
  for (const nn::Matrix& v : state.scores)
    for (double s : v.a)
      if (!std::isfinite(s))
        throw std::invalid_argument("edge_popup_step: non-finite scores");
  const auto masks = top_p_masks(state.scores, state.p);
  nn::ForwardOpts opts;
  opts.weight_masks = &masks;

  std::vector<nn::Matrix> score_grads;
  for (const nn::Layer& layer : base.layers)
    score_grads.emplace_back(layer.w.rows, layer.w.cols);
  nn::Grads head_grads;
  double loss = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    nn::Tape trunk_tape, head_tape;
    const nn::Vec feats = nn::forward(base, xs[i], opts, &trunk_tape);
    const nn::Vec logits = nn::forward(head, feats, {}, &head_tape);
    const nn::Vec probs = nn::softmax(logits);
    loss -= std::log(std::max(probs[ys[i]], 1e-300));
    const nn::Vec dlogits = nn::softmax_ce_grad(probs, ys[i]);
    nn::Grads hg = nn::backward(head, head_tape, dlogits);
    nn::Grads tg = nn::backward(base, trunk_tape, hg.dx);
    nn::accumulate(head_grads, hg);
    // Straight-through: d loss / d v = d loss / d (w*m) * w.
    for (std::size_t l = 0; l < score_grads.size(); ++l)
      for (std::size_t e = 0; e < score_grads[l].a.size(); ++e)
        score_grads[l].a[e] += tg.dw[l].a[e] * base.layers[l].w.a[e];
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  loss *= inv;
  nn::scale(head_grads, inv);
  nn::sgd_step(head, std::move(head_grads), lr);
  for (std::size_t l = 0; l < score_grads.size(); ++l)
    for (std::size_t e = 0; e < score_grads[l].a.size(); ++e)
      state.scores[l].a[e] -= lr * inv * score_grads[l].a[e];
  return loss;
}

void sup_finish_task(SupermaskState& state) {
  state.task_masks.push_back(top_p_masks(state.scores, state.p));
}

}  // namespace owcl::til
