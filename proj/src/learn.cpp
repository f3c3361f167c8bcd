#include "owcl/learn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace owcl::learn {

Method method_from_string(const std::string& name) {
  if (name == "hat_csi") return Method::kHatCsi;
  if (name == "sup_csi") return Method::kSupCsi;
  if (name == "more") return Method::kMore;
  if (name == "hat_plain") return Method::kHatPlain;
  if (name == "sup_plain") return Method::kSupPlain;
  throw std::invalid_argument("unknown method: " + name);
}

std::string method_to_string(Method m) {
  switch (m) {
    case Method::kHatCsi: return "hat_csi";
    case Method::kSupCsi: return "sup_csi";
    case Method::kMore: return "more";
    case Method::kHatPlain: return "hat_plain";
    case Method::kSupPlain: return "sup_plain";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

nn::Vec flip_horizontal(const nn::Vec& img, int side) {
  nn::Vec out(img.size());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      out[static_cast<std::size_t>(r) * side + c] =
          img[static_cast<std::size_t>(r) * side + (side - 1 - c)];
  return out;
}

nn::Vec jitter(const nn::Vec& img, double brightness, double contrast) {
  double mean = 0.0;
  for (double p : img) mean += p;
  mean /= static_cast<double>(img.size());
  nn::Vec out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = std::clamp(brightness * (mean + contrast * (img[i] - mean)), 0.0, 1.0);
  return out;
}

nn::Vec crop_resize(const nn::Vec& img, int side, double area,
                    std::mt19937_64& rng) {
  const int crop = std::max(2, static_cast<int>(std::lround(side * std::sqrt(area))));
  std::uniform_int_distribution<int> off(0, side - crop);
  const int r0 = off(rng), c0 = off(rng);
  nn::Vec out(img.size());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const int sr = r0 + (r * crop) / side;
      const int sc = c0 + (c * crop) / side;
      out[static_cast<std::size_t>(r) * side + c] =
          img[static_cast<std::size_t>(sr) * side + sc];
    }
  return out;
}

nn::Vec random_view(const nn::Vec& img, int side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> factor(0.8, 1.25);
  std::uniform_real_distribution<double> area(0.75, 1.0);
  nn::Vec v = unit(rng) < 0.5 ? flip_horizontal(img, side) : img;
  v = jitter(v, factor(rng), factor(rng));
  return crop_resize(v, side, area(rng), rng);
}

}  // namespace

ContrastiveBatch augment_contrastive(std::span<const data::Sample> batch,
                                     std::span<const int> locals,
                                     int n_base_classes, int side, double tau_c,
                                     std::mt19937_64& rng) {
  if (batch.empty() || batch.size() != locals.size())
    throw std::invalid_argument("augment_contrastive: bad batch");
  if (side <= 0)
    throw std::invalid_argument("augment_contrastive: square rasters required");
  ContrastiveBatch out;
  out.n_originals = static_cast<int>(batch.size());
  out.n_base_classes = n_base_classes;
  out.tau_c = tau_c;
  out.side = side;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (static_cast<int>(batch[i].x.size()) != side * side)
      throw std::invalid_argument("augment_contrastive: non-square input");
    for (int view = 0; view < 2; ++view) {
      nn::Vec base = random_view(batch[i].x, side, rng);
      for (int rot = 0; rot < 4; ++rot) {
        out.views.push_back(rot == 0 ? base : data::rotate90(base, side, rot));
        out.labels.push_back(rot * n_base_classes + locals[i]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervised contrastive loss

double supcon_loss(const std::vector<nn::Vec>& z, const std::vector<int>& labels,
                   double tau_c) {
  if (z.size() != labels.size() || z.empty())
    throw std::invalid_argument("supcon_loss: bad batch");
  const int n = static_cast<int>(z.size());
  const int dim = static_cast<int>(z.front().size());
  auto dot = [&](int a, int b) {
    double d = 0.0;
    for (int i = 0; i < dim; ++i) d += z[a][i] * z[b][i];
    return d;
  };
  double loss = 0.0;
  int contributing = 0;
  bool warned = false;
  for (int x = 0; x < n; ++x) {
    int positives = 0;
    for (int p = 0; p < n; ++p)
      if (p != x && labels[p] == labels[x]) ++positives;
    if (positives == 0) {
      if (!warned) {
        std::cerr << "supcon_loss: sample without positives excluded\n";
        warned = true;
      }
      continue;
    }
    double log_denom;
    {
      double denom = 0.0;
      for (int o = 0; o < n; ++o)
        if (o != x) denom += std::exp(dot(x, o) / tau_c);
      log_denom = std::log(denom);
    }
    double sum = 0.0;
    for (int p = 0; p < n; ++p)
      if (p != x && labels[p] == labels[x])
        sum += dot(x, p) / tau_c - log_denom;
    loss += -sum / positives;
    ++contributing;
  }
  if (contributing == 0)
    throw std::invalid_argument("supcon_loss: no sample has a positive");
  return loss / contributing;
}

double supcon_loss_grad(const std::vector<nn::Vec>& v,
                        const std::vector<int>& labels, double tau_c,
                        std::vector<nn::Vec>* dv) {
  const int n = static_cast<int>(v.size());
  const int dim = static_cast<int>(v.front().size());
  std::vector<double> norms(n);
  std::vector<nn::Vec> z(n, nn::Vec(dim));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (double x : v[i]) s += x * x;
    norms[i] = std::sqrt(std::max(s, 1e-300));
    for (int d = 0; d < dim; ++d) z[i][d] = v[i][d] / norms[i];
  }
  auto dot = [&](int a, int b) {
    double d = 0.0;
    for (int i = 0; i < dim; ++i) d += z[a][i] * z[b][i];
    return d;
  };
  std::vector<std::vector<double>> expm(n, std::vector<double>(n, 0.0));
  std::vector<double> denom(n, 0.0);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      if (a != b) {
        expm[a][b] = std::exp(dot(a, b) / tau_c);
        denom[a] += expm[a][b];
      }
  std::vector<int> positives(n, 0);
  int contributing = 0;
  for (int x = 0; x < n; ++x) {
    for (int p = 0; p < n; ++p)
      if (p != x && labels[p] == labels[x]) ++positives[x];
    if (positives[x] > 0) ++contributing;
  }
  if (contributing == 0)
    throw std::invalid_argument("supcon_loss_grad: no sample has a positive");

  double loss = 0.0;
  std::vector<nn::Vec> dz(n, nn::Vec(dim, 0.0));
  const double inv_b = 1.0 / contributing;
  for (int x = 0; x < n; ++x) {
    if (positives[x] == 0) continue;
    const double wpos = -inv_b / (positives[x] * tau_c);
    for (int p = 0; p < n; ++p) {
      if (p == x || labels[p] != labels[x]) continue;
      loss += -inv_b / positives[x] * (dot(x, p) / tau_c - std::log(denom[x]));
      for (int d = 0; d < dim; ++d) {
        dz[x][d] += wpos * z[p][d];
        dz[p][d] += wpos * z[x][d];
      }
    }
    // log-denominator term appears once per anchor.
    const double wd = inv_b / (tau_c * denom[x]);
    for (int o = 0; o < n; ++o) {
      if (o == x) continue;
      const double c = wd * expm[x][o];
      for (int d = 0; d < dim; ++d) {
        dz[x][d] += c * z[o][d];
        dz[o][d] += c * z[x][d];
      }
    }
  }
  if (dv) {
    dv->assign(n, nn::Vec(dim, 0.0));
    for (int i = 0; i < n; ++i) {
      double proj = 0.0;
      for (int d = 0; d < dim; ++d) proj += dz[i][d] * z[i][d];
      for (int d = 0; d < dim; ++d)
        (*dv)[i][d] = (dz[i][d] - proj * z[i][d]) / norms[i];
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Memory buffer

MemoryBuffer::MemoryBuffer(int budget, std::uint64_t seed)
    : budget_(budget), rng_(seed) {}

void MemoryBuffer::admit_task(std::span<const data::Sample> train,
                              std::span<const int> classes) {
  for (int c : classes) store_[c];
  for (const data::Sample& s : train)
    if (store_.count(s.label)) store_[s.label].push_back(s);
  rebalance();
}

void MemoryBuffer::admit_extra(const data::Sample& s) {
  if (!store_.count(s.label)) return;
  store_[s.label].push_back(s);
  rebalance();
}

void MemoryBuffer::rebalance() {
  const int n = static_cast<int>(store_.size());
  if (n == 0) return;
  int quota = budget_ / n;
  int extra = budget_ % n;
  if (quota == 0) {
    std::cerr << "memory buffer: budget " << budget_ << " below class count "
              << n << "; keeping one sample per class\n";
    quota = 1;
    extra = 0;
  }
  int i = 0;
  for (auto& [label, pool] : store_) {
    const std::size_t want = static_cast<std::size_t>(quota + (i < extra ? 1 : 0));
    if (pool.size() > want) {
      std::shuffle(pool.begin(), pool.end(), rng_);
      pool.resize(want);
    }
    ++i;
  }
}

std::vector<data::Sample> MemoryBuffer::sample_batch(int n,
                                                     std::mt19937_64& rng) const {
  const std::vector<data::Sample> pool = all();
  if (pool.empty()) return {};
  std::vector<data::Sample> out;
  const std::size_t take = std::min<std::size_t>(n, pool.size());
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t i = 0; i < take; ++i) out.push_back(pool[idx[i]]);
  return out;
}

std::vector<data::Sample> MemoryBuffer::all() const {
  std::vector<data::Sample> out;
  for (const auto& [label, pool] : store_)
    out.insert(out.end(), pool.begin(), pool.end());
  return out;
}

std::vector<data::Sample> MemoryBuffer::all_excluding(
    std::span<const int> classes) const {
  std::vector<data::Sample> out;
  for (const auto& [label, pool] : store_) {
    if (std::find(classes.begin(), classes.end(), label) != classes.end())
      continue;
    out.insert(out.end(), pool.begin(), pool.end());
  }
  return out;
}

std::vector<data::Sample> MemoryBuffer::of_classes(
    std::span<const int> classes) const {
  std::vector<data::Sample> out;
  for (const auto& [label, pool] : store_) {
    if (std::find(classes.begin(), classes.end(), label) == classes.end())
      continue;
    out.insert(out.end(), pool.begin(), pool.end());
  }
  return out;
}

int MemoryBuffer::total() const {
  int n = 0;
  for (const auto& [label, pool] : store_) n += static_cast<int>(pool.size());
  return n;
}

// ---------------------------------------------------------------------------
// Task model

namespace {

nn::Vec trunk_input(const TaskModel& model, std::span<const double> x) {
  if (model.method == Method::kMore)
    return nn::forward(model.frozen_ext, x);
  return nn::Vec(x.begin(), x.end());
}

}  // namespace

nn::Vec TaskModel::features(std::span<const double> x, int task) const {
  nn::ForwardOpts opts;
  if (uses_hat()) {
    opts.act_masks = &hat.task_masks.at(task);
    return nn::forward(trunk, trunk_input(*this, x), opts);
  }
  opts.weight_masks = &sup.task_masks.at(task);
  return nn::forward(trunk, x, opts);
}

nn::Vec TaskModel::head_logits(std::span<const double> x, int task) const {
  return nn::forward(heads.at(task), features(x, task));
}

nn::Vec ensemble_logits(const TaskModel& model, std::span<const double> x,
                        int task) {
  const int n_classes = static_cast<int>(model.task_classes.at(task).size());
  nn::Vec out(n_classes, 0.0);
  const nn::Vec base(x.begin(), x.end());
  for (int rot = 0; rot < 4; ++rot) {
    const nn::Vec xr = rot == 0 ? base : data::rotate90(base, model.side, rot);
    const nn::Vec logits = model.head_logits(xr, task);
    if (static_cast<int>(logits.size()) != 4 * n_classes)
      throw std::invalid_argument("ensemble_logits: head is not a rotation head");
    for (int j = 0; j < n_classes; ++j)
      out[j] += 0.25 * logits[static_cast<std::size_t>(rot) * n_classes + j];
  }
  return out;
}

nn::Vec TaskModel::class_logits(std::span<const double> x, int task) const {
  if (is_csi()) return ensemble_logits(*this, x, task);
  nn::Vec logits = head_logits(x, task);
  if (method == Method::kMore) logits.pop_back();  // drop the ood entry
  return logits;
}

nn::Vec TaskModel::class_probs_excl_ood(std::span<const double> x,
                                        int task) const {
  nn::Vec probs = nn::softmax(head_logits(x, task));
  probs.pop_back();
  return probs;
}

infer::DiffFn TaskModel::task_diff_fn(int task) const {
  infer::DiffFn fn;
  const TaskModel* self = this;
  fn.value = [self, task](std::span<const double> x) {
    return self->class_logits(x, task);
  };
  fn.vjp = [self, task](std::span<const double> x,
                        std::span<const double> dlogits) {
    auto backprop_once = [self, task](const nn::Vec& input,
                                      const nn::Vec& dhead) {
      nn::ForwardOpts opts;
      if (self->uses_hat())
        opts.act_masks = &self->hat.task_masks.at(task);
      else
        opts.weight_masks = &self->sup.task_masks.at(task);
      nn::Tape ext_tape, trunk_tape, head_tape;
      nn::Vec tin = self->method == Method::kMore
                        ? nn::forward(self->frozen_ext, input, {}, &ext_tape)
                        : input;
      const nn::Vec feats = nn::forward(self->trunk, tin, opts, &trunk_tape);
      nn::forward(self->heads.at(task), feats, {}, &head_tape);
      nn::Grads hg = nn::backward(self->heads.at(task), head_tape, dhead);
      nn::Grads tg = nn::backward(self->trunk, trunk_tape, hg.dx);
      if (self->method == Method::kMore) {
        nn::Grads eg = nn::backward(self->frozen_ext, ext_tape, tg.dx);
        return eg.dx;
      }
      return tg.dx;
    };
    const int head_dim = self->heads.at(task).output_dim();
    if (self->is_csi()) {
      const int n_classes = head_dim / 4;
      nn::Vec base(x.begin(), x.end());
      nn::Vec dx(x.size(), 0.0);
      for (int rot = 0; rot < 4; ++rot) {
        const nn::Vec xr =
            rot == 0 ? base : data::rotate90(base, self->side, rot);
        nn::Vec dhead(head_dim, 0.0);
        for (int j = 0; j < n_classes; ++j)
          dhead[static_cast<std::size_t>(rot) * n_classes + j] =
              0.25 * dlogits[j];
        nn::Vec dxr = backprop_once(xr, dhead);
        // Rotation is a permutation; its transpose is the inverse rotation.
        const nn::Vec back =
            rot == 0 ? dxr : data::rotate90(dxr, self->side, 4 - rot);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += back[i];
      }
      return dx;
    }
    nn::Vec dhead(head_dim, 0.0);
    for (std::size_t j = 0; j < dlogits.size(); ++j) dhead[j] = dlogits[j];
    // MORE: the trailing ood logit receives no gradient.
    return backprop_once(nn::Vec(x.begin(), x.end()), dhead);
  };
  return fn;
}

namespace {

// Signed kaiming-constant base weights; subnetwork selection needs the masked
// forward to keep unit-scale activations.
void signed_constant_init(nn::DenseNet& net) {
  for (nn::Layer& layer : net.layers) {
    const double c = std::sqrt(2.0 / layer.w.cols);
    for (double& w : layer.w.a) w = w >= 0.0 ? c : -c;
  }
}

}  // namespace

TaskModel make_model(Method method, int input_dim, int side,
                     const TrainConfig& cfg) {
  TaskModel model;
  model.method = method;
  model.side = side;
  model.input_dim = input_dim;
  model.cfg = cfg;
  std::mt19937_64 rng(cfg.seed);
  const til::HatConfig hat_cfg{cfg.s, cfg.lambda};
  switch (method) {
    case Method::kHatCsi:
    case Method::kHatPlain:
      model.trunk = nn::make_dense({input_dim, cfg.hidden_dim, cfg.feat_dim},
                                   {nn::Act::kRelu, nn::Act::kRelu}, rng());
      model.hat = til::make_hat({cfg.hidden_dim, cfg.feat_dim}, hat_cfg, rng());
      break;
    case Method::kSupCsi:
    case Method::kSupPlain:
      model.trunk = nn::make_dense({input_dim, cfg.hidden_dim, cfg.feat_dim},
                                   {nn::Act::kRelu, nn::Act::kRelu}, rng());
      signed_constant_init(model.trunk);
      model.sup = til::make_supermask(model.trunk, cfg.p_sparsity, rng());
      break;
    case Method::kMore: {
      model.frozen_ext =
          nn::make_dense({input_dim, cfg.hidden_dim, cfg.hidden_dim},
                         {nn::Act::kRelu, nn::Act::kRelu}, rng());
      // Kaiming gain on the fixed random-features map.
      const double gain = std::sqrt(6.0);
      for (nn::Layer& layer : model.frozen_ext.layers)
        for (double& w : layer.w.a) w *= gain;
      model.trunk = nn::make_dense({cfg.hidden_dim, cfg.feat_dim},
                                   {nn::Act::kRelu}, rng());
      model.hat = til::make_hat({cfg.feat_dim}, hat_cfg, rng());
      break;
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// MORE loss

double more_loss(const nn::DenseNet& head, std::span<const nn::Vec> current_feats,
                 std::span<const int> current_locals,
                 std::span<const nn::Vec> memory_feats) {
  return more_loss_grad(head, current_feats, current_locals, memory_feats,
                        nullptr, nullptr, nullptr);
}

double more_loss_grad(const nn::DenseNet& head,
                      std::span<const nn::Vec> current_feats,
                      std::span<const int> current_locals,
                      std::span<const nn::Vec> memory_feats,
                      nn::Grads* head_grads, std::vector<nn::Vec>* d_current,
                      std::vector<nn::Vec>* d_memory) {
  if (current_feats.empty())
    throw std::invalid_argument("more_loss: empty current batch");
  if (current_feats.size() != current_locals.size())
    throw std::invalid_argument("more_loss: label per sample required");
  const int ood_index = head.output_dim() - 1;
  const double inv =
      1.0 / static_cast<double>(current_feats.size() + memory_feats.size());
  double loss = 0.0;
  if (head_grads) *head_grads = nn::Grads{};
  if (d_current) d_current->assign(current_feats.size(), {});
  if (d_memory) d_memory->assign(memory_feats.size(), {});

  auto run = [&](const nn::Vec& feats, int target, nn::Vec* dfeat) {
    nn::Tape tape;
    const nn::Vec logits = nn::forward(head, feats, {}, &tape);
    const nn::Vec probs = nn::softmax(logits);
    loss -= inv * std::log(std::max(probs[target], 1e-300));
    if (!head_grads && !dfeat) return;
    nn::Vec dlogits = nn::softmax_ce_grad(probs, target);
    for (double& g : dlogits) g *= inv;
    nn::Grads g = nn::backward(head, tape, dlogits);
    if (dfeat) *dfeat = g.dx;
    if (head_grads) nn::accumulate(*head_grads, g);
  };

  for (std::size_t i = 0; i < current_feats.size(); ++i) {
    if (current_locals[i] < 0 || current_locals[i] >= ood_index)
      throw std::invalid_argument("more_loss: local label out of range");
    run(current_feats[i], current_locals[i],
        d_current ? &(*d_current)[i] : nullptr);
  }
  for (std::size_t i = 0; i < memory_feats.size(); ++i)
    run(memory_feats[i], ood_index, d_memory ? &(*d_memory)[i] : nullptr);
  return loss;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<const data::Sample*> own_samples(const data::TaskData& task) {
  std::vector<const data::Sample*> out;
  for (const data::Sample& s : task.train)
    if (std::find(task.classes.begin(), task.classes.end(), s.label) !=
        task.classes.end())
      out.push_back(&s);
  return out;
}

int local_label(const std::vector<int>& classes, int global) {
  const auto it = std::find(classes.begin(), classes.end(), global);
  if (it == classes.end())
    throw std::invalid_argument("label not in task class set");
  return static_cast<int>(it - classes.begin());
}

// Accumulated trunk-side gradients for one optimization step.
struct TrunkStep {
  nn::Grads grads;
  std::vector<nn::Vec> mask_grads;  // HAT: d loss / d soft mask
};

void add_trunk_grads(TrunkStep& step, const nn::Grads& g) {
  nn::accumulate(step.grads, g);
  if (!g.dmask.empty()) {
    if (step.mask_grads.empty()) {
      step.mask_grads = g.dmask;
    } else {
      for (std::size_t l = 0; l < g.dmask.size(); ++l)
        for (std::size_t i = 0; i < g.dmask[l].size(); ++i)
          step.mask_grads[l][i] += g.dmask[l][i];
    }
  }
}

// Applies one accumulated step to a HAT trunk: blocked weight update plus the
// compensated embedding update including the sparsity regularizer.
void hat_apply_step(TaskModel& model, TrunkStep& step,
                    const std::vector<nn::Vec>& soft_masks, double lr) {
  auto& hat = model.hat;
  const auto reg_grad = til::hat_reg_mask_grad(hat.accumulated, hat.cfg.lambda);
  til::hat_grad_block(hat, step.grads.dw, step.grads.db);
  nn::sgd_step(model.trunk, step.grads, lr);
  if (step.mask_grads.empty()) return;
  for (std::size_t l = 0; l < hat.embeddings.size(); ++l) {
    for (std::size_t i = 0; i < hat.embeddings[l].size(); ++i) {
      const double a = soft_masks[l][i];
      const double dmask = step.mask_grads[l][i] + reg_grad[l][i];
      const double de = dmask * hat.cfg.s * a * (1.0 - a) *
                        til::hat_embedding_compensation(hat.embeddings[l][i],
                                                        hat.cfg.s);
      hat.embeddings[l][i] -= lr * de;
    }
  }
}

// Applies one accumulated step to supermask scores (straight-through).
void sup_apply_step(TaskModel& model, const TrunkStep& step, double lr) {
  auto& scores = model.sup.scores;
  for (std::size_t l = 0; l < scores.size(); ++l)
    for (std::size_t e = 0; e < scores[l].a.size(); ++e)
      scores[l].a[e] -=
          lr * step.grads.dw[l].a[e] * model.trunk.layers[l].w.a[e];
}

struct StepMasks {
  std::vector<nn::Vec> soft;
  std::vector<nn::Matrix> weight;

  // Built at the use site so the pointers refer to this instance.
  nn::ForwardOpts opts() const {
    nn::ForwardOpts o;
    if (!soft.empty()) o.act_masks = &soft;
    if (!weight.empty()) o.weight_masks = &weight;
    return o;
  }
};

StepMasks current_masks(const TaskModel& model) {
  StepMasks m;
  if (model.uses_hat())
    m.soft = til::hat_soft_masks(model.hat);
  else
    m.weight = til::top_p_masks(model.sup.scores, model.sup.p);
  return m;
}

// Head-only cross-entropy tuning on frozen task features.
void tune_head(nn::DenseNet& head, const std::vector<nn::Vec>& feats,
               const std::vector<int>& labels, int epochs, double lr,
               int batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(feats.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      nn::Grads grads;
      for (std::size_t i = start; i < end; ++i) {
        nn::Tape tape;
        const nn::Vec logits = nn::forward(head, feats[order[i]], {}, &tape);
        const nn::Vec probs = nn::softmax(logits);
        nn::Grads g =
            nn::backward(head, tape, nn::softmax_ce_grad(probs, labels[order[i]]));
        nn::accumulate(grads, g);
      }
      nn::scale(grads, 1.0 / static_cast<double>(end - start));
      nn::sgd_step(head, std::move(grads), lr);
    }
  }
}

void csi_train(TaskModel& model, const data::TaskData& task,
               std::mt19937_64& rng) {
  const auto own = own_samples(task);
  const int n_classes = static_cast<int>(task.classes.size());
  const TrainConfig& cfg = model.cfg;
  nn::DenseNet proj =
      nn::make_dense({cfg.feat_dim, cfg.feat_dim, cfg.proj_dim},
                     {nn::Act::kRelu, nn::Act::kIdentity}, rng());

  std::vector<std::size_t> order(own.size());
  std::iota(order.begin(), order.end(), 0);
  // Step 1: contrastive feature learning under the isolation mechanism.
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (end - start < 2) continue;
      std::vector<data::Sample> batch;
      std::vector<int> locals;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(*own[order[i]]);
        locals.push_back(local_label(task.classes, own[order[i]]->label));
      }
      const ContrastiveBatch cb = augment_contrastive(
          batch, locals, n_classes, model.side, cfg.tau_c, rng);

      const StepMasks masks = current_masks(model);
      std::vector<nn::Tape> trunk_tapes(cb.views.size());
      std::vector<nn::Tape> proj_tapes(cb.views.size());
      std::vector<nn::Vec> raw(cb.views.size());
      for (std::size_t i = 0; i < cb.views.size(); ++i) {
        const nn::Vec feats =
            nn::forward(model.trunk, cb.views[i], masks.opts(), &trunk_tapes[i]);
        raw[i] = nn::forward(proj, feats, {}, &proj_tapes[i]);
      }
      std::vector<nn::Vec> dv;
      supcon_loss_grad(raw, cb.labels, cfg.tau_c, &dv);

      TrunkStep step;
      nn::Grads proj_grads;
      for (std::size_t i = 0; i < cb.views.size(); ++i) {
        nn::Grads pg = nn::backward(proj, proj_tapes[i], dv[i]);
        nn::Grads tg = nn::backward(model.trunk, trunk_tapes[i], pg.dx);
        nn::accumulate(proj_grads, pg);
        add_trunk_grads(step, tg);
      }
      nn::sgd_step(proj, std::move(proj_grads), cfg.lr);
      if (model.uses_hat())
        hat_apply_step(model, step, masks.soft, cfg.lr);
      else
        sup_apply_step(model, step, cfg.lr);
    }
  }

  // Step 2: freeze features (binary task mask), fine-tune the rotation head.
  if (model.uses_hat())
    til::hat_finish_task(model.hat);
  else
    til::sup_finish_task(model.sup);
  const int task_index = model.tasks_learned();
  nn::DenseNet head = nn::make_dense({cfg.feat_dim, 4 * n_classes},
                                     {nn::Act::kIdentity}, rng());
  std::vector<nn::Vec> feats;
  for (int epoch = 0; epoch < cfg.head_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (end == start) continue;
      std::vector<data::Sample> batch;
      std::vector<int> locals;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(*own[order[i]]);
        locals.push_back(local_label(task.classes, own[order[i]]->label));
      }
      const ContrastiveBatch cb = augment_contrastive(
          batch, locals, n_classes, model.side, cfg.tau_c, rng);
      feats.clear();
      for (const nn::Vec& view : cb.views)
        feats.push_back(model.features(view, task_index));
      tune_head(head, feats, cb.labels, 1, cfg.lr, cfg.batch_size, rng);
    }
  }
  model.heads.push_back(std::move(head));
}

void plain_train(TaskModel& model, const data::TaskData& task,
                 std::mt19937_64& rng) {
  const auto own = own_samples(task);
  const int n_classes = static_cast<int>(task.classes.size());
  const TrainConfig& cfg = model.cfg;
  nn::DenseNet head =
      nn::make_dense({cfg.feat_dim, n_classes}, {nn::Act::kIdentity}, rng());

  std::vector<std::size_t> order(own.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (end == start) continue;
      const StepMasks masks = current_masks(model);
      TrunkStep step;
      nn::Grads head_grads;
      for (std::size_t i = start; i < end; ++i) {
        const data::Sample& s = *own[order[i]];
        const int y = local_label(task.classes, s.label);
        nn::Tape trunk_tape, head_tape;
        const nn::Vec feats =
            nn::forward(model.trunk, s.x, masks.opts(), &trunk_tape);
        const nn::Vec logits = nn::forward(head, feats, {}, &head_tape);
        const nn::Vec probs = nn::softmax(logits);
        if (std::getenv("OWCL_DEBUG")) fprintf(stderr, "loss %f\n", -std::log(std::max(probs[y], 1e-300)));
        nn::Grads hg =
            nn::backward(head, head_tape, nn::softmax_ce_grad(probs, y));
        nn::Grads tg = nn::backward(model.trunk, trunk_tape, hg.dx);
        nn::accumulate(head_grads, hg);
        add_trunk_grads(step, tg);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      nn::scale(head_grads, inv);
      nn::scale(step.grads, inv);
      for (auto& mg : step.mask_grads)
        for (double& v : mg) v *= inv;
      nn::sgd_step(head, std::move(head_grads), cfg.lr);
      if (model.uses_hat())
        hat_apply_step(model, step, masks.soft, cfg.lr);
      else
        sup_apply_step(model, step, cfg.lr);
    }
  }

  if (model.uses_hat())
    til::hat_finish_task(model.hat);
  else
    til::sup_finish_task(model.sup);
  // Brief head alignment on the frozen binary-mask features.
  const int task_index = model.tasks_learned();
  std::vector<nn::Vec> feats;
  std::vector<int> labels;
  for (const data::Sample* s : own) {
    feats.push_back(model.features(s->x, task_index));
    labels.push_back(local_label(task.classes, s->label));
  }
  tune_head(head, feats, labels, 2, cfg.lr, cfg.batch_size, rng);
  model.heads.push_back(std::move(head));
}

void more_train(TaskModel& model, const data::TaskData& task,
                MemoryBuffer& buffer, std::mt19937_64& rng) {
  const auto own = own_samples(task);
  const int n_classes = static_cast<int>(task.classes.size());
  const TrainConfig& cfg = model.cfg;
  nn::DenseNet head = nn::make_dense({cfg.feat_dim, n_classes + 1},
                                     {nn::Act::kIdentity}, rng());

  // Blurry extras (already-seen classes) flow into the replay store.
  for (const data::Sample& s : task.train)
    if (std::find(task.classes.begin(), task.classes.end(), s.label) ==
        task.classes.end())
      buffer.admit_extra(s);

  std::vector<std::size_t> order(own.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (end == start) continue;
      const std::vector<data::Sample> mem =
          buffer.sample_batch(cfg.batch_size, rng);
      const StepMasks masks = current_masks(model);
      const double inv = 1.0 / static_cast<double>((end - start) + mem.size());
      TrunkStep step;
      nn::Grads head_grads;
      auto run = [&](const nn::Vec& x, int target) {
        nn::Tape trunk_tape, head_tape;
        const nn::Vec tin = trunk_input(model, x);
        const nn::Vec feats =
            nn::forward(model.trunk, tin, masks.opts(), &trunk_tape);
        const nn::Vec logits = nn::forward(head, feats, {}, &head_tape);
        const nn::Vec probs = nn::softmax(logits);
        nn::Vec dlogits = nn::softmax_ce_grad(probs, target);
        for (double& g : dlogits) g *= inv;
        nn::Grads hg = nn::backward(head, head_tape, dlogits);
        nn::Grads tg = nn::backward(model.trunk, trunk_tape, hg.dx);
        nn::accumulate(head_grads, hg);
        add_trunk_grads(step, tg);
      };
      for (std::size_t i = start; i < end; ++i)
        run(own[order[i]]->x, local_label(task.classes, own[order[i]]->label));
      for (const data::Sample& s : mem) run(s.x, n_classes);
      nn::sgd_step(head, std::move(head_grads), cfg.lr);
      hat_apply_step(model, step, masks.soft, cfg.lr);
    }
  }
  til::hat_finish_task(model.hat);
  model.heads.push_back(std::move(head));

  // Back-update earlier heads, then record statistics and admit the task.
  const int current = model.tasks_learned() - 1;
  std::vector<data::Sample> own_copy;
  for (const data::Sample* s : own) own_copy.push_back(*s);
  if (cfg.back_update && buffer.total() > 0)
    for (int j = 0; j < current; ++j)
      more_back_update(model, j, buffer, own_copy, rng);
  model.stats.push_back(compute_task_stats(model, current, own_copy));
  buffer.admit_task(task.train, task.classes);
}

}  // namespace

void train_task(TaskModel& model, const data::TaskData& task,
                MemoryBuffer& buffer, std::mt19937_64& rng) {
  if (model.cfg.epochs <= 0)
    throw std::invalid_argument("train_task: epochs must be positive");
  if (model.tasks_learned() > 0) {
    if (model.uses_hat())
      til::hat_reset_embeddings(model.hat, rng());
    else
      til::sup_reset_scores(model.sup, model.trunk, rng());
  }
  model.task_classes.push_back(task.classes);
  switch (model.method) {
    case Method::kHatCsi:
    case Method::kSupCsi:
      csi_train(model, task, rng);
      break;
    case Method::kHatPlain:
    case Method::kSupPlain:
      plain_train(model, task, rng);
      break;
    case Method::kMore:
      more_train(model, task, buffer, rng);
      break;
  }
}

void more_back_update(TaskModel& model, int task_j, const MemoryBuffer& buffer,
                      std::span<const data::Sample> current_train,
                      std::mt19937_64& rng) {
  if (model.method != Method::kMore)
    throw std::invalid_argument("more_back_update: MORE models only");
  const std::vector<int>& classes = model.task_classes.at(task_j);
  const std::vector<data::Sample> ind = buffer.of_classes(classes);
  if (ind.empty())
    throw std::invalid_argument("more_back_update: task absent from buffer");
  std::vector<data::Sample> ood_pool = buffer.all_excluding(classes);
  // |M| random current-task samples pooled as additional negatives.
  std::vector<std::size_t> idx(current_train.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t take =
      std::min<std::size_t>(buffer.total(), current_train.size());
  for (std::size_t i = 0; i < take; ++i)
    ood_pool.push_back(current_train[idx[i]]);

  nn::DenseNet& head = model.heads.at(task_j);
  const int ood_index = head.output_dim() - 1;
  struct Item {
    const data::Sample* s;
    int target;
  };
  std::vector<Item> items;
  for (const data::Sample& s : ind)
    items.push_back({&s, local_label(classes, s.label)});
  for (const data::Sample& s : ood_pool) items.push_back({&s, ood_index});

  std::vector<nn::Vec> feats(items.size());
  for (std::size_t i = 0; i < items.size(); ++i)
    feats[i] = model.features(items[i].s->x, task_j);

  const TrainConfig& cfg = model.cfg;
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.back_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.back_batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.back_batch));
      nn::Grads grads;
      for (std::size_t i = start; i < end; ++i) {
        nn::Tape tape;
        const nn::Vec logits = nn::forward(head, feats[order[i]], {}, &tape);
        const nn::Vec probs = nn::softmax(logits);
        nn::Grads g = nn::backward(
            head, tape, nn::softmax_ce_grad(probs, items[order[i]].target));
        nn::accumulate(grads, g);
      }
      nn::scale(grads, 1.0 / static_cast<double>(end - start));
      nn::sgd_step(head, std::move(grads), cfg.back_lr);
    }
  }
}

infer::ClassStats compute_task_stats(const TaskModel& model, int task,
                                     std::span<const data::Sample> train) {
  const std::vector<int>& classes = model.task_classes.at(task);
  std::vector<std::vector<nn::Vec>> per_class(classes.size());
  for (const data::Sample& s : train) {
    const auto it = std::find(classes.begin(), classes.end(), s.label);
    if (it == classes.end()) continue;
    per_class[static_cast<std::size_t>(it - classes.begin())].push_back(
        model.features(s.x, task));
  }
  return infer::fit_class_stats(per_class);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kModelMagic[8] = {'O', 'W', 'C', 'L', 'M', 'D', 'L', '1'};

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("model load: truncated stream");
  return v;
}

void put_vec(std::ostream& os, const nn::Vec& v) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}
nn::Vec get_vec(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  nn::Vec v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error("model load: truncated vector");
  return v;
}

void put_mat(std::ostream& os, const nn::Matrix& m) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols));
  os.write(reinterpret_cast<const char*>(m.a.data()),
           static_cast<std::streamsize>(m.a.size() * sizeof(double)));
}
nn::Matrix get_mat(std::istream& is) {
  const auto r = get<std::uint32_t>(is);
  const auto c = get<std::uint32_t>(is);
  nn::Matrix m(static_cast<int>(r), static_cast<int>(c));
  is.read(reinterpret_cast<char*>(m.a.data()),
          static_cast<std::streamsize>(m.a.size() * sizeof(double)));
  if (!is) throw std::runtime_error("model load: truncated matrix");
  return m;
}

}  // namespace

void save_model(const TaskModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "model.bin", std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open model.bin");
  os.write(kModelMagic, sizeof(kModelMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.method));
  put<std::int32_t>(os, model.side);
  put<std::int32_t>(os, model.input_dim);
  const TrainConfig& c = model.cfg;
  put(os, c.epochs); put(os, c.head_epochs); put(os, c.lr); put(os, c.batch_size);
  put(os, c.memory_budget); put(os, c.tau_c); put(os, c.p_sparsity); put(os, c.s);
  put(os, c.lambda); put(os, c.back_update); put(os, c.back_epochs);
  put(os, c.back_lr); put(os, c.back_batch); put(os, c.seed);
  put(os, c.hidden_dim); put(os, c.feat_dim); put(os, c.proj_dim);

  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.task_classes.size()));
  for (const auto& classes : model.task_classes) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(classes.size()));
    for (int cl : classes) put<std::int32_t>(os, cl);
  }
  nn::write_net(os, model.trunk);
  put<std::uint8_t>(os, model.method == Method::kMore ? 1 : 0);
  if (model.method == Method::kMore) nn::write_net(os, model.frozen_ext);

  // HAT state.
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.hat.accumulated.size()));
  for (const nn::Vec& v : model.hat.accumulated) put_vec(os, v);
  for (const nn::Vec& v : model.hat.embeddings) put_vec(os, v);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.hat.task_masks.size()));
  for (const auto& mask : model.hat.task_masks)
    for (const nn::Vec& v : mask) put_vec(os, v);

  // Supermask state.
  put(os, model.sup.p);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.sup.scores.size()));
  for (const nn::Matrix& m : model.sup.scores) put_mat(os, m);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.sup.task_masks.size()));
  for (const auto& mask : model.sup.task_masks) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(mask.size()));
    for (const nn::Matrix& m : mask) put_mat(os, m);
  }

  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.heads.size()));
  for (const nn::DenseNet& head : model.heads) nn::write_net(os, head);

  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.stats.size()));
  for (const infer::ClassStats& st : model.stats) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(st.means.size()));
    for (const nn::Vec& mu : st.means) put_vec(os, mu);
    put_mat(os, st.cov);
    put_mat(os, st.cov_inv);
    put(os, st.eps);
  }
  if (!os) throw std::runtime_error("save_model: write failed");
}

TaskModel load_model(const std::filesystem::path& dir) {
  std::ifstream is(dir / "model.bin", std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open model.bin");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::string(magic, 8) != std::string(kModelMagic, 8))
    throw std::runtime_error("load_model: bad magic");
  TaskModel model;
  model.method = static_cast<Method>(get<std::uint32_t>(is));
  model.side = get<std::int32_t>(is);
  model.input_dim = get<std::int32_t>(is);
  TrainConfig& c = model.cfg;
  c.epochs = get<int>(is); c.head_epochs = get<int>(is); c.lr = get<double>(is);
  c.batch_size = get<int>(is); c.memory_budget = get<int>(is);
  c.tau_c = get<double>(is); c.p_sparsity = get<double>(is); c.s = get<double>(is);
  c.lambda = get<double>(is); c.back_update = get<bool>(is);
  c.back_epochs = get<int>(is); c.back_lr = get<double>(is);
  c.back_batch = get<int>(is); c.seed = get<std::uint64_t>(is);
  c.hidden_dim = get<int>(is); c.feat_dim = get<int>(is); c.proj_dim = get<int>(is);

  const auto n_tasks = get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < n_tasks; ++k) {
    const auto n = get<std::uint32_t>(is);
    std::vector<int> classes(n);
    for (auto& cl : classes) cl = get<std::int32_t>(is);
    model.task_classes.push_back(std::move(classes));
  }
  model.trunk = nn::read_net(is);
  if (get<std::uint8_t>(is)) model.frozen_ext = nn::read_net(is);

  const auto hat_layers = get<std::uint32_t>(is);
  model.hat.cfg = til::HatConfig{c.s, c.lambda};
  for (std::uint32_t l = 0; l < hat_layers; ++l)
    model.hat.accumulated.push_back(get_vec(is));
  for (std::uint32_t l = 0; l < hat_layers; ++l)
    model.hat.embeddings.push_back(get_vec(is));
  const auto hat_masks = get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < hat_masks; ++k) {
    std::vector<nn::Vec> mask;
    for (std::uint32_t l = 0; l < hat_layers; ++l) mask.push_back(get_vec(is));
    model.hat.task_masks.push_back(std::move(mask));
  }

  model.sup.p = get<double>(is);
  const auto score_layers = get<std::uint32_t>(is);
  for (std::uint32_t l = 0; l < score_layers; ++l)
    model.sup.scores.push_back(get_mat(is));
  const auto sup_masks = get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < sup_masks; ++k) {
    const auto n = get<std::uint32_t>(is);
    std::vector<nn::Matrix> mask;
    for (std::uint32_t l = 0; l < n; ++l) mask.push_back(get_mat(is));
    model.sup.task_masks.push_back(std::move(mask));
  }

  const auto n_heads = get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < n_heads; ++k)
    model.heads.push_back(nn::read_net(is));

  const auto n_stats = get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < n_stats; ++k) {
    infer::ClassStats st;
    const auto n_means = get<std::uint32_t>(is);
    for (std::uint32_t m = 0; m < n_means; ++m) st.means.push_back(get_vec(is));
    st.cov = get_mat(is);
    st.cov_inv = get_mat(is);
    st.eps = get<double>(is);
    model.stats.push_back(std::move(st));
  }
  return model;
}

}  // namespace owcl::learn
