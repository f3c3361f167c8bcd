#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "owcl/dataset.hpp"
#include "owcl/infer.hpp"
#include "owcl/nn.hpp"
#include "owcl/til.hpp"

// Per-task OOD-capable training: CSI-lite (rotation-augmented supervised
// contrastive step, then a linear head over 4|C| rotation classes with
// ensembled logits) and MORE (replay samples trained as an explicit ood
// class over a frozen random-features extractor, with back-updating and
// per-task Mahalanobis statistics). Both run under HAT or supermask
// isolation on the shared trunk.

namespace owcl::learn {

enum class Method { kHatCsi, kSupCsi, kMore, kHatPlain, kSupPlain };

Method method_from_string(const std::string& name);
std::string method_to_string(Method m);

struct TrainConfig {
  int epochs = 6;
  int head_epochs = 8;
  double lr = 0.08;
  int batch_size = 16;
  int memory_budget = 60;
  double tau_c = 0.2;
  double p_sparsity = 0.5;
  double s = 500.0;
  double lambda = 0.75;
  bool back_update = true;
  int back_epochs = 10;
  double back_lr = 0.01;
  int back_batch = 16;
  std::uint64_t seed = 1;
  // architecture
  int hidden_dim = 64;
  int feat_dim = 32;
  int proj_dim = 16;
};

// ---------------------------------------------------------------------------
// Contrastive augmentation

struct ContrastiveBatch {
  std::vector<nn::Vec> views;   // 8N rasters
  std::vector<int> labels;      // rot * C + local class
  int n_originals = 0;
  int n_base_classes = 0;
  double tau_c = 0.2;
  int side = 0;
};

// Two stochastic views per sample (flip, brightness/contrast jitter in
// [0.8, 1.25], random 75-100% area crop with nearest-neighbor resize), then
// rotation copies at 90/180/270 carrying synthetic class labels. Labels in
// `locals` must already be task-local. Requires square rasters.
ContrastiveBatch augment_contrastive(std::span<const data::Sample> batch,
                                     std::span<const int> locals,
                                     int n_base_classes, int side, double tau_c,
                                     std::mt19937_64& rng);

// Supervised contrastive loss over unit-norm embeddings. Samples without a
// positive are excluded (warned once per call).
double supcon_loss(const std::vector<nn::Vec>& z, const std::vector<int>& labels,
                   double tau_c);

// Loss and gradient w.r.t. the raw (pre-normalization) embeddings v, with
// z = v / |v|.
double supcon_loss_grad(const std::vector<nn::Vec>& v,
                        const std::vector<int>& labels, double tau_c,
                        std::vector<nn::Vec>* dv);

// ---------------------------------------------------------------------------
// Replay memory

class MemoryBuffer {
 public:
  MemoryBuffer() = default;
  MemoryBuffer(int budget, std::uint64_t seed);

  // Class-balanced admission of a finished task's training data.
  void admit_task(std::span<const data::Sample> train,
                  std::span<const int> classes);
  // Extra sample for an already-seen class (blurry streams).
  void admit_extra(const data::Sample& s);

  std::vector<data::Sample> sample_batch(int n, std::mt19937_64& rng) const;
  std::vector<data::Sample> all() const;
  std::vector<data::Sample> all_excluding(std::span<const int> classes) const;
  std::vector<data::Sample> of_classes(std::span<const int> classes) const;

  int total() const;
  int budget() const { return budget_; }
  bool seen(int label) const { return store_.count(label) > 0; }
  const std::map<int, std::vector<data::Sample>>& per_class() const {
    return store_;
  }

 private:
  void rebalance();

  int budget_ = 0;
  std::mt19937_64 rng_;
  std::map<int, std::vector<data::Sample>> store_;
};

// ---------------------------------------------------------------------------
// Task model

struct TaskModel {
  Method method = Method::kHatPlain;
  int side = 0;      // raster side, 0 for vector data
  int input_dim = 0;
  TrainConfig cfg;

  nn::DenseNet frozen_ext;  // MORE only: fixed random-features map
  nn::DenseNet trunk;       // masked extractor (HAT: trainable, Sup: frozen)
  til::HatState hat;
  til::SupermaskState sup;
  std::vector<nn::DenseNet> heads;            // one per finished task
  std::vector<infer::ClassStats> stats;       // per task, MORE only
  std::vector<std::vector<int>> task_classes; // global labels per task

  int tasks_learned() const { return static_cast<int>(heads.size()); }
  bool uses_hat() const {
    return method == Method::kHatCsi || method == Method::kHatPlain ||
           method == Method::kMore;
  }
  bool uses_sup() const {
    return method == Method::kSupCsi || method == Method::kSupPlain;
  }
  bool is_csi() const {
    return method == Method::kHatCsi || method == Method::kSupCsi;
  }

  // Task-masked feature vector using the finished task's binary mask.
  nn::Vec features(std::span<const double> x, int task) const;
  // Raw head outputs for a finished task (CSI heads emit 4|C| rotation logits).
  nn::Vec head_logits(std::span<const double> x, int task) const;
  // Per original-class logits: CSI ensembles the four rotation passes.
  nn::Vec class_logits(std::span<const double> x, int task) const;
  // MORE: softmax over |Y|+1 outputs with the trailing ood entry dropped.
  nn::Vec class_probs_excl_ood(std::span<const double> x, int task) const;
  // Differentiable logit map for ODIN's input perturbation.
  infer::DiffFn task_diff_fn(int task) const;
};

TaskModel make_model(Method method, int input_dim, int side,
                     const TrainConfig& cfg);

// -(1/(M+N)) [ sum_memory log p(ood|x) + sum_current log p(y|x) ], where the
// reserved ood class is the head's last output.
double more_loss(const nn::DenseNet& head, std::span<const nn::Vec> current_feats,
                 std::span<const int> current_locals,
                 std::span<const nn::Vec> memory_feats);

// Same loss plus exact gradients w.r.t. head parameters and both feature
// batches. Any output pointer may be null.
double more_loss_grad(const nn::DenseNet& head,
                      std::span<const nn::Vec> current_feats,
                      std::span<const int> current_locals,
                      std::span<const nn::Vec> memory_feats,
                      nn::Grads* head_grads, std::vector<nn::Vec>* d_current,
                      std::vector<nn::Vec>* d_memory);

// Ensemble logits over the four rotations of x for a CSI head (Eq-style mean
// of the per-rotation class outputs).
nn::Vec ensemble_logits(const TaskModel& model, std::span<const double> x,
                        int task);

// Sequential task training entry point; dispatches on model.method.
// Uses (and updates) the buffer for MORE; plain/CSI methods ignore it except
// for calibration snapshots handled by the caller.
void train_task(TaskModel& model, const data::TaskData& task,
                MemoryBuffer& buffer, std::mt19937_64& rng);

// Rebuilds a past task's head against current-task negatives pooled with the
// remaining memory (task j's own samples excluded). Feature extractor frozen.
void more_back_update(TaskModel& model, int task_j, const MemoryBuffer& buffer,
                      std::span<const data::Sample> current_train,
                      std::mt19937_64& rng);

// Class means and shared covariance for a finished MORE task.
infer::ClassStats compute_task_stats(const TaskModel& model, int task,
                                     std::span<const data::Sample> train);

// Checkpoint the full model state (trunk, masks/scores, heads, stats) into a
// directory; load restores bit-exactly.
void save_model(const TaskModel& model, const std::filesystem::path& dir);
TaskModel load_model(const std::filesystem::path& dir);

}  // namespace owcl::learn
