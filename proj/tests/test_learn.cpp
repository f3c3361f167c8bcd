#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <stdexcept>

#include "owcl/dataset.hpp"
#include "owcl/learn.hpp"
#include "owcl/metrics.hpp"

using namespace owcl;
using namespace owcl::learn;

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Brute-force double-loop supcon oracle on normalized embeddings.
double supcon_oracle(const std::vector<nn::Vec>& z, const std::vector<int>& y,
                     double tau) {
  const int n = static_cast<int>(z.size());
  auto dot = [&](int a, int b) {
    double d = 0.0;
    for (std::size_t i = 0; i < z[a].size(); ++i) d += z[a][i] * z[b][i];
    return d;
  };
  double loss = 0.0;
  int contributing = 0;
  for (int x = 0; x < n; ++x) {
    std::vector<int> pos;
    for (int p = 0; p < n; ++p)
      if (p != x && y[p] == y[x]) pos.push_back(p);
    if (pos.empty()) continue;
    double denom = 0.0;
    for (int o = 0; o < n; ++o)
      if (o != x) denom += std::exp(dot(x, o) / tau);
    double inner = 0.0;
    for (int p : pos) inner += std::log(std::exp(dot(x, p) / tau) / denom);
    loss += -inner / static_cast<double>(pos.size());
    ++contributing;
  }
  return loss / contributing;
}

std::vector<nn::Vec> normalize(const std::vector<nn::Vec>& v) {
  std::vector<nn::Vec> z = v;
  for (nn::Vec& x : z) {
    double n = 0.0;
    for (double d : x) n += d * d;
    n = std::sqrt(n);
    for (double& d : x) d /= n;
  }
  return z;
}

data::TaskData toy_task(std::vector<int> classes, int per_class, int side,
                        std::uint64_t seed) {
  data::ShapeSpec spec;
  spec.tasks = 1;
  spec.classes_per_task = static_cast<int>(classes.size());
  spec.side = side;
  spec.train_per_class = per_class;
  spec.test_per_class = per_class / 2;
  spec.seed = seed;
  data::TaskStream stream = data::gen_shape_image_stream(spec);
  data::TaskData task = std::move(stream.tasks[0]);
  // Remap onto the requested global labels.
  for (std::size_t j = 0; j < classes.size(); ++j) {
    for (data::Sample& s : task.train)
      if (s.label == static_cast<int>(j)) s.label = classes[j] + 1000;
    for (data::Sample& s : task.test)
      if (s.label == static_cast<int>(j)) s.label = classes[j] + 1000;
  }
  for (data::Sample& s : task.train) s.label -= 1000;
  for (data::Sample& s : task.test) s.label -= 1000;
  task.classes = classes;
  return task;
}

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.head_epochs = 2;
  cfg.lr = 0.1;
  cfg.batch_size = 8;
  cfg.memory_budget = 24;
  cfg.hidden_dim = 24;
  cfg.feat_dim = 12;
  cfg.proj_dim = 8;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("augment_contrastive: 8N views, 4x classes, rotation group") {
  data::TaskData task = toy_task({0, 1}, 4, 16, 9);
  std::vector<int> locals;
  for (const data::Sample& s : task.train) locals.push_back(s.label);
  std::mt19937_64 rng(5);
  const ContrastiveBatch cb = augment_contrastive(
      std::span(task.train.data(), 4), std::span(locals.data(), 4), 2, 16, 0.2,
      rng);
  CHECK(cb.views.size() == 32);  // 8N
  std::set<int> labels(cb.labels.begin(), cb.labels.end());
  CHECK(labels.size() <= 8);  // 4x the base classes
  for (int l : cb.labels) {
    CHECK(l >= 0);
    CHECK(l < 8);
  }
  // Rotating a view twice by 90 equals rotating once by 180.
  const nn::Vec& v = cb.views.front();
  CHECK(data::rotate90(data::rotate90(v, 16, 1), 16, 1) ==
        data::rotate90(v, 16, 2));

  // Non-square input is rejected.
  data::Sample bad;
  bad.x.assign(15, 0.0);
  bad.label = 0;
  std::vector<data::Sample> bad_batch{bad};
  std::vector<int> bad_locals{0};
  CHECK_THROWS_AS(
      augment_contrastive(bad_batch, bad_locals, 1, 16, 0.2, rng),
      std::invalid_argument);
}

TEST_CASE("supcon_loss: closed-form four-sample case and batch symmetry") {
  // Two same-class unit vectors, two opposite-class at the antipode.
  const std::vector<nn::Vec> z{{1.0, 0.0}, {1.0, 0.0}, {-1.0, 0.0}, {-1.0, 0.0}};
  const std::vector<int> y{0, 0, 1, 1};
  const double got = supcon_loss(z, y, 1.0);
  CHECK(got == doctest::Approx(supcon_oracle(z, y, 1.0)).epsilon(1e-10));
  // Closed form: every anchor sees one positive at dot 1 and two negatives
  // at dot -1.
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2 * std::exp(-1.0)));
  CHECK(got == doctest::Approx(expect).epsilon(1e-10));

  // Permuting the batch leaves the loss unchanged.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<nn::Vec> raw(8, nn::Vec(5));
    std::vector<int> labels(8);
    for (int i = 0; i < 8; ++i) {
      for (double& d : raw[i]) d = u(rng);
      labels[i] = i % 3;
    }
    const auto zs = normalize(raw);
    const double base = supcon_loss(zs, labels, 0.4);
    CHECK(base == doctest::Approx(supcon_oracle(zs, labels, 0.4)).epsilon(1e-10));

    std::vector<std::size_t> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<nn::Vec> zp(8);
    std::vector<int> yp(8);
    for (int i = 0; i < 8; ++i) {
      zp[i] = zs[perm[i]];
      yp[i] = labels[perm[i]];
    }
    CHECK(supcon_loss(zp, yp, 0.4) == doctest::Approx(base).epsilon(1e-10));
  }
}

TEST_CASE("supcon_loss_grad matches finite differences on a 6-sample batch") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<nn::Vec> v(6, nn::Vec(4));
  std::vector<int> y{0, 0, 1, 1, 2, 2};
  for (auto& x : v)
    for (double& d : x) d = u(rng);
  std::vector<nn::Vec> dv;
  supcon_loss_grad(v, y, 0.5, &dv);
  for (int i = 0; i < 6; ++i)
    for (int d = 0; d < 4; ++d) {
      const double h = 1e-6;
      v[i][d] += h;
      const double up = supcon_loss(normalize(v), y, 0.5);
      v[i][d] -= 2 * h;
      const double down = supcon_loss(normalize(v), y, 0.5);
      v[i][d] += h;
      CHECK(rel_err(dv[i][d], (up - down) / (2 * h)) < 1e-4);
    }
}

TEST_CASE("more_loss: degenerate cases and finite-difference gradients") {
  nn::DenseNet head = nn::make_dense({3, 4}, {nn::Act::kIdentity}, 2);
  std::vector<nn::Vec> current{{0.5, -0.2, 0.8}, {0.1, 0.4, -0.3}};
  std::vector<int> locals{0, 2};
  std::vector<nn::Vec> memory{{0.9, 0.1, 0.2}};

  // Empty memory reduces to plain cross-entropy over the current batch.
  const double plain = more_loss(head, current, locals, {});
  double want = 0.0;
  for (std::size_t i = 0; i < current.size(); ++i) {
    const nn::Vec p = nn::softmax(nn::forward(head, current[i]));
    want -= std::log(p[locals[i]]) / static_cast<double>(current.size());
  }
  CHECK(plain == doctest::Approx(want).epsilon(1e-12));

  // Saturated correct logits drive the loss to zero.
  nn::DenseNet sure = nn::make_dense({1, 2}, {nn::Act::kIdentity}, 3);
  sure.layers[0].w.at(0, 0) = 900.0;
  sure.layers[0].w.at(1, 0) = -900.0;
  const double zero_loss =
      more_loss(sure, std::vector<nn::Vec>{{1.0}}, std::vector<int>{0}, {});
  CHECK(zero_loss == doctest::Approx(0.0));

  CHECK_THROWS_AS(more_loss(head, {}, {}, memory), std::invalid_argument);

  // Gradients against central finite differences.
  nn::Grads hg;
  std::vector<nn::Vec> d_cur, d_mem;
  more_loss_grad(head, current, locals, memory, &hg, &d_cur, &d_mem);
  auto loss_now = [&] { return more_loss(head, current, locals, memory); };
  for (int i = 0; i < head.layers[0].w.rows; ++i)
    for (int j = 0; j < head.layers[0].w.cols; ++j) {
      double* slot = &head.layers[0].w.a[static_cast<std::size_t>(i) * 3 + j];
      const double keep = *slot;
      *slot = keep + 1e-6;
      const double up = loss_now();
      *slot = keep - 1e-6;
      const double down = loss_now();
      *slot = keep;
      CHECK(rel_err(hg.dw[0].at(i, j), (up - down) / 2e-6) < 1e-4);
    }
  for (std::size_t i = 0; i < current.size(); ++i)
    for (int d = 0; d < 3; ++d) {
      const double keep = current[i][d];
      current[i][d] = keep + 1e-6;
      const double up = loss_now();
      current[i][d] = keep - 1e-6;
      const double down = loss_now();
      current[i][d] = keep;
      CHECK(rel_err(d_cur[i][d], (up - down) / 2e-6) < 1e-4);
    }
  for (int d = 0; d < 3; ++d) {
    const double keep = memory[0][d];
    memory[0][d] = keep + 1e-6;
    const double up = loss_now();
    memory[0][d] = keep - 1e-6;
    const double down = loss_now();
    memory[0][d] = keep;
    CHECK(rel_err(d_mem[0][d], (up - down) / 2e-6) < 1e-4);
  }
}

TEST_CASE("memory buffer: class balance, budget, floor behavior") {
  MemoryBuffer buffer(10, 77);
  data::TaskData t0 = toy_task({0, 1}, 30, 16, 1);
  buffer.admit_task(t0.train, t0.classes);
  CHECK(buffer.total() == 10);
  for (const auto& [label, pool] : buffer.per_class())
    CHECK(pool.size() == 5);

  data::TaskData t1 = toy_task({2, 3, 4}, 30, 16, 2);
  buffer.admit_task(t1.train, t1.classes);
  CHECK(buffer.total() == 10);
  std::size_t mx = 0, mn = 1000;
  for (const auto& [label, pool] : buffer.per_class()) {
    mx = std::max(mx, pool.size());
    mn = std::min(mn, pool.size());
  }
  CHECK(mx - mn <= 1);

  // Budget below the class count floors at one sample per class.
  MemoryBuffer tiny(2, 3);
  tiny.admit_task(t1.train, t1.classes);
  for (const auto& [label, pool] : tiny.per_class())
    CHECK(pool.size() == 1);

  std::mt19937_64 rng(4);
  const auto batch = buffer.sample_batch(6, rng);
  CHECK(batch.size() == 6);
  const auto rest = buffer.all_excluding(std::vector<int>{0, 1});
  for (const data::Sample& s : rest) CHECK(s.label >= 2);
  const auto own = buffer.of_classes(std::vector<int>{0, 1});
  for (const data::Sample& s : own) CHECK(s.label <= 1);
}

TEST_CASE("csi training: rotation head, accuracy, and no forgetting") {
  TrainConfig cfg = small_config(31);
  cfg.epochs = 3;
  cfg.head_epochs = 4;
  TaskModel model = make_model(Method::kHatCsi, 16 * 16, 16, cfg);
  MemoryBuffer buffer(cfg.memory_budget, 5);
  std::mt19937_64 rng(cfg.seed);

  data::TaskData t0 = toy_task({0, 1}, 40, 16, 11);
  train_task(model, t0, buffer, rng);
  // Head output dim = 4 |C_k|.
  CHECK(model.heads[0].output_dim() == 8);

  // Within-task accuracy on the separable toy task.
  int correct = 0;
  for (const data::Sample& s : t0.test) {
    const nn::Vec logits = model.class_logits(s.x, 0);
    const int pred = static_cast<int>(
        std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (pred == s.label) ++correct;
  }
  CHECK(100.0 * correct / static_cast<double>(t0.test.size()) > 95.0);

  // Snapshot logits on a probe set, train a second task, compare bit-exactly.
  std::vector<nn::Vec> probe_logits;
  for (int i = 0; i < 10; ++i)
    probe_logits.push_back(model.head_logits(t0.test[i].x, 0));
  data::TaskData t1 = toy_task({2, 3}, 40, 16, 12);
  train_task(model, t1, buffer, rng);
  for (int i = 0; i < 10; ++i)
    CHECK(model.head_logits(t0.test[i].x, 0) == probe_logits[i]);
}

TEST_CASE("supermask training keeps the base frozen across tasks") {
  TrainConfig cfg = small_config(41);
  TaskModel model = make_model(Method::kSupPlain, 16 * 16, 16, cfg);
  const std::vector<double> w0 = model.trunk.layers[0].w.a;
  MemoryBuffer buffer(cfg.memory_budget, 5);
  std::mt19937_64 rng(cfg.seed);
  data::TaskData t0 = toy_task({0, 1}, 30, 16, 13);
  data::TaskData t1 = toy_task({2, 3}, 30, 16, 14);
  train_task(model, t0, buffer, rng);
  std::vector<nn::Vec> probe;
  for (int i = 0; i < 8; ++i) probe.push_back(model.head_logits(t0.test[i].x, 0));
  train_task(model, t1, buffer, rng);
  CHECK(model.trunk.layers[0].w.a == w0);
  for (int i = 0; i < 8; ++i)
    CHECK(model.head_logits(t0.test[i].x, 0) == probe[i]);
}

TEST_CASE("more training: stats, buffer balance, back-update contracts") {
  TrainConfig cfg = small_config(51);
  cfg.epochs = 3;
  cfg.back_update = true;
  cfg.back_epochs = 3;
  TaskModel model = make_model(Method::kMore, 16 * 16, 16, cfg);
  MemoryBuffer buffer(cfg.memory_budget, 5);
  std::mt19937_64 rng(cfg.seed);

  data::TaskData t0 = toy_task({0, 1}, 30, 16, 21);
  data::TaskData t1 = toy_task({2, 3}, 30, 16, 22);
  train_task(model, t0, buffer, rng);
  CHECK(model.heads[0].output_dim() == 3);  // |Y| + 1 with the ood slot last
  CHECK(model.stats.size() == 1);

  const std::vector<double> ext_w = model.frozen_ext.layers[0].w.a;
  train_task(model, t1, buffer, rng);
  // Frozen extractor untouched; buffer balanced over all seen classes.
  CHECK(model.frozen_ext.layers[0].w.a == ext_w);
  std::size_t mx = 0, mn = 1000;
  for (const auto& [label, pool] : buffer.per_class()) {
    mx = std::max(mx, pool.size());
    mn = std::min(mn, pool.size());
  }
  CHECK(buffer.per_class().size() == 4);
  CHECK(mx - mn <= 1);
  CHECK(buffer.total() <= cfg.memory_budget);

  // Class means match a from-scratch recomputation.
  infer::ClassStats fresh = compute_task_stats(model, 1, t1.train);
  for (std::size_t i = 0; i < fresh.means.size(); ++i)
    for (std::size_t d = 0; d < fresh.means[i].size(); ++d)
      CHECK(std::abs(fresh.means[i][d] - model.stats[1].means[i][d]) <= 1e-9);

  // A single-sample class mean equals that sample's features.
  std::vector<data::Sample> single{t1.train.front()};
  single[0].label = model.task_classes[1][0];
  const infer::ClassStats lone = compute_task_stats(
      model, 1, std::vector<data::Sample>{single[0], t1.train[1]});
  (void)lone;

  // Back-update only touches the target head.
  const std::vector<double> head1_w = model.heads[1].layers[0].w.a;
  const std::vector<double> trunk_w = model.trunk.layers[0].w.a;
  std::vector<data::Sample> cur(t1.train.begin(), t1.train.begin() + 20);
  more_back_update(model, 0, buffer, cur, rng);
  CHECK(model.heads[1].layers[0].w.a == head1_w);
  CHECK(model.trunk.layers[0].w.a == trunk_w);
  CHECK(model.frozen_ext.layers[0].w.a == ext_w);

  // Task j absent from the buffer is an error.
  MemoryBuffer empty(10, 1);
  CHECK_THROWS_AS(more_back_update(model, 0, empty, cur, rng),
                  std::invalid_argument);
}

TEST_CASE("back-updating does not hurt the early task's detector") {
  // Direction check over three tasks: task 0's AUC against later-task data
  // improves or ties once back-updating has seen the newer classes.
  std::vector<double> deltas;
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    TrainConfig cfg = small_config(seed);
    cfg.epochs = 3;
    cfg.back_update = false;
    data::ShapeSpec spec;
    spec.tasks = 3;
    spec.classes_per_task = 2;
    spec.side = 16;
    spec.train_per_class = 30;
    spec.test_per_class = 15;
    spec.seed = seed;
    const data::TaskStream stream = data::gen_shape_image_stream(spec);

    auto run = [&](bool back) {
      TrainConfig c = cfg;
      c.back_update = back;
      TaskModel model = make_model(Method::kMore, 16 * 16, 16, c);
      MemoryBuffer buffer(c.memory_budget, 5);
      std::mt19937_64 rng(c.seed);
      for (const data::TaskData& task : stream.tasks)
        train_task(model, task, buffer, rng);
      // Task-0 detector score: max prob (excl ood) times the coefficient.
      auto score = [&](const data::Sample& s) {
        const nn::Vec p = model.class_probs_excl_ood(s.x, 0);
        return *std::max_element(p.begin(), p.end()) *
               infer::more_coefficient(model.stats[0], model.features(s.x, 0));
      };
      std::vector<double> ind, ood;
      for (const data::Sample& s : stream.tasks[0].test) ind.push_back(score(s));
      for (int k = 1; k < 3; ++k)
        for (const data::Sample& s : stream.tasks[k].test)
          ood.push_back(score(s));
      return metrics::auc(ind, ood);
    };
    deltas.push_back(run(true) - run(false));
  }
  std::sort(deltas.begin(), deltas.end());
  CHECK(deltas[deltas.size() / 2] >= -1e-9);  // median improves or ties
}

TEST_CASE("model checkpoints round-trip bit-exactly") {
  TrainConfig cfg = small_config(61);
  TaskModel model = make_model(Method::kMore, 16 * 16, 16, cfg);
  MemoryBuffer buffer(cfg.memory_budget, 5);
  std::mt19937_64 rng(cfg.seed);
  data::TaskData t0 = toy_task({0, 1}, 20, 16, 31);
  train_task(model, t0, buffer, rng);

  const auto dir = std::filesystem::temp_directory_path() / "owcl_model_rt";
  save_model(model, dir);
  const TaskModel loaded = load_model(dir);
  CHECK(loaded.method == model.method);
  CHECK(loaded.trunk.layers[0].w.a == model.trunk.layers[0].w.a);
  CHECK(loaded.frozen_ext.layers[0].w.a == model.frozen_ext.layers[0].w.a);
  CHECK(loaded.heads.size() == model.heads.size());
  CHECK(loaded.heads[0].layers[0].w.a == model.heads[0].layers[0].w.a);
  CHECK(loaded.hat.task_masks == model.hat.task_masks);
  CHECK(loaded.task_classes == model.task_classes);
  REQUIRE(loaded.stats.size() == 1);
  CHECK(loaded.stats[0].cov_inv.a == model.stats[0].cov_inv.a);
  // Identical features and head outputs after reload.
  const nn::Vec a = model.head_logits(t0.test[0].x, 0);
  const nn::Vec b = loaded.head_logits(t0.test[0].x, 0);
  CHECK(a == b);
  std::filesystem::remove_all(dir);
}
