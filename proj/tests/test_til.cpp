#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "owcl/til.hpp"

using namespace owcl;
using namespace owcl::til;

TEST_CASE("hat_mask: sigmoid of scaled embeddings") {
  const nn::Vec zero = hat_mask(nn::Vec{0.0, 0.0}, 500.0);
  CHECK(zero[0] == doctest::Approx(0.5));
  CHECK(zero[1] == doctest::Approx(0.5));

  const nn::Vec a = hat_mask(nn::Vec{0.01, -0.01}, 500.0);
  CHECK(a[0] == doctest::Approx(0.993307).epsilon(1e-5));
  CHECK(a[1] == doctest::Approx(0.006693).epsilon(1e-4));

  CHECK_THROWS_AS(hat_mask(nn::Vec{0.1}, 0.0), std::invalid_argument);
}

TEST_CASE("hat_grad_block: factor (1 - min(above, below)), input always active") {
  HatState state = make_hat({2, 2}, {}, 1);
  state.accumulated[0] = {1.0, 0.0};
  state.accumulated[1] = {0.0, 1.0};
  std::vector<nn::Matrix> dw{nn::Matrix(2, 3, 1.0), nn::Matrix(2, 2, 1.0)};
  std::vector<nn::Vec> db{{1.0, 1.0}, {1.0, 1.0}};
  hat_grad_block(state, dw, db);
  // Layer 0: previous mask is the input (all ones), so factor = 1 - acc[0][i].
  for (int j = 0; j < 3; ++j) {
    CHECK(dw[0].at(0, j) == 0.0);
    CHECK(dw[0].at(1, j) == 1.0);
  }
  CHECK(db[0][0] == 0.0);
  CHECK(db[0][1] == 1.0);
  // Layer 1: frozen only where both endpoints were ever active.
  CHECK(dw[1].at(0, 0) == 1.0);  // above 0 inactive
  CHECK(dw[1].at(1, 0) == 0.0);  // above active, below 0 active
  CHECK(dw[1].at(1, 1) == 1.0);  // below 1 inactive
  CHECK(db[1][1] == 0.0);

  // Brute-force oracle over random binary masks.
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> coin(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    HatState s = make_hat({4, 3}, {}, trial);
    for (auto& acc : s.accumulated)
      for (double& v : acc) v = coin(rng);
    std::vector<nn::Matrix> g{nn::Matrix(4, 5, 1.0), nn::Matrix(3, 4, 1.0)};
    std::vector<nn::Vec> b{nn::Vec(4, 1.0), nn::Vec(3, 1.0)};
    hat_grad_block(s, g, b);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j)
        CHECK(g[0].at(i, j) ==
              1.0 - std::min(s.accumulated[0][i], 1.0));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j)
        CHECK(g[1].at(i, j) ==
              1.0 - std::min(s.accumulated[1][i], s.accumulated[0][j]));
  }
}

TEST_CASE("hat_reg: sparsity ratio over unprotected units") {
  // Fresh accumulated mask, a^k = [1, 0]: lambda * 1 / 2.
  const double r = hat_reg({{1.0, 0.0}}, {{0.0, 0.0}}, 0.75);
  CHECK(r == doctest::Approx(0.75 / 2.0));

  CHECK(hat_reg({{0.0, 0.0, 0.0}}, {{0.0, 0.0, 0.0}}, 0.75) == 0.0);

  bool exhausted = false;
  CHECK(hat_reg({{0.7, 0.7}}, {{1.0, 1.0}}, 0.75, &exhausted) == 0.0);
  CHECK(exhausted);

  // Randomized masks against a direct-sum oracle.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> coin(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<nn::Vec> soft{nn::Vec(6), nn::Vec(4)};
    std::vector<nn::Vec> acc{nn::Vec(6), nn::Vec(4)};
    double num = 0.0, den = 0.0;
    for (std::size_t l = 0; l < soft.size(); ++l)
      for (std::size_t i = 0; i < soft[l].size(); ++i) {
        soft[l][i] = u(rng);
        acc[l][i] = coin(rng);
        num += soft[l][i] * (1.0 - acc[l][i]);
        den += 1.0 - acc[l][i];
      }
    const double want = den == 0.0 ? 0.0 : 0.75 * num / den;
    CHECK(std::abs(hat_reg(soft, acc, 0.75) - want) <= 1e-12);
  }
}

TEST_CASE("hat_accumulate: element-wise max, binarized") {
  CHECK(hat_accumulate({0.0, 1.0}, {1.0, 0.0}) == nn::Vec{1.0, 1.0});
  CHECK(hat_accumulate({0.0, 0.0}, {0.9933, 0.0067}) == nn::Vec{1.0, 0.0});
}

TEST_CASE("accumulated masks never lose a unit over a five-task run") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> e(-0.02, 0.02);
  HatState state = make_hat({8, 6}, {}, 3);
  std::vector<nn::Vec> prev = state.accumulated;
  for (int task = 0; task < 5; ++task) {
    for (auto& emb : state.embeddings)
      for (double& v : emb) v = e(rng);
    hat_finish_task(state);
    for (std::size_t l = 0; l < prev.size(); ++l)
      for (std::size_t i = 0; i < prev[l].size(); ++i) {
        CHECK(state.accumulated[l][i] >= prev[l][i]);
        CHECK((state.accumulated[l][i] == 0.0 || state.accumulated[l][i] == 1.0));
      }
    prev = state.accumulated;
    hat_reset_embeddings(state, 100 + task);
  }
  CHECK(state.task_masks.size() == 5);
}

TEST_CASE("top_p_masks: exact count, ties to the lowest flat index") {
  std::vector<nn::Matrix> scores(1);
  scores[0] = nn::Matrix(1, 4);
  scores[0].a = {3.0, 1.0, 2.0, 4.0};
  const auto masks = top_p_masks(scores, 0.5);
  CHECK(masks[0].a == std::vector<double>{1.0, 0.0, 0.0, 1.0});

  const auto all = top_p_masks(scores, 1.0);
  CHECK(all[0].a == std::vector<double>{1.0, 1.0, 1.0, 1.0});

  // Equal scores: the earliest entries win.
  scores[0].a = {0.5, 0.5, 0.5, 0.5};
  const auto tie = top_p_masks(scores, 0.5);
  CHECK(tie[0].a == std::vector<double>{1.0, 1.0, 0.0, 0.0});

  // ceil(p * n) ones per layer.
  scores[0] = nn::Matrix(3, 3);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : scores[0].a) v = u(rng);
  const auto m = top_p_masks(scores, 0.4);
  double ones = 0.0;
  for (double v : m[0].a) ones += v;
  CHECK(ones == std::ceil(0.4 * 9));

  CHECK_THROWS_AS(top_p_masks(scores, 0.0), std::invalid_argument);
}

TEST_CASE("edge popup: p = 1 reproduces the unmasked forward") {
  const nn::DenseNet base =
      nn::make_dense({3, 5, 2}, {nn::Act::kRelu, nn::Act::kIdentity}, 42);
  SupermaskState state = make_supermask(base, 1.0, 9);
  const auto masks = top_p_masks(state.scores, state.p);
  nn::ForwardOpts opts;
  opts.weight_masks = &masks;
  const nn::Vec x{0.2, -0.4, 0.9};
  CHECK(nn::forward(base, x, opts) == nn::forward(base, x));
}

TEST_CASE("edge popup training: loss falls, base weights bit-identical") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> noise(0.0, 0.4);
  std::vector<nn::Vec> xs;
  std::vector<int> ys;
  for (int i = 0; i < 64; ++i) {
    const int y = i % 2;
    xs.push_back(nn::Vec{(y ? 1.5 : -1.5) + noise(rng), noise(rng)});
    ys.push_back(y);
  }
  const nn::DenseNet base =
      nn::make_dense({2, 16, 8}, {nn::Act::kRelu, nn::Act::kRelu}, 21);
  const nn::DenseNet base_copy = base;
  SupermaskState state = make_supermask(base, 0.5, 33);
  nn::DenseNet head = nn::make_dense({8, 2}, {nn::Act::kIdentity}, 5);

  double first = 0.0, last = 0.0;
  for (int step = 0; step < 200; ++step) {
    const double loss = edge_popup_step(base, state, head, xs, ys, 0.3);
    if (step == 0) first = loss;
    last = loss;
  }
  CHECK(last < first);
  CHECK(last < 0.3);
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    CHECK(base.layers[l].w.a == base_copy.layers[l].w.a);
    CHECK(base.layers[l].b == base_copy.layers[l].b);
  }

  sup_finish_task(state);
  REQUIRE(state.task_masks.size() == 1);
  for (std::size_t l = 0; l < state.task_masks[0].size(); ++l) {
    double ones = 0.0;
    for (double v : state.task_masks[0][l].a) ones += v;
    CHECK(ones == std::ceil(0.5 * state.task_masks[0][l].a.size()));
  }

  state.scores[0].a[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(edge_popup_step(base, state, head, xs, ys, 0.3),
                  std::invalid_argument);
}

TEST_CASE("edge popup straight-through gradient matches the relaxed surrogate") {
  // The score update equals the exact gradient of the surrogate in which the
  // frozen mask is perturbed linearly: u(v) = w * (m + v - v0).
  const nn::DenseNet base =
      nn::make_dense({3, 4, 2}, {nn::Act::kRelu, nn::Act::kIdentity}, 77);
  SupermaskState state = make_supermask(base, 0.5, 3);
  const auto masks = top_p_masks(state.scores, state.p);
  const nn::Vec x{0.4, -0.2, 0.7};
  const int target = 1;

  auto surrogate_loss = [&](const std::vector<nn::Matrix>& v0,
                            const std::vector<nn::Matrix>& v) {
    nn::DenseNet net = base;
    for (std::size_t l = 0; l < net.layers.size(); ++l)
      for (std::size_t e = 0; e < net.layers[l].w.a.size(); ++e)
        net.layers[l].w.a[e] *= masks[l].a[e] + v[l].a[e] - v0[l].a[e];
    const nn::Vec p = nn::softmax(nn::forward(net, x));
    return -std::log(p[target]);
  };

  // Analytic straight-through gradient via backward on the masked forward.
  nn::ForwardOpts opts;
  opts.weight_masks = &masks;
  nn::Tape tape;
  const nn::Vec p = nn::softmax(nn::forward(base, x, opts, &tape));
  const nn::Grads g = nn::backward(base, tape, nn::softmax_ce_grad(p, target));

  const auto v0 = state.scores;
  auto v = state.scores;
  for (std::size_t l = 0; l < v.size(); ++l)
    for (std::size_t e = 0; e < v[l].a.size(); ++e) {
      const double h = 1e-6;
      v[l].a[e] = v0[l].a[e] + h;
      const double up = surrogate_loss(v0, v);
      v[l].a[e] = v0[l].a[e] - h;
      const double down = surrogate_loss(v0, v);
      v[l].a[e] = v0[l].a[e];
      const double want = (up - down) / (2.0 * h);
      const double got = g.dw[l].a[e] * base.layers[l].w.a[e];
      CHECK(std::abs(got - want) <=
            1e-4 * std::max({1.0, std::abs(got), std::abs(want)}));
    }
}
