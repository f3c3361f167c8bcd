#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "owcl/prob.hpp"

using namespace owcl::prob;

namespace {

ProbTable table_2x2(double wp0, double tp0, Truth truth = {0, 0}) {
  return decompose_cil({{wp0, 1.0 - wp0}, {0.5, 0.5}}, {tp0, 1.0 - tp0}, truth);
}

}  // namespace

TEST_CASE("cross_entropy analytic cases") {
  CHECK(cross_entropy(std::vector<double>{1, 0}, std::vector<double>{1, 0}) ==
        doctest::Approx(0.0));
  CHECK(cross_entropy(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.5}) ==
        doctest::Approx(std::log(2.0)));
  CHECK(cross_entropy(std::vector<double>{0, 1},
                      std::vector<double>{0.25, 0.75}) ==
        doctest::Approx(-std::log(0.75)));
  CHECK_THROWS_AS(cross_entropy(std::vector<double>{1.0},
                                std::vector<double>{0.5, 0.5}),
                  std::invalid_argument);
  bool clamped = false;
  cross_entropy(std::vector<double>{1, 0}, std::vector<double>{0, 1}, &clamped);
  CHECK(clamped);
}

TEST_CASE("decompose_cil products and normalization") {
  const ProbTable pt =
      decompose_cil({{0.7, 0.3}, {0.5, 0.5}}, {0.8, 0.2}, {0, 0});
  REQUIRE(pt.cil.size() == 4);
  CHECK(pt.cil[0] == doctest::Approx(0.56));
  CHECK(pt.cil[1] == doctest::Approx(0.24));
  CHECK(pt.cil[2] == doctest::Approx(0.10));
  CHECK(pt.cil[3] == doctest::Approx(0.10));

  // One-hot tp: cil equals that task's wp padded with zeros.
  const ProbTable hot =
      decompose_cil({{0.7, 0.3}, {0.6, 0.4}}, {0.0, 1.0}, {1, 0});
  CHECK(hot.cil[0] == 0.0);
  CHECK(hot.cil[2] == doctest::Approx(0.6));

  CHECK_THROWS_AS(decompose_cil({{0.9, 0.3}}, {1.0}, {0, 0}),
                  std::invalid_argument);

  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::vector<double>> wp{random_simplex(3, rng),
                                        random_simplex(3, rng)};
    const ProbTable r = decompose_cil(wp, random_simplex(2, rng), {0, 0});
    double sum = 0.0;
    for (double c : r.cil) sum += c;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("entropies analytic cases") {
  const ProbTable pt = table_2x2(0.7, 0.8);
  const EntropyReport rep = entropies(pt);
  CHECK(rep.h_wp == doctest::Approx(0.356675).epsilon(1e-5));
  CHECK(rep.h_tp == doctest::Approx(0.223144).epsilon(1e-5));
  CHECK(rep.h_cil == doctest::Approx(0.579818).epsilon(1e-5));

  // One-hot everything -> all entropies zero.
  const ProbTable hot = decompose_cil({{1.0, 0.0}}, {1.0}, {0, 0});
  const EntropyReport hot_rep = entropies(hot);
  CHECK(hot_rep.h_wp == 0.0);
  CHECK(hot_rep.h_tp == 0.0);
  CHECK(hot_rep.h_cil == 0.0);

  OodVector ov;
  ov.p_prime = {0.9, 0.3};
  ov.membership = {1, 0};
  const EntropyReport with_ood = entropies(pt, &ov);
  REQUIRE(with_ood.h_ood.size() == 2);
  CHECK(with_ood.h_ood[0] == doctest::Approx(0.105361).epsilon(1e-5));
  CHECK(with_ood.h_ood[1] == doctest::Approx(0.356675).epsilon(1e-5));

  ProbTable bad = pt;
  bad.truth = {5, 0};
  CHECK_THROWS_AS(entropies(bad), std::out_of_range);
}

TEST_CASE("theorem 1: identity and bound") {
  const CheckResult c = check_theorem1(table_2x2(0.7, 0.8));
  CHECK(c.pass);
  CHECK(c.residual <= 1e-12);

  const CheckResult hot =
      check_theorem1(decompose_cil({{1.0, 0.0}}, {1.0}, {0, 0}));
  CHECK(hot.pass);
  CHECK(hot.residual == 0.0);

  std::mt19937_64 rng(11);
  for (int i = 0; i < 10000; ++i) {
    std::vector<std::vector<double>> wp{random_simplex(4, rng),
                                        random_simplex(4, rng),
                                        random_simplex(4, rng)};
    std::uniform_int_distribution<int> pick(0, 2), pick_cls(0, 3);
    const ProbTable pt = decompose_cil(wp, random_simplex(3, rng),
                                       {pick(rng), pick_cls(rng)});
    CHECK(check_theorem1(pt).pass);
  }
}

TEST_CASE("corollary 1: expectation identity") {
  // Tables with (h_wp, h_tp) = (0.3, 0.2) and (0.5, 0.1).
  const ProbTable a = table_2x2(std::exp(-0.3), std::exp(-0.2));
  const ProbTable b = table_2x2(std::exp(-0.5), std::exp(-0.1));
  const EntropyReport ra = entropies(a), rb = entropies(b);
  CHECK(0.5 * (ra.h_cil + rb.h_cil) == doctest::Approx(0.55));
  CHECK(0.5 * (ra.h_wp + rb.h_wp) == doctest::Approx(0.40));
  CHECK(0.5 * (ra.h_tp + rb.h_tp) == doctest::Approx(0.15));
  std::vector<ProbTable> batch{a, b};
  CHECK(check_corollary1(batch).pass);

  std::vector<ProbTable> single{a};
  CHECK(check_corollary1(single).pass);  // reduces to theorem 1
  CHECK_THROWS_AS(check_corollary1(std::vector<ProbTable>{}),
                  std::invalid_argument);

  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    std::vector<ProbTable> rand_batch;
    for (int n = 0; n < 4; ++n) {
      std::vector<std::vector<double>> wp{random_simplex(2, rng),
                                          random_simplex(2, rng)};
      std::uniform_int_distribution<int> pick(0, 1);
      rand_batch.push_back(
          decompose_cil(wp, random_simplex(2, rng), {pick(rng), pick(rng)}));
    }
    const CheckResult c = check_corollary1(rand_batch);
    CHECK(c.pass);
    CHECK(c.residual <= 1e-9);
  }
}

TEST_CASE("theorem 2 direction i: detector copied from tp") {
  const OodVector ov = ood_from_tp({0.8, 0.2}, {0, 0});
  ProbTable pt = table_2x2(0.7, 0.8);
  const EntropyReport rep = entropies(pt, &ov);
  CHECK(rep.h_ood[0] == doctest::Approx(-std::log(0.8)));
  CHECK(rep.h_ood[1] == doctest::Approx(-std::log(0.8)));
  for (double d : rep.h_ood) CHECK(d <= rep.h_tp + 1e-12);

  const OodVector hot = ood_from_tp({1.0, 0.0}, {0, 0});
  ProbTable hot_pt = decompose_cil({{1.0, 0.0}, {0.5, 0.5}}, {1.0, 0.0}, {0, 0});
  const EntropyReport hot_rep = entropies(hot_pt, &hot);
  CHECK(hot_rep.h_ood[0] == doctest::Approx(0.0).epsilon(1e-9));

  std::mt19937_64 rng(17);
  for (int i = 0; i < 10000; ++i) {
    const auto tp = random_simplex(3, rng);
    std::uniform_int_distribution<int> pick(0, 2);
    const Truth truth{pick(rng), 0};
    const OodVector v = ood_from_tp(tp, truth);
    const double h_tp = neg_log(tp[truth.task]);
    for (int k = 0; k < 3; ++k) {
      const double d = k == truth.task
                           ? -std::log(clamp_bernoulli(v.p_prime[k]))
                           : -std::log(1.0 - clamp_bernoulli(v.p_prime[k]));
      CHECK(d <= h_tp + 1e-9 * std::max(1.0, h_tp));
    }
  }
}

TEST_CASE("theorem 2 direction ii: tp from detectors with bound") {
  OodVector ov;
  ov.p_prime = {0.9, 0.3};
  ov.membership = {1, 0};
  const TpFromOod out = tp_from_ood(ov);
  CHECK(out.tp[0] == doctest::Approx(0.75));
  CHECK(out.tp[1] == doctest::Approx(0.25));
  CHECK(out.h_tp == doctest::Approx(0.287682).epsilon(1e-5));
  CHECK(out.bound == doctest::Approx(0.444444).epsilon(1e-5));
  CHECK(out.check.pass);

  // Near one-hot detectors drive both entropy and bound to zero.
  OodVector sharp;
  sharp.p_prime = {1.0 - 1e-9, 1e-9};
  sharp.membership = {1, 0};
  const TpFromOod tiny = tp_from_ood(sharp);
  CHECK(tiny.h_tp <= 1e-8);
  CHECK(tiny.bound <= 1e-8);

  std::mt19937_64 rng(23);
  for (int i = 0; i < 10000; ++i) {
    const OodVector v = random_ood_vector(4, rng, false);
    CHECK(tp_from_ood(v).check.pass);
  }
}

TEST_CASE("theorem 3: cil bound through detectors") {
  OodVector ov;
  ov.p_prime = {0.9, 0.3};
  ov.membership = {1, 0};
  const CheckResult c = check_theorem3({{0.7, 0.3}, {0.5, 0.5}}, ov, {0, 0});
  CHECK(c.pass);
  // h_cil = 0.356675 + 0.287682; bound = 0.356675 + 0.444444.
  CHECK(c.slack == doctest::Approx(0.444444 - 0.287682).epsilon(1e-4));

  // Perfect detectors: h_cil collapses to h_wp.
  OodVector perfect;
  perfect.p_prime = {1.0, 0.0};
  perfect.membership = {1, 0};
  const TpFromOod t2 = tp_from_ood(perfect);
  const ProbTable pt = decompose_cil({{0.7, 0.3}, {0.5, 0.5}}, t2.tp, {0, 0});
  const EntropyReport rep = entropies(pt);
  CHECK(rep.h_cil == doctest::Approx(rep.h_wp).epsilon(1e-9));

  std::mt19937_64 rng(29);
  for (int i = 0; i < 10000; ++i) {
    const OodVector v = random_ood_vector(3, rng, false);
    std::vector<std::vector<double>> wp{random_simplex(2, rng),
                                        random_simplex(2, rng),
                                        random_simplex(2, rng)};
    std::uniform_int_distribution<int> pick(0, 1);
    CHECK(check_theorem3(wp, v, {v.true_task(), pick(rng)}).pass);
  }
}

TEST_CASE("theorem 4: construction from cil") {
  const Theorem4Construction c =
      theorem4_construct({0.56, 0.24, 0.10, 0.10}, {0, 0}, {2, 2});
  CHECK(c.tp[0] == doctest::Approx(0.8));
  CHECK(c.tp[1] == doctest::Approx(0.2));
  CHECK(c.wp[0][0] == doctest::Approx(0.7));
  CHECK(c.wp[0][1] == doctest::Approx(0.3));
  CHECK(c.eta == doctest::Approx(0.579818).epsilon(1e-5));
  CHECK(c.check.pass);

  const Theorem4Construction hot =
      theorem4_construct({1.0, 0.0, 0.0, 0.0}, {0, 0}, {2, 2});
  CHECK(hot.eta == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(hot.check.pass);

  std::mt19937_64 rng(31);
  for (int i = 0; i < 10000; ++i) {
    const auto cil = random_simplex(6, rng);
    std::uniform_int_distribution<int> pick_task(0, 2), pick_cls(0, 1);
    const Theorem4Construction r =
        theorem4_construct(cil, {pick_task(rng), pick_cls(rng)}, {2, 2, 2});
    CHECK(r.check.pass);
  }
}

TEST_CASE("theorem 4 inverts decompose_cil") {
  std::mt19937_64 rng(37);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::vector<double>> wp{random_simplex(3, rng),
                                        random_simplex(3, rng)};
    const auto tp = random_simplex(2, rng);
    const ProbTable pt = decompose_cil(wp, tp, {0, 1});
    const Theorem4Construction c = theorem4_construct(pt.cil, pt.truth, {3, 3});
    const ProbTable round = decompose_cil(c.wp, c.tp, pt.truth);
    for (std::size_t j = 0; j < pt.cil.size(); ++j)
      CHECK(std::abs(round.cil[j] - pt.cil[j]) <= 1e-12);
  }
}

TEST_CASE("corollary 2: open-world transforms") {
  OodVector ov;
  ov.p_prime = {0.9, 0.3};
  ov.membership = {1, 0};
  const TpPlusFromOod out = tp_plus_from_ood(ov);
  REQUIRE(out.tp_plus.size() == 3);
  CHECK(out.tp_plus[0] == doctest::Approx(0.708661).epsilon(1e-5));
  CHECK(out.tp_plus[1] == doctest::Approx(0.236220).epsilon(1e-5));
  CHECK(out.tp_plus[2] == doctest::Approx(0.055118).epsilon(1e-5));
  // -log(0.9 / 1.27)
  CHECK(out.h_tp_plus == doctest::Approx(0.3443775).epsilon(1e-5));
  CHECK(out.check.pass);

  OodVector ood_truth;
  ood_truth.p_prime = {0.1, 0.1};
  ood_truth.membership = {0, 0};
  const TpPlusFromOod plus = tp_plus_from_ood(ood_truth);
  CHECK(plus.tp_plus[2] == doctest::Approx(0.81 / 1.01).epsilon(1e-5));
  CHECK(plus.check.pass);

  std::mt19937_64 rng(41);
  for (int i = 0; i < 10000; ++i) {
    const OodVector v = random_ood_vector(3, rng, true);
    CHECK(tp_plus_from_ood(v).check.pass);
    const auto tp_plus = random_simplex(4, rng);
    std::uniform_int_distribution<int> pick(0, 3);
    const int k0 = pick(rng);
    const Truth truth = k0 == 3 ? Truth{Truth::kOodTask, 0} : Truth{k0, 0};
    CHECK(check_corollary2_direction1(tp_plus, truth).pass);
  }
}

TEST_CASE("corollary 2 reduces to theorem 2 when the product term vanishes") {
  std::mt19937_64 rng(43);
  for (int i = 0; i < 200; ++i) {
    OodVector v = random_ood_vector(3, rng, false);
    // Saturate one detector so prod(1 - P') is forced to the floor.
    v.p_prime[v.true_task()] = 1.0;
    const TpPlusFromOod plus = tp_plus_from_ood(v);
    const TpFromOod t2 = tp_from_ood(v);
    for (int k = 0; k < 3; ++k)
      CHECK(plus.tp_plus[k] == doctest::Approx(t2.tp[k]).epsilon(1e-9));
    CHECK(plus.tp_plus[3] <= 1e-11);
  }
}

TEST_CASE("theorem 5: tempered transforms") {
  // tau = 2 everywhere: P' = sqrt(tp).
  const Theorem5Direction1 d1 =
      theorem5_direction1({0.8, 0.2}, {0, 0}, {2.0, 2.0});
  CHECK(d1.ood.p_prime[0] == doctest::Approx(0.894427).epsilon(1e-5));
  CHECK(d1.ood.p_prime[1] == doctest::Approx(0.447214).epsilon(1e-5));
  CHECK(d1.check.pass);

  // tau = 1 reduces exactly to the theorem 2 transforms.
  const Theorem5Direction1 unit =
      theorem5_direction1({0.8, 0.2}, {0, 0}, {1.0, 1.0});
  CHECK(unit.ood.p_prime[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(unit.ood.p_prime[1] == doctest::Approx(0.2).epsilon(1e-12));

  OodVector ov;
  ov.p_prime = {0.9, 0.3};
  ov.membership = {1, 0};
  const Theorem5Direction2 d2 = theorem5_direction2(ov, {1.0, 1.0});
  const TpFromOod t2 = tp_from_ood(ov);
  CHECK(d2.tp[0] == doctest::Approx(t2.tp[0]).epsilon(1e-12));
  CHECK(d2.tp[1] == doctest::Approx(t2.tp[1]).epsilon(1e-12));
  CHECK(d2.check.pass);

  CHECK_THROWS_AS(theorem5_direction1({0.8, 0.2}, {0, 0}, {0.0, 1.0}),
                  std::invalid_argument);

  const std::vector<double> grid{0.25, 0.5, 1.0, 2.0, 4.0};
  std::mt19937_64 rng(47);
  std::uniform_int_distribution<std::size_t> pick_tau(0, grid.size() - 1);
  for (int i = 0; i < 10000; ++i) {
    const auto tp = random_simplex(4, rng);
    std::uniform_int_distribution<int> pick(0, 3);
    std::vector<double> taus(4);
    for (double& tau : taus) tau = grid[pick_tau(rng)];
    CHECK(theorem5_direction1(tp, {pick(rng), 0}, taus).check.pass);
    const OodVector v = random_ood_vector(4, rng, false);
    CHECK(theorem5_direction2(v, taus).check.pass);
  }
}

TEST_CASE("entropies invariant under consistent task permutation") {
  std::mt19937_64 rng(53);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::vector<double>> wp{random_simplex(2, rng),
                                        random_simplex(2, rng),
                                        random_simplex(2, rng)};
    const auto tp = random_simplex(3, rng);
    std::uniform_int_distribution<int> pick_task(0, 2), pick_cls(0, 1);
    const Truth truth{pick_task(rng), pick_cls(rng)};
    const EntropyReport base = entropies(decompose_cil(wp, tp, truth));

    const std::vector<int> perm{2, 0, 1};  // new index of old task k
    std::vector<std::vector<double>> wp_p(3);
    std::vector<double> tp_p(3);
    for (int k = 0; k < 3; ++k) {
      wp_p[perm[k]] = wp[k];
      tp_p[perm[k]] = tp[k];
    }
    const Truth truth_p{perm[truth.task], truth.cls};
    const EntropyReport moved = entropies(decompose_cil(wp_p, tp_p, truth_p));
    CHECK(moved.h_wp == doctest::Approx(base.h_wp).epsilon(1e-12));
    CHECK(moved.h_tp == doctest::Approx(base.h_tp).epsilon(1e-12));
    CHECK(moved.h_cil == doctest::Approx(base.h_cil).epsilon(1e-12));
  }
}

TEST_CASE("bounds vanish monotonically on the delta ladder") {
  for (const double tau : {0.25, 0.5, 1.0, 2.0, 4.0}) {
    BoundLadderPoint prev{};
    for (int m = 1; m <= 20; ++m) {
      const BoundLadderPoint p = bound_ladder_point(std::pow(2.0, -m), 4, tau);
      if (m > 1) {
        CHECK(p.theorem2 < prev.theorem2);
        CHECK(p.corollary2_ind < prev.corollary2_ind);
        CHECK(p.corollary2_ood < prev.corollary2_ood);
        CHECK(p.theorem5_dir1 < prev.theorem5_dir1);
        CHECK(p.theorem5_dir2 < prev.theorem5_dir2);
      }
      prev = p;
    }
  }
}

TEST_CASE("theorem 5 temperature bisection balances the two branches") {
  const double delta = 0.4;
  const double tau = solve_theorem5_tau(delta);
  const double lhs = delta / tau;
  const double rhs =
      -std::log(1.0 - std::pow(1.0 - std::exp(-delta), 1.0 / tau));
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6));
}

TEST_CASE("sweep runner reports zero violations") {
  SweepConfig cfg;
  cfg.samples = 2000;
  cfg.seed = 99;
  const auto reports = run_theorem_sweeps(cfg);
  REQUIRE(reports.size() == 10);
  for (const auto& r : reports) {
    CHECK(r.violations == 0);
    CHECK(r.samples >= 2000);
  }
}
