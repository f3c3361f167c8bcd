#include "owcl/prob.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace owcl::prob {

double clamp_prob(double p) { return std::min(1.0, std::max(kProbFloor, p)); }

double clamp_bernoulli(double p) {
  return std::min(1.0 - kProbFloor, std::max(kProbFloor, p));
}

double neg_log(double p) { return -std::log(clamp_prob(p)); }

int ProbTable::flat_index(int task, int cls) const {
  int idx = 0;
  for (int k = 0; k < task; ++k) idx += static_cast<int>(wp[k].size());
  return idx + cls;
}

int OodVector::true_task() const {
  for (int k = 0; k < tasks(); ++k)
    if (membership[k]) return k;
  return Truth::kOodTask;
}

double cross_entropy(std::span<const double> p, std::span<const double> q,
                     bool* clamped) {
  if (p.size() != q.size())
    throw std::invalid_argument("cross_entropy: length mismatch");
  double h = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] < kProbFloor && clamped) *clamped = true;
    h -= p[i] * std::log(clamp_prob(q[i]));
  }
  return std::max(0.0, h);
}

std::vector<double> normalize_simplex(std::span<const double> v) {
  double sum = 0.0;
  for (double x : v) {
    if (x < -kSimplexTol)
      throw std::invalid_argument("normalize_simplex: negative entry");
    sum += x;
  }
  if (std::abs(sum - 1.0) > kSimplexTol)
    throw std::invalid_argument("normalize_simplex: sum deviates from 1 beyond tolerance");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x = std::max(0.0, x) / sum;
  return out;
}

ProbTable decompose_cil(const std::vector<std::vector<double>>& wp,
                        const std::vector<double>& tp, Truth truth,
                        bool open_world) {
  const int t = static_cast<int>(wp.size());
  if (static_cast<int>(tp.size()) != t + (open_world ? 1 : 0))
    throw std::invalid_argument("decompose_cil: tp length does not match task count");
  ProbTable pt;
  pt.open_world = open_world;
  pt.truth = truth;
  pt.tp = normalize_simplex(tp);
  pt.wp.reserve(wp.size());
  for (const auto& w : wp) pt.wp.push_back(normalize_simplex(w));
  for (int k = 0; k < t; ++k)
    for (double w : pt.wp[k]) pt.cil.push_back(w * pt.tp[k]);
  if (open_world) pt.cil.push_back(pt.tp[t]);
  return pt;
}

namespace {

double truth_cil_entropy(const ProbTable& pt, bool* clamped) {
  int idx;
  if (pt.truth.is_ood()) {
    if (!pt.open_world)
      throw std::out_of_range("entropies: OOD truth on a closed-world table");
    idx = static_cast<int>(pt.cil.size()) - 1;
  } else {
    if (pt.truth.task < 0 || pt.truth.task >= pt.tasks() ||
        pt.truth.cls < 0 ||
        pt.truth.cls >= static_cast<int>(pt.wp[pt.truth.task].size()))
      throw std::out_of_range("entropies: truth index out of range");
    idx = pt.flat_index(pt.truth.task, pt.truth.cls);
  }
  if (pt.cil[idx] < kProbFloor && clamped) *clamped = true;
  return neg_log(pt.cil[idx]);
}

}  // namespace

EntropyReport entropies(const ProbTable& pt, const OodVector* ov) {
  EntropyReport rep;
  const double h_cil = truth_cil_entropy(pt, &rep.clamped);
  double h_wp = 0.0, h_tp = 0.0;
  if (!pt.truth.is_ood()) {
    if (pt.wp[pt.truth.task][pt.truth.cls] < kProbFloor) rep.clamped = true;
    h_wp = neg_log(pt.wp[pt.truth.task][pt.truth.cls]);
    h_tp = neg_log(pt.tp[pt.truth.task]);
  } else {
    h_tp = neg_log(pt.tp.back());
  }
  if (pt.open_world) {
    rep.h_cil_plus = h_cil;
    rep.h_tp_plus = h_tp;
    rep.h_wp = h_wp;
  } else {
    rep.h_cil = h_cil;
    rep.h_tp = h_tp;
    rep.h_wp = h_wp;
  }
  if (ov) {
    auto& dest = pt.open_world ? rep.h_ood_plus : rep.h_ood;
    dest.resize(ov->tasks());
    const int k0 = ov->true_task();
    for (int k = 0; k < ov->tasks(); ++k) {
      const double p = clamp_bernoulli(ov->p_prime[k]);
      dest[k] = (k == k0) ? -std::log(p) : -std::log(1.0 - p);
    }
  }
  return rep;
}

CheckResult check_theorem1(const ProbTable& pt) {
  const EntropyReport rep = entropies(pt);
  const double h_cil = pt.open_world ? rep.h_cil_plus : rep.h_cil;
  const double h_tp = pt.open_world ? rep.h_tp_plus : rep.h_tp;
  CheckResult res;
  res.residual = std::abs(h_cil - (rep.h_wp + h_tp));
  res.slack = (rep.h_wp + h_tp) - h_cil;
  res.pass = res.residual <= kIdentityTol && !rep.clamped;
  if (rep.clamped) res.note = "probability floor engaged; identity not assessable";
  return res;
}

CheckResult check_corollary1(std::span<const ProbTable> batch) {
  if (batch.empty())
    throw std::invalid_argument("check_corollary1: empty batch");
  double cil = 0.0, wp = 0.0, tp = 0.0;
  for (const ProbTable& pt : batch) {
    const EntropyReport rep = entropies(pt);
    cil += rep.h_cil;
    wp += rep.h_wp;
    tp += rep.h_tp;
  }
  const double n = static_cast<double>(batch.size());
  CheckResult res;
  res.residual = std::abs(cil / n - (wp / n + tp / n));
  res.slack = (wp / n + tp / n) - cil / n;
  res.pass = res.residual <= kIdentityTol;
  return res;
}

OodVector ood_from_tp(const std::vector<double>& tp, Truth truth, int tasks) {
  OodVector ov;
  // An open-world tp carries one extra entry; detectors exist per learned task
  // only. Closed-world tp maps one-to-one.
  int t = tasks >= 0 ? tasks : static_cast<int>(tp.size()) - (truth.is_ood() ? 1 : 0);
  if (t <= 0 || t > static_cast<int>(tp.size()))
    throw std::invalid_argument("ood_from_tp: bad task count");
  ov.p_prime.assign(tp.begin(), tp.begin() + t);
  for (double& p : ov.p_prime) p = clamp_bernoulli(p);
  ov.membership.assign(t, 0);
  if (!truth.is_ood()) {
    if (truth.task < 0 || truth.task >= t)
      throw std::out_of_range("ood_from_tp: truth task out of range");
    ov.membership[truth.task] = 1;
  }
  return ov;
}

namespace {

std::vector<double> ood_entropies(const OodVector& ov) {
  std::vector<double> d(ov.tasks());
  const int k0 = ov.true_task();
  for (int k = 0; k < ov.tasks(); ++k) {
    const double p = clamp_bernoulli(ov.p_prime[k]);
    d[k] = (k == k0) ? -std::log(p) : -std::log(1.0 - p);
  }
  return d;
}

double bound_theorem2(const std::vector<double>& deltas, int k0) {
  double lhs = 0.0, rhs = 0.0;
  for (int k = 0; k < static_cast<int>(deltas.size()); ++k) {
    if (k == k0) lhs += std::exp(deltas[k]);
    rhs += 1.0 - std::exp(-deltas[k]);
  }
  return lhs * rhs;
}

bool bound_holds(double value, double bound) {
  return value <= bound + kBoundGuard * std::max(1.0, std::abs(bound));
}

}  // namespace

TpFromOod tp_from_ood(const OodVector& ov) {
  const int k0 = ov.true_task();
  if (k0 == Truth::kOodTask)
    throw std::invalid_argument("tp_from_ood: membership must select exactly one task");
  TpFromOod out;
  double z = 0.0;
  for (double p : ov.p_prime) z += clamp_bernoulli(p);
  if (z <= 0.0)
    throw std::invalid_argument("tp_from_ood: all detector outputs vanish");
  out.tp.resize(ov.tasks());
  for (int k = 0; k < ov.tasks(); ++k) out.tp[k] = clamp_bernoulli(ov.p_prime[k]) / z;
  out.h_tp = neg_log(out.tp[k0]);
  out.bound = bound_theorem2(ood_entropies(ov), k0);
  out.check.slack = out.bound - out.h_tp;
  out.check.pass = bound_holds(out.h_tp, out.bound);
  return out;
}

CheckResult check_theorem3(const std::vector<std::vector<double>>& wp,
                           const OodVector& ov, Truth truth) {
  TpFromOod t2 = tp_from_ood(ov);
  const ProbTable pt = decompose_cil(wp, t2.tp, truth);
  const EntropyReport rep = entropies(pt);
  CheckResult res;
  const double bound = rep.h_wp + t2.bound;
  res.slack = bound - rep.h_cil;
  res.pass = bound_holds(rep.h_cil, bound);
  return res;
}

Theorem4Construction theorem4_construct(const std::vector<double>& cil,
                                        Truth truth,
                                        const std::vector<int>& classes_per_task) {
  const auto flat = normalize_simplex(cil);
  int total = std::accumulate(classes_per_task.begin(), classes_per_task.end(), 0);
  if (total != static_cast<int>(flat.size()))
    throw std::invalid_argument("theorem4_construct: partition does not cover cil");
  Theorem4Construction out;
  const int t = static_cast<int>(classes_per_task.size());
  out.tp.resize(t);
  out.wp.resize(t);
  int idx = 0;
  for (int k = 0; k < t; ++k) {
    double mass = 0.0;
    for (int j = 0; j < classes_per_task[k]; ++j) mass += flat[idx + j];
    out.tp[k] = mass;
    out.wp[k].resize(classes_per_task[k]);
    if (mass < kProbFloor) {
      if (k == truth.task) out.degenerate = true;
      // Uniform within a massless task; the marginal already carries the zero.
      for (int j = 0; j < classes_per_task[k]; ++j)
        out.wp[k][j] = 1.0 / classes_per_task[k];
    } else {
      for (int j = 0; j < classes_per_task[k]; ++j)
        out.wp[k][j] = flat[idx + j] / mass;
    }
    idx += classes_per_task[k];
  }
  out.ood.p_prime = out.tp;
  for (double& p : out.ood.p_prime) p = clamp_bernoulli(p);
  out.ood.membership.assign(t, 0);
  out.ood.membership[truth.task] = 1;

  int truth_flat = 0;
  for (int k = 0; k < truth.task; ++k) truth_flat += classes_per_task[k];
  truth_flat += truth.cls;
  out.eta = neg_log(flat[truth_flat]);

  if (out.degenerate) {
    out.check.pass = false;
    out.check.note = "tp[k0] vanished; construction degenerate";
    return out;
  }
  const double h_wp = neg_log(out.wp[truth.task][truth.cls]);
  const double h_tp = neg_log(out.tp[truth.task]);
  const auto deltas = ood_entropies(out.ood);
  double worst = std::min(out.eta - h_wp, out.eta - h_tp);
  for (double d : deltas) worst = std::min(worst, out.eta - d);
  out.check.slack = worst;
  out.check.pass = bound_holds(h_wp, out.eta) && bound_holds(h_tp, out.eta);
  for (double d : deltas) out.check.pass = out.check.pass && bound_holds(d, out.eta);
  return out;
}

TpPlusFromOod tp_plus_from_ood(const OodVector& ov) {
  TpPlusFromOod out;
  const int t = ov.tasks();
  double sum = 0.0, prod = 1.0;
  for (double p : ov.p_prime) {
    const double c = clamp_bernoulli(p);
    sum += c;
    prod *= 1.0 - c;
  }
  const double z = sum + prod;
  if (z <= 0.0) throw std::invalid_argument("tp_plus_from_ood: normalizer vanished");
  out.tp_plus.resize(t + 1);
  for (int k = 0; k < t; ++k) out.tp_plus[k] = clamp_bernoulli(ov.p_prime[k]) / z;
  out.tp_plus[t] = prod / z;

  const int k0 = ov.true_task();
  const auto deltas = ood_entropies(ov);
  out.h_tp_plus =
      neg_log(k0 == Truth::kOodTask ? out.tp_plus[t] : out.tp_plus[k0]);

  double ind_branch = 0.0;
  {
    double lhs = 0.0, rhs = 0.0;
    for (int k = 0; k < t; ++k) {
      const double one_minus = 1.0 - std::exp(-deltas[k]);
      if (k == k0) {
        lhs += std::exp(deltas[k]);
        rhs += 2.0 * one_minus;
      } else {
        rhs += one_minus;
      }
    }
    ind_branch = lhs * rhs;
  }
  double ood_branch = 1.0;
  {
    double rhs = 0.0;
    for (int k = 0; k < t; ++k) {
      ood_branch *= std::exp(deltas[k]);
      rhs += 1.0 - std::exp(-deltas[k]);
    }
    ood_branch *= rhs;
  }
  out.bound = std::max(ind_branch, ood_branch);
  out.check.slack = out.bound - out.h_tp_plus;
  out.check.pass = bound_holds(out.h_tp_plus, out.bound);
  return out;
}

CheckResult check_corollary2_direction1(const std::vector<double>& tp_plus,
                                        Truth truth) {
  const int t = static_cast<int>(tp_plus.size()) - 1;
  const OodVector ov = ood_from_tp(tp_plus, truth, t);
  const auto deltas = ood_entropies(ov);
  const double h_tp_plus =
      neg_log(truth.is_ood() ? tp_plus[t] : tp_plus[truth.task]);
  CheckResult res;
  res.slack = h_tp_plus;
  for (double d : deltas) {
    res.slack = std::min(res.slack, h_tp_plus - d);
    res.pass = res.pass && bound_holds(d, h_tp_plus);
  }
  return res;
}

Theorem5Direction1 theorem5_direction1(const std::vector<double>& tp, Truth truth,
                                       const std::vector<double>& taus) {
  if (tp.size() != taus.size())
    throw std::invalid_argument("theorem5_direction1: tau per task required");
  for (double tau : taus)
    if (!(tau > 0.0))
      throw std::invalid_argument("theorem5_direction1: nonpositive temperature");
  if (truth.is_ood())
    throw std::invalid_argument("theorem5_direction1: closed-world transform");
  Theorem5Direction1 out;
  const int t = static_cast<int>(tp.size());
  out.ood.p_prime.resize(t);
  out.ood.membership.assign(t, 0);
  out.ood.membership[truth.task] = 1;
  for (int k = 0; k < t; ++k)
    out.ood.p_prime[k] = std::pow(clamp_prob(tp[k]), 1.0 / taus[k]);
  const double delta = neg_log(tp[truth.task]);
  const auto h_ood = ood_entropies(out.ood);
  out.bound_per_task.resize(t);
  out.check.slack = std::numeric_limits<double>::infinity();
  for (int k = 0; k < t; ++k) {
    const double alt = -std::log(1.0 - std::pow(1.0 - std::exp(-delta), 1.0 / taus[k]));
    out.bound_per_task[k] = std::max(delta / taus[k], alt);
    out.check.slack = std::min(out.check.slack, out.bound_per_task[k] - h_ood[k]);
    out.check.pass =
        out.check.pass && bound_holds(h_ood[k], out.bound_per_task[k]);
  }
  return out;
}

Theorem5Direction2 theorem5_direction2(const OodVector& ov,
                                       const std::vector<double>& taus) {
  if (static_cast<std::size_t>(ov.tasks()) != taus.size())
    throw std::invalid_argument("theorem5_direction2: tau per task required");
  for (double tau : taus)
    if (!(tau > 0.0))
      throw std::invalid_argument("theorem5_direction2: nonpositive temperature");
  const int k0 = ov.true_task();
  if (k0 == Truth::kOodTask)
    throw std::invalid_argument("theorem5_direction2: membership must select one task");
  Theorem5Direction2 out;
  const int t = ov.tasks();
  out.tp.resize(t);
  double z = 0.0;
  for (int k = 0; k < t; ++k) {
    out.tp[k] = std::pow(clamp_bernoulli(ov.p_prime[k]), 1.0 / taus[k]);
    z += out.tp[k];
  }
  for (double& p : out.tp) p /= z;
  out.h_tp = neg_log(out.tp[k0]);

  const auto deltas = ood_entropies(ov);
  double first = 0.0, numer = 0.0, denom = 0.0;
  for (int k = 0; k < t; ++k) {
    const double term = std::pow(1.0 - std::exp(-deltas[k]), 1.0 / taus[k]);
    numer += term;
    if (k == k0) {
      first += deltas[k] / taus[k];
      denom += 1.0 - term;
    }
  }
  out.bound = first + numer / denom;
  out.check.slack = out.bound - out.h_tp;
  out.check.pass = bound_holds(out.h_tp, out.bound);
  return out;
}

BoundLadderPoint bound_ladder_point(double delta, int tasks, double tau) {
  BoundLadderPoint p;
  const double om = 1.0 - std::exp(-delta);
  p.theorem2 = std::exp(delta) * (tasks * om);
  p.corollary2_ind = std::exp(delta) * ((tasks + 1) * om);
  p.corollary2_ood = std::pow(std::exp(delta), tasks) * (tasks * om);
  p.theorem5_dir1 =
      std::max(delta / tau, -std::log(1.0 - std::pow(om, 1.0 / tau)));
  const double term = std::pow(om, 1.0 / tau);
  p.theorem5_dir2 = delta / tau + tasks * term / (1.0 - term);
  return p;
}

double solve_theorem5_tau(double delta, double lo, double hi, int iters) {
  if (!(delta > 0.0))
    throw std::invalid_argument("solve_theorem5_tau: delta must be positive");
  auto gap = [delta](double tau) {
    return delta / tau +
           std::log(1.0 - std::pow(1.0 - std::exp(-delta), 1.0 / tau));
  };
  // gap is decreasing in tau: positive when delta/tau dominates.
  double flo = gap(lo), fhi = gap(hi);
  if (flo < 0.0) return lo;
  if (fhi > 0.0) return hi;
  for (int i = 0; i < iters; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (gap(mid) > 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> random_simplex(int n, std::mt19937_64& rng) {
  std::exponential_distribution<double> exp1(1.0);
  std::vector<double> v(n);
  double sum = 0.0;
  for (double& x : v) {
    x = exp1(rng);
    sum += x;
  }
  for (double& x : v) x /= sum;
  return v;
}

OodVector random_ood_vector(int tasks, std::mt19937_64& rng, bool allow_ood_truth) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  OodVector ov;
  ov.p_prime.resize(tasks);
  for (double& p : ov.p_prime) p = clamp_bernoulli(unit(rng));
  ov.membership.assign(tasks, 0);
  std::uniform_int_distribution<int> pick(0, allow_ood_truth ? tasks : tasks - 1);
  const int k0 = pick(rng);
  if (k0 < tasks) ov.membership[k0] = 1;
  return ov;
}

namespace {

struct SweepAccumulator {
  SweepReport rep;
  bool slack_init = false;

  explicit SweepAccumulator(std::string name) { rep.theorem = std::move(name); }

  void add_bound(const CheckResult& c) {
    rep.samples++;
    if (!c.pass) rep.violations++;
    if (!slack_init || c.slack < rep.worst_slack) {
      rep.worst_slack = c.slack;
      slack_init = true;
    }
  }
  void add_identity(const CheckResult& c) {
    rep.samples++;
    if (!c.pass) rep.violations++;
    if (!slack_init || c.residual > rep.worst_slack) {
      rep.worst_slack = c.residual;
      slack_init = true;
    }
  }
};

ProbTable random_table(const SweepConfig& cfg, std::mt19937_64& rng,
                       bool open_world) {
  std::vector<std::vector<double>> wp(cfg.tasks);
  for (auto& w : wp) w = random_simplex(cfg.classes_per_task, rng);
  std::vector<double> tp = random_simplex(cfg.tasks + (open_world ? 1 : 0), rng);
  std::uniform_int_distribution<int> pick_task(0, cfg.tasks - 1);
  std::uniform_int_distribution<int> pick_cls(0, cfg.classes_per_task - 1);
  Truth truth{pick_task(rng), pick_cls(rng)};
  if (open_world) {
    std::uniform_int_distribution<int> ood_coin(0, 3);
    if (ood_coin(rng) == 0) truth = Truth{Truth::kOodTask, 0};
  }
  return decompose_cil(wp, tp, truth, open_world);
}

}  // namespace

std::vector<SweepReport> run_theorem_sweeps(const SweepConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  SweepAccumulator t1("theorem1"), c1("corollary1"), t2i("theorem2_i"),
      t2ii("theorem2_ii"), t3("theorem3"), t4("theorem4"),
      c2i("corollary2_i"), c2ii("corollary2_ii"), t5i("theorem5_i"),
      t5ii("theorem5_ii");

  std::uniform_int_distribution<int> pick_task(0, cfg.tasks - 1);
  std::uniform_int_distribution<int> pick_cls(0, cfg.classes_per_task - 1);
  std::uniform_int_distribution<std::size_t> pick_tau(0, cfg.tau_grid.size() - 1);

  std::vector<ProbTable> batch;
  const std::vector<int> classes(cfg.tasks, cfg.classes_per_task);
  for (long i = 0; i < cfg.samples; ++i) {
    ProbTable pt = random_table(cfg, rng, false);
    t1.add_identity(check_theorem1(pt));

    // Sliding batch window so corollary 1 sees one batch instance per sample.
    batch.push_back(pt);
    if (batch.size() > 4) batch.erase(batch.begin());
    c1.add_identity(check_corollary1(batch));

    // Theorem 2 direction i: detectors copied from tp, every h_ood <= h_tp.
    {
      OodVector ov = ood_from_tp(pt.tp, pt.truth);
      const EntropyReport rep = entropies(pt, &ov);
      CheckResult c;
      c.slack = rep.h_tp;
      for (double d : rep.h_ood) {
        c.slack = std::min(c.slack, rep.h_tp - d);
        c.pass = c.pass && bound_holds(d, rep.h_tp);
      }
      t2i.add_bound(c);
    }

    OodVector ov = random_ood_vector(cfg.tasks, rng, false);
    t2ii.add_bound(tp_from_ood(ov).check);
    {
      std::vector<std::vector<double>> wp(cfg.tasks);
      for (auto& w : wp) w = random_simplex(cfg.classes_per_task, rng);
      Truth truth{ov.true_task(), pick_cls(rng)};
      t3.add_bound(check_theorem3(wp, ov, truth));
    }
    t4.add_bound(theorem4_construct(pt.cil, pt.truth, classes).check);

    // Open-world checks, OOD truths included.
    {
      ProbTable plus = random_table(cfg, rng, true);
      c2i.add_bound(check_corollary2_direction1(plus.tp, plus.truth));
      OodVector ow = random_ood_vector(cfg.tasks, rng, true);
      c2ii.add_bound(tp_plus_from_ood(ow).check);
    }

    {
      std::vector<double> taus(cfg.tasks);
      for (double& tau : taus) tau = cfg.tau_grid[pick_tau(rng)];
      t5i.add_bound(theorem5_direction1(pt.tp, pt.truth, taus).check);
      t5ii.add_bound(theorem5_direction2(ov, taus).check);
    }
  }
  return {t1.rep, c1.rep, t2i.rep,  t2ii.rep, t3.rep,
          t4.rep, c2i.rep, c2ii.rep, t5i.rep,  t5ii.rep};
}

std::string sweep_reports_to_json(const std::vector<SweepReport>& reports) {
  std::ostringstream os;
  os << "[\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    os << "  {\"theorem\": \"" << r.theorem << "\", \"samples\": " << r.samples
       << ", \"violations\": " << r.violations << ", \"worst_slack\": " << r.worst_slack
       << "}" << (i + 1 < reports.size() ? "," : "") << "\n";
  }
  os << "]\n";
  return os.str();
}

}  // namespace owcl::prob
