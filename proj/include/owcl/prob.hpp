#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

// Cross-entropy decomposition of class-incremental prediction into within-task
// and task-id components, the Bernoulli OOD-detector transforms in both
// directions, and numeric checkers for every bound the transforms satisfy.
// All functions are pure; sweep runners own their RNG.

namespace owcl::prob {

inline constexpr double kProbFloor = 1e-12;   // clamp before any log
inline constexpr double kSimplexTol = 1e-6;   // |sum-1| accepted, then renormalized
inline constexpr double kIdentityTol = 1e-9;  // residual tolerance for exact identities
inline constexpr double kBoundGuard = 1e-9;   // numeric guard on bound comparisons

// Clamp a categorical probability into [kProbFloor, 1].
double clamp_prob(double p);
// Clamp a Bernoulli parameter strictly inside (0, 1).
double clamp_bernoulli(double p);

double neg_log(double p);  // -log(clamp_prob(p))

struct Truth {
  static constexpr int kOodTask = -1;
  int task = 0;
  int cls = 0;
  bool is_ood() const { return task == kOodTask; }
};

// Model output for a single input: per-task within-task distributions, the
// task distribution, and the flattened class distribution. In open-world mode
// tp has T+1 entries (last = OOD task) and cil carries one trailing OOD entry.
struct ProbTable {
  std::vector<std::vector<double>> wp;
  std::vector<double> tp;
  std::vector<double> cil;
  Truth truth;
  bool open_world = false;

  int tasks() const { return static_cast<int>(wp.size()); }
  // Flat cil index of (task, class).
  int flat_index(int task, int cls) const;
};

// Per-task Bernoulli detector outputs. membership is one-hot on the true task
// or all-zero when the input belongs to no learned task.
struct OodVector {
  std::vector<double> p_prime;
  std::vector<std::uint8_t> membership;

  int tasks() const { return static_cast<int>(p_prime.size()); }
  int true_task() const;  // Truth::kOodTask if membership is all-zero
};

struct EntropyReport {
  double h_wp = 0.0;
  double h_tp = 0.0;
  double h_cil = 0.0;
  std::vector<double> h_ood;       // Bernoulli cross-entropy per detector
  double h_tp_plus = 0.0;          // open-world variants, set when applicable
  double h_cil_plus = 0.0;
  std::vector<double> h_ood_plus;
  bool clamped = false;            // a log argument hit the floor
};

struct CheckResult {
  bool pass = true;
  double slack = 0.0;     // bound - value; negative means violated
  double residual = 0.0;  // |identity residual| where an identity is asserted
  std::string note;
};

// H(p, q) = -sum_i p_i log q_i with q clamped to [kProbFloor, 1].
// Throws std::invalid_argument on length mismatch. If clamping fires at an
// index supported by p, *clamped is set.
double cross_entropy(std::span<const double> p, std::span<const double> q,
                     bool* clamped = nullptr);

// Validates |sum-1| <= kSimplexTol and returns the renormalized copy.
std::vector<double> normalize_simplex(std::span<const double> v);

// cil[(k,j)] = wp[k][j] * tp[k]. Open-world: tp has T+1 entries and the OOD
// task contributes one trailing cil entry.
ProbTable decompose_cil(const std::vector<std::vector<double>>& wp,
                        const std::vector<double>& tp, Truth truth,
                        bool open_world = false);

// h_cil = -log cil[truth]; h_wp = -log wp[k0][j0]; h_tp = -log tp[k0];
// h_ood[k] = -log P'_k if k is the true task else -log(1 - P'_k).
// For open-world tables the tp/cil entropies land in the _plus fields.
EntropyReport entropies(const ProbTable& pt, const OodVector* ov = nullptr);

// H_CIL = H_WP + H_TP (exact identity) and H_CIL <= eps + delta with
// eps = H_WP, delta = H_TP.
CheckResult check_theorem1(const ProbTable& pt);

// Expectation identity: mean(h_cil) = mean(h_wp) + mean(h_tp). Implies both
// one-sided statements. Throws on an empty batch.
CheckResult check_corollary1(std::span<const ProbTable> batch);

// Direction i: P'_k = tp[k]. Accepts an open-world tp (T+1 entries) when the
// detector count `tasks` is passed; the OOD entry is dropped and membership is
// all-zero for OOD truth. With tasks < 0 the count is inferred from tp.
OodVector ood_from_tp(const std::vector<double>& tp, Truth truth, int tasks = -1);

struct TpFromOod {
  std::vector<double> tp;
  double h_tp = 0.0;
  double bound = 0.0;
  CheckResult check;
};

// Direction ii: tp[k] = P'_k / sum(P'), with the bound
// (sum_k 1{x in X_k} e^{d_k}) * (sum_k 1 - e^{-d_k}), d_k = h_ood[k].
// Requires a one-hot membership.
TpFromOod tp_from_ood(const OodVector& ov);

// h_cil <= h_wp + theorem-2 bound, with cil built through tp_from_ood.
CheckResult check_theorem3(const std::vector<std::vector<double>>& wp,
                           const OodVector& ov, Truth truth);

struct Theorem4Construction {
  std::vector<std::vector<double>> wp;
  std::vector<double> tp;
  OodVector ood;
  double eta = 0.0;  // h_cil of the input
  CheckResult check;
  bool degenerate = false;  // tp[k0] == 0 under the floor
};

// From a cil distribution: tp[k] = sum_j cil[(k,j)], wp = cil / tp,
// P'_k = tp[k]; every constructed entropy is <= h_cil.
Theorem4Construction theorem4_construct(const std::vector<double>& cil,
                                        Truth truth,
                                        const std::vector<int>& classes_per_task);

struct TpPlusFromOod {
  std::vector<double> tp_plus;  // T+1 entries, last = OOD task
  double h_tp_plus = 0.0;
  double bound = 0.0;
  CheckResult check;
};

// Open-world direction ii: tp+[k] = P'_k / Z, tp+[T] = prod(1-P'_k) / Z with
// Z = sum(P') + prod(1-P'). Bound is the max of the in-distribution and OOD
// branches. membership may be all-zero.
TpPlusFromOod tp_plus_from_ood(const OodVector& ov);

// Open-world direction i: P'_k = tp_plus[k]; h_ood_plus[k] <= h_tp_plus.
CheckResult check_corollary2_direction1(const std::vector<double>& tp_plus,
                                        Truth truth);

struct Theorem5Direction1 {
  OodVector ood;
  std::vector<double> bound_per_task;  // max(delta/tau_k, -log(1-(1-e^-delta)^(1/tau_k)))
  CheckResult check;
};

// Tempered direction i: P'_k = tp[k]^(1/tau_k).
Theorem5Direction1 theorem5_direction1(const std::vector<double>& tp, Truth truth,
                                       const std::vector<double>& taus);

struct Theorem5Direction2 {
  std::vector<double> tp;
  double h_tp = 0.0;
  double bound = 0.0;
  CheckResult check;
};

// Tempered direction ii: tp[k] = P'_k^(1/tau_k) / sum_j P'_j^(1/tau_j).
Theorem5Direction2 theorem5_direction2(const OodVector& ov,
                                       const std::vector<double>& taus);

// Bound values on a uniform delta ladder, used by the vanishing check: all
// detectors share delta. Returns the theorem-2 bound, both corollary-2
// branches, and the theorem-5 direction-ii bound at temperature tau.
struct BoundLadderPoint {
  double theorem2 = 0.0;
  double corollary2_ind = 0.0;
  double corollary2_ood = 0.0;
  double theorem5_dir1 = 0.0;
  double theorem5_dir2 = 0.0;
};
BoundLadderPoint bound_ladder_point(double delta, int tasks, double tau);

// 1-D bisection for the tempered-transform temperature described alongside
// theorem 5: solves delta/tau = -log(1 - (1 - e^-delta)^(1/tau)) for tau > 0.
// The source material describes the optimum but gives no solver.
double solve_theorem5_tau(double delta, double lo = 1e-3, double hi = 1e3,
                          int iters = 200);

// ---------------------------------------------------------------------------
// Randomized sweeps

struct SweepConfig {
  long samples = 10000;
  int tasks = 4;
  int classes_per_task = 3;
  std::uint64_t seed = 1;
  bool open_world = false;
  std::vector<double> tau_grid = {0.25, 0.5, 1.0, 2.0, 4.0};
};

struct SweepReport {
  std::string theorem;
  long samples = 0;
  long violations = 0;
  double worst_slack = 0.0;  // minimal bound margin, or max residual for identities
};

std::vector<double> random_simplex(int n, std::mt19937_64& rng);
OodVector random_ood_vector(int tasks, std::mt19937_64& rng, bool allow_ood_truth);

// Runs every theorem/corollary sweep and returns one report per check.
std::vector<SweepReport> run_theorem_sweeps(const SweepConfig& cfg);

std::string sweep_reports_to_json(const std::vector<SweepReport>& reports);

}  // namespace owcl::prob
