#include "owcl/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "owcl/infer.hpp"

namespace owcl::harness {

using nlohmann::json;

namespace {

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

template <typename T>
void maybe(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig config_from_json_text(const std::string& text) {
  const json j = json::parse(text);
  ExperimentConfig cfg;
  maybe(j, "dataset", cfg.dataset);
  maybe(j, "tasks", cfg.tasks);
  maybe(j, "classes_per_task", cfg.classes_per_task);
  maybe(j, "side", cfg.side);
  maybe(j, "dim", cfg.dim);
  maybe(j, "separation", cfg.separation);
  maybe(j, "train_per_class", cfg.train_per_class);
  maybe(j, "test_per_class", cfg.test_per_class);
  maybe(j, "ood_classes", cfg.ood_classes);
  maybe(j, "noise", cfg.noise);
  maybe(j, "blurry_fraction", cfg.blurry_fraction);
  maybe(j, "idx_images", cfg.idx_images);
  maybe(j, "idx_labels", cfg.idx_labels);
  maybe(j, "idx_test_fraction", cfg.idx_test_fraction);
  maybe(j, "method", cfg.method);
  maybe(j, "rules", cfg.rules);
  maybe(j, "odin_tau", cfg.odin_tau);
  maybe(j, "odin_eps", cfg.odin_eps);
  maybe(j, "nu", cfg.nu);
  maybe(j, "tau", cfg.tau);
  maybe(j, "seed", cfg.seed);
  maybe(j, "class_order_seed", cfg.class_order_seed);
  maybe(j, "epochs", cfg.train.epochs);
  maybe(j, "head_epochs", cfg.train.head_epochs);
  maybe(j, "lr", cfg.train.lr);
  maybe(j, "batch_size", cfg.train.batch_size);
  maybe(j, "memory_budget", cfg.train.memory_budget);
  maybe(j, "tau_c", cfg.train.tau_c);
  maybe(j, "p_sparsity", cfg.train.p_sparsity);
  maybe(j, "s", cfg.train.s);
  maybe(j, "lambda", cfg.train.lambda);
  maybe(j, "back_update", cfg.train.back_update);
  maybe(j, "back_epochs", cfg.train.back_epochs);
  maybe(j, "back_lr", cfg.train.back_lr);
  maybe(j, "back_batch", cfg.train.back_batch);
  maybe(j, "hidden_dim", cfg.train.hidden_dim);
  maybe(j, "feat_dim", cfg.train.feat_dim);
  maybe(j, "proj_dim", cfg.train.proj_dim);
  cfg.train.seed = cfg.seed;
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_config: cannot open " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return config_from_json_text(buf.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = cfg.dataset;
  j["tasks"] = cfg.tasks;
  j["classes_per_task"] = cfg.classes_per_task;
  j["side"] = cfg.side;
  j["dim"] = cfg.dim;
  j["separation"] = cfg.separation;
  j["train_per_class"] = cfg.train_per_class;
  j["test_per_class"] = cfg.test_per_class;
  j["ood_classes"] = cfg.ood_classes;
  j["noise"] = cfg.noise;
  j["blurry_fraction"] = cfg.blurry_fraction;
  j["idx_images"] = cfg.idx_images;
  j["idx_labels"] = cfg.idx_labels;
  j["idx_test_fraction"] = cfg.idx_test_fraction;
  j["method"] = cfg.method;
  j["rules"] = cfg.rules;
  j["odin_tau"] = cfg.odin_tau;
  j["odin_eps"] = cfg.odin_eps;
  j["nu"] = cfg.nu;
  j["tau"] = cfg.tau;
  j["seed"] = cfg.seed;
  j["class_order_seed"] = cfg.class_order_seed;
  j["epochs"] = cfg.train.epochs;
  j["head_epochs"] = cfg.train.head_epochs;
  j["lr"] = cfg.train.lr;
  j["batch_size"] = cfg.train.batch_size;
  j["memory_budget"] = cfg.train.memory_budget;
  j["tau_c"] = cfg.train.tau_c;
  j["p_sparsity"] = cfg.train.p_sparsity;
  j["s"] = cfg.train.s;
  j["lambda"] = cfg.train.lambda;
  j["back_update"] = cfg.train.back_update;
  j["back_epochs"] = cfg.train.back_epochs;
  j["back_lr"] = cfg.train.back_lr;
  j["back_batch"] = cfg.train.back_batch;
  j["hidden_dim"] = cfg.train.hidden_dim;
  j["feat_dim"] = cfg.train.feat_dim;
  j["proj_dim"] = cfg.train.proj_dim;
  return j.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg) {
  return fnv1a_hex(config_to_json(cfg));
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.dataset != "shapes" && cfg.dataset != "gaussian" && cfg.dataset != "idx")
    throw std::invalid_argument("config: unknown dataset " + cfg.dataset);
  if (cfg.tasks < 1 || cfg.classes_per_task < 1)
    throw std::invalid_argument("config: tasks and classes_per_task must be positive");
  learn::method_from_string(cfg.method);  // throws on unknown
  if (cfg.rules.empty())
    throw std::invalid_argument("config: at least one rule required");
  for (const std::string& rule : cfg.rules) {
    if (rule != "concat" && rule != "more" && rule != "more_msp" &&
        rule != "tempered" && rule != "odin" && rule != "calibrated")
      throw std::invalid_argument("config: unknown rule " + rule);
    if ((rule == "more" || rule == "more_msp") && cfg.method != "more")
      throw std::invalid_argument("config: rule " + rule + " requires method more");
  }
  if (cfg.train.epochs <= 0)
    throw std::invalid_argument("config: epochs must be positive");
  if (!(cfg.train.lr > 0.0))
    throw std::invalid_argument("config: lr must be positive");
}

// ---------------------------------------------------------------------------
// Stream construction

namespace {

// Regroups tasked classes under a seeded permutation; holdout untouched.
void permute_class_grouping(data::TaskStream& stream, std::uint64_t seed) {
  std::map<int, std::pair<std::vector<data::Sample>, std::vector<data::Sample>>> pools;
  std::vector<int> labels;
  for (const data::TaskData& task : stream.tasks)
    for (int c : task.classes) labels.push_back(c);
  for (data::TaskData& task : stream.tasks) {
    for (data::Sample& s : task.train) pools[s.label].first.push_back(std::move(s));
    for (data::Sample& s : task.test) pools[s.label].second.push_back(std::move(s));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(labels.begin(), labels.end(), rng);
  const int per_task = static_cast<int>(labels.size()) /
                       static_cast<int>(stream.tasks.size());
  for (std::size_t k = 0; k < stream.tasks.size(); ++k) {
    data::TaskData& task = stream.tasks[k];
    task.classes.clear();
    task.train.clear();
    task.test.clear();
    for (int j = 0; j < per_task; ++j) {
      const int label = labels[k * per_task + j];
      task.classes.push_back(label);
      auto& pool = pools[label];
      for (data::Sample& s : pool.first) task.train.push_back(std::move(s));
      for (data::Sample& s : pool.second) task.test.push_back(std::move(s));
    }
  }
}

}  // namespace

data::TaskStream build_stream(const ExperimentConfig& cfg) {
  data::TaskStream stream;
  if (cfg.dataset == "shapes") {
    data::ShapeSpec spec;
    spec.tasks = cfg.tasks;
    spec.classes_per_task = cfg.classes_per_task;
    spec.side = cfg.side;
    spec.train_per_class = cfg.train_per_class;
    spec.test_per_class = cfg.test_per_class;
    spec.ood_classes = cfg.ood_classes;
    spec.noise = cfg.noise;
    spec.seed = cfg.seed;
    stream = data::gen_shape_image_stream(spec);
  } else if (cfg.dataset == "gaussian") {
    data::GaussianSpec spec;
    spec.tasks = cfg.tasks;
    spec.classes_per_task = cfg.classes_per_task;
    spec.dim = cfg.dim;
    spec.separation = cfg.separation;
    spec.train_per_class = cfg.train_per_class;
    spec.test_per_class = cfg.test_per_class;
    spec.ood_classes = cfg.ood_classes;
    spec.seed = cfg.seed;
    stream = data::gen_gaussian_stream(spec);
  } else {
    stream = data::split_into_tasks(
        data::load_idx_dataset(cfg.idx_images, cfg.idx_labels), cfg.tasks,
        cfg.classes_per_task, cfg.idx_test_fraction, cfg.side, cfg.seed);
  }
  if (cfg.class_order_seed != 0)
    permute_class_grouping(stream, cfg.class_order_seed);
  if (cfg.blurry_fraction > 0.0)
    data::apply_blurry_boundaries(stream, cfg.blurry_fraction, cfg.seed ^ 0xb1u);
  return stream;
}

// ---------------------------------------------------------------------------
// Rule engine

namespace {

struct RuleEngine {
  std::string rule = "concat";
  infer::OdinParams odin;
  double nu = 0.1;
  double tau = 5.0;
  infer::CalibrationParams calib;

  struct SampleEval {
    infer::GlobalLabel pred;
    std::vector<double> task_scores;
    double ood_score = 0.0;
  };

  SampleEval eval(const learn::TaskModel& model, const nn::Vec& x) const {
    const int t = model.tasks_learned();
    SampleEval out;
    out.task_scores.resize(t);
    if (rule == "more" || rule == "more_msp") {
      std::vector<nn::Vec> probs(t);
      std::vector<double> coeff(t, 1.0);
      for (int k = 0; k < t; ++k) {
        probs[k] = model.class_probs_excl_ood(x, k);
        if (rule == "more")
          coeff[k] = infer::more_coefficient(model.stats.at(k),
                                             model.features(x, k));
      }
      const infer::MorePrediction mp = infer::predict_more(probs, coeff);
      out.pred = mp.label;
      out.ood_score = mp.ood_score;
      for (int k = 0; k < t; ++k) {
        double best = 0.0;
        for (double p : probs[k]) best = std::max(best, p * coeff[k]);
        out.task_scores[k] = best;
      }
      return out;
    }
    if (rule == "odin") {
      std::vector<nn::Vec> rescored(t);
      for (int k = 0; k < t; ++k)
        rescored[k] = infer::odin_postprocess(x, model.task_diff_fn(k), odin);
      out.pred = infer::predict_concat(rescored);
      for (int k = 0; k < t; ++k)
        out.task_scores[k] =
            *std::max_element(rescored[k].begin(), rescored[k].end());
      out.ood_score = infer::ood_score_msp(rescored);
      return out;
    }
    std::vector<nn::Vec> logits(t);
    for (int k = 0; k < t; ++k) logits[k] = model.class_logits(x, k);
    if (rule == "tempered") {
      out.pred = infer::predict_tempered(logits, nu, tau);
      for (int k = 0; k < t; ++k) {
        const nn::Vec coarse = nn::softmax(logits[k], tau);
        out.task_scores[k] = *std::max_element(coarse.begin(), coarse.end());
      }
      out.ood_score =
          *std::max_element(out.task_scores.begin(), out.task_scores.end());
      return out;
    }
    if (rule == "calibrated") {
      out.pred = infer::predict_calibrated(logits, calib);
      for (int k = 0; k < t; ++k) {
        double best = -std::numeric_limits<double>::infinity();
        for (double v : logits[k])
          best = std::max(best, calib.alpha[k] * v + calib.beta[k]);
        out.task_scores[k] = 1.0 / (1.0 + std::exp(-best));
      }
      out.ood_score =
          *std::max_element(out.task_scores.begin(), out.task_scores.end());
      return out;
    }
    // concat
    out.pred = infer::predict_concat(logits);
    std::vector<nn::Vec> softmaxes(t);
    for (int k = 0; k < t; ++k) {
      softmaxes[k] = nn::softmax(logits[k]);
      out.task_scores[k] =
          *std::max_element(softmaxes[k].begin(), softmaxes[k].end());
    }
    out.ood_score = infer::ood_score_msp(softmaxes);
    return out;
  }
};

int til_predict_local(const learn::TaskModel& model, const nn::Vec& x, int task) {
  const nn::Vec logits = model.class_logits(x, task);
  int best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = static_cast<int>(j);
  return best;
}

std::vector<infer::CalibSample> calibration_snapshots(
    const learn::TaskModel& model, std::span<const data::Sample> memory) {
  std::vector<infer::CalibSample> out;
  const int t = model.tasks_learned();
  for (const data::Sample& s : memory) {
    infer::CalibSample cs;
    cs.logits.resize(t);
    bool found = false;
    for (int k = 0; k < t && !found; ++k) {
      const auto& classes = model.task_classes.at(k);
      const auto it = std::find(classes.begin(), classes.end(), s.label);
      if (it != classes.end()) {
        cs.truth = {k, static_cast<int>(it - classes.begin())};
        found = true;
      }
    }
    if (!found) continue;
    for (int k = 0; k < t; ++k) cs.logits[k] = model.class_logits(s.x, k);
    out.push_back(std::move(cs));
  }
  return out;
}

RuleEngine make_engine(const std::string& rule, const ExperimentConfig& cfg,
                       const learn::TaskModel& model,
                       std::span<const data::Sample> memory) {
  RuleEngine engine;
  engine.rule = rule;
  engine.odin = infer::OdinParams{cfg.odin_tau, cfg.odin_eps};
  engine.nu = cfg.nu;
  engine.tau = cfg.tau;
  if (rule == "calibrated") {
    const auto snaps = calibration_snapshots(model, memory);
    if (snaps.empty())
      throw std::runtime_error("calibrated rule: empty memory snapshot");
    infer::CalibConfig cc;
    cc.seed = cfg.seed ^ 0xca11b;
    engine.calib = infer::calibrate(snaps, cc);
  } else {
    const int t = model.tasks_learned();
    engine.calib.alpha.assign(t, 1.0);
    engine.calib.beta.assign(t, 0.0);
  }
  return engine;
}

struct PredictionRow {
  std::uint64_t sample_id;
  int true_task;
  int true_class;
  int pred_class;
  double ood_score;
};

struct FinalEval {
  double cil_acc = 0.0;
  double til_acc = 0.0;
  std::vector<double> per_task_cil, per_task_til, per_task_auc;
  std::vector<PredictionRow> rows;
};

FinalEval evaluate_final(const learn::TaskModel& model,
                         const data::TaskStream& stream,
                         const RuleEngine& engine) {
  const int t = model.tasks_learned();
  FinalEval out;
  long correct_cil = 0, correct_til = 0, total = 0;
  std::vector<long> task_correct_cil(t, 0), task_correct_til(t, 0),
      task_total(t, 0);
  // task_scores[k][kk] = scores from task k's detector on task kk's test data.
  std::vector<std::vector<std::vector<double>>> detector_scores(
      t, std::vector<std::vector<double>>(t));
  for (int kk = 0; kk < t; ++kk) {
    for (const data::Sample& s : stream.tasks[kk].test) {
      const RuleEngine::SampleEval ev = engine.eval(model, s.x);
      const int pred_global =
          model.task_classes.at(ev.pred.task).at(ev.pred.cls);
      const int til_local = til_predict_local(model, s.x, kk);
      const int til_global = model.task_classes.at(kk).at(til_local);
      ++total;
      ++task_total[kk];
      if (pred_global == s.label) {
        ++correct_cil;
        ++task_correct_cil[kk];
      }
      if (til_global == s.label) {
        ++correct_til;
        ++task_correct_til[kk];
      }
      for (int k = 0; k < t; ++k)
        detector_scores[k][kk].push_back(ev.task_scores[k]);
      out.rows.push_back(
          {s.id, kk, s.label, pred_global, ev.ood_score});
    }
  }
  out.cil_acc = metrics::average_accuracy(correct_cil, total);
  out.til_acc = metrics::average_accuracy(correct_til, total);
  for (int k = 0; k < t; ++k) {
    out.per_task_cil.push_back(
        metrics::average_accuracy(task_correct_cil[k], task_total[k]));
    out.per_task_til.push_back(
        metrics::average_accuracy(task_correct_til[k], task_total[k]));
    std::vector<double> ood_pool;
    for (int kk = 0; kk < t; ++kk)
      if (kk != k)
        ood_pool.insert(ood_pool.end(), detector_scores[k][kk].begin(),
                        detector_scores[k][kk].end());
    if (t > 1)
      out.per_task_auc.push_back(
          metrics::auc(detector_scores[k][k], ood_pool));
  }
  return out;
}

struct StageScores {
  std::vector<double> ind;
  std::vector<double> ood;
  std::vector<std::pair<std::uint64_t, double>> ind_rows, ood_rows;
};

// IND = test data of learned tasks; OOD = future tasks plus the open-world
// holdout, scored by the stage model's global score.
StageScores stage_ood_scores(const learn::TaskModel& model,
                             const data::TaskStream& stream,
                             const RuleEngine& engine) {
  StageScores out;
  const int learned = model.tasks_learned();
  const int total_tasks = static_cast<int>(stream.tasks.size());
  for (int kk = 0; kk < total_tasks; ++kk) {
    for (const data::Sample& s : stream.tasks[kk].test) {
      const double score = engine.eval(model, s.x).ood_score;
      if (kk < learned) {
        out.ind.push_back(score);
        out.ind_rows.push_back({s.id, score});
      } else {
        out.ood.push_back(score);
        out.ood_rows.push_back({s.id, score});
      }
    }
  }
  for (const data::Sample& s : stream.ood_holdout) {
    const double score = engine.eval(model, s.x).ood_score;
    out.ood.push_back(score);
    out.ood_rows.push_back({s.id, score});
  }
  return out;
}

void write_memory(const std::filesystem::path& path,
                  const std::vector<data::Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  const std::uint32_t n = static_cast<std::uint32_t>(samples.size());
  os.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const data::Sample& s : samples) {
    const std::uint32_t dim = static_cast<std::uint32_t>(s.x.size());
    os.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    os.write(reinterpret_cast<const char*>(s.x.data()),
             static_cast<std::streamsize>(s.x.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(&s.label), sizeof(s.label));
    os.write(reinterpret_cast<const char*>(&s.id), sizeof(s.id));
  }
}

std::vector<data::Sample> read_memory(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return {};
  std::uint32_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::vector<data::Sample> out;
  for (std::uint32_t i = 0; i < n && is; ++i) {
    std::uint32_t dim = 0;
    is.read(reinterpret_cast<char*>(&dim), sizeof(dim));
    data::Sample s;
    s.x.resize(dim);
    is.read(reinterpret_cast<char*>(s.x.data()),
            static_cast<std::streamsize>(dim * sizeof(double)));
    is.read(reinterpret_cast<char*>(&s.label), sizeof(s.label));
    is.read(reinterpret_cast<char*>(&s.id), sizeof(s.id));
    if (is) out.push_back(std::move(s));
  }
  return out;
}

void write_predictions_csv(const std::filesystem::path& path,
                           const std::vector<PredictionRow>& rows) {
  std::ofstream os(path);
  os << "sample_id,true_task,true_class,pred_class,ood_score\n";
  for (const PredictionRow& r : rows)
    os << r.sample_id << "," << r.true_task << "," << r.true_class << ","
       << r.pred_class << "," << r.ood_score << "\n";
}

void write_stage_csv(const std::filesystem::path& path, const StageScores& sc) {
  std::ofstream os(path);
  os << "sample_id,origin,score\n";
  for (const auto& [id, score] : sc.ind_rows)
    os << id << ",ind," << score << "\n";
  for (const auto& [id, score] : sc.ood_rows)
    os << id << ",ood," << score << "\n";
}

std::string default_rule(const std::string& method) {
  return method == "more" ? "more" : "concat";
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg,
                         const std::filesystem::path& out_dir) {
  validate_config(cfg);
  const data::TaskStream stream = build_stream(cfg);

  // Open-world wiring audit: holdout ids never appear in training data.
  {
    std::set<std::uint64_t> holdout_ids;
    for (const data::Sample& s : stream.ood_holdout) holdout_ids.insert(s.id);
    for (const data::TaskData& task : stream.tasks)
      for (const data::Sample& s : task.train)
        if (holdout_ids.count(s.id))
          throw std::runtime_error("open-world audit: holdout sample in training data");
  }

  std::filesystem::create_directories(out_dir);
  std::filesystem::create_directories(out_dir / "checkpoints");
  std::filesystem::create_directories(out_dir / "scores");
  {
    std::ofstream os(out_dir / "config.json");
    os << config_to_json(cfg);
  }

  learn::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  learn::TaskModel model = learn::make_model(
      learn::method_from_string(cfg.method), stream.dim, stream.side, tc);
  learn::MemoryBuffer buffer(tc.memory_budget, cfg.seed ^ 0x5eedu);
  std::mt19937_64 rng(cfg.seed ^ 0x7261696eull);

  const int t = static_cast<int>(stream.tasks.size());
  metrics::RunLedger ledger;
  ledger.til_acc.assign(t, std::vector<double>(t, 0.0));
  ledger.cil_acc.assign(t, std::vector<double>(t, 0.0));
  const std::string primary_rule = cfg.rules.front();

  for (int k = 0; k < t; ++k) {
    learn::train_task(model, stream.tasks[k], buffer, rng);
    if (cfg.method != "more")
      buffer.admit_task(stream.tasks[k].train, stream.tasks[k].classes);
    learn::save_model(model,
                      out_dir / "checkpoints" / ("task_" + std::to_string(k)));

    const RuleEngine engine =
        make_engine(model.tasks_learned() > 1 ? primary_rule
                                              : default_rule(cfg.method),
                    cfg, model, buffer.all());
    // Ledger column k: accuracy on each learned task under the stage model.
    for (int kk = 0; kk <= k; ++kk) {
      long cil = 0, til = 0, n = 0;
      for (const data::Sample& s : stream.tasks[kk].test) {
        const auto ev = engine.eval(model, s.x);
        const int pred_global =
            model.task_classes.at(ev.pred.task).at(ev.pred.cls);
        const int til_local = til_predict_local(model, s.x, kk);
        ++n;
        if (pred_global == s.label) ++cil;
        if (model.task_classes.at(kk).at(til_local) == s.label) ++til;
      }
      ledger.cil_acc[kk][k] = metrics::average_accuracy(cil, n);
      ledger.til_acc[kk][k] = metrics::average_accuracy(til, n);
    }
    if (k + 1 < t || !stream.ood_holdout.empty()) {
      const StageScores sc = stage_ood_scores(model, stream, engine);
      if (!sc.ood.empty()) {
        ledger.stage_auc.push_back(metrics::auc(sc.ind, sc.ood));
        write_stage_csv(
            out_dir / "scores" / ("stage_" + std::to_string(k + 1) + ".csv"),
            sc);
      }
    }
  }

  write_memory(out_dir / "memory.bin", buffer.all());

  RunResult result;
  result.ledger = ledger;
  bool first = true;
  for (const std::string& rule : cfg.rules) {
    const RuleEngine engine = make_engine(rule, cfg, model, buffer.all());
    const FinalEval fe = evaluate_final(model, stream, engine);
    metrics::MetricsReport report;
    report.cil_acc = fe.cil_acc;
    report.til_acc = fe.til_acc;
    report.per_task_cil = fe.per_task_cil;
    report.per_task_til = fe.per_task_til;
    report.per_task_auc = fe.per_task_auc;
    report.avg_auc =
        fe.per_task_auc.empty() ? 1.0 : metrics::average_auc(fe.per_task_auc);
    report.ai_auc = ledger.stage_auc.empty() ? 0.0 : metrics::ai_auc(ledger);
    report.forgetting = t >= 2 ? metrics::forgetting_rate(ledger.til_acc, t) : 0.0;
    report.forgetting_cil =
        t >= 2 ? metrics::forgetting_rate(ledger.cil_acc, t) : 0.0;
    report.seed = cfg.seed;
    report.config_hash = config_hash(cfg);
    const std::string suffix = first ? "" : "_" + rule;
    {
      std::ofstream os(out_dir / ("metrics" + suffix + ".json"));
      os << metrics::metrics_report_to_json(report);
    }
    write_predictions_csv(out_dir / ("predictions" + suffix + ".csv"), fe.rows);
    if (first) result.report = report;
    first = false;
  }
  return result;
}

metrics::MetricsReport evaluate_run(const std::filesystem::path& run_dir,
                                    const EvalOptions& opts) {
  ExperimentConfig cfg = load_config(run_dir / "config.json");
  cfg.odin_tau = opts.odin_tau;
  cfg.odin_eps = opts.odin_eps;
  cfg.nu = opts.nu;
  cfg.tau = opts.tau;
  const data::TaskStream stream = build_stream(cfg);
  const std::vector<data::Sample> memory = read_memory(run_dir / "memory.bin");

  const int t = static_cast<int>(stream.tasks.size());
  const learn::TaskModel final_model =
      learn::load_model(run_dir / "checkpoints" / ("task_" + std::to_string(t - 1)));
  const RuleEngine engine = make_engine(opts.rule, cfg, final_model, memory);
  const FinalEval fe = evaluate_final(final_model, stream, engine);

  // Stage AUCs recomputed from the per-task checkpoints under this rule.
  std::vector<double> stage_auc;
  for (int k = 0; k < t; ++k) {
    if (k + 1 >= t && stream.ood_holdout.empty()) break;
    const learn::TaskModel stage_model = learn::load_model(
        run_dir / "checkpoints" / ("task_" + std::to_string(k)));
    const RuleEngine stage_engine =
        make_engine(stage_model.tasks_learned() > 1 ? opts.rule
                                                    : default_rule(cfg.method),
                    cfg, stage_model, memory);
    const StageScores sc = stage_ood_scores(stage_model, stream, stage_engine);
    if (!sc.ood.empty()) stage_auc.push_back(metrics::auc(sc.ind, sc.ood));
  }

  metrics::MetricsReport report;
  report.cil_acc = fe.cil_acc;
  report.til_acc = fe.til_acc;
  report.per_task_cil = fe.per_task_cil;
  report.per_task_til = fe.per_task_til;
  report.per_task_auc = fe.per_task_auc;
  report.avg_auc =
      fe.per_task_auc.empty() ? 1.0 : metrics::average_auc(fe.per_task_auc);
  report.ai_auc = stage_auc.empty() ? 0.0 : metrics::ai_auc(stage_auc);
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg);
  {
    std::ofstream os(run_dir / ("metrics_" + opts.rule + ".json"));
    os << metrics::metrics_report_to_json(report);
  }
  write_predictions_csv(run_dir / ("predictions_" + opts.rule + ".csv"), fe.rows);
  return report;
}

std::string report_runs_csv(const std::filesystem::path& runs_dir) {
  std::ostringstream os;
  os << "run,cil_acc,til_acc,avg_auc,ai_auc,forgetting,seed,config_hash\n";
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(runs_dir))
    if (entry.is_directory() &&
        std::filesystem::exists(entry.path() / "metrics.json"))
      dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    std::ifstream is(dir / "metrics.json");
    json j;
    is >> j;
    os << dir.filename().string() << "," << j.value("cil_acc", 0.0) << ","
       << j.value("til_acc", 0.0) << "," << j.value("avg_auc", 0.0) << ","
       << j.value("ai_auc", 0.0) << "," << j.value("forgetting", 0.0) << ","
       << j.value("seed", 0ull) << "," << j.value("config_hash", std::string())
       << "\n";
  }
  return os.str();
}

}  // namespace owcl::harness
