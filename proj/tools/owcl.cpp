// owcl: open-world continual learning workbench.
//
//   owcl verify-theorems --samples N --tasks T --classes-per-task C --seed S
//   owcl train --config cfg.json --out run_dir
//   owcl evaluate --run run_dir --rule {concat,more,more_msp,tempered,odin,calibrated}
//   owcl report --runs dir --out out.csv

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "owcl/experiment.hpp"
#include "owcl/prob.hpp"

int main(int argc, char** argv) {
  CLI::App app{"open-world continual learning workbench"};
  app.require_subcommand(1);

  auto* verify = app.add_subcommand(
      "verify-theorems", "numeric sweeps over the cross-entropy bounds");
  long samples = 10000;
  int tasks = 4, classes = 3;
  std::uint64_t seed = 1;
  bool open_world = false;
  std::string verify_out;
  verify->add_option("--samples", samples, "instances per check");
  verify->add_option("--tasks", tasks, "tasks per instance");
  verify->add_option("--classes-per-task", classes, "classes per task");
  verify->add_option("--seed", seed, "generator seed");
  verify->add_flag("--open-world", open_world,
                   "include OOD-truth inputs in the open-world checks");
  verify->add_option("--out", verify_out, "write the JSON report here");

  auto* train = app.add_subcommand("train", "run a training pipeline");
  std::string config_path, out_dir = "run";
  train->add_option("--config", config_path, "experiment config JSON")
      ->required();
  train->add_option("--out", out_dir, "artifacts directory");

  auto* evaluate =
      app.add_subcommand("evaluate", "re-evaluate a finished run");
  std::string run_dir, rule = "concat";
  double odin_tau = 2.0, odin_eps = 0.002, nu = 0.1, tau = 5.0;
  evaluate->add_option("--run", run_dir, "run directory")->required();
  evaluate->add_option("--rule", rule,
                       "concat|more|more_msp|tempered|odin|calibrated");
  evaluate->add_option("--tau", odin_tau, "ODIN temperature");
  evaluate->add_option("--eps", odin_eps, "ODIN input perturbation");
  evaluate->add_option("--nu", nu, "tempered WP temperature");
  evaluate->add_option("--tp-tau", tau, "tempered TP temperature");

  auto* report = app.add_subcommand("report", "aggregate run metrics to CSV");
  std::string runs_dir, csv_out;
  report->add_option("--runs", runs_dir, "directory of run directories")
      ->required();
  report->add_option("--out", csv_out, "output CSV path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*verify) {
      owcl::prob::SweepConfig cfg;
      cfg.samples = samples;
      cfg.tasks = tasks;
      cfg.classes_per_task = classes;
      cfg.seed = seed;
      cfg.open_world = open_world;
      const auto reports = owcl::prob::run_theorem_sweeps(cfg);
      const std::string text = owcl::prob::sweep_reports_to_json(reports);
      if (verify_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream os(verify_out);
        os << text;
      }
      long violations = 0;
      for (const auto& r : reports) violations += r.violations;
      return violations == 0 ? 0 : 1;
    }
    if (*train) {
      const auto cfg = owcl::harness::load_config(config_path);
      const auto result = owcl::harness::run_experiment(cfg, out_dir);
      std::cout << owcl::metrics::metrics_report_to_json(result.report);
      return 0;
    }
    if (*evaluate) {
      owcl::harness::EvalOptions opts;
      opts.rule = rule;
      opts.odin_tau = odin_tau;
      opts.odin_eps = odin_eps;
      opts.nu = nu;
      opts.tau = tau;
      const auto report_json = owcl::harness::evaluate_run(run_dir, opts);
      std::cout << owcl::metrics::metrics_report_to_json(report_json);
      return 0;
    }
    if (*report) {
      const std::string csv = owcl::harness::report_runs_csv(runs_dir);
      if (csv_out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream os(csv_out);
        os << csv;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "owcl: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
