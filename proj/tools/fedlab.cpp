// fedlab command-line driver.
//
//   fedlab run      --config PATH [--out DIR] [--seed-override N] [--method NAME] [--dry-run]
//   fedlab dry-run  --config PATH [--out DIR] [--seed-override N] [--method NAME]
//   fedlab verify   [SUITE] [--out DIR]      SUITE: gradients|lemma1|varmin|biasloop|all
//
// FEDLAB_THREADS caps the number of client worker threads.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedlab/fedlab.hpp"

namespace {

struct RunArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string method;
  bool dry_run = false;
};

fedlab::ExperimentConfig load(const RunArgs& a) {
  fedlab::ExperimentConfig cfg = fedlab::parse_config(a.config);
  if (a.seed) cfg.seeds = {*a.seed};
  if (!a.method.empty()) {
    const auto m = fedlab::method_from_string(a.method);
    if (!m)
      throw fedlab::ValidationError("--method: unknown method '" + a.method +
                                    "'; valid methods: " + fedlab::valid_methods_list());
    cfg.methods = {*m};
  }
  if (!a.out.empty()) cfg.output_dir = a.out;
  return cfg;
}

int cmd_dry_run(const RunArgs& a) {
  const auto cfg = load(a);
  std::cout << fedlab::config_to_json(cfg).dump(2) << '\n';
  return 0;
}

int cmd_run(const RunArgs& a) {
  if (a.dry_run) return cmd_dry_run(a);
  const auto cfg = load(a);
  const auto res = fedlab::run_experiment(cfg, cfg.output_dir, [](const fedlab::RoundRecord& r) {
    if ((r.round + 1) % 10 == 0)
      std::cerr << r.method << " seed " << r.seed << " round " << r.round + 1 << ": acc " << r.global_acc
                << ", client std " << r.client_std << '\n';
  });
  for (const auto& row : res.rows)
    std::cout << row.method << " seed " << row.seed << ": final acc " << row.final_acc << ", client std "
              << row.client_std << '\n';
  std::cout << "outputs written to " << cfg.output_dir << '\n';
  return 0;
}

int cmd_verify(const std::string& suite, const std::string& out) {
  std::vector<fedlab::biasloop::ErrorTrace> traces;
  const auto rep = fedlab::verify::run_suite(suite, &traces);
  for (const auto& c : rep.checks)
    std::cout << (c.pass ? "PASS  " : "FAIL  ") << c.name << ": " << c.detail << '\n';
  if (!out.empty() && !traces.empty()) {
    std::filesystem::create_directories(out);
    std::ofstream f(std::filesystem::path(out) / "biasloop_traces.csv");
    for (std::size_t i = 0; i < traces.size(); ++i) fedlab::biasloop::write_trace_csv(f, traces[i], i == 0);
  }
  std::size_t failed = 0;
  for (const auto& c : rep.checks) failed += c.pass ? 0 : 1;
  std::cout << (failed == 0 ? "all checks passed" : std::to_string(failed) + " check(s) failed") << '\n';
  return failed == 0 ? 0 : 1;
}

void add_run_flags(CLI::App* sub, RunArgs& a) {
  sub->add_option("--config", a.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "output directory (overrides output.dir)");
  sub->add_option("--seed-override", a.seed, "run this single seed instead of the configured list");
  sub->add_option("--method", a.method, "run this single method instead of the configured list");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated contrastive learning lab"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "run an experiment");
  add_run_flags(run, run_args);
  run->add_flag("--dry-run", run_args.dry_run, "print the validated config and exit");

  RunArgs dry_args;
  auto* dry = app.add_subcommand("dry-run", "validate a config and print it with defaults filled in");
  add_run_flags(dry, dry_args);

  std::string suite = "all";
  std::string verify_out;
  auto* ver = app.add_subcommand("verify", "run oracle verification suites");
  ver->add_option("suite", suite, "gradients | lemma1 | varmin | biasloop | all");
  ver->add_option("--out", verify_out, "write bias-loop traces as CSV into this directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_args);
    if (*dry) return cmd_dry_run(dry_args);
    if (*ver) return cmd_verify(suite, verify_out);
  } catch (const fedlab::ValidationError& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
