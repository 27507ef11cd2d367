#pragma once

// Experiment driver: builds data and partitions for each seed, runs every
// configured method, and writes
//   <out>/config_echo.json         fully defaulted config
//   <out>/partition_seed<S>.json   client -> class -> sample indices
//   <out>/rounds.jsonl             one RoundRecord per line, flushed per round
//   <out>/summary.csv              method,seed,final_acc,client_std (+ mean/std rows)

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedlab/config.hpp"
#include "fedlab/data.hpp"
#include "fedlab/federation.hpp"

namespace fedlab {

struct PreparedData {
  LabeledDataset train;
  LabeledDataset test;
  PartitionPlan plan;
  std::vector<ClientData> clients;
};

// Seed streams: kData draws the mixture and the training pool, kTestData the
// test pool from the same mixture, kPartition the client split.
inline PreparedData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  PreparedData pd;
  const auto& d = cfg.dataset;
  if (d.kind == DatasetSpec::Kind::kSynthetic) {
    Rng drng(derive_seed(seed, {stream::kData}));
    const GaussianMixture mix = make_mixture(d.classes, d.dim, d.separation, drng);
    pd.train = sample_mixture(mix, d.train_per_class, d.sigma, drng);
    Rng trng(derive_seed(seed, {stream::kTestData}));
    pd.test = sample_mixture(mix, d.test_per_class, d.sigma, trng);
  } else {
    pd.train = load_csv(d.train_path);
    pd.test = load_csv(d.test_path);
    if (pd.train.dim != pd.test.dim)
      throw ShapeMismatch("train and test CSV files have different feature counts");
    const std::size_t C = std::max(pd.train.classes, pd.test.classes);
    pd.train.classes = C;
    pd.test.classes = C;
  }
  Rng prng(derive_seed(seed, {stream::kPartition}));
  const auto& p = cfg.partition;
  const std::size_t K = cfg.federation.clients;
  pd.plan = p.kind == PartitionSpec::Kind::kDirichlet
                ? partition_dirichlet(pd.train, K, p.alpha, prng)
                : partition_pathological(pd.train, K, p.classes_per_client, p.imbalance_ratio, prng);
  pd.clients = build_clients(pd.train, pd.plan, cfg.federation.confidence.validation_fraction, seed);
  return pd;
}

struct SummaryRow {
  std::string method;
  std::uint64_t seed = 0;
  double final_acc = 0.0;
  double client_std = 0.0;
};

inline constexpr const char* kSummaryHeader = "method,seed,final_acc,client_std";

inline void write_summary_row(std::ostream& os, const SummaryRow& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.17g,%.17g", r.final_acc, r.client_std);
  os << r.method << ',' << r.seed << ',' << buf << '\n';
}

// Footer: mean and sample std across seeds, per method in first-seen order.
inline void write_summary_footer(std::ostream& os, const std::vector<SummaryRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<Vec, Vec>> by_method;
  for (const auto& r : rows) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].first.push_back(r.final_acc);
    by_method[r.method].second.push_back(r.client_std);
  }
  char buf[128];
  for (const auto& m : order) {
    const auto& [acc, sd] = by_method[m];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", mean(acc), mean(sd));
    os << m << ",mean," << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", sample_std(acc), sample_std(sd));
    os << m << ",std," << buf << '\n';
  }
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << kSummaryHeader << '\n';
  for (const auto& r : rows) write_summary_row(os, r);
  write_summary_footer(os, rows);
}

struct ExperimentResult {
  std::vector<SummaryRow> rows;
};

// Runs every (method, seed) pair. With an empty out_dir nothing is written.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                       const std::function<void(const RoundRecord&)>& on_round = {}) {
  namespace fs = std::filesystem;
  const bool write = !out_dir.empty();
  std::ofstream rounds;
  std::ofstream summary;
  if (write) {
    fs::create_directories(out_dir);
    std::ofstream echo(fs::path(out_dir) / "config_echo.json");
    echo << config_to_json(cfg).dump(2) << '\n';
    rounds.open(fs::path(out_dir) / "rounds.jsonl", std::ios::trunc);
    summary.open(fs::path(out_dir) / "summary.csv", std::ios::trunc);
    if (!rounds || !summary) throw Error("cannot write to output directory '" + out_dir + "'");
    summary << kSummaryHeader << '\n' << std::flush;
  }
  ExperimentResult res;
  for (std::uint64_t seed : cfg.seeds) {
    const PreparedData pd = prepare_data(cfg, seed);
    if (write) {
      std::ofstream part(fs::path(out_dir) / ("partition_seed" + std::to_string(seed) + ".json"));
      part << plan_to_json(pd.plan, pd.train).dump() << '\n';
    }
    for (Method m : cfg.methods) {
      FederationSettings s = cfg.federation;
      s.method = m;
      const auto records = run_federation(pd.clients, pd.test, s, seed, [&](const RoundRecord& r) {
        if (write) rounds << to_json(r).dump() << '\n' << std::flush;
        if (on_round) on_round(r);
      });
      SummaryRow row{to_string(m), seed, 0.0, 0.0};
      if (!records.empty()) {
        row.final_acc = records.back().global_acc;
        row.client_std = records.back().client_std;
      }
      res.rows.push_back(row);
      if (write) {
        write_summary_row(summary, row);
        summary.flush();
      }
    }
  }
  if (write) write_summary_footer(summary, res.rows);
  return res;
}

}  // namespace fedlab
