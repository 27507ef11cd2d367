#pragma once

// Experiment configuration: a JSON document with nested sections. Every key
// is optional except `dataset`; unknown keys are rejected. The fully
// defaulted configuration can be echoed back and re-parsed to an identical
// value.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlab/error.hpp"
#include "fedlab/federation.hpp"

namespace fedlab {

struct DatasetSpec {
  enum class Kind { kSynthetic, kCsv };
  Kind kind = Kind::kSynthetic;
  // synthetic
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  double separation = 4.0;
  double sigma = 1.0;
  // csv
  std::string train_path;
  std::string test_path;

  bool operator==(const DatasetSpec&) const = default;
};

struct PartitionSpec {
  enum class Kind { kDirichlet, kPathological };
  Kind kind = Kind::kDirichlet;
  double alpha = 0.1;
  std::size_t classes_per_client = 3;
  double imbalance_ratio = 10.0;

  bool operator==(const PartitionSpec&) const = default;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  PartitionSpec partition;
  std::vector<Method> methods{Method::kCafedcl};
  FederationSettings federation;  // federation.method is set per run
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "fedlab_out";

  bool operator==(const ExperimentConfig&) const = default;
};

namespace detail {

using nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + " must be an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const char* k : keys) known |= it.key() == k;
      if (!known) throw ValidationError("unknown key '" + key(it.key()) + "'");
    }
  }

  bool has(const char* k) const { return j_.contains(k); }
  const json& raw(const char* k) const { return j_.at(k); }
  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  void number(const char* k, double& out) const {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_number()) throw ValidationError(key(k) + " must be a number");
    out = v.get<double>();
    if (!std::isfinite(out)) throw ValidationError(key(k) + " must be finite");
  }

  void count(const char* k, std::size_t& out) const {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw ValidationError(key(k) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  void text(const char* k, std::string& out) const {
    if (!has(k)) return;
    const json& v = j_.at(k);
    if (!v.is_string()) throw ValidationError(key(k) + " must be a string");
    out = v.get<std::string>();
  }

  Section child(const char* k) const { return Section(j_.at(k), key(k)); }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  const json& j_;
  std::string path_;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

}  // namespace detail

inline void validate(const ExperimentConfig& c, bool check_files = true) {
  using detail::require;
  const auto& d = c.dataset;
  if (d.kind == DatasetSpec::Kind::kSynthetic) {
    require(d.classes >= 2, "dataset.classes must be >= 2");
    require(d.dim > 0, "dataset.dim must be > 0");
    require(d.train_per_class > 0, "dataset.train_per_class must be > 0");
    require(d.test_per_class > 0, "dataset.test_per_class must be > 0");
    require(d.separation >= 0.0, "dataset.separation must be >= 0");
    require(d.sigma > 0.0, "dataset.sigma must be > 0");
  } else {
    require(!d.train_path.empty(), "dataset.train must name a CSV file");
    require(!d.test_path.empty(), "dataset.test must name a CSV file");
    if (check_files) {
      require(std::filesystem::exists(d.train_path), "dataset.train: file '" + d.train_path + "' does not exist");
      require(std::filesystem::exists(d.test_path), "dataset.test: file '" + d.test_path + "' does not exist");
    }
  }
  const auto& p = c.partition;
  if (p.kind == PartitionSpec::Kind::kDirichlet) {
    require(p.alpha > 0.0, "partition.alpha must be > 0");
  } else {
    require(p.classes_per_client >= 1, "partition.classes_per_client must be >= 1");
    if (d.kind == DatasetSpec::Kind::kSynthetic)
      require(p.classes_per_client <= d.classes, "partition.classes_per_client must be <= dataset.classes");
    require(p.imbalance_ratio >= 1.0, "partition.imbalance_ratio must be >= 1");
  }
  require(!c.methods.empty(), "method must name at least one method");
  const auto& f = c.federation;
  require(f.clients >= 1, "clients must be >= 1");
  require(f.iterations_per_epoch >= 1, "iterations_per_epoch must be >= 1");
  require(f.participation_rate > 0.0 && f.participation_rate <= 1.0, "participation_rate must be in (0, 1]");
  for (auto h : f.hidden) require(h > 0, "model.hidden widths must be > 0");
  require(f.embedding_dim > 0, "model.embedding_dim must be > 0");
  require(f.loss.tau > 0.0, "loss.tau must be > 0");
  require(f.loss.margin > 0.0, "loss.margin must be > 0");
  require(f.loss.lambda_align >= 0.0, "loss.lambda_align must be >= 0");
  require(f.loss.lambda_geo >= 0.0, "loss.lambda_geo must be >= 0");
  require(f.align_warmup_fraction >= 0.0 && f.align_warmup_fraction <= 1.0,
          "loss.align_warmup_fraction must be in [0, 1]");
  const auto& cp = f.confidence;
  for (double w : cp.mixture) require(w >= 0.0, "confidence.mixture weights must be >= 0");
  require(std::abs(cp.mixture[0] + cp.mixture[1] + cp.mixture[2] - 1.0) <= 1e-12,
          "confidence.mixture must sum to 1");
  require(cp.beta > 0.0, "confidence.beta must be > 0");
  require(cp.gamma >= 0.0 && cp.gamma <= 1.0, "confidence.gamma must be in [0, 1]");
  require(cp.clip_lo > 0.0 && cp.clip_lo <= cp.clip_hi, "confidence.clip must satisfy 0 < lo <= hi");
  require(cp.epsilon > 0.0, "confidence.epsilon must be > 0");
  require(cp.validation_fraction >= 0.0 && cp.validation_fraction < 1.0,
          "confidence.validation_fraction must be in [0, 1)");
  require(f.sgd.learning_rate > 0.0, "sgd.learning_rate must be > 0");
  require(f.sgd.decay > 0.0 && f.sgd.decay <= 1.0, "sgd.decay must be in (0, 1]");
  require(f.sgd.weight_decay >= 0.0, "sgd.weight_decay must be >= 0");
  require(f.sgd.momentum >= 0.0, "sgd.momentum must be >= 0");
  require(!c.seeds.empty(), "seeds must list at least one seed");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j, bool check_files = true) {
  using detail::Section;
  ExperimentConfig c;
  Section root(j, "");
  root.allow({"method", "dataset", "partition", "clients", "rounds", "local_epochs", "iterations_per_epoch",
              "participation_rate", "model", "loss", "confidence", "augmentation", "sgd", "seeds", "output"});

  if (root.has("method")) {
    const auto& m = root.raw("method");
    std::vector<std::string> names;
    if (m.is_string()) {
      names.push_back(m.get<std::string>());
    } else if (m.is_array()) {
      for (const auto& e : m) {
        if (!e.is_string()) throw ValidationError("method entries must be strings");
        names.push_back(e.get<std::string>());
      }
    } else {
      throw ValidationError("method must be a string or a list of strings");
    }
    c.methods.clear();
    for (const auto& n : names) {
      const auto parsed = method_from_string(n);
      if (!parsed) throw ValidationError("method: unknown method '" + n + "'; valid methods: " + valid_methods_list());
      c.methods.push_back(*parsed);
    }
  }

  if (!root.has("dataset")) throw ValidationError("dataset: required section missing");
  {
    const Section d = root.child("dataset");
    std::string kind = "synthetic";
    d.text("kind", kind);
    auto& ds = c.dataset;
    if (kind == "synthetic") {
      d.allow({"kind", "classes", "dim", "train_per_class", "test_per_class", "separation", "sigma"});
      ds.kind = DatasetSpec::Kind::kSynthetic;
      d.count("classes", ds.classes);
      d.count("dim", ds.dim);
      d.count("train_per_class", ds.train_per_class);
      d.count("test_per_class", ds.test_per_class);
      d.number("separation", ds.separation);
      d.number("sigma", ds.sigma);
    } else if (kind == "csv") {
      d.allow({"kind", "train", "test"});
      ds.kind = DatasetSpec::Kind::kCsv;
      d.text("train", ds.train_path);
      d.text("test", ds.test_path);
    } else {
      throw ValidationError("dataset.kind must be 'synthetic' or 'csv'");
    }
  }

  if (root.has("partition")) {
    const Section p = root.child("partition");
    std::string kind = "dirichlet";
    p.text("kind", kind);
    auto& ps = c.partition;
    if (kind == "dirichlet") {
      p.allow({"kind", "alpha"});
      ps.kind = PartitionSpec::Kind::kDirichlet;
      p.number("alpha", ps.alpha);
    } else if (kind == "pathological") {
      p.allow({"kind", "classes_per_client", "imbalance_ratio"});
      ps.kind = PartitionSpec::Kind::kPathological;
      p.count("classes_per_client", ps.classes_per_client);
      p.number("imbalance_ratio", ps.imbalance_ratio);
    } else {
      throw ValidationError("partition.kind must be 'dirichlet' or 'pathological'");
    }
  }

  auto& f = c.federation;
  root.count("clients", f.clients);
  root.count("rounds", f.rounds);
  root.count("local_epochs", f.local_epochs);
  root.count("iterations_per_epoch", f.iterations_per_epoch);
  root.number("participation_rate", f.participation_rate);

  if (root.has("model")) {
    const Section m = root.child("model");
    m.allow({"hidden", "embedding_dim"});
    if (m.has("hidden")) {
      const auto& h = m.raw("hidden");
      if (!h.is_array()) throw ValidationError("model.hidden must be a list of integers");
      f.hidden.clear();
      for (const auto& e : h) {
        if (!e.is_number_integer() || e.get<long long>() <= 0)
          throw ValidationError("model.hidden widths must be positive integers");
        f.hidden.push_back(e.get<std::size_t>());
      }
    }
    m.count("embedding_dim", f.embedding_dim);
  }

  if (root.has("loss")) {
    const Section l = root.child("loss");
    l.allow({"tau", "margin", "lambda_align", "lambda_geo", "align_warmup_fraction"});
    l.number("tau", f.loss.tau);
    l.number("margin", f.loss.margin);
    l.number("lambda_align", f.loss.lambda_align);
    l.number("lambda_geo", f.loss.lambda_geo);
    l.number("align_warmup_fraction", f.align_warmup_fraction);
  }

  if (root.has("confidence")) {
    const Section s = root.child("confidence");
    s.allow({"mixture", "beta", "gamma", "clip", "epsilon", "validation_fraction"});
    auto pair_or_triple = [&](const char* k, std::size_t n, double* out) {
      if (!s.has(k)) return;
      const auto& a = s.raw(k);
      if (!a.is_array() || a.size() != n) throw ValidationError(s.key(k) + " must be a list of " + std::to_string(n) + " numbers");
      for (std::size_t i = 0; i < n; ++i) {
        if (!a[i].is_number()) throw ValidationError(s.key(k) + " must be a list of numbers");
        out[i] = a[i].get<double>();
      }
    };
    pair_or_triple("mixture", 3, f.confidence.mixture.data());
    double clip[2] = {f.confidence.clip_lo, f.confidence.clip_hi};
    pair_or_triple("clip", 2, clip);
    f.confidence.clip_lo = clip[0];
    f.confidence.clip_hi = clip[1];
    s.number("beta", f.confidence.beta);
    s.number("gamma", f.confidence.gamma);
    s.number("epsilon", f.confidence.epsilon);
    s.number("validation_fraction", f.confidence.validation_fraction);
  }

  if (root.has("augmentation")) {
    const Section a = root.child("augmentation");
    a.allow({"strategy"});
    std::string strategy = "resample";
    a.text("strategy", strategy);
    if (strategy == "resample")
      f.augmentation = AugmentStrategy::kResample;
    else if (strategy == "mixup")
      f.augmentation = AugmentStrategy::kMixup;
    else
      throw ValidationError("augmentation.strategy must be 'resample' or 'mixup'");
  }

  if (root.has("sgd")) {
    const Section s = root.child("sgd");
    s.allow({"learning_rate", "decay", "weight_decay", "momentum"});
    s.number("learning_rate", f.sgd.learning_rate);
    s.number("decay", f.sgd.decay);
    s.number("weight_decay", f.sgd.weight_decay);
    s.number("momentum", f.sgd.momentum);
  }

  if (root.has("seeds")) {
    const auto& s = root.raw("seeds");
    if (!s.is_array()) throw ValidationError("seeds must be a list of non-negative integers");
    c.seeds.clear();
    for (const auto& e : s) {
      if (!e.is_number_integer() || (e.is_number_integer() && !e.is_number_unsigned() && e.get<long long>() < 0))
        throw ValidationError("seeds must be a list of non-negative integers");
      c.seeds.push_back(e.get<std::uint64_t>());
    }
  }

  if (root.has("output")) {
    const Section o = root.child("output");
    o.allow({"dir"});
    o.text("dir", c.output_dir);
  }

  validate(c, check_files);
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text, bool check_files = true) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j, check_files);
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot read config file '" + path + "'");
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

// Fully defaulted configuration, suitable for re-parsing.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : c.methods) methods.push_back(to_string(m));
  j["method"] = methods;
  const auto& d = c.dataset;
  if (d.kind == DatasetSpec::Kind::kSynthetic)
    j["dataset"] = {{"kind", "synthetic"},
                    {"classes", d.classes},
                    {"dim", d.dim},
                    {"train_per_class", d.train_per_class},
                    {"test_per_class", d.test_per_class},
                    {"separation", d.separation},
                    {"sigma", d.sigma}};
  else
    j["dataset"] = {{"kind", "csv"}, {"train", d.train_path}, {"test", d.test_path}};
  const auto& p = c.partition;
  if (p.kind == PartitionSpec::Kind::kDirichlet)
    j["partition"] = {{"kind", "dirichlet"}, {"alpha", p.alpha}};
  else
    j["partition"] = {{"kind", "pathological"},
                      {"classes_per_client", p.classes_per_client},
                      {"imbalance_ratio", p.imbalance_ratio}};
  const auto& f = c.federation;
  j["clients"] = f.clients;
  j["rounds"] = f.rounds;
  j["local_epochs"] = f.local_epochs;
  j["iterations_per_epoch"] = f.iterations_per_epoch;
  j["participation_rate"] = f.participation_rate;
  j["model"] = {{"hidden", f.hidden}, {"embedding_dim", f.embedding_dim}};
  j["loss"] = {{"tau", f.loss.tau},
               {"margin", f.loss.margin},
               {"lambda_align", f.loss.lambda_align},
               {"lambda_geo", f.loss.lambda_geo},
               {"align_warmup_fraction", f.align_warmup_fraction}};
  j["confidence"] = {{"mixture", f.confidence.mixture},
                     {"beta", f.confidence.beta},
                     {"gamma", f.confidence.gamma},
                     {"clip", {f.confidence.clip_lo, f.confidence.clip_hi}},
                     {"epsilon", f.confidence.epsilon},
                     {"validation_fraction", f.confidence.validation_fraction}};
  j["augmentation"] = {{"strategy", f.augmentation == AugmentStrategy::kResample ? "resample" : "mixup"}};
  j["sgd"] = {{"learning_rate", f.sgd.learning_rate},
              {"decay", f.sgd.decay},
              {"weight_decay", f.sgd.weight_decay},
              {"momentum", f.sgd.momentum}};
  j["seeds"] = c.seeds;
  j["output"] = {{"dir", c.output_dir}};
  return j;
}

}  // namespace fedlab
