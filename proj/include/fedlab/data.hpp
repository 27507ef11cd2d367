#pragma once

// Synthetic Gaussian-mixture datasets, CSV ingestion, non-IID client
// partitions (Dirichlet label skew and pathological class limits with a
// within-client imbalance ratio), and tail-class augmentation.

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <limits>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlab/error.hpp"
#include "fedlab/numerics.hpp"

namespace fedlab {

struct LabeledDataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::vector<Vec> features;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  void push(Vec x, std::size_t y) {
    features.push_back(std::move(x));
    labels.push_back(y);
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> n(classes, 0);
    for (auto y : labels) ++n[y];
    return n;
  }

  LabeledDataset subset(std::span<const std::size_t> indices) const {
    LabeledDataset out{dim, classes, {}, {}};
    out.features.reserve(indices.size());
    out.labels.reserve(indices.size());
    for (auto i : indices) out.push(features[i], labels[i]);
    return out;
  }

  bool operator==(const LabeledDataset&) const = default;
};

struct GaussianMixture {
  std::vector<Vec> centers;
};

// Class centers at radius `separation` along random directions, each
// re-drawn until it lies at least `separation` from every earlier center.
inline GaussianMixture make_mixture(std::size_t classes, std::size_t dim, double separation, Rng& rng,
                                    std::size_t retry_cap = 10000) {
  if (classes < 2) throw ValidationError("mixture: need at least 2 classes");
  if (dim == 0) throw ValidationError("mixture: dim must be > 0");
  if (!(separation >= 0.0)) throw ValidationError("mixture: separation must be >= 0");
  GaussianMixture m;
  for (std::size_t c = 0; c < classes; ++c) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < retry_cap && !placed; ++attempt) {
      Vec dir(dim);
      for (auto& v : dir) v = rng.normal();
      const double n = norm(dir);
      if (n < kZeroNormThreshold) continue;
      for (auto& v : dir) v *= separation / n;
      placed = true;
      for (const auto& prev : m.centers)
        if (distance(prev, dir) < separation) {
          placed = false;
          break;
        }
      if (placed) m.centers.push_back(std::move(dir));
    }
    if (!placed)
      throw InfeasibleGeometry("mixture: cannot place " + std::to_string(classes) + " centers at separation " +
                               std::to_string(separation) + " in dimension " + std::to_string(dim));
  }
  return m;
}

// per_class_count isotropic draws around every center, class-major order.
inline LabeledDataset sample_mixture(const GaussianMixture& m, std::size_t per_class_count, double sigma, Rng& rng) {
  if (!(sigma > 0.0)) throw ValidationError("mixture: sigma must be > 0");
  LabeledDataset ds;
  ds.classes = m.centers.size();
  ds.dim = m.centers.empty() ? 0 : m.centers.front().size();
  for (std::size_t c = 0; c < m.centers.size(); ++c)
    for (std::size_t i = 0; i < per_class_count; ++i) {
      Vec x = m.centers[c];
      for (auto& v : x) v += sigma * rng.normal();
      ds.push(std::move(x), c);
    }
  return ds;
}

inline LabeledDataset synth_gaussian_mixture(std::size_t classes, std::size_t per_class_count, std::size_t dim,
                                             double separation, double sigma, Rng& rng) {
  const GaussianMixture m = make_mixture(classes, dim, separation, rng);
  return sample_mixture(m, per_class_count, sigma, rng);
}

// ---------------------------------------------------------------------------
// CSV: comma-separated features, integer label in the last column, optional
// header line "f0,...,f{d-1},label". Labels are 0-based.

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || errno == ERANGE) return std::nullopt;
  return v;
}

}  // namespace detail

inline LabeledDataset read_csv(std::istream& is, std::optional<std::size_t> declared_classes = std::nullopt) {
  LabeledDataset ds;
  std::string line;
  std::size_t line_no = 0;
  std::size_t columns = 0;
  long long max_label = -1;
  bool first_content = true;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_commas(line);
    if (first_content) {
      first_content = false;
      if (!detail::parse_double(fields.front())) {
        if (fields.size() < 2) throw ParseError("header needs at least one feature and a label", line_no);
        columns = fields.size();
        continue;
      }
    }
    if (columns == 0) columns = fields.size();
    if (fields.size() < 2) throw ParseError("row needs at least one feature and a label", line_no);
    if (fields.size() != columns)
      throw ParseError("expected " + std::to_string(columns) + " columns, got " + std::to_string(fields.size()),
                       line_no);
    Vec x(columns - 1);
    for (std::size_t j = 0; j + 1 < columns; ++j) {
      const auto v = detail::parse_double(fields[j]);
      if (!v) throw ParseError("invalid number '" + fields[j] + "'", line_no);
      x[j] = *v;
    }
    const auto label = detail::parse_int(fields.back());
    if (!label) throw ParseError("invalid integer label '" + fields.back() + "'", line_no);
    if (*label < 0 || (declared_classes && static_cast<std::size_t>(*label) >= *declared_classes))
      throw LabelOutOfRange("line " + std::to_string(line_no) + ": label " + std::to_string(*label) +
                            " outside [0, " +
                            (declared_classes ? std::to_string(*declared_classes) : std::string("inf")) + ")");
    max_label = std::max(max_label, *label);
    ds.push(std::move(x), static_cast<std::size_t>(*label));
  }
  if (ds.empty()) throw ParseError("no data rows", line_no);
  ds.dim = columns - 1;
  ds.classes = declared_classes ? *declared_classes : static_cast<std::size_t>(max_label + 1);
  return ds;
}

inline LabeledDataset load_csv(const std::string& path, std::optional<std::size_t> declared_classes = std::nullopt) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open '" + path + "'", 0);
  return read_csv(f, declared_classes);
}

inline void write_csv(std::ostream& os, const LabeledDataset& ds, bool header = true) {
  if (header) {
    for (std::size_t j = 0; j < ds.dim; ++j) os << 'f' << j << ',';
    os << "label\n";
  }
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.features[i]) {
      std::snprintf(buf, sizeof buf, "%.17g,", v);
      os << buf;
    }
    os << ds.labels[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Partitions

struct PartitionPlan {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> client_indices;
  std::vector<std::vector<std::size_t>> counts;  // [client][class]

  std::size_t clients() const { return client_indices.size(); }

  std::size_t total_assigned() const {
    std::size_t n = 0;
    for (const auto& c : client_indices) n += c.size();
    return n;
  }

  bool operator==(const PartitionPlan&) const = default;
};

inline PartitionPlan make_plan(const LabeledDataset& ds, std::vector<std::vector<std::size_t>> indices) {
  PartitionPlan plan;
  plan.classes = ds.classes;
  plan.counts.assign(indices.size(), std::vector<std::size_t>(ds.classes, 0));
  for (std::size_t k = 0; k < indices.size(); ++k)
    for (auto i : indices[k]) ++plan.counts[k][ds.labels[i]];
  plan.client_indices = std::move(indices);
  return plan;
}

namespace detail {
inline std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  return by_class;
}
}  // namespace detail

// For each class in ascending order: shuffle its indices, draw client shares
// q ~ Dirichlet(alpha * 1_K), and cut at floor(cumsum(q) * n_c).
inline PartitionPlan partition_dirichlet(const LabeledDataset& ds, std::size_t clients, double alpha, Rng& rng) {
  if (clients == 0) throw ValidationError("partition: clients must be >= 1");
  if (!(alpha > 0.0)) throw ValidationError("partition: alpha must be > 0");
  auto by_class = detail::indices_by_class(ds);
  std::vector<std::vector<std::size_t>> out(clients);
  for (auto& idx : by_class) {
    rng.shuffle(idx);
    const Vec q = rng.dirichlet(alpha, clients);
    const auto n = static_cast<double>(idx.size());
    std::size_t begin = 0;
    double cum = 0.0;
    for (std::size_t k = 0; k < clients; ++k) {
      cum += q[k];
      std::size_t end = k + 1 == clients ? idx.size() : static_cast<std::size_t>(std::floor(cum * n));
      end = std::clamp(end, begin, idx.size());
      out[k].insert(out[k].end(), idx.begin() + static_cast<std::ptrdiff_t>(begin),
                    idx.begin() + static_cast<std::ptrdiff_t>(end));
      begin = end;
    }
  }
  return make_plan(ds, std::move(out));
}

// Each client gets `classes_per_client` classes, dealt round-robin from a
// shuffled class list, then put in random size order. Sizes follow
// S * IR^(-j/(classes_per_client-1)) for rank j, rounded, at least 1; S is the
// largest value every class can supply.
inline PartitionPlan partition_pathological(const LabeledDataset& ds, std::size_t clients,
                                            std::size_t classes_per_client, double imbalance_ratio, Rng& rng) {
  const std::size_t C = ds.classes;
  if (clients == 0) throw ValidationError("partition: clients must be >= 1");
  if (classes_per_client == 0 || classes_per_client > C)
    throw ValidationError("partition: classes_per_client must be in [1, classes]");
  if (!(imbalance_ratio >= 1.0)) throw ValidationError("partition: imbalance_ratio must be >= 1");

  std::vector<std::size_t> perm(C);
  for (std::size_t c = 0; c < C; ++c) perm[c] = c;
  rng.shuffle(perm);
  std::vector<std::vector<std::size_t>> assigned(clients);
  for (std::size_t k = 0; k < clients; ++k) {
    for (std::size_t j = 0; j < classes_per_client; ++j) assigned[k].push_back(perm[(k * classes_per_client + j) % C]);
    rng.shuffle(assigned[k]);
  }

  Vec ratio(classes_per_client, 1.0);
  if (classes_per_client > 1)
    for (std::size_t j = 0; j < classes_per_client; ++j)
      ratio[j] = std::pow(imbalance_ratio, -static_cast<double>(j) / static_cast<double>(classes_per_client - 1));

  auto by_class = detail::indices_by_class(ds);
  Vec demand(C, 0.0);
  std::vector<std::size_t> slots(C, 0);
  for (std::size_t k = 0; k < clients; ++k)
    for (std::size_t j = 0; j < classes_per_client; ++j) {
      demand[assigned[k][j]] += ratio[j];
      ++slots[assigned[k][j]];
    }
  double largest = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < C; ++c) {
    if (slots[c] == 0) continue;
    if (by_class[c].size() < slots[c])
      throw Infeasible("partition: class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                       " samples for " + std::to_string(slots[c]) + " clients");
    largest = std::min(largest, std::floor(static_cast<double>(by_class[c].size()) / demand[c]));
  }

  auto sizes_for = [&](double s) {
    std::vector<std::size_t> sz(classes_per_client);
    for (std::size_t j = 0; j < classes_per_client; ++j)
      sz[j] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(s * ratio[j])));
    return sz;
  };
  auto fits = [&](const std::vector<std::size_t>& sz) {
    std::vector<std::size_t> need(C, 0);
    for (std::size_t k = 0; k < clients; ++k)
      for (std::size_t j = 0; j < classes_per_client; ++j) need[assigned[k][j]] += sz[j];
    for (std::size_t c = 0; c < C; ++c)
      if (need[c] > by_class[c].size()) return false;
    return true;
  };
  std::vector<std::size_t> sizes = sizes_for(largest);
  while (!fits(sizes)) {
    largest -= 1.0;
    if (largest < 1.0) throw Infeasible("partition: not enough samples for the requested imbalance profile");
    sizes = sizes_for(largest);
  }

  for (auto& idx : by_class) rng.shuffle(idx);
  std::vector<std::size_t> cursor(C, 0);
  std::vector<std::vector<std::size_t>> out(clients);
  for (std::size_t k = 0; k < clients; ++k)
    for (std::size_t j = 0; j < classes_per_client; ++j) {
      const std::size_t c = assigned[k][j];
      for (std::size_t t = 0; t < sizes[j]; ++t) out[k].push_back(by_class[c][cursor[c]++]);
    }
  return make_plan(ds, std::move(out));
}

// {"classes": C, "clients": [{"id": k, "classes": {"c": [indices...]}}]}
inline nlohmann::json plan_to_json(const PartitionPlan& plan, const LabeledDataset& ds) {
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t k = 0; k < plan.clients(); ++k) {
    nlohmann::json by_class = nlohmann::json::object();
    for (auto i : plan.client_indices[k]) by_class[std::to_string(ds.labels[i])].push_back(i);
    clients.push_back({{"id", k}, {"classes", by_class}});
  }
  return {{"classes", plan.classes}, {"clients", clients}};
}

// ---------------------------------------------------------------------------
// Tail augmentation

enum class AugmentStrategy { kResample, kMixup };

struct AugmentedDataset {
  LabeledDataset data;                        // originals first, then synthetic rows
  std::vector<bool> synthetic;                // provenance flag per row
  std::vector<std::size_t> real_counts;       // n_{k,c}
  std::vector<std::size_t> synthetic_counts;  // m_{k,c}
  double gamma = 1.0;

  double n_eff(std::size_t c) const {
    return static_cast<double>(real_counts[c]) + gamma * static_cast<double>(synthetic_counts[c]);
  }
  Vec n_eff_all() const {
    Vec out(real_counts.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = n_eff(c);
    return out;
  }
  // Estimator weight of a row: 1 for real samples, gamma for synthetic ones.
  double sample_weight(std::size_t i) const { return synthetic[i] ? gamma : 1.0; }
};

inline AugmentedDataset no_augmentation(const LabeledDataset& ds, double gamma = 1.0) {
  AugmentedDataset out{ds, std::vector<bool>(ds.size(), false), ds.class_counts(),
                       std::vector<std::size_t>(ds.classes, 0), gamma};
  return out;
}

// Median count over the classes present on the client; 0 for absent classes.
inline std::vector<std::size_t> median_targets(const LabeledDataset& ds) {
  const auto counts = ds.class_counts();
  std::vector<std::size_t> present;
  for (auto n : counts)
    if (n > 0) present.push_back(n);
  std::vector<std::size_t> out(ds.classes, 0);
  if (present.empty()) return out;
  std::sort(present.begin(), present.end());
  const std::size_t med = present[present.size() / 2];
  for (std::size_t c = 0; c < ds.classes; ++c)
    if (counts[c] > 0) out[c] = med;
  return out;
}

// Tops every class up to targets[c]. Resampling duplicates a random class
// member with N(0, (0.01 * rms feature magnitude)^2) jitter; MixUp mixes two
// random class members with a Beta(0.2, 0.2) coefficient.
inline AugmentedDataset augment_tail(const LabeledDataset& ds, AugmentStrategy strategy,
                                     std::span<const std::size_t> targets, double gamma, Rng& rng) {
  if (targets.size() != ds.classes) throw ShapeMismatch("augment_tail: one target per class required");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("gamma must be in [0, 1]");
  AugmentedDataset out = no_augmentation(ds, gamma);
  const auto by_class = detail::indices_by_class(ds);

  double sq = 0.0;
  std::size_t cnt = 0;
  for (const auto& x : ds.features)
    for (double v : x) {
      sq += v * v;
      ++cnt;
    }
  const double jitter = cnt ? 0.01 * std::sqrt(sq / static_cast<double>(cnt)) : 0.0;

  for (std::size_t c = 0; c < ds.classes; ++c) {
    const std::size_t n = by_class[c].size();
    if (targets[c] <= n) continue;
    if (n == 0) throw EmptyClass("augment_tail: class " + std::to_string(c) + " has no local samples");
    const std::size_t m = targets[c] - n;
    for (std::size_t t = 0; t < m; ++t) {
      Vec x;
      if (strategy == AugmentStrategy::kResample) {
        x = ds.features[by_class[c][rng.uniform_index(n)]];
        for (auto& v : x) v += jitter * rng.normal();
      } else {
        const Vec& a = ds.features[by_class[c][rng.uniform_index(n)]];
        const Vec& b = ds.features[by_class[c][rng.uniform_index(n)]];
        const double lam = rng.beta(0.2, 0.2);
        x.resize(a.size());
        for (std::size_t d = 0; d < a.size(); ++d) x[d] = b[d] + lam * (a[d] - b[d]);
      }
      out.data.push(std::move(x), c);
      out.synthetic.push_back(true);
    }
    out.synthetic_counts[c] = m;
  }
  return out;
}

}  // namespace fedlab
