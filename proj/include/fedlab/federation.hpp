#pragma once

// Federated round engine: local training against broadcast prototypes,
// local prototype and class-confidence computation, confidence-weighted (or
// count-weighted) aggregation of prototypes and encoder parameters, and
// evaluation with a nearest-prototype classifier.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlab/data.hpp"
#include "fedlab/error.hpp"
#include "fedlab/model.hpp"
#include "fedlab/numerics.hpp"
#include "fedlab/objective.hpp"
#include "fedlab/prototypes.hpp"

namespace fedlab {

enum class Method { kCafedcl, kFedavg, kNaiveProto, kNoAug, kNoConfagg, kNoGeo, kAugPlusNaive };

inline constexpr std::array<Method, 7> kAllMethods = {Method::kCafedcl,   Method::kFedavg, Method::kNaiveProto,
                                                      Method::kNoAug,     Method::kNoConfagg, Method::kNoGeo,
                                                      Method::kAugPlusNaive};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kCafedcl: return "cafedcl";
    case Method::kFedavg: return "fedavg";
    case Method::kNaiveProto: return "naive_proto";
    case Method::kNoAug: return "ablation:no_aug";
    case Method::kNoConfagg: return "ablation:no_confagg";
    case Method::kNoGeo: return "ablation:no_geo";
    case Method::kAugPlusNaive: return "ablation:aug_plus_naive";
  }
  return "unknown";
}

inline std::optional<Method> method_from_string(const std::string& s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  // Bare ablation names are accepted too.
  for (Method m : kAllMethods)
    if (to_string(m) == "ablation:" + s) return m;
  return std::nullopt;
}

inline std::string valid_methods_list() {
  std::string out;
  for (Method m : kAllMethods) out += (out.empty() ? "" : ", ") + to_string(m);
  return out;
}

struct MethodFlags {
  bool prototypes = true;       // false: linear head + cross-entropy (FedAvg)
  bool augment = true;          // tail augmentation
  bool confidence_agg = true;   // false: count-weighted prototypes, size-weighted params
  bool geometry = true;
  bool align = true;
};

inline MethodFlags flags_for(Method m) {
  switch (m) {
    case Method::kCafedcl: return {true, true, true, true, true};
    case Method::kFedavg: return {false, false, false, false, false};
    case Method::kNaiveProto: return {true, false, false, false, false};
    case Method::kNoAug: return {true, false, true, true, true};
    case Method::kNoConfagg: return {true, true, false, true, true};
    case Method::kNoGeo: return {true, true, true, false, true};
    case Method::kAugPlusNaive: return {true, true, false, false, false};
  }
  return {};
}

struct ConfidenceParams {
  std::array<double, 3> mixture{0.4, 0.3, 0.3};  // (data, gen, val)
  double beta = 0.5;
  double gamma = 0.6;
  double clip_lo = 0.01;
  double clip_hi = 1.0;
  double epsilon = 1e-8;
  double validation_fraction = 0.1;

  void validate() const {
    for (double w : mixture)
      if (!(w >= 0.0)) throw ValidationError("confidence.mixture weights must be >= 0");
    if (std::abs(mixture[0] + mixture[1] + mixture[2] - 1.0) > 1e-12)
      throw ValidationError("confidence.mixture must sum to 1");
    if (!(beta > 0.0)) throw ValidationError("confidence.beta must be > 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("confidence.gamma must be in [0, 1]");
    if (!(clip_lo > 0.0 && clip_lo <= clip_hi)) throw ValidationError("confidence.clip must satisfy 0 < lo <= hi");
    if (!(epsilon > 0.0)) throw ValidationError("confidence.epsilon must be > 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
      throw ValidationError("confidence.validation_fraction must be in [0, 1)");
  }
  bool operator==(const ConfidenceParams&) const = default;
};

// Mixture actually applied: with augmentation off the generation weight is
// dropped and the other two rescaled to sum to 1.
inline std::array<double, 3> effective_mixture(const std::array<double, 3>& w, bool generator_enabled) {
  if (generator_enabled) return w;
  const double s = w[0] + w[2];
  if (s <= 0.0) return {0.0, 0.0, 0.0};
  return {w[0] / s, 0.0, w[2] / s};
}

struct ConfidenceVector {
  Vec total;
  Vec data;
  Vec gen;
  Vec val;
  std::vector<bool> val_missing;  // no validation samples for the class
  std::array<double, 3> mixture{};

  double client_confidence() const { return mean(total); }
};

// Per-class confidences. uncertainty[c] is the normalized predictive entropy
// in [0, 1] on class-c validation samples (nullopt when there are none);
// aug_quality is nullopt when augmentation is disabled.
inline ConfidenceVector class_confidence(std::span<const double> n_eff,
                                         std::span<const std::optional<double>> uncertainty,
                                         const std::optional<Vec>& aug_quality, const ConfidenceParams& p) {
  const std::size_t C = n_eff.size();
  if (uncertainty.size() != C || (aug_quality && aug_quality->size() != C))
    throw ShapeMismatch("class_confidence: per-class inputs disagree on class count");
  ConfidenceVector cv;
  cv.mixture = effective_mixture(p.mixture, aug_quality.has_value());
  cv.total.resize(C);
  cv.data.resize(C);
  cv.gen.resize(C);
  cv.val.resize(C);
  cv.val_missing.assign(C, false);
  double max_n = 0.0;
  for (double n : n_eff) max_n = std::max(max_n, n);
  for (std::size_t c = 0; c < C; ++c) {
    cv.data[c] = max_n > 0.0 ? n_eff[c] / max_n : 0.0;
    if (uncertainty[c]) {
      cv.val[c] = std::exp(-p.beta * *uncertainty[c]);
    } else {
      cv.val[c] = p.clip_lo;
      cv.val_missing[c] = true;
    }
    cv.gen[c] = aug_quality ? (*aug_quality)[c] : 0.0;
    const double raw = cv.mixture[0] * cv.data[c] + cv.mixture[1] * cv.gen[c] + cv.mixture[2] * cv.val[c];
    cv.total[c] = std::clamp(raw, p.clip_lo, p.clip_hi);
  }
  return cv;
}

// ---------------------------------------------------------------------------
// Prototypes and prediction

inline std::vector<Vec> unit_prototypes(const PrototypeSet& globals) {
  if (!globals.all_present()) throw MissingPrototype("prediction needs every class prototype");
  std::vector<Vec> out(globals.num_classes());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = l2_normalize(globals.vectors[c]);
  return out;
}

// argmax_c cos(z, p_c); ties go to the lowest class index.
inline std::size_t predict_from_embedding(std::span<const double> embedding, std::span<const Vec> unit_protos) {
  const Vec z = l2_normalize(embedding);
  std::size_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < unit_protos.size(); ++c) {
    const double s = dot(z, unit_protos[c]);
    if (s > best_sim) {
      best_sim = s;
      best = c;
    }
  }
  return best;
}

inline std::size_t nearest_prototype_predict(const EncoderParams& params, const PrototypeSet& globals,
                                             std::span<const double> x) {
  const auto units = unit_prototypes(globals);
  return predict_from_embedding(embed(params, x), units);
}

// Weighted mean of raw embeddings per class, then l2-normalized. Rows with a
// numerically zero class mean leave the class absent and are reported in
// `degenerate`.
inline PrototypeSet local_prototypes(const EncoderParams& params, const LabeledDataset& ds,
                                     std::span<const double> sample_weights = {},
                                     std::vector<std::size_t>* degenerate = nullptr) {
  if (ds.empty()) throw ValidationError("local_prototypes: empty client dataset");
  if (!sample_weights.empty() && sample_weights.size() != ds.size())
    throw ShapeMismatch("local_prototypes: one weight per sample required");
  const std::size_t dim = params.output_dim();
  PrototypeSet out(ds.classes, dim);
  std::vector<Vec> sums(ds.classes, Vec(dim, 0.0));
  Vec wsum(ds.classes, 0.0);
  ForwardCache cache;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double w = sample_weights.empty() ? 1.0 : sample_weights[i];
    forward_into(params, ds.features[i], cache);
    axpy(w, cache.embedding(), sums[ds.labels[i]]);
    wsum[ds.labels[i]] += w;
  }
  const auto counts = ds.class_counts();
  for (std::size_t c = 0; c < ds.classes; ++c) {
    if (wsum[c] <= 0.0) continue;
    for (double& v : sums[c]) v /= wsum[c];
    if (norm(sums[c]) < kZeroNormThreshold) {
      if (degenerate) degenerate->push_back(c);
      continue;
    }
    out.set(c, l2_normalize(sums[c]), counts[c]);
  }
  return out;
}

// Prototypes of an augmented client dataset: synthetic rows carry weight
// gamma, and counts report real samples only.
inline PrototypeSet local_prototypes(const EncoderParams& params, const AugmentedDataset& aug,
                                     std::vector<std::size_t>* degenerate = nullptr) {
  Vec w(aug.data.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = aug.sample_weight(i);
  PrototypeSet p = local_prototypes(params, aug.data, w, degenerate);
  for (std::size_t c = 0; c < p.num_classes(); ++c) {
    p.counts[c] = aug.real_counts[c];
    if (aug.real_counts[c] == 0) p.present[c] = false;
  }
  return p;
}

// Mean normalized entropy of softmax(cos(z, p_g)/tau) over each class's
// validation samples.
inline std::vector<std::optional<double>> class_uncertainty(const EncoderParams& params, const PrototypeSet& globals,
                                                            const LabeledDataset& validation, double tau) {
  const std::size_t C = globals.num_classes();
  std::vector<std::optional<double>> out(C);
  if (validation.empty()) return out;
  const auto units = unit_prototypes(globals);
  Vec sum(C, 0.0);
  std::vector<std::size_t> n(C, 0);
  const double log_c = std::log(static_cast<double>(C));
  ForwardCache cache;
  Vec logits(C);
  for (std::size_t i = 0; i < validation.size(); ++i) {
    forward_into(params, validation.features[i], cache);
    const Vec z = l2_normalize(cache.embedding());
    for (std::size_t c = 0; c < C; ++c) logits[c] = dot(z, units[c]) / tau;
    const Vec q = softmax(logits);
    double h = 0.0;
    for (double v : q)
      if (v > 0.0) h -= v * std::log(v);
    sum[validation.labels[i]] += log_c > 0.0 ? h / log_c : 0.0;
    ++n[validation.labels[i]];
  }
  for (std::size_t c = 0; c < C; ++c)
    if (n[c] > 0) out[c] = std::clamp(sum[c] / static_cast<double>(n[c]), 0.0, 1.0);
  return out;
}

// Augmentation quality per class: mean softmax probability of the true class
// on the synthetic rows; 1 for real-only classes, 0 for absent ones.
inline Vec augmentation_quality(const EncoderParams& params, const PrototypeSet& globals,
                                const AugmentedDataset& aug, double tau) {
  const std::size_t C = globals.num_classes();
  const auto units = unit_prototypes(globals);
  Vec sum(C, 0.0);
  ForwardCache cache;
  Vec logits(C);
  for (std::size_t i = 0; i < aug.data.size(); ++i) {
    if (!aug.synthetic[i]) continue;
    forward_into(params, aug.data.features[i], cache);
    const Vec z = l2_normalize(cache.embedding());
    for (std::size_t c = 0; c < C; ++c) logits[c] = dot(z, units[c]) / tau;
    sum[aug.data.labels[i]] += softmax(logits)[aug.data.labels[i]];
  }
  Vec q(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    if (aug.synthetic_counts[c] > 0)
      q[c] = sum[c] / static_cast<double>(aug.synthetic_counts[c]);
    else if (aug.real_counts[c] > 0)
      q[c] = 1.0;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Reports and aggregation

struct ClientReport {
  std::size_t client_id = 0;
  EncoderParams params;
  std::optional<EncoderParams> head;
  PrototypeSet protos;
  ConfidenceVector conf;
  Vec n_eff;
  std::size_t num_samples = 0;  // real training samples
  ObjectiveTerms mean_loss;
};

namespace detail {
inline std::vector<const ClientReport*> canonical_order(std::span<const ClientReport> reports) {
  std::vector<const ClientReport*> out;
  out.reserve(reports.size());
  for (const auto& r : reports) out.push_back(&r);
  std::stable_sort(out.begin(), out.end(),
                   [](const ClientReport* a, const ClientReport* b) { return a->client_id < b->client_id; });
  return out;
}

template <typename WeightFn>
PrototypeSet aggregate_prototypes_weighted(std::span<const ClientReport> reports, const PrototypeSet& previous,
                                           WeightFn weight, double epsilon) {
  if (reports.empty()) throw ValidationError("aggregate_prototypes: no reports");
  const auto order = canonical_order(reports);
  const std::size_t C = order.front()->protos.num_classes();
  const std::size_t dim = order.front()->protos.dim();
  PrototypeSet out = previous.num_classes() == C ? previous : PrototypeSet(C, dim);
  for (std::size_t c = 0; c < C; ++c) {
    Vec num(dim, 0.0);
    double den = 0.0;
    std::size_t count = 0;
    bool any = false;
    for (const ClientReport* r : order) {
      if (r->protos.num_classes() != C || r->protos.dim() != dim)
        throw ShapeMismatch("aggregate_prototypes: inconsistent prototype shapes");
      if (!r->protos.present[c]) continue;
      const double w = weight(*r, c);
      axpy(w, r->protos.vectors[c], num);
      den += w;
      count += r->protos.counts[c];
      any = true;
    }
    if (!any) continue;
    den += epsilon;
    if (!(den > 0.0)) continue;
    for (double& v : num) v /= den;
    if (norm(num) < kZeroNormThreshold) continue;
    out.set(c, l2_normalize(num), count);
  }
  return out;
}

template <typename WeightFn>
void aggregate_params_weighted(std::span<const ClientReport> reports, WeightFn weight, double epsilon,
                               EncoderParams& params, std::optional<EncoderParams>& head) {
  if (reports.empty()) throw ValidationError("aggregate_params: no reports");
  const auto order = canonical_order(reports);
  EncoderParams acc(order.front()->params.widths);
  std::optional<EncoderParams> acc_head;
  if (order.front()->head) acc_head.emplace(order.front()->head->widths);
  double den = 0.0;
  for (const ClientReport* r : order) {
    if (!r->params.same_shape(acc)) throw ShapeMismatch("aggregate_params: parameter shapes differ");
    if (r->head.has_value() != acc_head.has_value() || (acc_head && !r->head->same_shape(*acc_head)))
      throw ShapeMismatch("aggregate_params: head shapes differ");
    const double w = weight(*r);
    axpy(w, r->params.values, acc.values);
    if (acc_head) axpy(w, r->head->values, acc_head->values);
    den += w;
  }
  den += epsilon;
  for (double& v : acc.values) v /= den;
  if (acc_head)
    for (double& v : acc_head->values) v /= den;
  params = std::move(acc);
  head = std::move(acc_head);
}
}  // namespace detail

// p_g,c = sum_k conf_kc p_kc / (sum_k conf_kc + eps) over clients holding c,
// renormalized. Classes no client holds keep their previous prototype.
inline PrototypeSet aggregate_prototypes_confidence(std::span<const ClientReport> reports,
                                                    const PrototypeSet& previous, double epsilon) {
  return detail::aggregate_prototypes_weighted(
      reports, previous, [](const ClientReport& r, std::size_t c) { return r.conf.total[c]; }, epsilon);
}

// Count-weighted average, n_kc / sum n_kc.
inline PrototypeSet aggregate_prototypes_naive(std::span<const ClientReport> reports, const PrototypeSet& previous) {
  return detail::aggregate_prototypes_weighted(
      reports, previous,
      [](const ClientReport& r, std::size_t c) { return static_cast<double>(r.protos.counts[c]); }, 0.0);
}

// Normalized per-class weights conf_kc / (sum conf + eps) in canonical client
// order, over the clients holding class c.
inline Vec confidence_weights(std::span<const ClientReport> reports, std::size_t c, double epsilon) {
  const auto order = detail::canonical_order(reports);
  double den = epsilon;
  for (const ClientReport* r : order)
    if (r->protos.present[c]) den += r->conf.total[c];
  Vec w;
  for (const ClientReport* r : order)
    if (r->protos.present[c]) w.push_back(r->conf.total[c] / den);
  return w;
}

// theta = sum_k Conf_k theta_k / (sum_k Conf_k + eps), Conf_k the mean class confidence.
inline EncoderParams aggregate_params_confidence(std::span<const ClientReport> reports, double epsilon,
                                                 std::optional<EncoderParams>* head = nullptr) {
  EncoderParams out;
  std::optional<EncoderParams> h;
  detail::aggregate_params_weighted(
      reports, [](const ClientReport& r) { return r.conf.client_confidence(); }, epsilon, out, h);
  if (head) *head = std::move(h);
  return out;
}

// FedAvg: weights proportional to local training-set size.
inline EncoderParams aggregate_params_size(std::span<const ClientReport> reports,
                                           std::optional<EncoderParams>* head = nullptr) {
  EncoderParams out;
  std::optional<EncoderParams> h;
  detail::aggregate_params_weighted(
      reports, [](const ClientReport& r) { return static_cast<double>(r.num_samples); }, 0.0, out, h);
  if (head) *head = std::move(h);
  return out;
}

// ---------------------------------------------------------------------------
// Round engine

struct FederationSettings {
  Method method = Method::kCafedcl;
  std::size_t clients = 10;
  std::size_t rounds = 50;
  std::size_t local_epochs = 5;
  std::size_t iterations_per_epoch = 10;
  double participation_rate = 1.0;
  std::vector<std::size_t> hidden{64, 32};
  std::size_t embedding_dim = 16;
  LossWeights loss;
  double align_warmup_fraction = 0.1;
  ConfidenceParams confidence;
  AugmentStrategy augmentation = AugmentStrategy::kResample;
  SgdConfig sgd;
  std::size_t threads = 0;  // 0: FEDLAB_THREADS or hardware concurrency

  bool operator==(const FederationSettings&) const = default;
};

// lambda_align ramps linearly from 0 over the first ceil(fraction * T) rounds.
inline double annealed_lambda_align(const FederationSettings& s, std::size_t round) {
  const double warm = std::max(1.0, std::ceil(s.align_warmup_fraction * static_cast<double>(s.rounds)));
  if (s.align_warmup_fraction <= 0.0) return s.loss.lambda_align;
  return s.loss.lambda_align * std::min(1.0, static_cast<double>(round) / warm);
}

struct ClientData {
  std::size_t id = 0;
  LabeledDataset train;
  LabeledDataset validation;
  Vec label_distribution;  // share of each class in the client's full local data
};

// Stratified hold-out: round(fraction * n_c) samples of each class, keeping
// at least one training sample per class.
inline std::vector<ClientData> build_clients(const LabeledDataset& pool, const PartitionPlan& plan,
                                             double validation_fraction, std::uint64_t seed) {
  std::vector<ClientData> out(plan.clients());
  for (std::size_t k = 0; k < plan.clients(); ++k) {
    Rng rng(derive_seed(seed, {stream::kValidation, k}));
    ClientData& cd = out[k];
    cd.id = k;
    std::vector<std::vector<std::size_t>> by_class(pool.classes);
    for (auto i : plan.client_indices[k]) by_class[pool.labels[i]].push_back(i);
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;
    cd.label_distribution.assign(pool.classes, 0.0);
    const double total = static_cast<double>(plan.client_indices[k].size());
    for (std::size_t c = 0; c < pool.classes; ++c) {
      auto& idx = by_class[c];
      if (idx.empty()) continue;
      cd.label_distribution[c] = static_cast<double>(idx.size()) / total;
      rng.shuffle(idx);
      auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(idx.size())));
      n_val = std::min(n_val, idx.size() - 1);
      val_idx.insert(val_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
      train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    }
    cd.train = pool.subset(train_idx);
    cd.validation = pool.subset(val_idx);
  }
  return out;
}

struct ServerState {
  EncoderParams params;
  std::optional<EncoderParams> head;
  PrototypeSet globals;
  std::size_t round = 0;
  double epsilon = 1e-8;
};

// C random unit vectors; a draw is rejected while its cosine with an earlier
// prototype exceeds 0.9 (up to 1000 attempts per class).
inline PrototypeSet init_prototypes(std::size_t classes, std::size_t dim, Rng& rng) {
  PrototypeSet p(classes, dim);
  for (std::size_t c = 0; c < classes; ++c) {
    Vec v;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Vec cand(dim);
      for (auto& x : cand) x = rng.normal();
      if (norm(cand) < kZeroNormThreshold) continue;
      v = l2_normalize(cand);
      bool ok = true;
      for (std::size_t prev = 0; prev < c && ok; ++prev) ok = dot(v, p.vectors[prev]) <= 0.9;
      if (ok) break;
    }
    p.set(c, std::move(v));
  }
  return p;
}

inline std::vector<std::size_t> encoder_widths(const FederationSettings& s, std::size_t input_dim) {
  std::vector<std::size_t> w{input_dim};
  w.insert(w.end(), s.hidden.begin(), s.hidden.end());
  w.push_back(s.embedding_dim);
  return w;
}

inline ServerState init_server(const FederationSettings& s, std::size_t input_dim, std::size_t classes,
                               std::uint64_t seed) {
  ServerState st;
  Rng init(derive_seed(seed, {stream::kInit}));
  st.params = init_encoder(encoder_widths(s, input_dim), init);
  if (!flags_for(s.method).prototypes) st.head = init_encoder({s.embedding_dim, classes}, init);
  Rng protos(derive_seed(seed, {stream::kPrototypes}));
  st.globals = init_prototypes(classes, s.embedding_dim, protos);
  st.epsilon = s.confidence.epsilon;
  return st;
}

inline std::size_t worker_count(const FederationSettings& s) {
  if (s.threads > 0) return s.threads;
  if (const char* env = std::getenv("FEDLAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots; the first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// One client's work for a round: optional tail augmentation, E epochs of
// exactly `iterations_per_epoch` mini-batches of ceil(N / iterations) samples
// (the last one possibly short), then prototypes and confidences.
inline ClientReport run_client(const ServerState& server, const ClientData& client, const FederationSettings& s,
                               std::uint64_t seed) {
  const MethodFlags flags = flags_for(s.method);
  Rng rng(derive_seed(seed, {stream::kClient, server.round, client.id}));

  AugmentedDataset aug = no_augmentation(client.train, s.confidence.gamma);
  if (flags.augment && !client.train.empty())
    aug = augment_tail(client.train, s.augmentation, median_targets(client.train), s.confidence.gamma, rng);

  ClientReport rep;
  rep.client_id = client.id;
  rep.params = server.params;
  rep.head = server.head;
  rep.num_samples = client.train.size();
  rep.n_eff = aug.n_eff_all();

  LossWeights lw = s.loss;
  lw.lambda_align = flags.align ? annealed_lambda_align(s, server.round) : 0.0;
  lw.lambda_geo = flags.geometry ? s.loss.lambda_geo : 0.0;

  const std::size_t N = aug.data.size();
  std::vector<std::size_t> order(N);
  for (std::size_t i = 0; i < N; ++i) order[i] = i;
  const std::size_t iters = std::max<std::size_t>(1, s.iterations_per_epoch);
  const std::size_t batch = (N + iters - 1) / iters;
  Vec grad(rep.params.size());
  Vec grad_head(rep.head ? rep.head->size() : 0);
  Vec velocity;
  Vec velocity_head;
  std::vector<ForwardCache> scratch;
  std::vector<Vec> bx;
  std::vector<std::size_t> by;
  std::size_t steps = 0;

  for (std::size_t e = 0; e < s.local_epochs && N > 0; ++e) {
    rng.shuffle(order);
    for (std::size_t it = 0; it < iters; ++it) {
      const std::size_t begin = it * batch;
      if (begin >= N) break;
      const std::size_t end = std::min(N, begin + batch);
      bx.clear();
      by.clear();
      for (std::size_t j = begin; j < end; ++j) {
        bx.push_back(aug.data.features[order[j]]);
        by.push_back(aug.data.labels[order[j]]);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      if (flags.prototypes) {
        const ObjectiveTerms t = client_objective(rep.params, bx, by, server.globals, lw, grad, &scratch);
        rep.mean_loss.total += t.total;
        rep.mean_loss.i2p += t.i2p;
        rep.mean_loss.align += t.align;
        rep.mean_loss.geo += t.geo;
      } else {
        std::fill(grad_head.begin(), grad_head.end(), 0.0);
        const double l = head_cross_entropy(rep.params, *rep.head, bx, by, grad, grad_head);
        rep.mean_loss.total += l;
        sgd_step_inplace(*rep.head, grad_head, s.sgd, server.round, &velocity_head);
      }
      sgd_step_inplace(rep.params, grad, s.sgd, server.round, &velocity);
      ++steps;
    }
  }
  if (steps > 0) {
    const double inv = 1.0 / static_cast<double>(steps);
    rep.mean_loss.total *= inv;
    rep.mean_loss.i2p *= inv;
    rep.mean_loss.align *= inv;
    rep.mean_loss.geo *= inv;
  }

  if (flags.prototypes) {
    rep.protos = N > 0 ? local_prototypes(rep.params, aug) : PrototypeSet(server.globals.num_classes(), s.embedding_dim);
    const auto u = class_uncertainty(rep.params, server.globals, client.validation, s.loss.tau);
    std::optional<Vec> quality;
    if (flags.augment) quality = augmentation_quality(rep.params, server.globals, aug, s.loss.tau);
    rep.conf = class_confidence(rep.n_eff, u, quality, s.confidence);
  } else {
    rep.protos = PrototypeSet(server.globals.num_classes(), s.embedding_dim);
  }
  return rep;
}

struct RoundRecord {
  std::size_t round = 0;
  std::string method;
  std::uint64_t seed = 0;
  double global_acc = 0.0;
  Vec per_client_acc;
  double client_std = 0.0;
  ObjectiveTerms mean_loss;
  std::optional<double> prototype_pairwise_min_dist;
  double wallclock_ms = 0.0;
};

inline nlohmann::json to_json(const RoundRecord& r, bool include_wallclock = true) {
  nlohmann::json j;
  j["round"] = r.round;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["global_acc"] = r.global_acc;
  j["per_client_acc"] = r.per_client_acc;
  j["client_std"] = r.client_std;
  j["mean_loss_terms"] = {{"i2p", r.mean_loss.i2p}, {"align", r.mean_loss.align}, {"geo", r.mean_loss.geo},
                          {"total", r.mean_loss.total}};
  j["prototype_pairwise_min_dist"] =
      r.prototype_pairwise_min_dist ? nlohmann::json(*r.prototype_pairwise_min_dist) : nlohmann::json(nullptr);
  if (include_wallclock) j["wallclock_ms"] = r.wallclock_ms;
  return j;
}

struct Evaluation {
  double global_acc = 0.0;
  Vec per_class_acc;
  Vec per_client_acc;
  double client_std = 0.0;
};

// Global accuracy on the test set; a client's accuracy is the per-class test
// accuracy weighted by that client's label distribution.
inline Evaluation evaluate(const ServerState& st, const LabeledDataset& test, std::span<const ClientData> clients) {
  Evaluation ev;
  const std::size_t C = test.classes;
  std::vector<std::size_t> hit(C, 0);
  std::vector<std::size_t> tot(C, 0);
  std::size_t correct = 0;
  std::vector<Vec> units;
  if (!st.head) units = unit_prototypes(st.globals);
  ForwardCache enc;
  ForwardCache hc;
  for (std::size_t i = 0; i < test.size(); ++i) {
    forward_into(st.params, test.features[i], enc);
    std::size_t pred = 0;
    if (st.head) {
      forward_into(*st.head, enc.embedding(), hc);
      const Vec& logits = hc.embedding();
      for (std::size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[pred]) pred = c;
    } else {
      pred = predict_from_embedding(enc.embedding(), units);
    }
    ++tot[test.labels[i]];
    if (pred == test.labels[i]) {
      ++hit[test.labels[i]];
      ++correct;
    }
  }
  ev.global_acc = test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
  ev.per_class_acc.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    if (tot[c] > 0) ev.per_class_acc[c] = static_cast<double>(hit[c]) / static_cast<double>(tot[c]);
  for (const auto& cd : clients) {
    double a = 0.0;
    for (std::size_t c = 0; c < C; ++c) a += cd.label_distribution[c] * ev.per_class_acc[c];
    ev.per_client_acc.push_back(a);
  }
  ev.client_std = population_std(ev.per_client_acc);
  return ev;
}

// ceil(rate * K) distinct clients drawn uniformly, returned in ascending id order.
inline std::vector<std::size_t> sample_participants(std::size_t clients, double rate, std::size_t round,
                                                    std::uint64_t seed) {
  const auto m = static_cast<std::size_t>(
      std::clamp<double>(std::ceil(rate * static_cast<double>(clients) - 1e-9), 1.0, static_cast<double>(clients)));
  std::vector<std::size_t> ids(clients);
  for (std::size_t k = 0; k < clients; ++k) ids[k] = k;
  if (m < clients) {
    Rng rng(derive_seed(seed, {stream::kParticipation, round}));
    rng.shuffle(ids);
    ids.resize(m);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Server-side aggregation of one round's reports into the next state.
inline ServerState aggregate_round(const ServerState& server, std::span<const ClientReport> reports,
                                   const FederationSettings& s) {
  const MethodFlags flags = flags_for(s.method);
  ServerState next = server;
  if (reports.empty()) {
    ++next.round;
    return next;
  }
  if (flags.prototypes)
    next.globals = flags.confidence_agg ? aggregate_prototypes_confidence(reports, server.globals, server.epsilon)
                                        : aggregate_prototypes_naive(reports, server.globals);
  std::optional<EncoderParams> head;
  next.params = flags.confidence_agg ? aggregate_params_confidence(reports, server.epsilon, &head)
                                     : aggregate_params_size(reports, &head);
  next.head = std::move(head);
  ++next.round;
  return next;
}

struct RoundResult {
  ServerState state;
  RoundRecord record;
  std::vector<ClientReport> reports;
};

inline RoundResult run_round(const ServerState& server, std::span<const ClientData> clients,
                             const LabeledDataset& test, const FederationSettings& s, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ids = sample_participants(clients.size(), s.participation_rate, server.round, seed);
  RoundResult res;
  res.reports.resize(ids.size());
  parallel_for(ids.size(), worker_count(s),
               [&](std::size_t i) { res.reports[i] = run_client(server, clients[ids[i]], s, seed); });
  res.state = aggregate_round(server, res.reports, s);

  const Evaluation ev = evaluate(res.state, test, clients);
  RoundRecord& r = res.record;
  r.round = server.round;
  r.method = to_string(s.method);
  r.seed = seed;
  r.global_acc = ev.global_acc;
  r.per_client_acc = ev.per_client_acc;
  r.client_std = ev.client_std;
  for (const auto& rep : res.reports) {
    r.mean_loss.total += rep.mean_loss.total;
    r.mean_loss.i2p += rep.mean_loss.i2p;
    r.mean_loss.align += rep.mean_loss.align;
    r.mean_loss.geo += rep.mean_loss.geo;
  }
  if (!res.reports.empty()) {
    const double inv = 1.0 / static_cast<double>(res.reports.size());
    r.mean_loss.total *= inv;
    r.mean_loss.i2p *= inv;
    r.mean_loss.align *= inv;
    r.mean_loss.geo *= inv;
  }
  if (flags_for(s.method).prototypes) r.prototype_pairwise_min_dist = min_pairwise_distance(res.state.globals);
  r.wallclock_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// T rounds of run_round from a freshly initialized server. on_round, when
// set, sees each record as soon as it is produced.
inline std::vector<RoundRecord> run_federation(std::span<const ClientData> clients, const LabeledDataset& test,
                                               const FederationSettings& s, std::uint64_t seed,
                                               const std::function<void(const RoundRecord&)>& on_round = {},
                                               ServerState* final_state = nullptr) {
  ServerState st = init_server(s, test.dim, test.classes, seed);
  std::vector<RoundRecord> out;
  for (std::size_t t = 0; t < s.rounds; ++t) {
    RoundResult rr = run_round(st, clients, test, s, seed);
    st = std::move(rr.state);
    if (on_round) on_round(rr.record);
    out.push_back(std::move(rr.record));
  }
  if (final_state) *final_state = std::move(st);
  return out;
}

}  // namespace fedlab
