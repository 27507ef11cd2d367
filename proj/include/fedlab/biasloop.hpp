#pragma once

// Monte-Carlo oracle for the prototype bias loop: the effective-sample-size
// estimation bound, minimum-variance aggregation weights, and a simulator of
// contractive prototype dynamics tracked against the three-term error
// recursion (anchor feedback, heterogeneity gap, variance injection).

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "fedlab/error.hpp"
#include "fedlab/numerics.hpp"

namespace fedlab::biasloop {

struct McEstimate {
  double empirical_mse = 0.0;
  double se = 0.0;  // Monte-Carlo standard error of empirical_mse
  double bound = 0.0;
};

// n real points ~ N(mu, (sigma2/dim) I) and m synthetic points with per-point
// variance sigma2/gamma, combined by the weighted mean with weights 1 and
// gamma. Returns E|p - mu|^2 over `trials` replicas and sigma2 / (n + gamma m).
inline McEstimate mc_lemma1(double sigma2, std::size_t n, std::size_t m, double gamma, std::size_t trials,
                            std::size_t dim, Rng& rng) {
  if (!(sigma2 > 0.0)) throw ValidationError("mc_lemma1: sigma2 must be > 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("mc_lemma1: gamma must be in [0, 1]");
  if (dim == 0 || trials < 2) throw ValidationError("mc_lemma1: need dim >= 1 and trials >= 2");
  const double n_eff = static_cast<double>(n) + gamma * static_cast<double>(m);
  if (!(n_eff > 0.0)) throw ValidationError("mc_lemma1: effective sample size must be > 0");
  const double sd_real = std::sqrt(sigma2 / static_cast<double>(dim));
  const bool use_synth = gamma > 0.0 && m > 0;
  const double sd_synth = use_synth ? std::sqrt(sigma2 / (gamma * static_cast<double>(dim))) : 0.0;

  Vec acc(dim);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (auto& a : acc) a += sd_real * rng.normal();
    if (use_synth)
      for (std::size_t i = 0; i < m; ++i)
        for (auto& a : acc) a += gamma * sd_synth * rng.normal();
    double e = 0.0;
    for (double a : acc) e += (a / n_eff) * (a / n_eff);
    sum += e;
    sum_sq += e * e;
  }
  const auto T = static_cast<double>(trials);
  McEstimate out;
  out.empirical_mse = sum / T;
  const double var = std::max(0.0, (sum_sq - T * out.empirical_mse * out.empirical_mse) / (T - 1.0));
  out.se = std::sqrt(var / T);
  out.bound = sigma2 / n_eff;
  return out;
}

struct MinVarianceWeights {
  Vec weights;
  double value = 0.0;  // 1 / sum(1/v)
};

// alpha_k = (1/v_k) / sum_j (1/v_j), the minimizer of sum alpha^2 v on the simplex.
inline MinVarianceWeights min_variance_weights(std::span<const double> v) {
  if (v.empty()) throw ValidationError("min_variance_weights: empty input");
  double s = 0.0;
  for (double x : v) {
    if (!(x > 0.0)) throw ValidationError("min_variance_weights: variances must be > 0");
    s += 1.0 / x;
  }
  MinVarianceWeights out;
  out.weights.resize(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out.weights[k] = (1.0 / v[k]) / s;
  out.value = 1.0 / s;
  return out;
}

// sum_k alpha_k^2 v_k
inline double injected_variance(std::span<const double> alpha, std::span<const double> v) {
  if (alpha.size() != v.size()) throw ShapeMismatch("injected_variance: length mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) s += alpha[k] * alpha[k] * v[k];
  return s;
}

enum class Weighting { kUniform, kSize, kConfidence };

inline std::string to_string(Weighting w) {
  switch (w) {
    case Weighting::kUniform: return "uniform";
    case Weighting::kSize: return "size";
    case Weighting::kConfidence: return "confidence";
  }
  return "unknown";
}

struct DynamicsConfig {
  double rho = 0.5;
  Vec sigma2;               // per client
  Vec n_eff;                // per client
  std::vector<Vec> shifts;  // delta_k, client center minus true center
  Weighting weighting = Weighting::kConfidence;
  std::size_t rounds = 50;
  std::size_t trials = 2000;
  std::size_t dim = 8;
  double initial_error = 1.0;  // E^0; the initial anchor is mu + N(0, (E^0/dim) I)
  std::uint64_t seed = 0;

  std::size_t clients() const { return sigma2.size(); }

  void validate() const {
    if (!(rho >= 0.0 && rho < 1.0)) throw DivergenceConfig("dynamics: rho must be in [0, 1)");
    if (sigma2.empty() || n_eff.size() != sigma2.size() || shifts.size() != sigma2.size())
      throw ShapeMismatch("dynamics: per-client arrays must share a nonzero length");
    for (std::size_t k = 0; k < sigma2.size(); ++k) {
      if (!(sigma2[k] >= 0.0)) throw ValidationError("dynamics: sigma2 must be >= 0");
      if (!(n_eff[k] >= 1.0)) throw ValidationError("dynamics: n_eff must be >= 1");
      if (shifts[k].size() != dim) throw ShapeMismatch("dynamics: shift dimension mismatch");
    }
    if (dim == 0 || trials < 2) throw ValidationError("dynamics: need dim >= 1 and trials >= 2");
  }
};

// Aggregation weights for the configured scheme: 1/K, proportional to n_eff,
// or proportional to n_eff / sigma2 (inverse prototype variance).
inline Vec aggregation_weights(const DynamicsConfig& cfg) {
  const std::size_t K = cfg.clients();
  Vec w(K, 0.0);
  double s = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    switch (cfg.weighting) {
      case Weighting::kUniform: w[k] = 1.0; break;
      case Weighting::kSize: w[k] = cfg.n_eff[k]; break;
      case Weighting::kConfidence:
        w[k] = cfg.sigma2[k] > 0.0 ? cfg.n_eff[k] / cfg.sigma2[k] : 1e300;
        break;
    }
    s += w[k];
  }
  for (auto& x : w) x /= s;
  return w;
}

// |sum_k alpha_k delta_k|^2
inline double delta_bias(const DynamicsConfig& cfg, std::span<const double> alpha) {
  Vec d(cfg.dim, 0.0);
  for (std::size_t k = 0; k < cfg.clients(); ++k) axpy(alpha[k], cfg.shifts[k], d);
  return squared_norm(d);
}

// sum_k alpha_k^2 sigma2_k / n_eff_k
inline double variance_injection(const DynamicsConfig& cfg, std::span<const double> alpha) {
  double s = 0.0;
  for (std::size_t k = 0; k < cfg.clients(); ++k) s += alpha[k] * alpha[k] * cfg.sigma2[k] / cfg.n_eff[k];
  return s;
}

// Per-round constant of the recursion: 2(1-rho)^2 Delta_bias + 2 sum alpha^2 sigma^2/n_eff.
inline double recursion_offset(const DynamicsConfig& cfg) {
  const Vec a = aggregation_weights(cfg);
  return 2.0 * (1.0 - cfg.rho) * (1.0 - cfg.rho) * delta_bias(cfg, a) + 2.0 * variance_injection(cfg, a);
}

// Steady state of E <- rho^2 E + offset.
inline double fixed_point_bound(const DynamicsConfig& cfg) {
  if (!(cfg.rho >= 0.0 && cfg.rho < 1.0)) throw DivergenceConfig("fixed_point_bound: rho must be in [0, 1)");
  return recursion_offset(cfg) / (1.0 - cfg.rho * cfg.rho);
}

struct ErrorTrace {
  Vec error;      // E^t for t = 0..T
  Vec se;         // Monte-Carlo standard error of error[t]
  Vec bound_rhs;  // rho^2 E^{t-1} + offset for t >= 1; bound_rhs[0] = error[0]
  Vec bound_se;   // rho^2 se[t-1], the Monte-Carlo uncertainty carried into bound_rhs[t]
  Weighting weighting = Weighting::kConfidence;
  std::uint64_t seed = 0;

  double plateau() const { return error.back(); }
  double plateau_se() const { return se.back(); }
};

// Replicas of p_k^{t+1} = (1-rho)(mu + delta_k) + rho p_g^t + xi_k with
// xi_k ~ N(0, sigma2_k / (n_eff_k dim) I), and p_g^{t+1} = sum_k alpha_k p_k^{t+1}.
// mu = 0 without loss of generality. Replica r draws from its own stream.
inline ErrorTrace simulate_loop(const DynamicsConfig& cfg) {
  cfg.validate();
  const std::size_t K = cfg.clients();
  const std::size_t T = cfg.rounds;
  const Vec alpha = aggregation_weights(cfg);
  const double offset = recursion_offset(cfg);
  Vec noise_sd(K);
  for (std::size_t k = 0; k < K; ++k) noise_sd[k] = std::sqrt(cfg.sigma2[k] / (cfg.n_eff[k] * static_cast<double>(cfg.dim)));
  Vec drift(cfg.dim, 0.0);  // (1 - rho) sum alpha_k delta_k
  for (std::size_t k = 0; k < K; ++k) axpy((1.0 - cfg.rho) * alpha[k], cfg.shifts[k], drift);

  Vec sum(T + 1, 0.0);
  Vec sum_sq(T + 1, 0.0);
  Vec pg(cfg.dim);
  Vec next(cfg.dim);
  const double init_sd = std::sqrt(cfg.initial_error / static_cast<double>(cfg.dim));
  for (std::size_t r = 0; r < cfg.trials; ++r) {
    Rng rng(derive_seed(cfg.seed, {stream::kReplica, r}));
    for (auto& x : pg) x = init_sd * rng.normal();
    double e = squared_norm(pg);
    sum[0] += e;
    sum_sq[0] += e * e;
    for (std::size_t t = 1; t <= T; ++t) {
      for (std::size_t d = 0; d < cfg.dim; ++d) next[d] = drift[d] + cfg.rho * pg[d];
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t d = 0; d < cfg.dim; ++d) next[d] += alpha[k] * noise_sd[k] * rng.normal();
      pg.swap(next);
      e = squared_norm(pg);
      sum[t] += e;
      sum_sq[t] += e * e;
    }
  }

  ErrorTrace tr;
  tr.weighting = cfg.weighting;
  tr.seed = cfg.seed;
  const auto N = static_cast<double>(cfg.trials);
  tr.error.resize(T + 1);
  tr.se.resize(T + 1);
  for (std::size_t t = 0; t <= T; ++t) {
    tr.error[t] = sum[t] / N;
    const double var = std::max(0.0, (sum_sq[t] - N * tr.error[t] * tr.error[t]) / (N - 1.0));
    tr.se[t] = std::sqrt(var / N);
  }
  tr.bound_rhs.resize(T + 1);
  tr.bound_se.resize(T + 1);
  tr.bound_rhs[0] = tr.error[0];
  tr.bound_se[0] = tr.se[0];
  for (std::size_t t = 1; t <= T; ++t) {
    tr.bound_rhs[t] = cfg.rho * cfg.rho * tr.error[t - 1] + offset;
    tr.bound_se[t] = cfg.rho * cfg.rho * tr.se[t - 1];
  }
  return tr;
}

// Long-tailed reference setup: K clients with n_eff log-spaced from 1 to 100,
// heterogeneous per-client variances cycling through {2, 0.5, 1, 4, 0.25},
// and center shifts of norm `shift` in fixed random directions.
inline DynamicsConfig long_tailed_config(double rho, Weighting w, std::uint64_t seed, std::size_t clients = 10,
                                         double shift = 0.01) {
  static constexpr double kSigmaCycle[] = {2.0, 0.5, 1.0, 4.0, 0.25};
  DynamicsConfig cfg;
  cfg.rho = rho;
  cfg.weighting = w;
  cfg.seed = seed;
  Rng dirs(0x5EEDD1F7ULL);
  for (std::size_t k = 0; k < clients; ++k) {
    const double frac = clients > 1 ? static_cast<double>(k) / static_cast<double>(clients - 1) : 0.0;
    cfg.n_eff.push_back(std::pow(100.0, frac));
    cfg.sigma2.push_back(kSigmaCycle[k % 5]);
    Vec d(cfg.dim);
    for (auto& x : d) x = dirs.normal();
    const double n = norm(d);
    for (auto& x : d) x *= shift / n;
    cfg.shifts.push_back(std::move(d));
  }
  return cfg;
}

// CSV columns: round,E_t,se,bound_rhs,weighting_scheme,seed
inline void write_trace_csv(std::ostream& os, const ErrorTrace& tr, bool header = true) {
  if (header) os << "round,E_t,se,bound_rhs,weighting_scheme,seed\n";
  char buf[128];
  for (std::size_t t = 0; t < tr.error.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,", t, tr.error[t], tr.se[t], tr.bound_rhs[t]);
    os << buf << to_string(tr.weighting) << ',' << tr.seed << '\n';
  }
}

}  // namespace fedlab::biasloop
