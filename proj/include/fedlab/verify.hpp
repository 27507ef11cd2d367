#pragma once

// Oracle-backed verification suites. Each suite returns one Check per
// property, with the measured value and the tolerance it was held to.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "fedlab/biasloop.hpp"
#include "fedlab/gradcheck.hpp"

namespace fedlab::verify {

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct Report {
  std::vector<Check> checks;
  bool ok() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
  void add(std::string name, bool pass, std::string detail) {
    checks.push_back({std::move(name), pass, std::move(detail)});
  }
  void append(const Report& o) { checks.insert(checks.end(), o.checks.begin(), o.checks.end()); }
};

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Report gradients(std::uint64_t seed = 2024, std::size_t cases = 100, double tol = 1e-4) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(seed);
  double worst = 0.0;
  std::size_t failures = 0;
  std::size_t coords = 0;
  for (std::size_t i = 0; i < cases; ++i) {
    const GradCheckCase gc = random_gradcheck_case(rng);
    const GradCheckResult r = check_objective_gradient(gc);
    worst = std::max(worst, r.max_rel_err);
    coords += r.coordinates;
    failures += r.max_rel_err < tol ? 0 : 1;
  }
  Report rep;
  rep.add("gradients", failures == 0,
          fmt("%zu configs, %zu coordinates, max rel err %.3g (tol %.0e), %zu failing, %.2fs", cases, coords, worst,
              tol, failures, seconds_since(t0)));
  return rep;
}

// Full (n, m, gamma, sigma2) grid. Every cell must satisfy
// empirical <= sigma2/n_eff + 3 SE; cells with m = 0 must also match
// sigma2/n within 3 SE.
inline Report lemma1(std::uint64_t seed = 7, std::size_t trials = 10000, std::size_t dim = 4) {
  const auto t0 = std::chrono::steady_clock::now();
  Report rep;
  std::size_t cell = 0;
  for (std::size_t n : {1, 4, 16, 64})
    for (std::size_t m : {0, 2, 8})
      for (double gamma : {0.25, 0.6, 1.0})
        for (double s2 : {0.5, 1.0, 4.0}) {
          Rng rng(derive_seed(seed, {cell++}));
          const auto est = biasloop::mc_lemma1(s2, n, m, gamma, trials, dim, rng);
          const double z = (est.empirical_mse - est.bound) / est.se;
          const bool ok = m == 0 ? std::abs(z) <= 3.0 : z <= 3.0;
          rep.add(fmt("lemma1 n=%zu m=%zu gamma=%.2f sigma2=%.1f", n, m, gamma, s2), ok,
                  fmt("empirical %.5g, %s %.5g, z=%+.2f (tol %s3)", est.empirical_mse, m == 0 ? "exact" : "bound",
                      est.bound, z, m == 0 ? "|z| <= " : "z <= "));
        }
  rep.add("lemma1 runtime", true, fmt("%.2fs", seconds_since(t0)));
  return rep;
}

inline Report varmin(std::uint64_t seed = 11, std::size_t configs = 1000) {
  Report rep;
  {
    const Vec v{1.0, 4.0};
    const auto w = biasloop::min_variance_weights(v);
    const double err = std::abs(w.value - 0.8);
    rep.add("varmin closed form v=(1,4)", err <= 1e-12, fmt("value %.17g, expected 0.8", w.value));
  }
  Rng rng(seed);
  double worst_identity = 0.0;
  double worst_perturb = -INFINITY;  // min over trials of (perturbed - optimum); must stay >= 0
  std::size_t not_below_uniform = 0;
  std::size_t not_below_size = 0;
  for (std::size_t t = 0; t < configs; ++t) {
    const std::size_t K = 2 + rng.uniform_index(19);
    Vec v(K);
    Vec sizes(K);
    for (std::size_t k = 0; k < K; ++k) {
      v[k] = std::exp(rng.uniform(std::log(0.01), std::log(100.0)));
      sizes[k] = static_cast<double>(1 + rng.uniform_index(1000));
    }
    const auto w = biasloop::min_variance_weights(v);
    const double direct = biasloop::injected_variance(w.weights, v);
    double inv = 0.0;
    for (double x : v) inv += 1.0 / x;
    worst_identity = std::max({worst_identity, std::abs(direct - 1.0 / inv), std::abs(w.value - 1.0 / inv)});

    const Vec uni(K, 1.0 / static_cast<double>(K));
    double ssum = 0.0;
    for (double s : sizes) ssum += s;
    Vec prop(K);
    for (std::size_t k = 0; k < K; ++k) prop[k] = sizes[k] / ssum;
    not_below_uniform += direct < biasloop::injected_variance(uni, v) ? 0 : 1;
    not_below_size += direct < biasloop::injected_variance(prop, v) ? 0 : 1;

    // Sum-preserving perturbation of the optimum.
    Vec d(K);
    double dm = 0.0;
    for (auto& x : d) dm += (x = rng.normal());
    Vec pert = w.weights;
    for (std::size_t k = 0; k < K; ++k) pert[k] += 1e-3 * (d[k] - dm / static_cast<double>(K));
    const double gap = biasloop::injected_variance(pert, v) - direct;
    worst_perturb = t == 0 ? gap : std::min(worst_perturb, gap);
  }
  rep.add("varmin identity", worst_identity <= 1e-12,
          fmt("%zu configs, max |sum a^2 v - 1/sum(1/v)| = %.3g (tol 1e-12)", configs, worst_identity));
  rep.add("varmin below uniform", not_below_uniform == 0,
          fmt("%zu of %zu configs not strictly below uniform weights", not_below_uniform, configs));
  rep.add("varmin below size-proportional", not_below_size == 0,
          fmt("%zu of %zu configs not strictly below size-proportional weights", not_below_size, configs));
  rep.add("varmin perturbation", worst_perturb >= 0.0,
          fmt("smallest increase under sum-preserving perturbation %.3g (must be >= 0)", worst_perturb));
  return rep;
}

// Recursion E^{t+1} <= rho^2 E^t + offset at every round, and the plateau
// below the fixed point, on the long-tailed reference setup. The Monte-Carlo
// tolerance combines the SE of E^{t+1} and of the carried rho^2 E^t term.
inline Report biasloop_suite(std::uint64_t seed = 13, std::size_t replicas = 2000, std::size_t rounds = 50,
                             std::vector<biasloop::ErrorTrace>* traces = nullptr) {
  using biasloop::Weighting;
  const auto t0 = std::chrono::steady_clock::now();
  Report rep;
  for (Weighting w : {Weighting::kConfidence, Weighting::kSize, Weighting::kUniform})
    for (double rho : {0.0, 0.3, 0.6, 0.9}) {
      auto cfg = biasloop::long_tailed_config(rho, w, seed);
      cfg.trials = replicas;
      cfg.rounds = rounds;
      const auto tr = biasloop::simulate_loop(cfg);
      double worst_z = -INFINITY;
      std::size_t worst_t = 0;
      for (std::size_t t = 1; t < tr.error.size(); ++t) {
        const double se = std::hypot(tr.se[t], tr.bound_se[t]);
        const double z = (tr.error[t] - tr.bound_rhs[t]) / se;
        if (z > worst_z) {
          worst_z = z;
          worst_t = t;
        }
      }
      const std::string tag = fmt("rho=%.1f %s", rho, biasloop::to_string(w).c_str());
      rep.add("recursion " + tag, worst_z <= 3.0,
              fmt("worst round %zu: z=%+.2f (tol z <= 3)", worst_t, worst_z));
      const double fp = biasloop::fixed_point_bound(cfg);
      const double pz = (tr.plateau() - fp) / tr.plateau_se();
      rep.add("plateau " + tag, pz <= 3.0,
              fmt("plateau %.5g vs fixed point %.5g, z=%+.2f (tol z <= 3)", tr.plateau(), fp, pz));
      if (traces) traces->push_back(tr);
    }
  rep.add("biasloop runtime", true, fmt("%.2fs", seconds_since(t0)));
  return rep;
}

inline const char* kSuites = "gradients, lemma1, varmin, biasloop, all";

// An unknown suite name yields a single failing check.
inline Report run_suite(const std::string& name, std::vector<biasloop::ErrorTrace>* traces = nullptr) {
  const bool all = name == "all";
  Report rep;
  if (all || name == "gradients") rep.append(gradients());
  if (all || name == "lemma1") rep.append(lemma1());
  if (all || name == "varmin") rep.append(varmin());
  if (all || name == "biasloop") rep.append(biasloop_suite(13, 2000, 50, traces));
  const bool known = all || name == "gradients" || name == "lemma1" || name == "varmin" || name == "biasloop";
  if (!known) rep.add("suite", false, "unknown suite '" + name + "'; valid suites: " + kSuites);
  return rep;
}

}  // namespace fedlab::verify
