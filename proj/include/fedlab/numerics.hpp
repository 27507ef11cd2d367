#pragma once

// Dense vector helpers and a portable, explicitly specified random stream.
//
// All reductions run in ascending index order so results are bit-identical
// across reruns. The random generator is xoshiro256** seeded through
// splitmix64; every distribution below is implemented here rather than taken
// from <random>, whose distributions are not portable between standard
// libraries.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedlab/error.hpp"

namespace fedlab {

using Vec = std::vector<double>;

// Norms below this are treated as a degenerate (zero) vector.
inline constexpr double kZeroNormThreshold = 1e-12;

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeMismatch("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> v) { return dot(v, v); }

inline double norm(std::span<const double> v) { return std::sqrt(squared_norm(v)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeMismatch("squared_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double distance(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeMismatch("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec l2_normalize(std::span<const double> v) {
  const double n = norm(v);
  if (!(n >= kZeroNormThreshold)) throw ZeroVector("l2_normalize: vector norm below 1e-12");
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

// Chain rule through u = v / |v|: given dL/du, returns dL/dv = (I - u u^T) dL/du / |v|.
inline Vec l2_normalize_backward(std::span<const double> v, std::span<const double> grad_u) {
  if (v.size() != grad_u.size()) throw ShapeMismatch("l2_normalize_backward: length mismatch");
  const double n = norm(v);
  if (!(n >= kZeroNormThreshold)) throw ZeroVector("l2_normalize_backward: vector norm below 1e-12");
  double ug = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) ug += (v[i] / n) * grad_u[i];
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (grad_u[i] - (v[i] / n) * ug) / n;
  return out;
}

inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na >= kZeroNormThreshold) || !(nb >= kZeroNormThreshold))
    throw ZeroVector("cosine_sim: degenerate input");
  return dot(a, b) / (na * nb);
}

inline Vec softmax(std::span<const double> logits) {
  Vec out(logits.size());
  if (logits.empty()) return out;
  double mx = logits[0];
  for (double l : logits) mx = l > mx ? l : mx;
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    s += out[i];
  }
  for (double& o : out) o /= s;
  return out;
}

// log(sum(exp(logits))) with max subtraction.
inline double log_sum_exp(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = l > mx ? l : mx;
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return mx + std::log(s);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Population standard deviation (divides by N).
inline double population_std(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// Sample standard deviation (divides by N-1); 0 for fewer than two values.
inline double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Seed splitting: hashes a root seed together with an ordered list of tags
// (stream id, round, client id, ...) into an independent 64-bit seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t state = root;
  std::uint64_t h = splitmix64(state);
  for (std::uint64_t t : tags) {
    state = h ^ (t * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL);
    h = splitmix64(state);
  }
  return h;
}

// xoshiro256** with splitmix64 seeding. Single owner; copy to fork a stream
// that replays the same draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : s_) s = splitmix64(sm);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) by rejection, free of modulo bias.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ValidationError("uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mu, double sd) { return mu + sd * normal(); }

  // log of a Gamma(shape, 1) draw (Marsaglia-Tsang). Log space keeps tiny
  // shapes (alpha << 1) from underflowing to zero.
  double log_gamma_draw(double shape) {
    if (!(shape > 0.0)) throw ValidationError("gamma: shape must be > 0");
    if (shape < 1.0) {
      const double u = 1.0 - uniform();
      return log_gamma_draw(shape + 1.0) + std::log(u) / shape;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x;
      double v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = 1.0 - uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
    }
  }

  double gamma(double shape) { return std::exp(log_gamma_draw(shape)); }

  double beta(double a, double b) {
    const double la = log_gamma_draw(a);
    const double lb = log_gamma_draw(b);
    const double m = la > lb ? la : lb;
    const double ea = std::exp(la - m);
    const double eb = std::exp(lb - m);
    return ea / (ea + eb);
  }

  // Symmetric Dirichlet(alpha * 1_k).
  Vec dirichlet(double alpha, std::size_t k) {
    Vec logs(k);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < k; ++i) {
      logs[i] = log_gamma_draw(alpha);
      mx = logs[i] > mx ? logs[i] : mx;
    }
    double s = 0.0;
    for (auto& l : logs) {
      l = std::exp(l - mx);
      s += l;
    }
    for (auto& l : logs) l /= s;
    return logs;
  }

  // Fisher-Yates, last element first.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Fixed stream identifiers for derive_seed. Changing a value changes every
// downstream draw, so treat these as part of the on-disk reproducibility
// contract.
namespace stream {
inline constexpr std::uint64_t kData = 1;
inline constexpr std::uint64_t kPartition = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kPrototypes = 4;
inline constexpr std::uint64_t kParticipation = 5;
inline constexpr std::uint64_t kClient = 6;
inline constexpr std::uint64_t kTestData = 7;
inline constexpr std::uint64_t kValidation = 8;
inline constexpr std::uint64_t kReplica = 9;
}  // namespace stream

}  // namespace fedlab
