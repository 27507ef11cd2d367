#pragma once

// Multilayer perceptron encoder with tanh hidden layers and a linear output,
// hand-written backpropagation, plain SGD, and a text checkpoint format.

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedlab/error.hpp"
#include "fedlab/numerics.hpp"

namespace fedlab {

// Flat parameter vector plus the layer widths that give it shape.
// Layer l maps widths[l] -> widths[l+1]; its block is the row-major weight
// matrix (fan_out x fan_in) followed by the bias (fan_out).
struct EncoderParams {
  std::vector<std::size_t> widths;
  Vec values;

  EncoderParams() = default;
  explicit EncoderParams(std::vector<std::size_t> w) : widths(std::move(w)) {
    if (widths.size() < 2) throw ShapeMismatch("EncoderParams: need at least input and output widths");
    for (auto x : widths)
      if (x == 0) throw ShapeMismatch("EncoderParams: zero layer width");
    values.assign(total_size(widths), 0.0);
  }

  static std::size_t total_size(const std::vector<std::size_t>& widths) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += (widths[l] + 1) * widths[l + 1];
    return n;
  }

  std::size_t layers() const { return widths.size() - 1; }
  std::size_t input_dim() const { return widths.front(); }
  std::size_t output_dim() const { return widths.back(); }
  std::size_t size() const { return values.size(); }

  std::size_t weight_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += (widths[l] + 1) * widths[l + 1];
    return off;
  }
  std::size_t bias_offset(std::size_t layer) const {
    return weight_offset(layer) + widths[layer] * widths[layer + 1];
  }

  bool same_shape(const EncoderParams& o) const { return widths == o.widths; }
  bool operator==(const EncoderParams&) const = default;
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
inline EncoderParams init_encoder(const std::vector<std::size_t>& widths, Rng& rng) {
  EncoderParams p(widths);
  for (std::size_t l = 0; l < p.layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    const std::size_t begin = p.weight_offset(l);
    const std::size_t end = begin + (widths[l] + 1) * widths[l + 1];
    for (std::size_t i = begin; i < end; ++i) p.values[i] = rng.uniform(-bound, bound);
  }
  return p;
}

// acts[0] is the input, acts[l+1] the output of layer l (post-activation for
// hidden layers). The last entry is the raw embedding.
struct ForwardCache {
  std::vector<Vec> acts;
  const Vec& embedding() const { return acts.back(); }
};

inline void forward_into(const EncoderParams& p, std::span<const double> x, ForwardCache& cache) {
  if (x.size() != p.input_dim()) throw ShapeMismatch("forward: input width mismatch");
  const std::size_t layers = p.layers();
  cache.acts.resize(layers + 1);
  cache.acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t fan_in = p.widths[l];
    const std::size_t fan_out = p.widths[l + 1];
    const double* w = p.values.data() + p.weight_offset(l);
    const double* b = w + fan_in * fan_out;
    const Vec& in = cache.acts[l];
    Vec& out = cache.acts[l + 1];
    out.resize(fan_out);
    const bool hidden = l + 1 < layers;
    for (std::size_t o = 0; o < fan_out; ++o) {
      double s = b[o];
      const double* row = w + o * fan_in;
      for (std::size_t i = 0; i < fan_in; ++i) s += row[i] * in[i];
      out[o] = hidden ? std::tanh(s) : s;
    }
  }
}

inline ForwardCache forward(const EncoderParams& p, std::span<const double> x) {
  ForwardCache c;
  forward_into(p, x, c);
  return c;
}

inline Vec embed(const EncoderParams& p, std::span<const double> x) { return forward(p, x).embedding(); }

// Adds dL/dtheta into grad (same layout as p.values) given dL/d(raw embedding).
inline void backward_accumulate(const EncoderParams& p, const ForwardCache& cache,
                                std::span<const double> grad_embedding, std::span<double> grad) {
  if (grad_embedding.size() != p.output_dim() || grad.size() != p.size() ||
      cache.acts.size() != p.layers() + 1)
    throw ShapeMismatch("backward: shape mismatch");
  Vec delta(grad_embedding.begin(), grad_embedding.end());
  Vec prev;
  for (std::size_t l = p.layers(); l-- > 0;) {
    const std::size_t fan_in = p.widths[l];
    const std::size_t fan_out = p.widths[l + 1];
    if (l + 1 < p.layers()) {
      const Vec& a = cache.acts[l + 1];
      for (std::size_t o = 0; o < fan_out; ++o) delta[o] *= 1.0 - a[o] * a[o];
    }
    const Vec& in = cache.acts[l];
    const std::size_t woff = p.weight_offset(l);
    double* gw = grad.data() + woff;
    double* gb = gw + fan_in * fan_out;
    for (std::size_t o = 0; o < fan_out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      double* row = gw + o * fan_in;
      for (std::size_t i = 0; i < fan_in; ++i) row[i] += d * in[i];
      gb[o] += d;
    }
    if (l == 0) break;
    const double* w = p.values.data() + woff;
    prev.assign(fan_in, 0.0);
    for (std::size_t o = 0; o < fan_out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* row = w + o * fan_in;
      for (std::size_t i = 0; i < fan_in; ++i) prev[i] += row[i] * d;
    }
    delta.swap(prev);
  }
}

inline Vec backward(const EncoderParams& p, const ForwardCache& cache, std::span<const double> grad_embedding) {
  Vec g(p.size(), 0.0);
  backward_accumulate(p, cache, grad_embedding, g);
  return g;
}

struct SgdConfig {
  double learning_rate = 0.1;
  double decay = 0.998;
  double weight_decay = 0.001;
  double momentum = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("sgd.learning_rate must be > 0");
    if (!(decay > 0.0 && decay <= 1.0)) throw ValidationError("sgd.decay must be in (0, 1]");
    if (!(weight_decay >= 0.0)) throw ValidationError("sgd.weight_decay must be >= 0");
    if (!(momentum >= 0.0)) throw ValidationError("sgd.momentum must be >= 0");
  }
  bool operator==(const SgdConfig&) const = default;
};

inline double learning_rate_at(const SgdConfig& cfg, std::size_t round_index) {
  return cfg.learning_rate * std::pow(cfg.decay, static_cast<double>(round_index));
}

// params -= lr_t * (grads + weight_decay * params). With momentum > 0 the
// caller owns the velocity buffer (zero-initialized, same length as params).
inline void sgd_step_inplace(EncoderParams& params, std::span<const double> grads, const SgdConfig& cfg,
                             std::size_t round_index, Vec* velocity = nullptr) {
  if (grads.size() != params.size()) throw ShapeMismatch("sgd_step: gradient length mismatch");
  const double lr = learning_rate_at(cfg, round_index);
  const bool use_momentum = cfg.momentum > 0.0;
  if (use_momentum) {
    if (!velocity) throw ValidationError("sgd_step: momentum requires a velocity buffer");
    if (velocity->size() != params.size()) velocity->assign(params.size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i] + cfg.weight_decay * params.values[i];
    if (use_momentum) {
      (*velocity)[i] = cfg.momentum * (*velocity)[i] + g;
      params.values[i] -= lr * (*velocity)[i];
    } else {
      params.values[i] -= lr * g;
    }
  }
}

inline EncoderParams sgd_step(const EncoderParams& params, std::span<const double> grads, const SgdConfig& cfg,
                              std::size_t round_index) {
  EncoderParams out = params;
  Vec velocity;
  sgd_step_inplace(out, grads, cfg, round_index, cfg.momentum > 0.0 ? &velocity : nullptr);
  return out;
}

// Checkpoint text format:
//   fedlab-encoder 1
//   widths <L+1> w0 w1 ... wL
//   values <N>
//   <N lines, one value each, printed with 17 significant digits>
inline void write_checkpoint(std::ostream& os, const EncoderParams& p) {
  os << "fedlab-encoder 1\nwidths " << p.widths.size();
  for (auto w : p.widths) os << ' ' << w;
  os << "\nvalues " << p.values.size() << '\n';
  char buf[64];
  for (double v : p.values) {
    std::snprintf(buf, sizeof buf, "%.17g\n", v);
    os << buf;
  }
}

inline EncoderParams read_checkpoint(std::istream& is) {
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "fedlab-encoder" || version != 1)
    throw ParseError("checkpoint: bad header", 1);
  std::size_t nw = 0;
  if (!(is >> tag >> nw) || tag != "widths") throw ParseError("checkpoint: expected widths", 2);
  std::vector<std::size_t> widths(nw);
  for (auto& w : widths)
    if (!(is >> w)) throw ParseError("checkpoint: truncated widths", 2);
  EncoderParams p(widths);
  std::size_t nv = 0;
  if (!(is >> tag >> nv) || tag != "values") throw ParseError("checkpoint: expected values", 3);
  if (nv != p.size()) throw ShapeMismatch("checkpoint: value count does not match widths");
  for (std::size_t i = 0; i < nv; ++i)
    if (!(is >> p.values[i])) throw ParseError("checkpoint: truncated values", 4 + i);
  return p;
}

}  // namespace fedlab
