#pragma once

// Client loss terms: instance-to-prototype contrast, local/global prototype
// alignment, and a pairwise margin penalty on prototype geometry, plus the
// weighted combination and its exact parameter gradient.

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "fedlab/error.hpp"
#include "fedlab/model.hpp"
#include "fedlab/numerics.hpp"
#include "fedlab/prototypes.hpp"

namespace fedlab {

struct LossWeights {
  double lambda_align = 0.1;
  double lambda_geo = 1.0;
  double tau = 0.5;
  double margin = 1.0;

  void validate() const {
    if (!(lambda_align >= 0.0)) throw ValidationError("lambda_align must be >= 0");
    if (!(lambda_geo >= 0.0)) throw ValidationError("lambda_geo must be >= 0");
    if (!(tau > 0.0)) throw ValidationError("tau must be > 0");
    if (!(margin > 0.0)) throw ValidationError("margin must be > 0");
  }
  bool operator==(const LossWeights&) const = default;
};

// Unit-norm embeddings of a mini-batch with their labels.
struct BatchView {
  std::vector<Vec> z;
  std::vector<std::size_t> labels;
};

struct TermResult {
  double loss = 0.0;
  std::vector<Vec> grads;
};

// Softmax cross-entropy over cosine similarities to every global prototype.
// Gradients are with respect to each z_i, projected onto the tangent space
// of the unit sphere at z_i.
inline TermResult i2p_loss(const BatchView& batch, const PrototypeSet& globals, double tau) {
  if (!(tau > 0.0)) throw ValidationError("tau must be > 0");
  if (!globals.all_present()) throw MissingPrototype("i2p_loss: every class needs a global prototype");
  const std::size_t classes = globals.num_classes();
  std::vector<Vec> unit(classes);
  for (std::size_t c = 0; c < classes; ++c) unit[c] = l2_normalize(globals.vectors[c]);

  TermResult out;
  out.grads.resize(batch.z.size());
  if (batch.z.empty()) return out;
  const double inv_b = 1.0 / static_cast<double>(batch.z.size());
  Vec logits(classes);
  for (std::size_t i = 0; i < batch.z.size(); ++i) {
    const Vec& z = batch.z[i];
    const std::size_t y = batch.labels[i];
    if (y >= classes) throw LabelOutOfRange("i2p_loss: label out of range");
    for (std::size_t c = 0; c < classes; ++c) logits[c] = dot(z, unit[c]) / tau;
    const double lse = log_sum_exp(logits);
    out.loss += (lse - logits[y]) * inv_b;

    Vec g(z.size(), 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
      const double q = std::exp(logits[c] - lse) - (c == y ? 1.0 : 0.0);
      axpy(q * inv_b / tau, unit[c], g);
    }
    const double zg = dot(z, g);
    for (std::size_t d = 0; d < g.size(); ++d) g[d] -= z[d] * zg;
    out.grads[i] = std::move(g);
  }
  // Cross-entropy of a categorical distribution; rounding can leave -0.
  if (out.loss < 0.0) out.loss = 0.0;
  return out;
}

// Sum over present local classes of |p_local - p_global|^2. Gradients are
// with respect to the local prototype vectors (zero for absent classes).
inline TermResult align_loss(const PrototypeSet& local, const PrototypeSet& globals) {
  if (local.num_classes() != globals.num_classes()) throw ShapeMismatch("align_loss: class count mismatch");
  TermResult out;
  out.grads.assign(local.num_classes(), Vec(local.dim(), 0.0));
  for (std::size_t c = 0; c < local.num_classes(); ++c) {
    if (!local.present[c]) continue;
    const Vec& p = local.vectors[c];
    const Vec& g = globals.vectors[c];
    for (std::size_t d = 0; d < p.size(); ++d) {
      const double diff = p[d] - g[d];
      out.loss += diff * diff;
      out.grads[c][d] = 2.0 * diff;
    }
  }
  return out;
}

// Sum over ordered pairs c != c' of max(0, margin - |p_c - p_c'|) across the
// present prototypes. The subgradient is 0 at the hinge kink and for
// coincident prototypes.
inline TermResult geo_loss(const PrototypeSet& protos, double margin) {
  if (!(margin > 0.0)) throw ValidationError("margin must be > 0");
  TermResult out;
  out.grads.assign(protos.num_classes(), Vec(protos.dim(), 0.0));
  for (std::size_t a = 0; a < protos.num_classes(); ++a) {
    if (!protos.present[a]) continue;
    for (std::size_t b = a + 1; b < protos.num_classes(); ++b) {
      if (!protos.present[b]) continue;
      const Vec& pa = protos.vectors[a];
      const Vec& pb = protos.vectors[b];
      const double d = distance(pa, pb);
      const double gap = margin - d;
      if (!(gap > 0.0)) continue;
      out.loss += 2.0 * gap;  // (a,b) and (b,a)
      if (d < kZeroNormThreshold) continue;
      for (std::size_t k = 0; k < pa.size(); ++k) {
        const double u = (pa[k] - pb[k]) / d;
        out.grads[a][k] -= 2.0 * u;
        out.grads[b][k] += 2.0 * u;
      }
    }
  }
  return out;
}

struct ObjectiveTerms {
  double total = 0.0;
  double i2p = 0.0;
  double align = 0.0;
  double geo = 0.0;
};

// Per-class means of raw embeddings over a batch, l2-normalized. Classes with
// no samples in the batch (or a numerically zero mean) are absent.
struct BatchPrototypes {
  PrototypeSet protos;
  std::vector<Vec> raw_means;
};

inline BatchPrototypes batch_prototypes(std::span<const Vec> embeddings, std::span<const std::size_t> labels,
                                        std::size_t classes) {
  const std::size_t dim = embeddings.empty() ? 0 : embeddings.front().size();
  BatchPrototypes out{PrototypeSet(classes, dim), std::vector<Vec>(classes, Vec(dim, 0.0))};
  std::vector<std::size_t> n(classes, 0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    axpy(1.0, embeddings[i], out.raw_means[labels[i]]);
    ++n[labels[i]];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (n[c] == 0) continue;
    for (double& v : out.raw_means[c]) v /= static_cast<double>(n[c]);
    if (norm(out.raw_means[c]) < kZeroNormThreshold) continue;
    out.protos.set(c, l2_normalize(out.raw_means[c]), n[c]);
  }
  return out;
}

// L = L_i2p + lambda_align * L_align + lambda_geo * L_geo on one mini-batch.
//
// Local prototypes are the normalized batch means of raw embeddings, so the
// alignment and geometry terms differentiate through them. The geometry
// hinge runs over batch prototypes for classes present in the batch and the
// fixed global prototypes for the rest; only the former receive gradient.
//
// When grad is non-null, dL/dtheta is added into it.
inline ObjectiveTerms client_objective(const EncoderParams& params, std::span<const Vec> features,
                                       std::span<const std::size_t> labels, const PrototypeSet& globals,
                                       const LossWeights& w, std::span<double> grad = {},
                                       std::vector<ForwardCache>* scratch = nullptr) {
  if (features.size() != labels.size()) throw ShapeMismatch("client_objective: features/labels length mismatch");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != params.size()) throw ShapeMismatch("client_objective: gradient buffer size");
  const std::size_t batch = features.size();
  const std::size_t classes = globals.num_classes();
  std::vector<ForwardCache> local_caches;
  std::vector<ForwardCache>& caches = scratch ? *scratch : local_caches;
  if (caches.size() < batch) caches.resize(batch);

  std::vector<Vec> raw(batch);
  BatchView view;
  view.z.resize(batch);
  view.labels.assign(labels.begin(), labels.end());
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] >= classes) throw LabelOutOfRange("client_objective: label out of range");
    forward_into(params, features[i], caches[i]);
    raw[i] = caches[i].embedding();
    view.z[i] = l2_normalize(raw[i]);
  }

  ObjectiveTerms terms;
  const TermResult i2p = i2p_loss(view, globals, w.tau);
  terms.i2p = i2p.loss;

  std::vector<Vec> grad_raw(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    // i2p gradients are already tangent-projected, so only the 1/|e| scale remains.
    const double n = norm(raw[i]);
    grad_raw[i] = i2p.grads[i];
    for (double& g : grad_raw[i]) g /= n;
  }

  if (w.lambda_align > 0.0 || w.lambda_geo > 0.0) {
    const BatchPrototypes bp = batch_prototypes(raw, labels, classes);
    const std::size_t dim = params.output_dim();
    std::vector<Vec> grad_proto(classes, Vec(dim, 0.0));

    if (w.lambda_align > 0.0) {
      const TermResult al = align_loss(bp.protos, globals);
      terms.align = al.loss;
      for (std::size_t c = 0; c < classes; ++c)
        if (bp.protos.present[c]) axpy(w.lambda_align, al.grads[c], grad_proto[c]);
    }
    if (w.lambda_geo > 0.0) {
      PrototypeSet mixed = globals;
      for (std::size_t c = 0; c < classes; ++c)
        if (bp.protos.present[c]) mixed.vectors[c] = bp.protos.vectors[c];
      const TermResult geo = geo_loss(mixed, w.margin);
      terms.geo = geo.loss;
      for (std::size_t c = 0; c < classes; ++c)
        if (bp.protos.present[c]) axpy(w.lambda_geo, geo.grads[c], grad_proto[c]);
    }

    if (want_grad) {
      for (std::size_t c = 0; c < classes; ++c) {
        if (!bp.protos.present[c]) continue;
        Vec gm = l2_normalize_backward(bp.raw_means[c], grad_proto[c]);
        const double inv_n = 1.0 / static_cast<double>(bp.protos.counts[c]);
        for (std::size_t i = 0; i < batch; ++i)
          if (labels[i] == c) axpy(inv_n, gm, grad_raw[i]);
      }
    }
  }

  terms.total = terms.i2p + w.lambda_align * terms.align + w.lambda_geo * terms.geo;
  if (want_grad)
    for (std::size_t i = 0; i < batch; ++i) backward_accumulate(params, caches[i], grad_raw[i], grad);
  return terms;
}

// Cross-entropy of a linear head over raw embeddings (the FedAvg baseline).
// head has widths {embedding_dim, classes}. Gradients are added into the
// encoder and head buffers when non-empty.
inline double head_cross_entropy(const EncoderParams& encoder, const EncoderParams& head,
                                 std::span<const Vec> features, std::span<const std::size_t> labels,
                                 std::span<double> grad_encoder = {}, std::span<double> grad_head = {}) {
  if (head.input_dim() != encoder.output_dim()) throw ShapeMismatch("head_cross_entropy: head input width");
  if (features.size() != labels.size()) throw ShapeMismatch("head_cross_entropy: features/labels length mismatch");
  if (features.empty()) return 0.0;
  const double inv_b = 1.0 / static_cast<double>(features.size());
  double loss = 0.0;
  ForwardCache enc;
  ForwardCache hc;
  for (std::size_t i = 0; i < features.size(); ++i) {
    forward_into(encoder, features[i], enc);
    forward_into(head, enc.embedding(), hc);
    const Vec& logits = hc.embedding();
    const std::size_t y = labels[i];
    if (y >= logits.size()) throw LabelOutOfRange("head_cross_entropy: label out of range");
    const double lse = log_sum_exp(logits);
    loss += (lse - logits[y]) * inv_b;
    if (grad_encoder.empty() && grad_head.empty()) continue;
    Vec gl(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c)
      gl[c] = (std::exp(logits[c] - lse) - (c == y ? 1.0 : 0.0)) * inv_b;
    Vec ge(encoder.output_dim(), 0.0);
    // dL/de = W^T gl (head is a single linear layer)
    for (std::size_t c = 0; c < logits.size(); ++c)
      for (std::size_t d = 0; d < ge.size(); ++d) ge[d] += head.values[c * ge.size() + d] * gl[c];
    if (!grad_head.empty()) backward_accumulate(head, hc, gl, grad_head);
    if (!grad_encoder.empty()) backward_accumulate(encoder, enc, ge, grad_encoder);
  }
  return loss;
}

}  // namespace fedlab
