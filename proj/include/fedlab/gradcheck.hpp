#pragma once

// Central finite-difference check of the full client objective against the
// analytic backward pass.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fedlab/model.hpp"
#include "fedlab/numerics.hpp"
#include "fedlab/objective.hpp"
#include "fedlab/prototypes.hpp"

namespace fedlab {

struct GradCheckCase {
  EncoderParams params;
  std::vector<Vec> features;
  std::vector<std::size_t> labels;
  PrototypeSet globals;
  LossWeights weights;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t coordinates = 0;
};

// Per-coordinate relative error. The floor only guards 0/0 for coordinates
// whose derivative vanishes identically.
inline constexpr double kGradCheckFloor = 1e-8;

inline double grad_rel_err(double analytic, double numeric, double floor = kGradCheckFloor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Distance of every hinge pair (batch prototypes mixed with globals) from the
// margin; finite differences straddling a kink are meaningless.
inline double hinge_clearance(const GradCheckCase& gc) {
  std::vector<Vec> raw;
  for (const auto& x : gc.features) raw.push_back(embed(gc.params, x));
  const auto bp = batch_prototypes(raw, gc.labels, gc.globals.num_classes());
  PrototypeSet mixed = gc.globals;
  for (std::size_t c = 0; c < mixed.num_classes(); ++c)
    if (bp.protos.present[c]) mixed.vectors[c] = bp.protos.vectors[c];
  double clearance = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < mixed.num_classes(); ++a)
    for (std::size_t b = a + 1; b < mixed.num_classes(); ++b)
      clearance = std::min(clearance, std::abs(distance(mixed.vectors[a], mixed.vectors[b]) - gc.weights.margin));
  return clearance;
}

// Random small problem: d_in in [2,6], one hidden layer in [2,8], d_emb in
// [2,4], C in [2,5], batch of C..12 samples covering at least two classes.
// Cases whose hinge pairs sit within `min_clearance` of the margin are redrawn.
inline GradCheckCase random_gradcheck_case(Rng& rng, double min_clearance = 1e-3) {
  for (;;) {
    GradCheckCase gc;
    const std::size_t d_in = 2 + rng.uniform_index(5);
    const std::size_t hidden = 2 + rng.uniform_index(7);
    const std::size_t d_emb = 2 + rng.uniform_index(3);
    const std::size_t C = 2 + rng.uniform_index(4);
    const std::size_t B = C + rng.uniform_index(13 - C);
    gc.params = init_encoder({d_in, hidden, d_emb}, rng);
    for (auto& v : gc.params.values) v *= 2.0;
    // Leave the last class out of the batch half the time so the geometry
    // term mixes batch and global prototypes.
    const std::size_t label_range = (C > 2 && rng.uniform() < 0.5) ? C - 1 : C;
    for (std::size_t i = 0; i < B; ++i) {
      Vec x(d_in);
      for (auto& v : x) v = rng.normal();
      gc.features.push_back(std::move(x));
      gc.labels.push_back(i < 2 ? i : rng.uniform_index(label_range));
    }
    gc.globals = PrototypeSet(C, d_emb);
    for (std::size_t c = 0; c < C; ++c) {
      Vec v(d_emb);
      for (auto& x : v) x = rng.normal();
      gc.globals.set(c, l2_normalize(v));
    }
    gc.weights.tau = rng.uniform(0.2, 1.0);
    gc.weights.margin = rng.uniform(0.5, 2.0);
    gc.weights.lambda_align = rng.uniform(0.1, 1.0);
    gc.weights.lambda_geo = rng.uniform(0.1, 1.0);
    bool degenerate = false;
    for (const auto& x : gc.features) degenerate |= norm(embed(gc.params, x)) < 1e-3;
    if (degenerate || hinge_clearance(gc) < min_clearance) continue;
    return gc;
  }
}

inline GradCheckResult check_objective_gradient(const GradCheckCase& gc, double step = 1e-5,
                                                double floor = kGradCheckFloor) {
  Vec analytic(gc.params.size(), 0.0);
  client_objective(gc.params, gc.features, gc.labels, gc.globals, gc.weights, analytic);
  EncoderParams p = gc.params;
  GradCheckResult res;
  res.coordinates = p.size();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p.values[i];
    p.values[i] = orig + step;
    const double up = client_objective(p, gc.features, gc.labels, gc.globals, gc.weights).total;
    p.values[i] = orig - step;
    const double down = client_objective(p, gc.features, gc.labels, gc.globals, gc.weights).total;
    p.values[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    res.max_abs_err = std::max(res.max_abs_err, std::abs(analytic[i] - numeric));
    res.max_rel_err = std::max(res.max_rel_err, grad_rel_err(analytic[i], numeric, floor));
  }
  return res;
}

}  // namespace fedlab
