#pragma once

#include <vector>

#include "fedlab/numerics.hpp"

namespace fedlab {

// C class representatives in embedding space. present[c] marks classes that
// carry a valid (unit-norm) vector; counts[c] is the number of real samples
// behind it.
struct PrototypeSet {
  std::vector<Vec> vectors;
  std::vector<bool> present;
  std::vector<std::size_t> counts;

  PrototypeSet() = default;
  PrototypeSet(std::size_t classes, std::size_t dim)
      : vectors(classes, Vec(dim, 0.0)), present(classes, false), counts(classes, 0) {}

  std::size_t num_classes() const { return vectors.size(); }
  std::size_t dim() const { return vectors.empty() ? 0 : vectors.front().size(); }

  bool all_present() const {
    for (bool b : present)
      if (!b) return false;
    return true;
  }

  void set(std::size_t c, Vec v, std::size_t count = 0) {
    vectors[c] = std::move(v);
    present[c] = true;
    counts[c] = count;
  }

  bool operator==(const PrototypeSet&) const = default;
};

// Smallest distance between two present prototypes; 0 if fewer than two.
inline double min_pairwise_distance(const PrototypeSet& p) {
  double best = -1.0;
  for (std::size_t a = 0; a < p.num_classes(); ++a) {
    if (!p.present[a]) continue;
    for (std::size_t b = a + 1; b < p.num_classes(); ++b) {
      if (!p.present[b]) continue;
      const double d = distance(p.vectors[a], p.vectors[b]);
      if (best < 0.0 || d < best) best = d;
    }
  }
  return best < 0.0 ? 0.0 : best;
}

}  // namespace fedlab
