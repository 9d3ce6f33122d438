#pragma once

#include <span>

#include "pllforge/core/types.hpp"

namespace pllforge {

// Cosine similarity of two same-length vectors. Throws on zero vectors
// ("undefined similarity") and on length mismatch.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Per-class arithmetic mean of feature rows over ground-truth membership.
// Multi-label instances contribute to every ground-truth class. Accumulation
// runs in instance-id order so the result is invariant to record permutation.
ClassPrototypeSet compute_class_prototypes(const FeatureTable& features,
                                           const PartialDataset& ds);

// Affine map of every entry onto [0,1] using the global matrix min and max.
// Throws "degenerate normalization" on a constant matrix.
Matrix minmax_normalize(const Matrix& t);
TransitionMatrix minmax_normalize(const TransitionMatrix& t);

}  // namespace pllforge
