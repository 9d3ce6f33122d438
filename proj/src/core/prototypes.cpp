#include "pllforge/core/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pllforge {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_similarity: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); i++) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine_similarity: undefined similarity (zero vector)");
  double v = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(v, -1.0, 1.0);
}

ClassPrototypeSet compute_class_prototypes(const FeatureTable& features,
                                           const PartialDataset& ds) {
  const int C = ds.label_space.num_classes;
  // Collect (id, record) sorted by id so summation order does not depend on
  // record order in the dataset.
  std::vector<const SignalRecord*> recs;
  recs.reserve(ds.records.size());
  for (const auto& r : ds.records) recs.push_back(&r);
  std::sort(recs.begin(), recs.end(), [](const SignalRecord* a, const SignalRecord* b) {
    return a->instance_id < b->instance_id;
  });

  ClassPrototypeSet out;
  out.feature_dim = features.dim;
  out.prototypes.assign(C, {});
  out.support_counts.assign(C, 0);
  std::vector<std::vector<double>> sums(C);

  for (const SignalRecord* r : recs) {
    if (r->ground_truth.empty()) continue;
    const auto& psi = features.get(r->instance_id);
    for (int j : r->ground_truth) {
      if (sums[j].empty()) sums[j].assign(features.dim, 0.0);
      for (int k = 0; k < features.dim; k++) sums[j][k] += psi[k];
      out.support_counts[j]++;
    }
  }
  for (int j = 0; j < C; j++) {
    if (out.support_counts[j] == 0) continue;
    out.prototypes[j].resize(features.dim);
    for (int k = 0; k < features.dim; k++)
      out.prototypes[j][k] = sums[j][k] / out.support_counts[j];
  }
  return out;
}

Matrix minmax_normalize(const Matrix& t) {
  if (t.d.empty()) throw std::invalid_argument("minmax_normalize: empty matrix");
  double lo = t.d[0], hi = t.d[0];
  for (double v : t.d) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) throw std::invalid_argument("minmax_normalize: degenerate normalization");
  Matrix out(t.rows, t.cols);
  for (size_t i = 0; i < t.d.size(); i++) out.d[i] = (t.d[i] - lo) / (hi - lo);
  return out;
}

TransitionMatrix minmax_normalize(const TransitionMatrix& t) {
  TransitionMatrix out = t;
  out.t = minmax_normalize(t.t);
  return out;
}

}  // namespace pllforge
