#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pllforge/core/types.hpp"

namespace pllforge {

// Pooled over all (instance, class) pairs: 2TP / (2TP + FP + FN), 0 when the
// denominator is 0. Predictions are probabilities thresholded at `threshold`.
double micro_f1(const Matrix& probs, const std::vector<const std::set<int>*>& truths,
                double threshold = 0.5);

// Per-class rank-statistic AUROC (Mann-Whitney U with midranks), averaged
// over classes that have both positives and negatives. Throws if none do.
double macro_auroc(const Matrix& scores, const std::vector<const std::set<int>*>& truths);

// Per-class F1 at the threshold; nullopt when a class has no positives and no
// predicted positives (undefined).
std::vector<std::optional<double>> per_class_f1(
    const Matrix& probs, const std::vector<const std::set<int>*>& truths,
    double threshold = 0.5);

struct RunMetrics {
  double micro_f1 = 0;
  double macro_auroc = 0;
  std::vector<std::optional<double>> per_class_f1;
  double flip_probability = 0;
};

struct PerClassRow {
  int class_index;
  std::string class_name;
  int64_t train_count;
  std::optional<double> f1;  // blank when the class is absent from the test split
};

// Per-class F1 on the test split, sorted by train-split ground-truth class
// frequency (descending, ties by class index).
std::vector<PerClassRow> per_class_report(const PartialDataset& ds, const Matrix& test_probs,
                                          const std::vector<const std::set<int>*>& test_truths,
                                          double threshold = 0.5);

}  // namespace pllforge
