#include "pllforge/harness/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace pllforge {

double micro_f1(const Matrix& probs, const std::vector<const std::set<int>*>& truths,
                double threshold) {
  if (size_t(probs.rows) != truths.size())
    throw std::invalid_argument("micro_f1: shape mismatch");
  int64_t tp = 0, fp = 0, fn = 0;
  for (int i = 0; i < probs.rows; i++) {
    for (int j = 0; j < probs.cols; j++) {
      const bool pred = probs.at(i, j) >= threshold;
      const bool truth = truths[i]->count(j) > 0;
      if (pred && truth) tp++;
      else if (pred && !truth) fp++;
      else if (!pred && truth) fn++;
    }
  }
  const int64_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : double(2 * tp) / double(denom);
}

double macro_auroc(const Matrix& scores, const std::vector<const std::set<int>*>& truths) {
  if (size_t(scores.rows) != truths.size())
    throw std::invalid_argument("macro_auroc: shape mismatch");
  const int n = scores.rows, C = scores.cols;
  double total = 0;
  int valid = 0;
  std::vector<int> order(n);
  std::vector<double> rank(n);
  for (int j = 0; j < C; j++) {
    int64_t pos = 0;
    for (int i = 0; i < n; i++) pos += truths[i]->count(j) > 0;
    const int64_t neg = n - pos;
    if (pos == 0 || neg == 0) continue;

    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return scores.at(a, j) < scores.at(b, j);
    });
    // midranks for ties
    for (int i = 0; i < n;) {
      int k = i;
      while (k + 1 < n && scores.at(order[k + 1], j) == scores.at(order[i], j)) k++;
      const double mid = (double(i) + double(k)) / 2.0 + 1.0;
      for (int t = i; t <= k; t++) rank[order[t]] = mid;
      i = k + 1;
    }
    double rank_sum = 0;
    for (int i = 0; i < n; i++)
      if (truths[i]->count(j)) rank_sum += rank[i];
    const double u = rank_sum - double(pos) * (double(pos) + 1.0) / 2.0;
    total += u / (double(pos) * double(neg));
    valid++;
  }
  if (valid == 0)
    throw std::invalid_argument("macro_auroc: no class has both positives and negatives");
  return total / valid;
}

std::vector<std::optional<double>> per_class_f1(
    const Matrix& probs, const std::vector<const std::set<int>*>& truths, double threshold) {
  const int C = probs.cols;
  std::vector<std::optional<double>> out(C);
  for (int j = 0; j < C; j++) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < probs.rows; i++) {
      const bool pred = probs.at(i, j) >= threshold;
      const bool truth = truths[size_t(i)]->count(j) > 0;
      if (pred && truth) tp++;
      else if (pred) fp++;
      else if (truth) fn++;
    }
    const int64_t denom = 2 * tp + fp + fn;
    if (denom == 0) continue;  // undefined: no positives in truth or prediction
    out[j] = double(2 * tp) / double(denom);
  }
  return out;
}

std::vector<PerClassRow> per_class_report(const PartialDataset& ds, const Matrix& test_probs,
                                          const std::vector<const std::set<int>*>& test_truths,
                                          double threshold) {
  const int C = ds.label_space.num_classes;
  std::vector<int64_t> train_count(C, 0);
  for (const auto& rec : ds.records)
    if (rec.split == Split::Train)
      for (int j : rec.ground_truth) train_count[j]++;

  // undefined when the class never appears in the test split
  std::vector<bool> in_test(C, false);
  for (const auto* t : test_truths)
    for (int j : *t) in_test[j] = true;

  auto f1 = per_class_f1(test_probs, test_truths, threshold);
  std::vector<PerClassRow> rows;
  for (int j = 0; j < C; j++)
    rows.push_back({j, ds.label_space.class_names[j], train_count[j],
                    in_test[j] ? f1[j] : std::nullopt});
  std::stable_sort(rows.begin(), rows.end(), [](const PerClassRow& a, const PerClassRow& b) {
    if (a.train_count != b.train_count) return a.train_count > b.train_count;
    return a.class_index < b.class_index;
  });
  return rows;
}

}  // namespace pllforge
