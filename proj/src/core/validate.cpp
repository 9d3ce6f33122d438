#include "pllforge/core/validate.hpp"

#include <cmath>
#include <set>
#include <unordered_set>

namespace pllforge {

std::string Violation::to_string() const {
  std::string s = rule;
  if (!instance_id.empty()) s += " [" + instance_id + "]";
  if (!detail.empty()) s += ": " + detail;
  return s;
}

std::vector<Violation> validate_dataset(const PartialDataset& ds) {
  std::vector<Violation> out;
  const LabelSpace& ls = ds.label_space;

  if (ls.num_classes < 2)
    out.push_back({"", "label space too small", "C = " + std::to_string(ls.num_classes)});
  if (int(ls.class_names.size()) != ls.num_classes)
    out.push_back({"", "class name count mismatch", ""});
  std::unordered_set<std::string> seen;
  for (const auto& name : ls.class_names)
    if (!seen.insert(name).second)
      out.push_back({"", "duplicate class name", name});
  if (ls.has_superclasses()) {
    for (const auto& name : ls.class_names)
      if (!ls.superclass_of.count(name))
        out.push_back({"", "superclass map incomplete", "missing " + name});
  }
  if (ds.records.empty()) out.push_back({"", "empty dataset", "n = 0"});

  std::unordered_set<std::string> ids;
  for (const auto& rec : ds.records) {
    if (!ids.insert(rec.instance_id).second)
      out.push_back({rec.instance_id, "duplicate instance id", ""});
    if (rec.ground_truth.empty())
      out.push_back({rec.instance_id, "empty ground truth", ""});
    for (int j : rec.ground_truth)
      if (!rec.candidate.count(j))
        out.push_back({rec.instance_id, "candidate set does not contain ground truth",
                       "class " + std::to_string(j)});
    for (int j : rec.candidate)
      if (j < 0 || j >= ls.num_classes)
        out.push_back({rec.instance_id, "label index out of range", std::to_string(j)});
    if (!rec.ambiguous_flag && rec.candidate != rec.ground_truth)
      out.push_back({rec.instance_id, "non-ambiguous record with extra candidates", ""});
    if (rec.split == Split::Test && rec.candidate != rec.ground_truth)
      out.push_back({rec.instance_id, "test split not clean", ""});
    if (rec.signal.rows != ds.leads || rec.signal.cols != ds.length)
      out.push_back({rec.instance_id, "signal shape mismatch",
                     std::to_string(rec.signal.rows) + "x" + std::to_string(rec.signal.cols) +
                         " vs " + std::to_string(ds.leads) + "x" + std::to_string(ds.length)});
    for (double v : rec.signal.d)
      if (!std::isfinite(v)) {
        out.push_back({rec.instance_id, "non-finite signal value", ""});
        break;
      }
  }
  return out;
}

std::vector<Violation> validate_features(const FeatureTable& features,
                                         const PartialDataset& ds) {
  std::vector<Violation> out;
  for (const auto& rec : ds.records) {
    if (!rec.ground_truth.empty() && !features.has(rec.instance_id))
      out.push_back({rec.instance_id, "missing feature row", ""});
  }
  for (const auto& [id, v] : features.rows) {
    if (int(v.size()) != features.dim)
      out.push_back({id, "feature dimension mismatch", ""});
    for (double x : v)
      if (!std::isfinite(x)) {
        out.push_back({id, "non-finite feature value", ""});
        break;
      }
  }
  return out;
}

}  // namespace pllforge
