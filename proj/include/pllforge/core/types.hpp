#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pllforge {

// Dense row-major double matrix. Plain data carrier for signals, features,
// transition matrices and prediction tables; the autodiff engine has its own
// tensor type.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), d(size_t(r) * c, fill) {}

  double& at(int r, int c) { return d[size_t(r) * cols + c]; }
  double at(int r, int c) const { return d[size_t(r) * cols + c]; }
  const double* row(int r) const { return d.data() + size_t(r) * cols; }
  double* row(int r) { return d.data() + size_t(r) * cols; }
  size_t size() const { return d.size(); }
};

struct LabelSpace {
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::map<std::string, std::string> superclass_of;  // empty = no taxonomy

  bool has_superclasses() const { return !superclass_of.empty(); }
  const std::string& superclass(int j) const {
    auto it = superclass_of.find(class_names.at(j));
    if (it == superclass_of.end())
      throw std::runtime_error("class '" + class_names.at(j) + "' has no superclass");
    return it->second;
  }
  int index_of(const std::string& name) const {
    for (int j = 0; j < num_classes; j++)
      if (class_names[j] == name) return j;
    return -1;
  }
};

enum class Split { Train, Test };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

struct SignalRecord {
  std::string instance_id;
  Matrix signal;                 // leads x length
  std::set<int> ground_truth;    // nonempty, subset of candidate
  std::set<int> candidate;       // superset of ground_truth
  bool ambiguous_flag = false;
  Split split = Split::Train;
};

struct Provenance {
  std::string strategy = "none";
  double p = 0.0;
  double epsilon = 0.0;
  std::optional<int> r;
  uint64_t seed = 0;
  std::string matrix_checksum;  // empty when no matrix was involved
};

struct PartialDataset {
  LabelSpace label_space;
  int leads = 0;
  int length = 0;
  std::vector<SignalRecord> records;
  Provenance provenance;

  size_t n() const { return records.size(); }
  std::vector<size_t> split_indices(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); i++)
      if (records[i].split == s) out.push_back(i);
    return out;
  }
};

// Per-instance cardiologist-style feature vectors, fixed dimension F.
struct FeatureTable {
  int dim = 0;
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  std::unordered_map<std::string, size_t> index;

  void add(const std::string& id, std::vector<double> v) {
    if (index.count(id)) throw std::runtime_error("duplicate feature row: " + id);
    if (dim == 0) dim = int(v.size());
    if (int(v.size()) != dim) throw std::runtime_error("feature dimension mismatch for " + id);
    index[id] = rows.size();
    rows.emplace_back(id, std::move(v));
  }
  bool has(const std::string& id) const { return index.count(id) > 0; }
  const std::vector<double>& get(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error("no feature row for " + id);
    return rows[it->second].second;
  }
};

struct ClassPrototypeSet {
  int feature_dim = 0;
  std::vector<std::vector<double>> prototypes;  // one per class; empty slot if undefined
  std::vector<int> support_counts;

  bool defined(int j) const { return support_counts.at(j) > 0; }
  const std::vector<double>& get(int j) const {
    if (!defined(j))
      throw std::runtime_error("prototype undefined for class " + std::to_string(j));
    return prototypes[j];
  }
};

struct TransitionMatrix {
  enum class Kind { ClassLevel, InstanceLevel };
  Kind kind = Kind::ClassLevel;
  Matrix t;                           // ClassLevel: C x C, InstanceLevel: n x C
  std::vector<std::string> row_ids;   // class names or instance ids
  std::vector<std::string> col_names; // class names

  uint64_t checksum() const;
};

}  // namespace pllforge
