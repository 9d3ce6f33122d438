#pragma once

#include <filesystem>
#include <string>

#include "pllforge/core/types.hpp"

namespace pllforge {

// Dataset directory layout:
//   manifest.json    {n, C, leads, length, class_names[], superclass_of{}, files}
//   signals.f32      raw little-endian float32, row-major [n x leads x length]
//   labels.csv       instance_id,<';'-joined ground-truth class indices>
//   candidates.csv   instance_id,<';'-joined candidate indices>,ambiguous_flag
//   splits.csv       instance_id,train|test
//   features.csv     instance_id,<F floats>            (optional)
void save_dataset(const PartialDataset& ds, const std::filesystem::path& dir);
PartialDataset load_dataset(const std::filesystem::path& dir);

void save_features(const FeatureTable& features, const std::filesystem::path& file);
FeatureTable load_features(const std::filesystem::path& file);
bool dataset_has_features(const std::filesystem::path& dir);
std::filesystem::path dataset_features_path(const std::filesystem::path& dir);

// transition.csv: header row of class names, then rows of floats. Instance
// level matrices prepend an instance_id column to every data row and have an
// "instance_id" first header cell.
void save_transition(const TransitionMatrix& t, const std::filesystem::path& file);
TransitionMatrix load_transition(const std::filesystem::path& file);

void save_provenance(const Provenance& p, const std::filesystem::path& file);
Provenance load_provenance(const std::filesystem::path& file);

// Prediction table: instance_id,<C floats in [0,1]>.
void save_predictions(const std::vector<std::string>& ids, const Matrix& probs,
                      const std::filesystem::path& file);
std::pair<std::vector<std::string>, Matrix> load_predictions(const std::filesystem::path& file);

std::string read_text_file(const std::filesystem::path& file);
void write_text_file(const std::filesystem::path& file, const std::string& content);

}  // namespace pllforge
