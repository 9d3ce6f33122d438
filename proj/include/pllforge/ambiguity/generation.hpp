#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pllforge/core/types.hpp"

namespace pllforge {

enum class Strategy {
  Random,
  TreatmentDriven,
  TaxonomyDriven,
  ClassCardiologist,
  InstanceCardiologist,
  ModelDriven,
};

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);
bool strategy_is_instance_level(Strategy s);

struct GenerationConfig {
  double p = 0.5;        // fraction of train samples converted to partial-label form
  double epsilon = 0.5;  // uniform inclusion probability (Random strategy)
  std::optional<int> r;  // cap on added false labels
  uint64_t seed = 0;
  Strategy strategy = Strategy::Random;

  void validate() const;
};

// Per-pair inclusion probabilities.
double epsilon_random(const GenerationConfig& cfg);
// Class-level: eps_z = mean over ground-truth rows of T. Entries for classes
// in the ground truth are computed but never sampled.
std::vector<double> epsilon_class_level(const TransitionMatrix& t,
                                        const std::set<int>& ground_truth);

// Matrix builders.
TransitionMatrix build_treatment_matrix(const std::filesystem::path& csv,
                                        const LabelSpace& space);
TransitionMatrix build_class_cardiologist_matrix(const ClassPrototypeSet& prototypes,
                                                 const LabelSpace& space);
TransitionMatrix build_taxonomy_matrix(const LabelSpace& space, double epsilon = 0.5);
TransitionMatrix build_instance_cardiologist_matrix(const FeatureTable& features,
                                                    const ClassPrototypeSet& prototypes,
                                                    const PartialDataset& ds);
// predictions: probabilities in [0,1], one row per train record (by id).
TransitionMatrix build_model_driven_matrix(const std::vector<std::string>& ids,
                                           const Matrix& predictions,
                                           const PartialDataset& ds);

// Draws candidate sets for the train split; the test split is left clean.
// Deterministic given the seed: per-record streams are keyed by
// (seed, instance_id), so records can be generated in parallel.
PartialDataset generate_candidates(const PartialDataset& ds, const GenerationConfig& cfg,
                                   const std::optional<TransitionMatrix>& t);

// Mean over train records of |Y \ Ytrue| / (C - |Ytrue|); records whose
// ground truth covers every class are excluded.
double flip_probability(const PartialDataset& ds);

}  // namespace pllforge
