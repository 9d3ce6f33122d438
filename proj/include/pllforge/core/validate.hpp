#pragma once

#include <string>
#include <vector>

#include "pllforge/core/types.hpp"

namespace pllforge {

// A violated invariant. Violations are data, not faults: validation never
// throws on bad content, it reports it.
struct Violation {
  std::string instance_id;  // empty for dataset-level rules
  std::string rule;
  std::string detail;

  std::string to_string() const;
};

std::vector<Violation> validate_dataset(const PartialDataset& ds);

// Feature-table checks against a dataset (coverage, dimension, finiteness).
std::vector<Violation> validate_features(const FeatureTable& features,
                                         const PartialDataset& ds);

}  // namespace pllforge
