#pragma once

#include <memory>

#include "pllforge/pll/algorithms.hpp"

namespace pllforge::detail {

// Shared plumbing for methods built around a single backbone.
class BackboneAlgorithm : public Algorithm {
 public:
  void setup(const PartialDataset& ds, const BackboneConfig& bcfg, const AlgoConfig& acfg,
             uint64_t seed, int epochs) override;
  std::vector<ad::Tensor> parameters() override { return net_.parameters(); }
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() override {
    return net_.named_parameters();
  }
  Matrix predict(const std::vector<size_t>& idx) override {
    return forward_probs(idx, use_softmax());
  }

 protected:
  virtual bool use_softmax() const = 0;
  // Eval-mode forward over arbitrary records, batched.
  Matrix forward_probs(const std::vector<size_t>& idx, bool softmax_probs);

  const PartialDataset* ds_ = nullptr;
  BackboneConfig bcfg_;
  AlgoConfig acfg_;
  uint64_t seed_ = 0;
  int epochs_ = 1;
  Backbone net_;
  std::vector<size_t> train_idx_;
  std::unordered_map<size_t, size_t> train_row_;  // record index -> table row
};

std::unique_ptr<Algorithm> make_pico();
std::unique_ptr<Algorithm> make_sst();
std::unique_ptr<Algorithm> make_hst();
std::unique_ptr<Algorithm> make_comic();

}  // namespace pllforge::detail
