#pragma once

#include <filesystem>
#include <memory>

#include "pllforge/ambiguity/generation.hpp"
#include "pllforge/harness/metrics.hpp"
#include "pllforge/pll/algorithms.hpp"

namespace pllforge {

// RMSProp with 0.9 smoothing and no momentum.
class RmsProp {
 public:
  RmsProp(double lr = 1e-3, double alpha = 0.9, double eps = 1e-8)
      : lr_(lr), alpha_(alpha), eps_(eps) {}

  void step(std::vector<ad::Tensor>& params, const std::vector<double>& lr_mult);
  void zero_grad(std::vector<ad::Tensor>& params);
  double lr() const { return lr_; }

 private:
  double lr_, alpha_, eps_;
  std::vector<std::vector<double>> cache_;
};

struct ExperimentConfig {
  std::string algorithm = "dnpl";
  AlgoConfig algo;
  BackboneConfig backbone;
  double learning_rate = 0.001;
  int batch_size = 32;
  int epochs = 20;
  std::vector<uint64_t> seeds = {0, 1, 2};
  double rmsprop_alpha = 0.9;
  double rmsprop_eps = 1e-8;

  void validate() const;
};

struct EpochStats {
  int epoch;
  double loss;
  double train_micro_f1;
  double train_macro_auroc;
};

struct TrainRun {
  std::unique_ptr<Algorithm> algorithm;
  std::vector<EpochStats> history;
  RunMetrics test_metrics;
};

// Trains one run on the dataset's train split (candidates as given) and
// evaluates on the clean test split. Deterministic given the seed: batch
// order, init and augmentation all derive from it. Throws on NaN loss with
// the epoch/batch location.
TrainRun train_one(const PartialDataset& ds, const ExperimentConfig& cfg, uint64_t seed);

// Metrics for an already-trained algorithm on a split (ground truth).
RunMetrics evaluate(Algorithm& algo, const PartialDataset& ds, Split split);

std::string history_jsonl(const std::vector<EpochStats>& history);

// Checkpoint I/O: meta carries the experiment config and dataset shape so
// `eval` can rebuild the method.
void save_algorithm_checkpoint(const std::filesystem::path& file, Algorithm& algo,
                               const ExperimentConfig& cfg, const PartialDataset& ds,
                               uint64_t seed);
std::unique_ptr<Algorithm> load_algorithm_checkpoint(const std::filesystem::path& file,
                                                     const PartialDataset& ds,
                                                     ExperimentConfig* cfg_out = nullptr);

}  // namespace pllforge
