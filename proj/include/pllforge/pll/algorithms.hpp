#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pllforge/core/types.hpp"
#include "pllforge/model/backbone.hpp"
#include "pllforge/model/components.hpp"
#include "pllforge/pll/losses.hpp"

namespace pllforge {

// Per-method knobs. None of the defaults come from the source study; they
// are configuration points and every one is overridable.
struct AlgoConfig {
  // LW
  double lw_beta = 1.0;
  // CR
  double cr_lambda = 1.0;
  double cr_aug_mu = 0.0;
  double cr_aug_sigma = 0.1;
  // PICO
  double pico_tau = 0.07;
  double pico_alpha = 0.9;
  int pico_queue = 1024;
  double pico_lambda = 1.0;
  double pico_momentum = 0.99;
  // SST / HST
  double theta_ist = 0.5;
  double theta_cst = 0.5;
  double gamma1 = 2.0;
  double gamma2 = 2.0;
  double ist_margin = 0.05;
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double lambda3 = 0.1;
  bool ist_flip_sign = false;  // printed formula by default
  int ggnn_iters = 3;
  int decoupler_rank = 16;
  int decoupler_dim = 16;
  int hst_k = 2;
  // COMIC
  double gamma_pn_pos = 0.0;
  double gamma_pn_neg = 2.0;
  double w_pos = 1.0;
  double w_neg = 1.0;
  double tau_c = 0.7;
  double comic_mu = 0.9;
  double prob_ema = 0.9;  // running per-class mean probability momentum
  double alpha_d = 1.0;
  double lambda_m = 1.0;
  double lambda_b = 1.0;
  double lambda_c = 1.0;
  int clf_groups = 2;
  double clf_rho = 16.0;
  double clf_eta = 0.1;
  // lr decay factors per epoch for (head, tail, balanced) experts
  double decay_head = 1.0;
  double decay_tail = 0.90;
  double decay_balanced = 0.95;
  // head-tail imbalance factor; pluggable, default 1 + log(max_count/count_j)
  std::function<std::vector<double>(const std::vector<int64_t>&)> head_tail_factor;

  std::vector<double> head_tail(const std::vector<int64_t>& counts) const;
};

// One PLL method: loss + disambiguation state + update schedule. Owned by a
// single training run; all state updates happen on the training thread.
class Algorithm {
 public:
  virtual ~Algorithm() = default;
  virtual std::string name() const = 0;

  virtual void setup(const PartialDataset& ds, const BackboneConfig& bcfg,
                     const AlgoConfig& acfg, uint64_t seed, int epochs) = 0;

  virtual std::vector<ad::Tensor> parameters() = 0;
  virtual std::vector<std::pair<std::string, ad::Tensor>> named_parameters() = 0;

  virtual void epoch_begin(int /*epoch*/) {}
  // batch holds indices into the dataset's records (train split).
  virtual ad::Tensor batch_loss(ad::Tape& tape, const std::vector<size_t>& batch,
                                int epoch, int batch_index) = 0;
  // called after the optimizer step while the tape is still alive
  virtual void after_step(ad::Tape& /*tape*/) {}
  virtual void epoch_end(int /*epoch*/) {}

  // probabilities [#idx, C] under the method's activation, eval mode
  virtual Matrix predict(const std::vector<size_t>& idx) = 0;

  virtual double lr_multiplier(size_t /*param_index*/, int /*epoch*/) { return 1.0; }

  // disambiguation-state inspection: "proden.weights", "cr.conformal",
  // "pico.soft_labels" (rows follow the train-split order)
  virtual std::optional<Matrix> state_matrix(const std::string& /*key*/) const {
    return std::nullopt;
  }

  // extra inference-time state for checkpoints
  virtual std::vector<std::pair<std::string, std::vector<double>>> buffers() { return {}; }
  virtual void load_buffers(const LoadedCheckpoint& /*ckpt*/) {}
};

std::unique_ptr<Algorithm> make_algorithm(const std::string& name);
std::vector<std::string> algorithm_names();

// Shared batch helpers.
ad::Tensor batch_signals(const PartialDataset& ds, const std::vector<size_t>& idx);
ad::Tensor batch_signals_from(const std::vector<Matrix>& signals, int leads, int length);
ad::Tensor batch_mask(const PartialDataset& ds, const std::vector<size_t>& idx,
                      bool use_candidates);
std::vector<const std::set<int>*> batch_candidates(const PartialDataset& ds,
                                                   const std::vector<size_t>& idx);

}  // namespace pllforge
