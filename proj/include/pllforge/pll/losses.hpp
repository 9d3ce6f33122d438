#pragma once

#include <set>
#include <vector>

#include "pllforge/autodiff/tensor.hpp"
#include "pllforge/core/types.hpp"

namespace pllforge {

// Batch losses return a scalar: the mean over instances of the per-instance
// expression. Masks are 0/1 (or soft) leaf tensors shaped [B, C].

// -mean_i log <softmax(f_i), Y_i>; throws on an empty candidate row.
ad::Tensor dnpl_loss(ad::Tape& t, const ad::Tensor& logits, const ad::Tensor& cand_mask);

// mean_i sum_j w_ij * (-log softmax_j); weights rows sum to 1 over candidates.
ad::Tensor proden_loss(ad::Tape& t, const ad::Tensor& logits, const ad::Tensor& weights);

// w_ij = f_j / sum_{z in Y_i} f_z on softmax outputs, zero off-candidates.
Matrix proden_update_weights(const Matrix& softmax_probs,
                             const std::vector<const std::set<int>*>& candidates);

// CAV weight |f_j - 1| * f_j on raw outputs; selects argmax over candidates,
// ties resolved to the lowest class index.
std::vector<int> cavl_select(const Matrix& logits,
                             const std::vector<const std::set<int>*>& candidates);
// Supervised softmax cross-entropy against the selected labels.
ad::Tensor cavl_loss(ad::Tape& t, const ad::Tensor& logits,
                     const std::vector<int>& selected);

// Leveraged-weighted loss with logistic base loss L(u) = log(1 + exp(-u)):
//   mean_i [ sum_{j in Y} w L(f_j) + beta * sum_{j not in Y} w L(-f_j) ]
ad::Tensor lw_loss(ad::Tape& t, const ad::Tensor& logits, const ad::Tensor& cand_mask,
                   const ad::Tensor& weights, double beta);
// Softmax of raw outputs within the candidate group and within the
// non-candidate group separately; empty groups get zero weight.
Matrix lw_update_weights(const Matrix& logits,
                         const std::vector<const std::set<int>*>& candidates);

// CR loss at weight gamma_t:
//   mean_i [ -sum_{j not in Y} log(1 - f_j) ] + gamma * sum_aug KL(p || f(x~)) / B
// f on the negative term is the per-class sigmoid; the consistency term uses
// softmax distributions restricted to candidate support via p.
ad::Tensor cr_loss(ad::Tape& t, const ad::Tensor& logits, const ad::Tensor& cand_mask,
                   const std::vector<ad::Tensor>& aug_logits, const ad::Tensor& conformal,
                   double gamma);
// Conformal label distribution: normalized geometric mean of softmax
// predictions over augmentations, restricted to candidates.
Matrix cr_conformal(const std::vector<Matrix>& aug_softmax,
                    const std::vector<const std::set<int>*>& candidates);
double cr_gamma(int epoch, int total_epochs, double lambda);

// AWGN augmentation; strength multiplies sigma (weak 0.5x, strong 2x).
enum class AugStrength { Weak, Strong };
double awgn_multiplier(AugStrength s);
Matrix awgn_augment(const Matrix& signal, double mu, double sigma, AugStrength strength,
                    Rng& rng);

// PICO classification: mean_i -sum_j s_ij log softmax_j with soft labels s.
ad::Tensor pico_classification_loss(ad::Tape& t, const ad::Tensor& logits,
                                    const ad::Tensor& soft_labels);
// Contrast queries against a pool; pool rows and masks are constants.
// loss_i = log sum_{m in valid} exp(q_i.x_m / tau) - (1/|pos_i|) sum_{m in pos} q_i.x_m / tau
ad::Tensor pico_contrastive_loss(ad::Tape& t, const ad::Tensor& queries,
                                 const Matrix& pool, const std::vector<std::vector<char>>& valid,
                                 const std::vector<std::vector<char>>& positive, double tau);

// Partial BCE, negated so lower is better:
//   mean_i -(1/|Y_i|) ( sum_{j in Y} log p_j + sum_{j not in Y} log(1 - p_j) )
// Rows with empty Y throw unless skip_empty, in which case they contribute 0.
ad::Tensor partial_bce(ad::Tape& t, const ad::Tensor& probs, const ad::Tensor& mask,
                       bool skip_empty = false);

// Multi-focal modifier, negated so lower is better. Targets may be soft.
//   mean_i -( sum_j t_j (1-p_j)^{gp_j} log p_j + (1-t_j) p_j^{gn_j} log(1-p_j) )
ad::Tensor mfm_loss(ad::Tape& t, const ad::Tensor& probs, const ad::Tensor& targets,
                    const std::vector<double>& gamma_pos,
                    const std::vector<double>& gamma_neg);

}  // namespace pllforge
