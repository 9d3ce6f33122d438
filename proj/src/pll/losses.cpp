#include "pllforge/pll/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pllforge {

using ad::Tape;
using ad::Tensor;

static void check_mask_rows(const Tensor& mask, const char* who) {
  const int B = mask.dim(0), C = mask.dim(1);
  for (int i = 0; i < B; i++) {
    double s = 0;
    for (int j = 0; j < C; j++) s += mask.data()[size_t(i) * C + j];
    if (s <= 0) throw std::invalid_argument(std::string(who) + ": empty candidate set in row " +
                                            std::to_string(i));
  }
}

Tensor dnpl_loss(Tape& t, const Tensor& logits, const Tensor& cand_mask) {
  check_mask_rows(cand_mask, "dnpl_loss");
  Tensor probs = ad::softmax(t, logits);
  Tensor inner = ad::sum_last(t, ad::mul(t, probs, cand_mask));  // [B]
  return ad::neg(t, ad::mean(t, ad::log_(t, inner)));
}

Tensor proden_loss(Tape& t, const Tensor& logits, const Tensor& weights) {
  Tensor ls = ad::log_softmax(t, logits);
  Tensor per = ad::sum_last(t, ad::mul(t, ls, weights));  // [B]
  return ad::neg(t, ad::mean(t, per));
}

Matrix proden_update_weights(const Matrix& softmax_probs,
                             const std::vector<const std::set<int>*>& candidates) {
  Matrix w(softmax_probs.rows, softmax_probs.cols, 0.0);
  for (int i = 0; i < w.rows; i++) {
    double denom = 0;
    for (int j : *candidates[i]) denom += softmax_probs.at(i, j);
    if (denom <= 0.0) {
      // degenerate mass: fall back to uniform over candidates
      for (int j : *candidates[i]) w.at(i, j) = 1.0 / double(candidates[i]->size());
      continue;
    }
    for (int j : *candidates[i]) w.at(i, j) = softmax_probs.at(i, j) / denom;
  }
  return w;
}

std::vector<int> cavl_select(const Matrix& logits,
                             const std::vector<const std::set<int>*>& candidates) {
  std::vector<int> out(logits.rows);
  for (int i = 0; i < logits.rows; i++) {
    int best = -1;
    double best_w = 0;
    for (int j : *candidates[i]) {
      const double f = logits.at(i, j);
      const double w = std::fabs(f - 1.0) * f;
      if (best < 0 || w > best_w) {  // strict >: ties keep the lowest index
        best = j;
        best_w = w;
      }
    }
    if (best < 0) throw std::invalid_argument("cavl_select: empty candidate set");
    out[i] = best;
  }
  return out;
}

Tensor cavl_loss(Tape& t, const Tensor& logits, const std::vector<int>& selected) {
  const int B = logits.dim(0), C = logits.dim(1);
  std::vector<double> onehot(size_t(B) * C, 0.0);
  for (int i = 0; i < B; i++) onehot[size_t(i) * C + selected[i]] = 1.0;
  Tensor target = Tensor::leaf({B, C}, std::move(onehot));
  Tensor ls = ad::log_softmax(t, logits);
  return ad::neg(t, ad::mean(t, ad::sum_last(t, ad::mul(t, ls, target))));
}

Tensor lw_loss(Tape& t, const Tensor& logits, const Tensor& cand_mask,
               const Tensor& weights, double beta) {
  Tensor sp_cand = ad::softplus(t, ad::neg(t, logits));  // L(f)
  Tensor sp_non = ad::softplus(t, logits);               // L(-f)
  Tensor wc = ad::mul(t, weights, cand_mask);
  Tensor ones = Tensor::full(cand_mask.shape(), 1.0);
  Tensor non_mask = ad::sub(t, ones, cand_mask);
  Tensor wn = ad::mul(t, weights, non_mask);
  Tensor per = ad::add(t, ad::sum_last(t, ad::mul(t, wc, sp_cand)),
                       ad::scale(t, ad::sum_last(t, ad::mul(t, wn, sp_non)), beta));
  return ad::mean(t, per);
}

Matrix lw_update_weights(const Matrix& logits,
                         const std::vector<const std::set<int>*>& candidates) {
  Matrix w(logits.rows, logits.cols, 0.0);
  for (int i = 0; i < logits.rows; i++) {
    for (int group = 0; group < 2; group++) {
      std::vector<int> members;
      for (int j = 0; j < logits.cols; j++) {
        const bool in_cand = candidates[i]->count(j) > 0;
        if ((group == 0) == in_cand) members.push_back(j);
      }
      if (members.empty()) continue;
      double mx = logits.at(i, members[0]);
      for (int j : members) mx = std::max(mx, logits.at(i, j));
      double denom = 0;
      for (int j : members) denom += std::exp(logits.at(i, j) - mx);
      for (int j : members) w.at(i, j) = std::exp(logits.at(i, j) - mx) / denom;
    }
  }
  return w;
}

Tensor cr_loss(Tape& t, const Tensor& logits, const Tensor& cand_mask,
               const std::vector<ad::Tensor>& aug_logits, const Tensor& conformal,
               double gamma) {
  const int B = logits.dim(0);
  Tensor f = ad::sigmoid(t, logits);
  Tensor one_minus = ad::add_const(t, ad::neg(t, f), 1.0);
  Tensor ones = Tensor::full(cand_mask.shape(), 1.0);
  Tensor non_mask = ad::sub(t, ones, cand_mask);
  Tensor neg_term =
      ad::neg(t, ad::mean(t, ad::sum_last(t, ad::mul(t, non_mask, ad::log_(t, one_minus)))));
  Tensor total = neg_term;
  if (gamma > 0.0) {
    for (const auto& al : aug_logits) {
      Tensor q = ad::softmax(t, al);
      Tensor kl = ad::scale(t, ad::kl_div(t, conformal, q), 1.0 / double(B));
      total = ad::add(t, total, ad::scale(t, kl, gamma));
    }
  }
  return total;
}

Matrix cr_conformal(const std::vector<Matrix>& aug_softmax,
                    const std::vector<const std::set<int>*>& candidates) {
  if (aug_softmax.empty()) throw std::invalid_argument("cr_conformal: no augmentations");
  const int B = aug_softmax[0].rows, C = aug_softmax[0].cols;
  const double inv_m = 1.0 / double(aug_softmax.size());
  Matrix p(B, C, 0.0);
  for (int i = 0; i < B; i++) {
    double denom = 0;
    for (int j : *candidates[i]) {
      double logsum = 0;
      for (const auto& f : aug_softmax) logsum += std::log(std::max(f.at(i, j), ad::kLogClamp));
      p.at(i, j) = std::exp(logsum * inv_m);
      denom += p.at(i, j);
    }
    if (denom <= 0.0) {
      for (int j : *candidates[i]) p.at(i, j) = 1.0 / double(candidates[i]->size());
      continue;
    }
    for (int j : *candidates[i]) p.at(i, j) /= denom;
  }
  return p;
}

double cr_gamma(int epoch, int total_epochs, double lambda) {
  if (total_epochs <= 0) return lambda;
  return std::min(double(epoch) / double(total_epochs) * lambda, lambda);
}

double awgn_multiplier(AugStrength s) { return s == AugStrength::Weak ? 0.5 : 2.0; }

Matrix awgn_augment(const Matrix& signal, double mu, double sigma, AugStrength strength,
                    Rng& rng) {
  if (sigma < 0) throw std::invalid_argument("awgn_augment: sigma must be >= 0");
  const double s = sigma * awgn_multiplier(strength);
  Matrix out = signal;
  if (s == 0.0 && mu == 0.0) return out;
  for (auto& v : out.d) v += rng.gaussian(mu, s);
  return out;
}

Tensor pico_classification_loss(Tape& t, const Tensor& logits, const Tensor& soft_labels) {
  Tensor ls = ad::log_softmax(t, logits);
  return ad::neg(t, ad::mean(t, ad::sum_last(t, ad::mul(t, ls, soft_labels))));
}

Tensor pico_contrastive_loss(Tape& t, const Tensor& queries, const Matrix& pool,
                             const std::vector<std::vector<char>>& valid,
                             const std::vector<std::vector<char>>& positive, double tau) {
  const int B = queries.dim(0);
  const int M = pool.rows;
  if (M == 0) return Tensor::scalar(0.0);
  Tensor pool_t = Tensor::leaf({pool.rows, pool.cols}, pool.d);
  Tensor sims = ad::scale(t, ad::matmul(t, queries, ad::transpose(t, pool_t)), 1.0 / tau);

  std::vector<double> vmask(size_t(B) * M, 0.0), pmask(size_t(B) * M, 0.0),
      inv_cnt(B, 0.0), indicator(B, 0.0);
  for (int i = 0; i < B; i++) {
    int pos = 0;
    for (int m = 0; m < M; m++) {
      if (valid[i][m]) vmask[size_t(i) * M + m] = 1.0;
      if (positive[i][m] && valid[i][m]) {
        pmask[size_t(i) * M + m] = 1.0;
        pos++;
      }
    }
    if (pos > 0) {
      inv_cnt[i] = 1.0 / double(pos);
      indicator[i] = 1.0;
    }
  }
  Tensor vm = Tensor::leaf({B, M}, std::move(vmask));
  Tensor pm = Tensor::leaf({B, M}, std::move(pmask));
  Tensor inv = Tensor::leaf({B}, std::move(inv_cnt));
  Tensor ind = Tensor::leaf({B}, std::move(indicator));

  Tensor denom = ad::log_(t, ad::sum_last(t, ad::mul(t, ad::exp_(t, sims), vm)));  // [B]
  Tensor pos_mean = ad::mul(t, ad::sum_last(t, ad::mul(t, sims, pm)), inv);        // [B]
  Tensor per = ad::mul(t, ad::sub(t, denom, pos_mean), ind);
  return ad::mean(t, per);
}

Tensor partial_bce(Tape& t, const Tensor& probs, const Tensor& mask, bool skip_empty) {
  const int B = mask.dim(0), C = mask.dim(1);
  std::vector<double> inv(B, 0.0);
  for (int i = 0; i < B; i++) {
    double cnt = 0;
    for (int j = 0; j < C; j++) cnt += mask.data()[size_t(i) * C + j];
    if (cnt <= 0) {
      if (!skip_empty)
        throw std::invalid_argument("partial_bce: empty label set in row " + std::to_string(i));
      continue;
    }
    inv[i] = 1.0 / cnt;
  }
  Tensor lp = ad::log_(t, probs);
  Tensor lq = ad::log_(t, ad::add_const(t, ad::neg(t, probs), 1.0));
  Tensor ones = Tensor::full(mask.shape(), 1.0);
  Tensor inner = ad::add(t, ad::mul(t, mask, lp),
                         ad::mul(t, ad::sub(t, ones, mask), lq));
  Tensor per = ad::mul(t, ad::sum_last(t, inner), Tensor::leaf({B}, std::move(inv)));
  return ad::neg(t, ad::mean(t, per));
}

Tensor mfm_loss(Tape& t, const Tensor& probs, const Tensor& targets,
                const std::vector<double>& gamma_pos, const std::vector<double>& gamma_neg) {
  const int B = probs.dim(0), C = probs.dim(1);
  if (int(gamma_pos.size()) != C || int(gamma_neg.size()) != C)
    throw std::invalid_argument("mfm_loss: gamma vectors must have one entry per class");
  Tensor total;  // [B, 1] accumulated over classes
  for (int j = 0; j < C; j++) {
    Tensor pj = ad::slice(t, probs, 1, j, j + 1);     // [B,1]
    Tensor tj = ad::slice(t, targets, 1, j, j + 1);   // [B,1]
    Tensor one_minus_p = ad::add_const(t, ad::neg(t, pj), 1.0);
    Tensor pos = ad::mul(t, tj, ad::mul(t, ad::pow_const(t, one_minus_p, gamma_pos[j]),
                                        ad::log_(t, pj)));
    Tensor ones = Tensor::full(tj.shape(), 1.0);
    Tensor neg_t = ad::mul(t, ad::sub(t, ones, tj),
                           ad::mul(t, ad::pow_const(t, pj, gamma_neg[j]),
                                   ad::log_(t, one_minus_p)));
    Tensor term = ad::add(t, pos, neg_t);
    total = total.defined() ? ad::add(t, total, term) : term;
  }
  (void)B;
  return ad::neg(t, ad::mean(t, ad::sum_last(t, total)));
}

}  // namespace pllforge
