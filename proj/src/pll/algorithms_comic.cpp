#include <algorithm>
#include <cmath>

#include "detail.hpp"

namespace pllforge::detail {

using ad::Tape;
using ad::Tensor;

namespace {

double clamp_prob(double p) {
  return std::clamp(p, ad::kLogClamp, 1.0 - ad::kLogClamp);
}

// straight scalar MFM value on probabilities; used for the adaptive kappas
double mfm_scalar(const std::vector<double>& probs, const std::vector<double>& targets,
                  int B, int C, const std::vector<double>& gp,
                  const std::vector<double>& gn) {
  double acc = 0;
  for (int i = 0; i < B; i++)
    for (int j = 0; j < C; j++) {
      const double p = clamp_prob(probs[size_t(i) * C + j]);
      const double t = targets[size_t(i) * C + j];
      acc += t * std::pow(1.0 - p, gp[j]) * std::log(p) +
             (1.0 - t) * std::pow(p, gn[j]) * std::log(1.0 - p);
    }
  return -acc / B;
}

class Comic : public Algorithm {
 public:
  std::string name() const override { return "comic"; }

  void setup(const PartialDataset& ds, const BackboneConfig& bcfg, const AlgoConfig& acfg,
             uint64_t seed, int epochs) override {
    ds_ = &ds;
    bcfg_ = bcfg;
    acfg_ = acfg;
    seed_ = seed;
    epochs_ = epochs;
    if (acfg.gamma_pn_neg < acfg.gamma_pn_pos)
      throw std::invalid_argument("comic: gamma_pn_neg must be >= gamma_pn_pos");
    train_idx_ = ds.split_indices(Split::Train);
    if (train_idx_.empty()) throw std::invalid_argument("empty train split");
    Rng init = derive_rng(seed, "init");
    ensemble_ = TripleModelEnsemble(bcfg, acfg.clf_groups, acfg.clf_rho, acfg.clf_eta, init);

    const int C = ds.label_space.num_classes;
    e_.assign(C, 0.0);
    p_run_.assign(C, 0.0);
    std::vector<int64_t> counts(C, 0);
    for (size_t i : train_idx_)
      for (int j : ds.records[i].candidate) counts[j]++;
    gamma_ht_ = acfg.head_tail(counts);
    gp_.resize(C);
    gn_.resize(C);
    for (int j = 0; j < C; j++) {
      gp_[j] = acfg.gamma_pn_pos + acfg.w_pos * gamma_ht_[j];
      gn_[j] = acfg.gamma_pn_neg + acfg.w_neg * gamma_ht_[j];
    }

    // parameter group boundaries for the per-expert learning-rate decays
    n_head_ = ensemble_.head_expert.parameters().size();
    n_tail_ = ensemble_.tail_expert.parameters().size();
    n_bal_ = ensemble_.balanced.parameters().size();
  }

  std::vector<Tensor> parameters() override {
    std::vector<Tensor> out;
    for (auto& [n, t] : ensemble_.named_parameters()) out.push_back(t);
    return out;
  }
  std::vector<std::pair<std::string, Tensor>> named_parameters() override {
    return ensemble_.named_parameters();
  }

  double lr_multiplier(size_t param_index, int epoch) override {
    double decay;
    if (param_index < n_head_)
      decay = acfg_.decay_head;
    else if (param_index < n_head_ + n_tail_)
      decay = acfg_.decay_tail;
    else if (param_index < n_head_ + n_tail_ + n_bal_)
      decay = acfg_.decay_balanced;
    else
      return 1.0;  // shared attention/classifier at the base rate
    return std::pow(decay, epoch);
  }

  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    const int B = int(batch.size());
    const int C = ds_->label_space.num_classes;
    auto out = ensemble_.forward(tape, batch_signals(*ds_, batch), true);
    Tensor zh_adj = ensemble_.clf.bias_adjust(tape, out.z_h, e_, +1.0);
    Tensor zt_adj = ensemble_.clf.bias_adjust(tape, out.z_t, e_, -1.0);

    Tensor probs_b = ad::sigmoid(tape, out.z_b);

    // label correction on current confidences
    Matrix corrected(B, C, 0.0);
    int n_corrected = 0;
    for (int i = 0; i < B; i++) {
      const auto& cand = ds_->records[batch[i]].candidate;
      for (int j : cand) {
        const double pc = probs_b.data()[size_t(i) * C + j];
        if (pc > std::max(acfg_.tau_c, p_run_[j])) {
          corrected.at(i, j) = 1.0;
          n_corrected++;
        }
      }
    }
    Tensor corrected_t = Tensor::leaf({B, C}, corrected.d);

    // modification: MFM on the balanced branch against corrected labels
    Tensor l_m = mfm_loss(tape, probs_b, corrected_t, gp_, gn_);

    // balancing: distillation from the bias-adjusted experts
    Tensor ph_s, pt_s;
    {
      Tape vt;  // teacher targets are constants
      Tensor ph = ad::softmax(vt, Tensor::leaf(zh_adj.shape(), zh_adj.data()));
      Tensor pt = ad::softmax(vt, Tensor::leaf(zt_adj.shape(), zt_adj.data()));
      ph_s = Tensor::leaf(ph.shape(), ph.data());
      pt_s = Tensor::leaf(pt.shape(), pt.data());
    }
    std::vector<double> sig_h(size_t(B) * C), sig_t(size_t(B) * C);
    for (size_t i = 0; i < sig_h.size(); i++) {
      sig_h[i] = 1.0 / (1.0 + std::exp(-zh_adj.data()[i]));
      sig_t[i] = 1.0 / (1.0 + std::exp(-zt_adj.data()[i]));
    }
    const double lh = mfm_scalar(sig_h, corrected.d, B, C, gp_, gn_);
    const double lt = mfm_scalar(sig_t, corrected.d, B, C, gp_, gn_);
    double kh = 0.5, kt = 0.5;
    const double denom = std::pow(lh, acfg_.alpha_d) + std::pow(lt, acfg_.alpha_d);
    if (denom > 0) {
      kh = std::pow(lh, acfg_.alpha_d) / denom;
      kt = std::pow(lt, acfg_.alpha_d) / denom;
    }
    Tensor pb_soft = ad::softmax(tape, out.z_b);
    Tensor l_b = ad::add(tape, ad::scale(tape, mfm_loss(tape, pb_soft, ph_s, gp_, gn_), kh),
                         ad::scale(tape, mfm_loss(tape, pb_soft, pt_s, gp_, gn_), kt));

    // correction loss, class-aware scaling by the head-tail factors
    Tensor l_c = Tensor::scalar(0.0);
    if (n_corrected > 0) {
      Tensor acc;
      for (int j = 0; j < C; j++) {
        Tensor pj = ad::slice(tape, probs_b, 1, j, j + 1);
        Tensor omp = ad::add_const(tape, ad::neg(tape, pj), 1.0);
        Tensor t_pos = ad::mul(tape, ad::pow_const(tape, omp, gp_[j]), ad::log_(tape, pj));
        Tensor t_neg = ad::mul(tape, ad::pow_const(tape, pj, gn_[j]), ad::log_(tape, omp));
        std::vector<double> m1(B, 0.0), yj(B, 0.0);
        for (int i = 0; i < B; i++) {
          m1[i] = corrected.at(i, j);
          if (ds_->records[batch[i]].candidate.count(j)) yj[i] = 1.0;
        }
        Tensor m1t = Tensor::leaf({B, 1}, std::move(m1));
        Tensor yjt = Tensor::leaf({B, 1}, std::move(yj));
        Tensor ones = Tensor::full({B, 1}, 1.0);
        Tensor otherwise =
            ad::add(tape, ad::mul(tape, yjt, t_pos), t_neg);  // 1[y=1] L+ + L-
        Tensor piece = ad::add(tape, ad::mul(tape, m1t, t_pos),
                               ad::mul(tape, ad::sub(tape, ones, m1t), otherwise));
        piece = ad::scale(tape, piece, gamma_ht_[j]);
        acc = acc.defined() ? ad::add(tape, acc, piece) : piece;
      }
      l_c = ad::scale(tape, ad::neg(tape, ad::mean(tape, acc)),
                      double(B) / double(n_corrected));
    }

    Tensor total = ad::scale(tape, l_m, acfg_.lambda_m);
    total = ad::add(tape, total, ad::scale(tape, l_b, acfg_.lambda_b));
    total = ad::add(tape, total, ad::scale(tape, l_c, acfg_.lambda_c));

    // stashed for after_step
    last_zb_ = out.z_b;
    last_probs_.assign(probs_b.data().begin(), probs_b.data().end());
    last_batch_size_ = B;
    return total;
  }

  void after_step(Tape&) override {
    const int C = ds_->label_space.num_classes;
    if (last_zb_.defined()) {
      const auto& g = last_zb_.grad();
      for (int j = 0; j < C; j++) {
        double s = 0;
        for (int i = 0; i < last_batch_size_; i++) s += g[size_t(i) * C + j];
        e_[j] = acfg_.comic_mu * e_[j] + s;
      }
    }
    for (int j = 0; j < C; j++) {
      double m = 0;
      for (int i = 0; i < last_batch_size_; i++) m += last_probs_[size_t(i) * C + j];
      m /= std::max(1, last_batch_size_);
      p_run_[j] = acfg_.prob_ema * p_run_[j] + (1.0 - acfg_.prob_ema) * m;
    }
    last_zb_ = Tensor();
  }

  Matrix predict(const std::vector<size_t>& idx) override {
    const int C = ds_->label_space.num_classes;
    Matrix out(int(idx.size()), C);
    const size_t chunk = 128;
    for (size_t start = 0; start < idx.size(); start += chunk) {
      std::vector<size_t> part(idx.begin() + start,
                               idx.begin() + std::min(idx.size(), start + chunk));
      Tape tape;
      auto o = ensemble_.forward(tape, batch_signals(*ds_, part), false);
      Tensor probs = ad::sigmoid(tape, o.z_b);
      for (size_t i = 0; i < part.size(); i++)
        for (int j = 0; j < C; j++)
          out.at(int(start + i), j) = probs.data()[i * C + j];
    }
    return out;
  }

  std::optional<Matrix> state_matrix(const std::string& key) const override {
    if (key == "comic.e") {
      Matrix m(1, int(e_.size()));
      m.d = e_;
      return m;
    }
    if (key == "comic.p_run") {
      Matrix m(1, int(p_run_.size()));
      m.d = p_run_;
      return m;
    }
    return std::nullopt;
  }

 private:
  const PartialDataset* ds_ = nullptr;
  BackboneConfig bcfg_;
  AlgoConfig acfg_;
  uint64_t seed_ = 0;
  int epochs_ = 1;
  TripleModelEnsemble ensemble_;
  std::vector<size_t> train_idx_;
  std::vector<double> e_;         // moving average of accumulated z_b gradients
  std::vector<double> p_run_;     // running per-class mean probability
  std::vector<double> gamma_ht_;  // head-tail imbalance factors, >= 1
  std::vector<double> gp_, gn_;   // per-class focal exponents
  size_t n_head_ = 0, n_tail_ = 0, n_bal_ = 0;

  Tensor last_zb_;
  std::vector<double> last_probs_;
  int last_batch_size_ = 0;
};

}  // namespace

std::unique_ptr<Algorithm> make_comic() { return std::make_unique<Comic>(); }

}  // namespace pllforge::detail
