#include <algorithm>
#include <cmath>
#include <deque>

#include "detail.hpp"

namespace pllforge::detail {

using ad::Tape;
using ad::Tensor;

namespace {

void l2_normalize_row(double* v, int n) {
  double s = 0;
  for (int i = 0; i < n; i++) s += v[i] * v[i];
  s = std::sqrt(s);
  if (s > 0)
    for (int i = 0; i < n; i++) v[i] /= s;
}

class Pico : public BackboneAlgorithm {
 public:
  std::string name() const override { return "pico"; }
  bool use_softmax() const override { return true; }

  void setup(const PartialDataset& ds, const BackboneConfig& bcfg, const AlgoConfig& acfg,
             uint64_t seed, int epochs) override {
    BackboneAlgorithm::setup(ds, bcfg, acfg, seed, epochs);
    key_encoder_ = MomentumEncoder(net_, acfg.pico_momentum);
    const int C = ds.label_space.num_classes;
    const int E = bcfg.embedding_dim;
    prototypes_ = Matrix(C, E, 0.0);
    soft_labels_ = Matrix(int(train_idx_.size()), C, 0.0);
    for (size_t r = 0; r < train_idx_.size(); r++) {
      const auto& cand = ds.records[train_idx_[r]].candidate;
      for (int j : cand) soft_labels_.at(int(r), j) = 1.0 / double(cand.size());
    }
  }

  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int epoch, int) override {
    const int B = int(batch.size());
    const int C = ds_->label_space.num_classes;
    const int E = bcfg_.embedding_dim;

    Tensor xq = augmented_batch(batch, epoch, AugStrength::Weak);
    auto out = net_.forward(tape, xq, true);

    // normalized query embeddings, in-graph
    Tensor qnorm = ad::sqrt_(tape, ad::sum_last(tape, ad::mul(tape, out.embedding,
                                                              out.embedding)));
    Tensor q = ad::scale_rows(tape, out.embedding, ad::recip(tape, qnorm));

    // key embeddings from the momentum encoder, values only
    Matrix keys(B, E);
    {
      Tape ktape;
      Tensor xk = augmented_batch(batch, epoch, AugStrength::Strong);
      Tensor kemb = key_encoder_.shadow().forward(ktape, xk, false).embedding;
      std::copy(kemb.data().begin(), kemb.data().end(), keys.d.begin());
      for (int i = 0; i < B; i++) l2_normalize_row(keys.row(i), E);
    }

    // classifier predictions define positives
    std::vector<int> pred(B);
    for (int i = 0; i < B; i++) {
      int best = 0;
      for (int j = 1; j < C; j++)
        if (out.logits.data()[size_t(i) * C + j] > out.logits.data()[size_t(i) * C + best])
          best = j;
      pred[i] = best;
    }

    // pool = batch queries + batch keys + queue (queries detached)
    const int M = 2 * B + int(queue_.size());
    Matrix pool(M, E);
    std::vector<int> pool_pred(M);
    for (int i = 0; i < B; i++) {
      std::copy_n(q.data().data() + size_t(i) * E, E, pool.row(i));
      pool_pred[i] = pred[i];
      std::copy_n(keys.row(i), E, pool.row(B + i));
      pool_pred[B + i] = pred[i];
    }
    for (size_t m = 0; m < queue_.size(); m++) {
      std::copy(queue_[m].first.begin(), queue_[m].first.end(), pool.row(2 * B + int(m)));
      pool_pred[2 * B + int(m)] = queue_[m].second;
    }
    std::vector<std::vector<char>> valid(B, std::vector<char>(M, 1));
    std::vector<std::vector<char>> positive(B, std::vector<char>(M, 0));
    for (int i = 0; i < B; i++) {
      valid[i][i] = 0;  // A(x) excludes the instance's own query
      for (int m = 0; m < M; m++)
        if (pool_pred[m] == pred[i]) positive[i][m] = 1;
    }

    Tensor l_co = pico_contrastive_loss(tape, q, pool, valid, positive, acfg_.pico_tau);

    std::vector<double> soft(size_t(B) * C);
    for (int i = 0; i < B; i++)
      std::copy_n(soft_labels_.row(int(train_row_.at(batch[i]))), C, soft.data() + i * C);
    Tensor l_cl = pico_classification_loss(tape, out.logits,
                                           Tensor::leaf({B, C}, std::move(soft)));
    Tensor total = ad::add(tape, l_cl, ad::scale(tape, l_co, acfg_.pico_lambda));

    // state updates: prototypes from classifier assignment, then labels, then queue
    update_prototypes(q, pred);
    update_soft_labels(q, batch);
    for (int i = 0; i < B; i++) {
      queue_.emplace_back(std::vector<double>(keys.row(i), keys.row(i) + E), pred[i]);
      while (int(queue_.size()) > acfg_.pico_queue) queue_.pop_front();
    }
    return total;
  }

  void after_step(Tape&) override { key_encoder_.update(net_); }

  std::optional<Matrix> state_matrix(const std::string& key) const override {
    if (key == "pico.soft_labels") return soft_labels_;
    if (key == "pico.prototypes") return prototypes_;
    return std::nullopt;
  }

 private:
  Tensor augmented_batch(const std::vector<size_t>& batch, int epoch, AugStrength s) {
    std::vector<Matrix> signals;
    signals.reserve(batch.size());
    for (size_t i : batch) {
      const auto& rec = ds_->records[i];
      Rng rng = derive_rng(seed_, {fnv1a("aug"), uint64_t(epoch), fnv1a(rec.instance_id),
                                   uint64_t(s == AugStrength::Weak ? 0 : 1)});
      signals.push_back(awgn_augment(rec.signal, acfg_.cr_aug_mu, acfg_.cr_aug_sigma, s, rng));
    }
    return batch_signals_from(signals, ds_->leads, ds_->length);
  }

  void update_prototypes(const Tensor& q, const std::vector<int>& pred) {
    const int C = prototypes_.rows, E = prototypes_.cols;
    const int B = q.dim(0);
    for (int j = 0; j < C; j++) {
      std::vector<double> acc(E, 0.0);
      int cnt = 0;
      for (int i = 0; i < B; i++) {
        if (pred[i] != j) continue;
        for (int e = 0; e < E; e++) acc[e] += q.data()[size_t(i) * E + e];
        cnt++;
      }
      if (cnt == 0) continue;  // keep the previous prototype
      for (int e = 0; e < E; e++) prototypes_.at(j, e) = acc[e] / cnt;
      l2_normalize_row(prototypes_.row(j), E);
    }
  }

  void update_soft_labels(const Tensor& q, const std::vector<size_t>& batch) {
    const int C = prototypes_.rows, E = prototypes_.cols;
    for (size_t i = 0; i < batch.size(); i++) {
      const auto& cand = ds_->records[batch[i]].candidate;
      int best = -1;
      double best_sim = 0;
      for (int j : cand) {
        double sim = 0;
        for (int e = 0; e < E; e++) sim += q.data()[i * size_t(E) + e] * prototypes_.at(j, e);
        if (best < 0 || sim > best_sim) {  // ties keep the lowest index
          best = j;
          best_sim = sim;
        }
      }
      double* row = soft_labels_.row(int(train_row_.at(batch[i])));
      for (int j = 0; j < C; j++) {
        const double onehot = j == best ? 1.0 : 0.0;
        row[j] = acfg_.pico_alpha * row[j] + (1.0 - acfg_.pico_alpha) * onehot;
      }
    }
  }

  MomentumEncoder key_encoder_;
  Matrix prototypes_;   // [C, E], L2-normalized rows once populated
  Matrix soft_labels_;  // [n_train, C], support inside the candidate set
  std::deque<std::pair<std::vector<double>, int>> queue_;
};

}  // namespace

std::unique_ptr<Algorithm> make_pico() { return std::make_unique<Pico>(); }

}  // namespace pllforge::detail
