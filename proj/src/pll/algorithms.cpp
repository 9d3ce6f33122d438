#include "pllforge/pll/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "detail.hpp"

namespace pllforge {

using ad::Tape;
using ad::Tensor;

std::vector<double> AlgoConfig::head_tail(const std::vector<int64_t>& counts) const {
  if (head_tail_factor) return head_tail_factor(counts);
  int64_t mx = 1;
  for (int64_t c : counts) mx = std::max(mx, c);
  std::vector<double> out(counts.size());
  for (size_t j = 0; j < counts.size(); j++)
    out[j] = 1.0 + std::log(double(mx) / double(std::max<int64_t>(counts[j], 1)));
  return out;
}

Tensor batch_signals(const PartialDataset& ds, const std::vector<size_t>& idx) {
  const int B = int(idx.size());
  std::vector<double> data;
  data.reserve(size_t(B) * ds.leads * ds.length);
  for (size_t i : idx)
    data.insert(data.end(), ds.records[i].signal.d.begin(), ds.records[i].signal.d.end());
  return Tensor::leaf({B, ds.leads, ds.length}, std::move(data));
}

Tensor batch_signals_from(const std::vector<Matrix>& signals, int leads, int length) {
  const int B = int(signals.size());
  std::vector<double> data;
  data.reserve(size_t(B) * leads * length);
  for (const auto& s : signals) data.insert(data.end(), s.d.begin(), s.d.end());
  return Tensor::leaf({B, leads, length}, std::move(data));
}

Tensor batch_mask(const PartialDataset& ds, const std::vector<size_t>& idx,
                  bool use_candidates) {
  const int B = int(idx.size());
  const int C = ds.label_space.num_classes;
  std::vector<double> data(size_t(B) * C, 0.0);
  for (int i = 0; i < B; i++) {
    const auto& s = use_candidates ? ds.records[idx[i]].candidate
                                   : ds.records[idx[i]].ground_truth;
    for (int j : s) data[size_t(i) * C + j] = 1.0;
  }
  return Tensor::leaf({B, C}, std::move(data));
}

std::vector<const std::set<int>*> batch_candidates(const PartialDataset& ds,
                                                   const std::vector<size_t>& idx) {
  std::vector<const std::set<int>*> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(&ds.records[i].candidate);
  return out;
}

namespace detail {

void BackboneAlgorithm::setup(const PartialDataset& ds, const BackboneConfig& bcfg,
                              const AlgoConfig& acfg, uint64_t seed, int epochs) {
  ds_ = &ds;
  bcfg_ = bcfg;
  acfg_ = acfg;
  seed_ = seed;
  epochs_ = epochs;
  Rng init = derive_rng(seed, "init");
  net_ = Backbone(bcfg, init);
  train_idx_ = ds.split_indices(Split::Train);
  if (train_idx_.empty()) throw std::invalid_argument("empty train split");
  for (size_t r = 0; r < train_idx_.size(); r++) train_row_[train_idx_[r]] = r;
}

Matrix BackboneAlgorithm::forward_probs(const std::vector<size_t>& idx, bool softmax_probs) {
  const int C = ds_->label_space.num_classes;
  Matrix out(int(idx.size()), C);
  const size_t chunk = 256;
  for (size_t start = 0; start < idx.size(); start += chunk) {
    std::vector<size_t> part(idx.begin() + start,
                             idx.begin() + std::min(idx.size(), start + chunk));
    Tape tape;
    Tensor x = batch_signals(*ds_, part);
    Tensor logits = net_.forward(tape, x, false).logits;
    Tensor probs = softmax_probs ? ad::softmax(tape, logits) : ad::sigmoid(tape, logits);
    for (size_t i = 0; i < part.size(); i++)
      for (int j = 0; j < C; j++)
        out.at(int(start + i), j) = probs.data()[i * C + j];
  }
  return out;
}

namespace {

// Treats every candidate label as a true positive under per-class BCE; the
// ambiguity-blind reference point.
class NoPll : public BackboneAlgorithm {
 public:
  std::string name() const override { return "nopll"; }
  bool use_softmax() const override { return false; }
  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    Tensor logits = net_.forward(tape, batch_signals(*ds_, batch), true).logits;
    Tensor y = batch_mask(*ds_, batch, true);
    Tensor ones = Tensor::full(y.shape(), 1.0);
    Tensor per = ad::add(tape,
                         ad::mul(tape, y, ad::softplus(tape, ad::neg(tape, logits))),
                         ad::mul(tape, ad::sub(tape, ones, y), ad::softplus(tape, logits)));
    return ad::mean(tape, ad::sum_last(tape, per));
  }
};

class Dnpl : public BackboneAlgorithm {
 public:
  std::string name() const override { return "dnpl"; }
  bool use_softmax() const override { return true; }
  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    Tensor logits = net_.forward(tape, batch_signals(*ds_, batch), true).logits;
    return dnpl_loss(tape, logits, batch_mask(*ds_, batch, true));
  }
};

class Proden : public BackboneAlgorithm {
 public:
  std::string name() const override { return "proden"; }
  bool use_softmax() const override { return true; }

  void setup(const PartialDataset& ds, const BackboneConfig& bcfg, const AlgoConfig& acfg,
             uint64_t seed, int epochs) override {
    BackboneAlgorithm::setup(ds, bcfg, acfg, seed, epochs);
    const int C = ds.label_space.num_classes;
    weights_ = Matrix(int(train_idx_.size()), C, 0.0);
    for (size_t r = 0; r < train_idx_.size(); r++) {
      const auto& cand = ds.records[train_idx_[r]].candidate;
      for (int j : cand) weights_.at(int(r), j) = 1.0 / double(cand.size());
    }
  }

  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    Tensor logits = net_.forward(tape, batch_signals(*ds_, batch), true).logits;
    const int C = weights_.cols;
    std::vector<double> w(batch.size() * size_t(C));
    for (size_t i = 0; i < batch.size(); i++) {
      const size_t row = train_row_.at(batch[i]);
      std::copy_n(weights_.row(int(row)), C, w.data() + i * C);
    }
    return proden_loss(tape, logits, Tensor::leaf({int(batch.size()), C}, std::move(w)));
  }

  void epoch_end(int) override {
    Matrix probs = forward_probs(train_idx_, true);
    weights_ = proden_update_weights(probs, batch_candidates(*ds_, train_idx_));
  }

  std::optional<Matrix> state_matrix(const std::string& key) const override {
    if (key == "proden.weights") return weights_;
    return std::nullopt;
  }

 private:
  Matrix weights_;
};

class Cavl : public BackboneAlgorithm {
 public:
  std::string name() const override { return "cavl"; }
  bool use_softmax() const override { return true; }
  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    Tensor logits = net_.forward(tape, batch_signals(*ds_, batch), true).logits;
    const int C = ds_->label_space.num_classes;
    Matrix vals(int(batch.size()), C);
    std::copy(logits.data().begin(), logits.data().end(), vals.d.begin());
    auto selected = cavl_select(vals, batch_candidates(*ds_, batch));
    return cavl_loss(tape, logits, selected);
  }
};

class Lw : public BackboneAlgorithm {
 public:
  std::string name() const override { return "lw"; }
  bool use_softmax() const override { return false; }
  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    Tensor logits = net_.forward(tape, batch_signals(*ds_, batch), true).logits;
    const int C = ds_->label_space.num_classes;
    Matrix vals(int(batch.size()), C);
    std::copy(logits.data().begin(), logits.data().end(), vals.d.begin());
    Matrix w = lw_update_weights(vals, batch_candidates(*ds_, batch));
    return lw_loss(tape, logits, batch_mask(*ds_, batch, true),
                   Tensor::leaf({int(batch.size()), C}, std::move(w.d)), acfg_.lw_beta);
  }
};

class Cr : public BackboneAlgorithm {
 public:
  std::string name() const override { return "cr"; }
  bool use_softmax() const override { return false; }

  void setup(const PartialDataset& ds, const BackboneConfig& bcfg, const AlgoConfig& acfg,
             uint64_t seed, int epochs) override {
    BackboneAlgorithm::setup(ds, bcfg, acfg, seed, epochs);
    const int C = ds.label_space.num_classes;
    conformal_ = Matrix(int(train_idx_.size()), C, 0.0);
    for (size_t r = 0; r < train_idx_.size(); r++) {
      const auto& cand = ds.records[train_idx_[r]].candidate;
      for (int j : cand) conformal_.at(int(r), j) = 1.0 / double(cand.size());
    }
  }

  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int epoch, int) override {
    Tensor x = batch_signals(*ds_, batch);
    Tensor logits = net_.forward(tape, x, true).logits;
    std::vector<Tensor> aug_logits;
    for (AugStrength s : {AugStrength::Weak, AugStrength::Strong}) {
      Tensor xa = augmented_batch(batch, epoch, s);
      aug_logits.push_back(net_.forward(tape, xa, true).logits);
    }
    const int C = conformal_.cols;
    std::vector<double> p(batch.size() * size_t(C));
    for (size_t i = 0; i < batch.size(); i++)
      std::copy_n(conformal_.row(int(train_row_.at(batch[i]))), C, p.data() + i * C);
    Tensor conf = Tensor::leaf({int(batch.size()), C}, std::move(p));
    return cr_loss(tape, logits, batch_mask(*ds_, batch, true), aug_logits, conf,
                   cr_gamma(epoch, epochs_, acfg_.cr_lambda));
  }

  void epoch_end(int epoch) override {
    // Conformal refresh from this epoch's augmented views.
    const int C = conformal_.cols;
    const size_t chunk = 256;
    for (size_t start = 0; start < train_idx_.size(); start += chunk) {
      std::vector<size_t> part(train_idx_.begin() + start,
                               train_idx_.begin() +
                                   std::min(train_idx_.size(), start + chunk));
      std::vector<Matrix> views;
      for (AugStrength s : {AugStrength::Weak, AugStrength::Strong}) {
        Tape tape;
        Tensor xa = augmented_batch(part, epoch, s);
        Tensor probs = ad::softmax(tape, net_.forward(tape, xa, false).logits);
        Matrix m(int(part.size()), C);
        std::copy(probs.data().begin(), probs.data().end(), m.d.begin());
        views.push_back(std::move(m));
      }
      Matrix p = cr_conformal(views, batch_candidates(*ds_, part));
      for (size_t i = 0; i < part.size(); i++)
        std::copy_n(p.row(int(i)), C, conformal_.row(int(train_row_.at(part[i]))));
    }
  }

  std::optional<Matrix> state_matrix(const std::string& key) const override {
    if (key == "cr.conformal") return conformal_;
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

  Matrix conformal_;
};

}  // namespace
}  // namespace detail

std::unique_ptr<Algorithm> make_algorithm(const std::string& name) {
  if (name == "nopll") return std::make_unique<detail::NoPll>();
  if (name == "dnpl") return std::make_unique<detail::Dnpl>();
  if (name == "proden") return std::make_unique<detail::Proden>();
  if (name == "cavl") return std::make_unique<detail::Cavl>();
  if (name == "lw") return std::make_unique<detail::Lw>();
  if (name == "cr") return std::make_unique<detail::Cr>();
  if (name == "pico") return detail::make_pico();
  if (name == "sst") return detail::make_sst();
  if (name == "hst") return detail::make_hst();
  if (name == "comic") return detail::make_comic();
  throw std::invalid_argument("unknown algorithm: " + name);
}

std::vector<std::string> algorithm_names() {
  return {"nopll", "dnpl", "proden", "cavl", "lw", "cr", "pico", "sst", "hst", "comic"};
}

}  // namespace pllforge
