#include <algorithm>
#include <cmath>

#include "detail.hpp"

namespace pllforge::detail {

using ad::Tape;
using ad::Tensor;

namespace {

// Shared stack for the semantic-transfer methods: backbone -> per-class
// decoupled representations -> gated graph propagation -> per-class scores.
class SemanticBase : public BackboneAlgorithm {
 public:
  bool use_softmax() const override { return false; }

  void setup(const PartialDataset& ds, const BackboneConfig& bcfg, const AlgoConfig& acfg,
             uint64_t seed, int epochs) override {
    BackboneAlgorithm::setup(ds, bcfg, acfg, seed, epochs);
    const int C = ds.label_space.num_classes;
    const int E = bcfg.embedding_dim;
    const int D = acfg.decoupler_dim;
    adjacency_ = build_cooccurrence_adjacency(ds);
    Rng rng = derive_rng(seed, "semantic-init");
    decoupler_ = SemanticDecoupler(E, E, acfg.decoupler_rank, D, rng);
    ggnn_ = GatedGraphPropagator(D, adjacency_, acfg.ggnn_iters, rng);
    const int H = std::max(4, D);
    fist_w1_ = Tensor::randn({2 * D, H}, rng, 1.0 / std::sqrt(2.0 * D));
    fist_b1_ = Tensor::zeros({H}, true);
    fist_w2_ = Tensor::randn({H, 1}, rng, 1.0 / std::sqrt(double(H)));
    fist_b2_ = Tensor::zeros({1}, true);
    head_w_ = Tensor::randn({D, 1}, rng, 1.0 / std::sqrt(double(D)));
    head_b_ = Tensor::zeros({1}, true);
    class_embeds_ = Matrix(C, E, 0.0);
    refresh_class_embeddings();
  }

  std::vector<Tensor> parameters() override {
    std::vector<Tensor> out = net_.parameters();
    for (auto& [n, t] : extra_named()) out.push_back(t);
    return out;
  }
  std::vector<std::pair<std::string, Tensor>> named_parameters() override {
    auto out = net_.named_parameters();
    for (auto& [n, t] : extra_named()) out.emplace_back(n, t);
    return out;
  }

  void epoch_begin(int) override { refresh_class_embeddings(); }

  Matrix predict(const std::vector<size_t>& idx) override {
    const int C = ds_->label_space.num_classes;
    Matrix out(int(idx.size()), C);
    const size_t chunk = 128;
    for (size_t start = 0; start < idx.size(); start += chunk) {
      std::vector<size_t> part(idx.begin() + start,
                               idx.begin() + std::min(idx.size(), start + chunk));
      Tape tape;
      auto sem = semantic_forward(tape, batch_signals(*ds_, part), false);
      for (size_t i = 0; i < part.size(); i++)
        for (int j = 0; j < C; j++)
          out.at(int(start + i), j) = sem.probs.data()[i * C + j];
    }
    return out;
  }

  std::vector<std::pair<std::string, std::vector<double>>> buffers() override {
    return {{"class_embeds", class_embeds_.d}, {"adjacency", adjacency_.d}};
  }
  void load_buffers(const LoadedCheckpoint& ckpt) override {
    class_embeds_.d = ckpt.buffer("class_embeds");
    adjacency_.d = ckpt.buffer("adjacency");
  }

 protected:
  virtual std::vector<std::pair<std::string, Tensor>> extra_named() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& p : decoupler_.named_parameters()) out.push_back(p);
    for (auto& p : ggnn_.named_parameters()) out.push_back(p);
    out.emplace_back("fist.w1", fist_w1_);
    out.emplace_back("fist.b1", fist_b1_);
    out.emplace_back("fist.w2", fist_w2_);
    out.emplace_back("fist.b2", fist_b2_);
    out.emplace_back("score.w", head_w_);
    out.emplace_back("score.b", head_b_);
    return out;
  }

  struct SemanticOut {
    Tensor probs;             // [B, C] sigmoid scores
    std::vector<Tensor> phi;  // per class, [B, D]
  };

  SemanticOut semantic_forward(Tape& tape, const Tensor& x, bool training) {
    const int C = ds_->label_space.num_classes;
    Tensor emb = net_.forward(tape, x, training).embedding;
    std::vector<Tensor> phi(C);
    for (int j = 0; j < C; j++) {
      std::vector<double> ej(class_embeds_.row(j), class_embeds_.row(j) + class_embeds_.cols);
      phi[j] = decoupler_.forward(tape, emb, ej);
    }
    phi = ggnn_.forward(tape, phi);
    std::vector<Tensor> scores(C);
    for (int j = 0; j < C; j++)
      scores[j] = ad::add(tape, ad::matmul(tape, phi[j], head_w_), head_b_);
    SemanticOut out;
    out.probs = ad::sigmoid(tape, ad::concat(tape, scores, 1));
    out.phi = std::move(phi);
    return out;
  }

  // p^ist_{j,k} for one pair, [B, 1]
  Tensor f_ist(Tape& tape, const Tensor& phi_j, const Tensor& phi_k) {
    Tensor in = ad::concat(tape, {phi_j, phi_k}, 1);
    Tensor h = ad::relu(tape, ad::add(tape, ad::matmul(tape, in, fist_w1_), fist_b1_));
    return ad::sigmoid(tape, ad::add(tape, ad::matmul(tape, h, fist_w2_), fist_b2_));
  }

  // L^ist as printed: sum over candidate pairs of (1-p)^g1 log p plus the
  // complementary (p-m)^g2 log(1-p) term; sign-indefinite, flip via config.
  Tensor ist_loss(Tape& tape, const std::vector<std::vector<Tensor>>& pist,
                  const std::vector<size_t>& batch) {
    const int C = ds_->label_space.num_classes;
    const int B = int(batch.size());
    Tensor acc;
    for (int j = 0; j < C; j++) {
      for (int k = 0; k < C; k++) {
        if (j == k) continue;
        std::vector<double> in_pair(B, 0.0);
        for (int i = 0; i < B; i++) {
          const auto& cand = ds_->records[batch[i]].candidate;
          if (cand.count(j) && cand.count(k)) in_pair[i] = 1.0;
        }
        Tensor in = Tensor::leaf({B, 1}, std::move(in_pair));
        Tensor ones = Tensor::full({B, 1}, 1.0);
        const Tensor& p = pist[j][k];
        Tensor one_minus_p = ad::sub(tape, ones, p);
        Tensor t_in = ad::mul(tape, ad::pow_const(tape, one_minus_p, acfg_.gamma1),
                              ad::log_(tape, p));
        Tensor t_out = ad::mul(
            tape, ad::pow_const(tape, ad::add_const(tape, p, -acfg_.ist_margin), acfg_.gamma2),
            ad::log_(tape, one_minus_p));
        Tensor term = ad::add(tape, ad::mul(tape, in, t_in),
                              ad::mul(tape, ad::sub(tape, ones, in), t_out));
        acc = acc.defined() ? ad::add(tape, acc, term) : term;
      }
    }
    Tensor loss = ad::mean(tape, acc);
    return acfg_.ist_flip_sign ? ad::neg(tape, loss) : loss;
  }

  std::vector<std::vector<Tensor>> all_pair_scores(Tape& tape,
                                                   const std::vector<Tensor>& phi) {
    const int C = int(phi.size());
    std::vector<std::vector<Tensor>> pist(C, std::vector<Tensor>(C));
    for (int j = 0; j < C; j++)
      for (int k = 0; k < C; k++) pist[j][k] = f_ist(tape, phi[j], phi[k]);
    return pist;
  }

  // IST pseudo-labels from score values: y~_k = 1[sum_{j in Y} p_{k,j} >= theta]
  Matrix ist_pseudo(const std::vector<std::vector<Tensor>>& pist,
                    const std::vector<size_t>& batch, double theta) {
    const int C = ds_->label_space.num_classes;
    const int B = int(batch.size());
    Matrix out(B, C, 0.0);
    for (int i = 0; i < B; i++) {
      const auto& cand = ds_->records[batch[i]].candidate;
      for (int k = 0; k < C; k++) {
        double s = 0;
        for (int j : cand) s += pist[k][j].data()[i];
        if (s >= theta) out.at(i, k) = 1.0;
      }
    }
    return out;
  }

  Tensor row_normalized(Tape& tape, const Tensor& m) {
    Tensor norm = ad::sqrt_(tape, ad::sum_last(tape, ad::mul(tape, m, m)));
    return ad::scale_rows(tape, m, ad::recip(tape, norm));
  }

  void refresh_class_embeddings() {
    const int C = ds_->label_space.num_classes;
    const int E = bcfg_.embedding_dim;
    Matrix sums(C, E, 0.0);
    std::vector<int64_t> counts(C, 0);
    const size_t chunk = 256;
    for (size_t start = 0; start < train_idx_.size(); start += chunk) {
      std::vector<size_t> part(train_idx_.begin() + start,
                               train_idx_.begin() +
                                   std::min(train_idx_.size(), start + chunk));
      Tape tape;
      Tensor emb = net_.forward(tape, batch_signals(*ds_, part), false).embedding;
      for (size_t i = 0; i < part.size(); i++) {
        for (int j : ds_->records[part[i]].candidate) {
          counts[j]++;
          for (int e = 0; e < E; e++) sums.at(j, e) += emb.data()[i * size_t(E) + e];
        }
      }
    }
    for (int j = 0; j < C; j++) {
      if (counts[j] == 0) continue;
      for (int e = 0; e < E; e++) class_embeds_.at(j, e) = sums.at(j, e) / counts[j];
    }
  }

  SemanticDecoupler decoupler_;
  GatedGraphPropagator ggnn_;
  Matrix adjacency_;
  Matrix class_embeds_;  // [C, E], candidate-membership centroids
  Tensor fist_w1_, fist_b1_, fist_w2_, fist_b2_;
  Tensor head_w_, head_b_;
};

class Sst : public SemanticBase {
 public:
  std::string name() const override { return "sst"; }

  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    const int C = ds_->label_space.num_classes;
    const int B = int(batch.size());
    auto sem = semantic_forward(tape, batch_signals(*ds_, batch), true);
    auto pist = all_pair_scores(tape, sem.phi);

    Matrix tilde = ist_pseudo(pist, batch, acfg_.theta_ist);

    // per-class batch similarity matrices on normalized representations
    std::vector<Tensor> sims(C);
    for (int j = 0; j < C; j++) {
      Tensor nj = row_normalized(tape, sem.phi[j]);
      sims[j] = ad::matmul(tape, nj, ad::transpose(tape, nj));  // [B, B]
    }

    // CST pseudo-labels: mean similarity to D_j (batch members carrying j)
    Matrix hat(B, C, 0.0);
    std::vector<std::vector<double>> member(C, std::vector<double>(B, 0.0));
    std::vector<int> member_count(C, 0);
    for (int i = 0; i < B; i++)
      for (int j : ds_->records[batch[i]].candidate) {
        member[j][i] = 1.0;
        member_count[j]++;
      }
    for (int j = 0; j < C; j++) {
      if (member_count[j] == 0) continue;
      for (int i = 0; i < B; i++) {
        double s = 0;
        for (int z = 0; z < B; z++)
          if (member[j][z] > 0) s += sims[j].data()[size_t(i) * B + z];
        if (s / member_count[j] >= acfg_.theta_cst) hat.at(i, j) = 1.0;
      }
    }

    Tensor y = batch_mask(*ds_, batch, true);
    Tensor l_cls = partial_bce(tape, sem.probs, y);
    l_cls = ad::add(tape, l_cls,
                    partial_bce(tape, sem.probs, Tensor::leaf({B, C}, hat.d), true));
    l_cls = ad::add(tape, l_cls,
                    partial_bce(tape, sem.probs, Tensor::leaf({B, C}, tilde.d), true));

    Tensor l_ist = ist_loss(tape, pist, batch);

    // L_cst = mean_i sum_{j in Y_i} sum_{z in D_j} (1 - s^j_{i,z})
    Tensor l_cst;
    for (int j = 0; j < C; j++) {
      if (member_count[j] == 0) continue;  // empty D_j: term skipped
      Tensor mask_col = Tensor::leaf({B, 1}, member[j]);
      Tensor rowsum = ad::matmul(tape, sims[j], mask_col);  // [B, 1]
      Tensor cnt = Tensor::full({B, 1}, double(member_count[j]));
      std::vector<double> cand_col(B, 0.0);
      for (int i = 0; i < B; i++)
        if (ds_->records[batch[i]].candidate.count(j)) cand_col[i] = 1.0;
      Tensor term = ad::mul(tape, Tensor::leaf({B, 1}, std::move(cand_col)),
                            ad::sub(tape, cnt, rowsum));
      l_cst = l_cst.defined() ? ad::add(tape, l_cst, term) : term;
    }
    Tensor l_cst_mean = l_cst.defined() ? ad::mean(tape, l_cst) : Tensor::scalar(0.0);

    Tensor total = ad::add(tape, l_cls, ad::scale(tape, l_ist, acfg_.lambda1));
    if (l_cst.defined())
      total = ad::add(tape, total, ad::scale(tape, l_cst_mean, acfg_.lambda2));
    return total;
  }
};

class Hst : public SemanticBase {
 public:
  std::string name() const override { return "hst"; }

  void setup(const PartialDataset& ds, const BackboneConfig& bcfg, const AlgoConfig& acfg,
             uint64_t seed, int epochs) override {
    SemanticBase::setup(ds, bcfg, acfg, seed, epochs);
    theta_ist_ = Tensor::param({1}, {acfg.theta_ist});
    theta_cst_ = Tensor::param({1}, {acfg.theta_cst});
    prototypes_.assign(ds.label_space.num_classes, {});
    refresh_prototypes(0);
  }

  void epoch_begin(int epoch) override {
    SemanticBase::epoch_begin(epoch);
    refresh_prototypes(epoch);
  }

  Tensor batch_loss(Tape& tape, const std::vector<size_t>& batch, int, int) override {
    const int C = ds_->label_space.num_classes;
    const int B = int(batch.size());
    const int D = acfg_.decoupler_dim;
    auto sem = semantic_forward(tape, batch_signals(*ds_, batch), true);
    auto pist = all_pair_scores(tape, sem.phi);

    Matrix tilde = ist_pseudo(pist, batch, theta_ist_.data()[0]);

    // prototype-based CST similarity: mean over K prototype cosines
    std::vector<Tensor> sbar(C);  // [B, 1] each; undefined if no prototypes
    for (int j = 0; j < C; j++) {
      if (prototypes_[j].empty()) continue;
      const int K = int(prototypes_[j].size()) / D;
      std::vector<double> flat = prototypes_[j];
      Tensor protos = Tensor::leaf({K, D}, std::move(flat));
      Tensor nj = row_normalized(tape, sem.phi[j]);
      Tensor sim = ad::matmul(tape, nj, ad::transpose(tape, protos));  // [B, K]
      sbar[j] = ad::reshape(tape, ad::scale(tape, ad::sum_last(tape, sim), 1.0 / K), {B, 1});
    }

    Matrix hat(B, C, 0.0);
    for (int j = 0; j < C; j++) {
      if (!sbar[j].defined()) continue;
      for (int i = 0; i < B; i++)
        if (sbar[j].data()[i] >= theta_cst_.data()[0]) hat.at(i, j) = 1.0;
    }

    Tensor y = batch_mask(*ds_, batch, true);
    Tensor l_cls = partial_bce(tape, sem.probs, y);
    l_cls = ad::add(tape, l_cls,
                    partial_bce(tape, sem.probs, Tensor::leaf({B, C}, hat.d), true));
    l_cls = ad::add(tape, l_cls,
                    partial_bce(tape, sem.probs, Tensor::leaf({B, C}, tilde.d), true));

    Tensor l_ist = ist_loss(tape, pist, batch);

    // L_cst = mean_i sum_{j in Y_i} (1 - sbar_ij)
    Tensor l_cst;
    for (int j = 0; j < C; j++) {
      if (!sbar[j].defined()) continue;
      std::vector<double> cand_col(B, 0.0);
      for (int i = 0; i < B; i++)
        if (ds_->records[batch[i]].candidate.count(j)) cand_col[i] = 1.0;
      Tensor ones = Tensor::full({B, 1}, 1.0);
      Tensor term = ad::mul(tape, Tensor::leaf({B, 1}, std::move(cand_col)),
                            ad::sub(tape, ones, sbar[j]));
      l_cst = l_cst.defined() ? ad::add(tape, l_cst, term) : term;
    }

    // DTL: differentiable thresholding, supervised with partial BCE on
    // sigmoid(d). The raw d-scores are not probabilities.
    std::vector<Tensor> dist_cols(C), dcst_cols(C);
    for (int k = 0; k < C; k++) {
      std::vector<double> ycol(B, 0.0);
      Tensor acc;
      for (int i = 0; i < B; i++) (void)i;
      for (int j = 0; j < C; j++) {
        std::vector<double> yj(B, 0.0);
        for (int i = 0; i < B; i++)
          if (ds_->records[batch[i]].candidate.count(j)) yj[i] = 1.0;
        Tensor term = ad::mul(tape, pist[k][j], Tensor::leaf({B, 1}, std::move(yj)));
        acc = acc.defined() ? ad::add(tape, acc, term) : term;
      }
      dist_cols[k] = ad::sub(tape, acc, theta_ist_);
      if (sbar[k].defined())
        dcst_cols[k] = ad::sub(tape, sbar[k], theta_cst_);
      else
        dcst_cols[k] = ad::sub(tape, Tensor::zeros({B, 1}), theta_cst_);
      (void)ycol;
    }
    Tensor l_dtl_ist =
        partial_bce(tape, ad::sigmoid(tape, ad::concat(tape, dist_cols, 1)), y);
    Tensor l_dtl_cst =
        partial_bce(tape, ad::sigmoid(tape, ad::concat(tape, dcst_cols, 1)), y);

    Tensor total = ad::add(tape, l_cls, ad::scale(tape, l_ist, acfg_.lambda1));
    if (l_cst.defined())
      total = ad::add(tape, total, ad::scale(tape, ad::mean(tape, l_cst), acfg_.lambda2));
    total = ad::add(tape, total,
                    ad::scale(tape, ad::add(tape, l_dtl_ist, l_dtl_cst), acfg_.lambda3));
    return total;
  }

  void after_step(Tape&) override {
    // learned thresholds stay inside (0, 1)
    theta_ist_.data()[0] = std::clamp(theta_ist_.data()[0], 1e-3, 1.0 - 1e-3);
    theta_cst_.data()[0] = std::clamp(theta_cst_.data()[0], 1e-3, 1.0 - 1e-3);
  }

  std::vector<std::pair<std::string, Tensor>> extra_named() override {
    auto out = SemanticBase::extra_named();
    out.emplace_back("dtl.theta_ist", theta_ist_);
    out.emplace_back("dtl.theta_cst", theta_cst_);
    return out;
  }

  std::optional<Matrix> state_matrix(const std::string& key) const override {
    if (key == "hst.thresholds") {
      Matrix m(1, 2);
      m.at(0, 0) = theta_ist_.data()[0];
      m.at(0, 1) = theta_cst_.data()[0];
      return m;
    }
    return std::nullopt;
  }

 private:
  // k-means over the semantic representations of each class's members,
  // refreshed from the current model. K shrinks to the point count.
  void refresh_prototypes(int epoch) {
    const int C = ds_->label_space.num_classes;
    const int D = acfg_.decoupler_dim;
    std::vector<std::vector<std::vector<double>>> points(C);
    const size_t chunk = 128;
    for (size_t start = 0; start < train_idx_.size(); start += chunk) {
      std::vector<size_t> part(train_idx_.begin() + start,
                               train_idx_.begin() +
                                   std::min(train_idx_.size(), start + chunk));
      Tape tape;
      auto sem = semantic_forward(tape, batch_signals(*ds_, part), false);
      for (size_t i = 0; i < part.size(); i++)
        for (int j : ds_->records[part[i]].candidate) {
          const auto& v = sem.phi[j].data();
          points[j].emplace_back(v.begin() + int64_t(i) * D,
                                 v.begin() + int64_t(i + 1) * D);
        }
    }
    for (int j = 0; j < C; j++) {
      prototypes_[j].clear();
      if (points[j].empty()) continue;
      const int K = std::min<int>(acfg_.hst_k, int(points[j].size()));
      auto centers = kmeans(points[j], K, derive_rng(seed_, {fnv1a("kmeans"),
                                                             uint64_t(epoch), uint64_t(j)}));
      for (auto& c : centers) {
        double n = 0;
        for (double v : c) n += v * v;
        n = std::sqrt(n);
        if (n > 0)
          for (double& v : c) v /= n;
        prototypes_[j].insert(prototypes_[j].end(), c.begin(), c.end());
      }
    }
  }

  static std::vector<std::vector<double>> kmeans(
      const std::vector<std::vector<double>>& pts, int k, Rng rng) {
    const int n = int(pts.size());
    const int d = int(pts[0].size());
    std::vector<int> order(n);
    for (int i = 0; i < n; i++) order[i] = i;
    shuffle(order, rng);
    std::vector<std::vector<double>> centers;
    for (int c = 0; c < k; c++) centers.push_back(pts[order[c]]);
    std::vector<int> assign(n, 0);
    for (int iter = 0; iter < 10; iter++) {
      bool moved = false;
      for (int i = 0; i < n; i++) {
        int best = 0;
        double best_d = 0;
        for (int c = 0; c < k; c++) {
          double dist = 0;
          for (int e = 0; e < d; e++) {
            const double diff = pts[i][e] - centers[c][e];
            dist += diff * diff;
          }
          if (c == 0 || dist < best_d) {
            best = c;
            best_d = dist;
          }
        }
        if (assign[i] != best) moved = true;
        assign[i] = best;
      }
      for (int c = 0; c < k; c++) {
        std::vector<double> acc(d, 0.0);
        int cnt = 0;
        for (int i = 0; i < n; i++) {
          if (assign[i] != c) continue;
          for (int e = 0; e < d; e++) acc[e] += pts[i][e];
          cnt++;
        }
        if (cnt > 0)
          for (int e = 0; e < d; e++) centers[c][e] = acc[e] / cnt;
      }
      if (!moved) break;
    }
    return centers;
  }

  Tensor theta_ist_, theta_cst_;
  std::vector<std::vector<double>> prototypes_;  // per class, K*D flattened
};

}  // namespace

std::unique_ptr<Algorithm> make_sst() { return std::make_unique<Sst>(); }
std::unique_ptr<Algorithm> make_hst() { return std::make_unique<Hst>(); }

}  // namespace pllforge::detail
