#include "pllforge/model/components.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

namespace pllforge {

using ad::Tape;
using ad::Tensor;
using nlohmann::json;

// ---- SemanticDecoupler ----

SemanticDecoupler::SemanticDecoupler(int embed_dim, int class_embed_dim, int rank,
                                     int out_dim, Rng& rng)
    : out_dim_(out_dim) {
  u_ = Tensor::randn({embed_dim, rank}, rng, 1.0 / std::sqrt(double(embed_dim)));
  v_ = Tensor::randn({class_embed_dim, rank}, rng, 1.0 / std::sqrt(double(class_embed_dim)));
  p_ = Tensor::randn({rank, out_dim}, rng, 1.0 / std::sqrt(double(rank)));
  b_ = Tensor::zeros({out_dim}, true);
}

Tensor SemanticDecoupler::forward(Tape& tape, const Tensor& phi,
                                  const std::vector<double>& class_embed) const {
  if (int(class_embed.size()) != v_.dim(0))
    throw std::invalid_argument("semantic decoupler: class embedding dimension mismatch");
  Tensor e = Tensor::leaf({1, v_.dim(0)}, class_embed);
  Tensor ve = ad::reshape(tape, ad::matmul(tape, e, v_), {v_.dim(1)});  // [H]
  Tensor up = ad::matmul(tape, phi, u_);                                // [B, H]
  Tensor fused = ad::tanh_(tape, ad::mul(tape, up, ve));
  return ad::add(tape, ad::matmul(tape, fused, p_), b_);  // [B, D]
}

std::vector<std::pair<std::string, Tensor>> SemanticDecoupler::named_parameters() const {
  return {{"dec.u", u_}, {"dec.v", v_}, {"dec.p", p_}, {"dec.b", b_}};
}

// ---- co-occurrence adjacency ----

Matrix build_cooccurrence_adjacency(const PartialDataset& ds) {
  const int C = ds.label_space.num_classes;
  std::vector<int64_t> count(C, 0);
  Matrix co(C, C, 0.0);
  bool any = false;
  for (const auto& rec : ds.records) {
    if (rec.split != Split::Train) continue;
    any = true;
    for (int j : rec.candidate) {
      count[j]++;
      for (int k : rec.candidate) co.at(j, k) += 1.0;
    }
  }
  if (!any) throw std::invalid_argument("build_cooccurrence_adjacency: empty train split");
  Matrix a(C, C, 0.0);
  for (int j = 0; j < C; j++) {
    if (count[j] == 0) continue;
    for (int k = 0; k < C; k++) a.at(j, k) = co.at(j, k) / double(count[j]);
  }
  return a;
}

// ---- GatedGraphPropagator ----

GatedGraphPropagator::GatedGraphPropagator(int dim, Matrix adjacency, int iterations,
                                           Rng& rng)
    : adj_(std::move(adjacency)), iterations_(iterations) {
  if (adj_.rows != adj_.cols) throw std::invalid_argument("adjacency must be square");
  const double s = 1.0 / std::sqrt(double(dim));
  wz_ = Tensor::randn({dim, dim}, rng, s);
  uz_ = Tensor::randn({dim, dim}, rng, s);
  bz_ = Tensor::zeros({dim}, true);
  wr_ = Tensor::randn({dim, dim}, rng, s);
  ur_ = Tensor::randn({dim, dim}, rng, s);
  br_ = Tensor::zeros({dim}, true);
  wh_ = Tensor::randn({dim, dim}, rng, s);
  uh_ = Tensor::randn({dim, dim}, rng, s);
  bh_ = Tensor::zeros({dim}, true);
}

std::vector<Tensor> GatedGraphPropagator::forward(Tape& tape,
                                                  const std::vector<Tensor>& h0) const {
  const int C = int(h0.size());
  if (C != adj_.rows)
    throw std::invalid_argument("propagator: class count does not match adjacency");
  std::vector<Tensor> h = h0;
  for (int it = 0; it < iterations_; it++) {
    std::vector<Tensor> next(C);
    for (int j = 0; j < C; j++) {
      Tensor agg;
      for (int k = 0; k < C; k++) {
        const double w = adj_.at(j, k);
        if (w == 0.0) continue;
        Tensor term = ad::scale(tape, h[k], w);
        agg = agg.defined() ? ad::add(tape, agg, term) : term;
      }
      if (!agg.defined()) agg = Tensor::zeros(h[j].shape());
      Tensor z = ad::sigmoid(
          tape, ad::add(tape,
                        ad::add(tape, ad::matmul(tape, agg, wz_),
                                ad::matmul(tape, h[j], uz_)),
                        bz_));
      Tensor r = ad::sigmoid(
          tape, ad::add(tape,
                        ad::add(tape, ad::matmul(tape, agg, wr_),
                                ad::matmul(tape, h[j], ur_)),
                        br_));
      Tensor cand = ad::tanh_(
          tape, ad::add(tape,
                        ad::add(tape, ad::matmul(tape, agg, wh_),
                                ad::matmul(tape, ad::mul(tape, r, h[j]), uh_)),
                        bh_));
      // h' = h + z (.) (cand - h)
      next[j] = ad::add(tape, h[j], ad::mul(tape, z, ad::sub(tape, cand, h[j])));
    }
    h = std::move(next);
  }
  return h;
}

std::vector<std::pair<std::string, Tensor>> GatedGraphPropagator::named_parameters() const {
  return {{"ggnn.wz", wz_}, {"ggnn.uz", uz_}, {"ggnn.bz", bz_},
          {"ggnn.wr", wr_}, {"ggnn.ur", ur_}, {"ggnn.br", br_},
          {"ggnn.wh", wh_}, {"ggnn.uh", uh_}, {"ggnn.bh", bh_}};
}

// ---- AttentionFusion ----

AttentionFusion::AttentionFusion(int embed_dim, int attn_dim, Rng& rng) {
  const double s = 1.0 / std::sqrt(double(embed_dim));
  wq_ = Tensor::randn({embed_dim, attn_dim}, rng, s);
  wk_ = Tensor::randn({embed_dim, attn_dim}, rng, s);
  v_ = Tensor::randn({attn_dim, 1}, rng, 1.0 / std::sqrt(double(attn_dim)));
}

Tensor AttentionFusion::fuse(Tape& tape, const Tensor& phi_b_hat,
                             const std::vector<Tensor>& branches) const {
  const int B = phi_b_hat.dim(0);
  Tensor q = ad::matmul(tape, phi_b_hat, wq_);
  std::vector<Tensor> scores;
  for (const auto& phi : branches) {
    Tensor s = ad::tanh_(tape, ad::add(tape, q, ad::matmul(tape, phi, wk_)));
    scores.push_back(ad::matmul(tape, s, v_));  // [B, 1]
  }
  Tensor alpha = ad::softmax(tape, ad::concat(tape, scores, 1));  // [B, n]
  return fuse_with_weights(tape, phi_b_hat, branches, alpha);
}

Tensor AttentionFusion::fuse_with_weights(Tape& tape, const Tensor& phi_b_hat,
                                          const std::vector<Tensor>& branches,
                                          const Tensor& weights) {
  Tensor out = phi_b_hat;
  for (size_t x = 0; x < branches.size(); x++) {
    Tensor ax = ad::reshape(tape, ad::slice(tape, weights, 1, int(x), int(x) + 1),
                            {phi_b_hat.dim(0)});
    out = ad::add(tape, out, ad::scale_rows(tape, branches[x], ax));
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> AttentionFusion::named_parameters() const {
  return {{"attn.wq", wq_}, {"attn.wk", wk_}, {"attn.v", v_}};
}

// ---- MultiheadClassifier ----

MultiheadClassifier::MultiheadClassifier(int embed_dim, int num_classes, int groups,
                                         double rho, double eta, Rng& rng)
    : q_(groups), rho_(rho), eta_(eta) {
  if (eta <= 0.0) throw std::invalid_argument("eta must be positive");
  if (groups < 1 || embed_dim % groups != 0)
    throw std::invalid_argument("groups must divide the embedding dim");
  w_ = Tensor::randn({num_classes, embed_dim}, rng, 1.0 / std::sqrt(double(embed_dim)));
}

Tensor MultiheadClassifier::logits(Tape& tape, const Tensor& phi) const {
  const int B = phi.dim(0);
  const int E = w_.dim(1);
  const int g = E / q_;
  Tensor z;
  for (int k = 0; k < q_; k++) {
    Tensor wk = ad::slice(tape, w_, 1, k * g, (k + 1) * g);    // [C, g]
    Tensor pk = ad::slice(tape, phi, 1, k * g, (k + 1) * g);   // [B, g]
    Tensor dot = ad::matmul(tape, pk, ad::transpose(tape, wk));  // [B, C]
    Tensor wnorm = ad::sqrt_(tape, ad::sum_last(tape, ad::mul(tape, wk, wk)));  // [C]
    Tensor pnorm = ad::sqrt_(tape, ad::sum_last(tape, ad::mul(tape, pk, pk)));  // [B]
    Tensor term = ad::mul(tape, dot, ad::recip(tape, ad::add_const(tape, wnorm, eta_)));
    term = ad::scale_rows(tape, term, ad::recip(tape, pnorm));
    z = z.defined() ? ad::add(tape, z, term) : term;
  }
  (void)B;
  return ad::scale(tape, z, rho_ / q_);
}

Tensor MultiheadClassifier::bias_adjust(Tape& tape, const Tensor& z,
                                        const std::vector<double>& e, double sign) const {
  const int B = z.dim(0);
  const int C = z.dim(1);
  if (int(e.size()) != C)
    throw std::invalid_argument("bias_adjust: accumulator dimension mismatch");
  double en = 0.0;
  for (double x : e) en += x * x;
  en = std::sqrt(en);
  if (en == 0.0) return z;  // no accumulated bias yet

  Tensor ev = Tensor::leaf({C}, e);
  // per-row cosine similarity between logits and the accumulator
  Tensor dot = ad::sum_last(tape, ad::mul(tape, z, ev));                       // [B]
  Tensor zn = ad::sqrt_(tape, ad::sum_last(tape, ad::mul(tape, z, z)));        // [B]
  Tensor sim = ad::scale(tape, ad::mul(tape, dot, ad::recip(tape, zn)), 1.0 / en);

  const int E = w_.dim(1);
  const int g = E / q_;
  Tensor base;  // [C]: sum_k e_c / (|w_{k,c}| + eta)
  for (int k = 0; k < q_; k++) {
    Tensor wk = ad::slice(tape, w_, 1, k * g, (k + 1) * g);
    Tensor wnorm = ad::sqrt_(tape, ad::sum_last(tape, ad::mul(tape, wk, wk)));
    Tensor term = ad::mul(tape, ev, ad::recip(tape, ad::add_const(tape, wnorm, eta_)));
    base = base.defined() ? ad::add(tape, base, term) : term;
  }
  base = ad::scale(tape, base, rho_ / q_);
  Tensor ones = Tensor::full({B, C}, 1.0);
  Tensor bias = ad::scale_rows(tape, ad::mul(tape, ones, base), sim);
  return ad::add(tape, z, ad::scale(tape, bias, sign));
}

std::vector<std::pair<std::string, Tensor>> MultiheadClassifier::named_parameters() const {
  return {{"clf.w", w_}};
}

// ---- TripleModelEnsemble ----

TripleModelEnsemble::TripleModelEnsemble(const BackboneConfig& cfg, int groups,
                                         double rho, double eta, Rng& rng)
    : head_expert(cfg, rng),
      tail_expert(cfg, rng),
      balanced(cfg, rng),
      attn(cfg.embedding_dim, std::max(4, cfg.embedding_dim / 2), rng),
      clf(cfg.embedding_dim, cfg.num_classes, groups, rho, eta, rng) {}

TripleModelEnsemble::Output TripleModelEnsemble::forward(Tape& tape, const Tensor& x,
                                                         bool training) {
  auto h = head_expert.forward(tape, x, training);
  auto t = tail_expert.forward(tape, x, training);
  auto b = balanced.forward(tape, x, training);
  Tensor phi_b = attn.fuse(tape, b.embedding, {h.embedding, t.embedding});
  Output out;
  out.phi_h = h.embedding;
  out.phi_t = t.embedding;
  out.phi_b = phi_b;
  out.z_h = clf.logits(tape, h.embedding);
  out.z_t = clf.logits(tape, t.embedding);
  out.z_b = clf.logits(tape, phi_b);
  return out;
}

std::vector<std::pair<std::string, Tensor>> TripleModelEnsemble::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [n, t] : head_expert.named_parameters()) out.emplace_back("head." + n, t);
  for (auto& [n, t] : tail_expert.named_parameters()) out.emplace_back("tail." + n, t);
  for (auto& [n, t] : balanced.named_parameters()) out.emplace_back("bal." + n, t);
  for (auto& [n, t] : attn.named_parameters()) out.emplace_back(n, t);
  for (auto& [n, t] : clf.named_parameters()) out.emplace_back(n, t);
  return out;
}

// ---- checkpoint ----

static constexpr char kCkptMagic[8] = {'P', 'L', 'F', 'C', 'K', 'P', 'T', '1'};

void save_checkpoint(const std::filesystem::path& file, const std::string& meta_json,
                     const std::vector<std::pair<std::string, Tensor>>& params,
                     const std::vector<std::pair<std::string, std::vector<double>>>& buffers) {
  json header;
  header["meta"] = json::parse(meta_json.empty() ? "{}" : meta_json);
  json jp = json::array(), jb = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    jp.push_back({{"name", name},
                  {"shape", t.shape()},
                  {"offset", offset},
                  {"count", t.data().size()}});
    offset += t.data().size();
  }
  for (const auto& [name, v] : buffers) {
    jb.push_back({{"name", name}, {"offset", offset}, {"count", v.size()}});
    offset += v.size();
  }
  header["params"] = jp;
  header["buffers"] = jb;
  const std::string htext = header.dump();

  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write(kCkptMagic, 8);
  uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), std::streamsize(htext.size()));
  for (const auto& [name, t] : params)
    out.write(reinterpret_cast<const char*>(t.data().data()),
              std::streamsize(t.data().size() * sizeof(double)));
  for (const auto& [name, v] : buffers)
    out.write(reinterpret_cast<const char*>(v.data()),
              std::streamsize(v.size() * sizeof(double)));
}

const std::vector<double>& LoadedCheckpoint::buffer(const std::string& name) const {
  for (const auto& [n, v] : buffers)
    if (n == name) return v;
  throw std::runtime_error("checkpoint has no buffer " + name);
}

void LoadedCheckpoint::load_into(std::vector<std::pair<std::string, Tensor>> dest) const {
  if (dest.size() != params.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (size_t i = 0; i < dest.size(); i++) {
    if (dest[i].first != params[i].first)
      throw std::runtime_error("checkpoint parameter name mismatch: " + dest[i].first +
                               " vs " + params[i].first);
    if (dest[i].second.shape() != params[i].second.first)
      throw std::runtime_error("checkpoint shape mismatch for " + dest[i].first);
    dest[i].second.data() = params[i].second.second;
  }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint magic in " + file.string());
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  json header = json::parse(htext);

  LoadedCheckpoint out;
  out.meta_json = header.at("meta").dump();
  std::vector<std::pair<uint64_t, uint64_t>> spans;
  for (const auto& jp : header.at("params")) {
    out.params.push_back({jp.at("name").get<std::string>(),
                          {jp.at("shape").get<std::vector<int>>(), {}}});
    spans.emplace_back(jp.at("offset").get<uint64_t>(), jp.at("count").get<uint64_t>());
  }
  std::vector<std::pair<uint64_t, uint64_t>> bspans;
  for (const auto& jb : header.at("buffers")) {
    out.buffers.push_back({jb.at("name").get<std::string>(), {}});
    bspans.emplace_back(jb.at("offset").get<uint64_t>(), jb.at("count").get<uint64_t>());
  }
  for (size_t i = 0; i < out.params.size(); i++) {
    out.params[i].second.second.resize(spans[i].second);
    in.read(reinterpret_cast<char*>(out.params[i].second.second.data()),
            std::streamsize(spans[i].second * sizeof(double)));
  }
  for (size_t i = 0; i < out.buffers.size(); i++) {
    out.buffers[i].second.resize(bspans[i].second);
    in.read(reinterpret_cast<char*>(out.buffers[i].second.data()),
            std::streamsize(bspans[i].second * sizeof(double)));
  }
  if (!in) throw std::runtime_error("checkpoint truncated: " + file.string());
  return out;
}

}  // namespace pllforge
