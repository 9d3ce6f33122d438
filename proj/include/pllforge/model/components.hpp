#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pllforge/autodiff/tensor.hpp"
#include "pllforge/core/types.hpp"
#include "pllforge/model/backbone.hpp"

namespace pllforge {

// Low-rank bilinear pooling of an instance embedding with a class embedding:
//   out = P^T(tanh((U^T phi) (.) (V^T e_j))) + b
class SemanticDecoupler {
 public:
  SemanticDecoupler() = default;
  SemanticDecoupler(int embed_dim, int class_embed_dim, int rank, int out_dim, Rng& rng);

  // phi: [B, E]; class_embed: vector of length class_embed_dim. Returns [B, D].
  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& phi,
                     const std::vector<double>& class_embed) const;

  int out_dim() const { return out_dim_; }
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;

 private:
  int out_dim_ = 0;
  ad::Tensor u_, v_, p_, b_;
};

// A[j][k] = co-occurrences of j and k divided by occurrences of j, over the
// train-split candidate sets. Rows of absent classes stay zero.
Matrix build_cooccurrence_adjacency(const PartialDataset& ds);

// Gated graph propagation over per-class representations with a fixed
// adjacency. Synchronous GRU-style update, iterated a fixed number of times.
class GatedGraphPropagator {
 public:
  GatedGraphPropagator() = default;
  GatedGraphPropagator(int dim, Matrix adjacency, int iterations, Rng& rng);

  // h: one [B, D] tensor per class. Returns the propagated stack.
  std::vector<ad::Tensor> forward(ad::Tape& tape, const std::vector<ad::Tensor>& h) const;

  const Matrix& adjacency() const { return adj_; }
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;

 private:
  Matrix adj_;
  int iterations_ = 3;
  ad::Tensor wz_, uz_, bz_, wr_, ur_, br_, wh_, uh_, bh_;
};

// Additive attention with a single learned score vector.
class AttentionFusion {
 public:
  AttentionFusion() = default;
  AttentionFusion(int embed_dim, int attn_dim, Rng& rng);

  // phi_b = sum_x alpha_x phi_x + phi_b_hat, alpha = softmax over branches.
  ad::Tensor fuse(ad::Tape& tape, const ad::Tensor& phi_b_hat,
                  const std::vector<ad::Tensor>& branches) const;
  // Same combination with caller-supplied weights [B, n]; lets tests pin alpha.
  static ad::Tensor fuse_with_weights(ad::Tape& tape, const ad::Tensor& phi_b_hat,
                                      const std::vector<ad::Tensor>& branches,
                                      const ad::Tensor& weights);

  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;

 private:
  ad::Tensor wq_, wk_, v_;
};

// Cosine-style classifier whose weight vector per class is split into q
// groups: z_c = (rho/q) sum_k w_{k,c}.phi_k / ((|w_{k,c}| + eta) |phi_k|).
class MultiheadClassifier {
 public:
  MultiheadClassifier() = default;
  MultiheadClassifier(int embed_dim, int num_classes, int groups, double rho,
                      double eta, Rng& rng);

  ad::Tensor logits(ad::Tape& tape, const ad::Tensor& phi) const;
  // z +/- (rho/q) sum_k sim(z, e) * e_c / (|w_{k,c}| + eta). e lives in class
  // space; sign +1 for the head expert, -1 for the tail expert.
  ad::Tensor bias_adjust(ad::Tape& tape, const ad::Tensor& z,
                         const std::vector<double>& e, double sign) const;

  int groups() const { return q_; }
  double rho() const { return rho_; }
  double eta() const { return eta_; }
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;

 private:
  ad::Tensor w_;  // [C, E]
  int q_ = 1;
  double rho_ = 1.0, eta_ = 0.1;
};

// Three parallel backbones with attention fusion into the balanced branch and
// a shared multihead classifier.
struct TripleModelEnsemble {
  Backbone head_expert, tail_expert, balanced;
  AttentionFusion attn;
  MultiheadClassifier clf;

  TripleModelEnsemble() = default;
  TripleModelEnsemble(const BackboneConfig& cfg, int groups, double rho, double eta,
                      Rng& rng);

  struct Output {
    ad::Tensor z_h, z_t, z_b;        // logits per branch
    ad::Tensor phi_h, phi_t, phi_b;  // embeddings (phi_b after fusion)
  };
  Output forward(ad::Tape& tape, const ad::Tensor& x, bool training);

  std::vector<std::pair<std::string, ad::Tensor>> named_parameters();
};

// Checkpoint file: magic, little-endian JSON header length, JSON header with
// per-tensor offsets, then a flat little-endian float64 blob.
struct Checkpoint {
  std::string meta_json;
  std::vector<std::pair<std::string, ad::Tensor>> params;
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
};
void save_checkpoint(const std::filesystem::path& file, const std::string& meta_json,
                     const std::vector<std::pair<std::string, ad::Tensor>>& params,
                     const std::vector<std::pair<std::string, std::vector<double>>>& buffers);
struct LoadedCheckpoint {
  std::string meta_json;
  std::vector<std::pair<std::string, std::pair<std::vector<int>, std::vector<double>>>> params;
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
  const std::vector<double>& buffer(const std::string& name) const;
  void load_into(std::vector<std::pair<std::string, ad::Tensor>> dest) const;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace pllforge
