#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pllforge/autodiff/tensor.hpp"
#include "pllforge/core/rng.hpp"

namespace pllforge {

struct BackboneConfig {
  enum class Variant { Linear, Mlp, SmallResNet1D };
  Variant variant = Variant::Mlp;
  int leads = 1;
  int length = 64;
  std::vector<int> hidden = {64};  // MLP only
  int blocks = 4;                  // SmallResNet1D only
  int base_channels = 8;           // SmallResNet1D only
  int embedding_dim = 16;
  int num_classes = 2;

  void validate() const;
  std::string variant_name() const;
  static Variant variant_from_name(const std::string& name);
};

// Produces an embedding phi(x) in R^E and logits f(x;theta) in R^C.
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, Rng& rng);

  struct Output {
    ad::Tensor embedding;  // [B, E]
    ad::Tensor logits;     // [B, C]
  };
  // x is [B, leads, length].
  Output forward(ad::Tape& tape, const ad::Tensor& x, bool training);

  const BackboneConfig& config() const { return cfg_; }
  std::vector<ad::Tensor> parameters();
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters();
  std::vector<ad::BatchNormState>& bn_states() { return bn_states_; }

  // Gradient-free value copy with the same architecture (momentum shadows).
  Backbone clone_detached() const;
  void copy_values_from(const Backbone& other);

 private:
  BackboneConfig cfg_;
  std::vector<std::pair<std::string, ad::Tensor>> params_;
  std::vector<ad::BatchNormState> bn_states_;

  ad::Tensor p(const std::string& name) const;
};

// Shadow copy g' of an online encoder g; after update every shadow parameter
// equals m * old + (1 - m) * online.
class MomentumEncoder {
 public:
  MomentumEncoder() = default;
  MomentumEncoder(const Backbone& online, double momentum);

  void update(Backbone& online);
  Backbone& shadow() { return shadow_; }
  double momentum() const { return momentum_; }

 private:
  Backbone shadow_;
  double momentum_ = 0.99;
};

}  // namespace pllforge
