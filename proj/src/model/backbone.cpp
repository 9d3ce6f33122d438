#include "pllforge/model/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace pllforge {

using ad::Tensor;

void BackboneConfig::validate() const {
  if (embedding_dim < 1) throw std::invalid_argument("embedding_dim must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (leads < 1 || length < 1) throw std::invalid_argument("bad input shape");
  if (variant == Variant::SmallResNet1D && blocks < 1)
    throw std::invalid_argument("SmallResNet1D needs blocks >= 1");
}

std::string BackboneConfig::variant_name() const {
  switch (variant) {
    case Variant::Linear: return "linear";
    case Variant::Mlp: return "mlp";
    case Variant::SmallResNet1D: return "resnet1d";
  }
  return "?";
}

BackboneConfig::Variant BackboneConfig::variant_from_name(const std::string& name) {
  if (name == "linear") return Variant::Linear;
  if (name == "mlp") return Variant::Mlp;
  if (name == "resnet1d") return Variant::SmallResNet1D;
  throw std::invalid_argument("unknown backbone variant: " + name);
}

static Tensor make_weight(std::vector<int> shape, int fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
}

Backbone::Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int in = cfg.leads * cfg.length;
  const int E = cfg.embedding_dim;
  const int C = cfg.num_classes;

  switch (cfg.variant) {
    case BackboneConfig::Variant::Linear: {
      params_.emplace_back("emb.w", make_weight({in, E}, in, rng));
      params_.emplace_back("emb.b", Tensor::zeros({E}, true));
      break;
    }
    case BackboneConfig::Variant::Mlp: {
      int prev = in;
      for (size_t i = 0; i < cfg.hidden.size(); i++) {
        const std::string tag = "fc" + std::to_string(i);
        params_.emplace_back(tag + ".w", make_weight({prev, cfg.hidden[i]}, prev, rng));
        params_.emplace_back(tag + ".b", Tensor::zeros({cfg.hidden[i]}, true));
        prev = cfg.hidden[i];
      }
      params_.emplace_back("emb.w", make_weight({prev, E}, prev, rng));
      params_.emplace_back("emb.b", Tensor::zeros({E}, true));
      break;
    }
    case BackboneConfig::Variant::SmallResNet1D: {
      int ch = cfg.base_channels;
      params_.emplace_back("stem.w", make_weight({ch, cfg.leads, 5}, cfg.leads * 5, rng));
      params_.emplace_back("stem.b", Tensor::zeros({ch}, true));
      params_.emplace_back("stem.bn.g", Tensor::full({ch}, 1.0, true));
      params_.emplace_back("stem.bn.b", Tensor::zeros({ch}, true));
      bn_states_.emplace_back();
      int prev = ch;
      for (int i = 0; i < cfg.blocks; i++) {
        const int out = cfg.base_channels << std::min(i, 3);
        const std::string tag = "block" + std::to_string(i);
        params_.emplace_back(tag + ".conv1.w", make_weight({out, prev, 3}, prev * 3, rng));
        params_.emplace_back(tag + ".bn1.g", Tensor::full({out}, 1.0, true));
        params_.emplace_back(tag + ".bn1.b", Tensor::zeros({out}, true));
        params_.emplace_back(tag + ".conv2.w", make_weight({out, out, 3}, out * 3, rng));
        params_.emplace_back(tag + ".bn2.g", Tensor::full({out}, 1.0, true));
        params_.emplace_back(tag + ".bn2.b", Tensor::zeros({out}, true));
        if (prev != out || i > 0)
          params_.emplace_back(tag + ".skip.w", make_weight({out, prev, 1}, prev, rng));
        bn_states_.emplace_back();
        bn_states_.emplace_back();
        prev = out;
      }
      params_.emplace_back("emb.w", make_weight({prev, E}, prev, rng));
      params_.emplace_back("emb.b", Tensor::zeros({E}, true));
      break;
    }
  }
  params_.emplace_back("head.w",
                       Tensor::randn({E, C}, rng, 1.0 / std::sqrt(double(E))));
  params_.emplace_back("head.b", Tensor::zeros({C}, true));
}

Tensor Backbone::p(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw std::runtime_error("backbone has no parameter " + name);
}

Backbone::Output Backbone::forward(ad::Tape& tape, const Tensor& x, bool training) {
  if (x.rank() != 3 || x.dim(1) != cfg_.leads || x.dim(2) != cfg_.length)
    throw std::invalid_argument("backbone input must be [B," + std::to_string(cfg_.leads) +
                                "," + std::to_string(cfg_.length) + "], got " +
                                ad::shape_str(x.shape()));
  const int B = x.dim(0);
  Tensor emb;

  switch (cfg_.variant) {
    case BackboneConfig::Variant::Linear: {
      Tensor flat = ad::reshape(tape, x, {B, cfg_.leads * cfg_.length});
      emb = ad::add(tape, ad::matmul(tape, flat, p("emb.w")), p("emb.b"));
      break;
    }
    case BackboneConfig::Variant::Mlp: {
      Tensor h = ad::reshape(tape, x, {B, cfg_.leads * cfg_.length});
      for (size_t i = 0; i < cfg_.hidden.size(); i++) {
        const std::string tag = "fc" + std::to_string(i);
        h = ad::relu(tape, ad::add(tape, ad::matmul(tape, h, p(tag + ".w")),
                                   p(tag + ".b")));
      }
      emb = ad::add(tape, ad::matmul(tape, h, p("emb.w")), p("emb.b"));
      break;
    }
    case BackboneConfig::Variant::SmallResNet1D: {
      size_t bn = 0;
      Tensor h = ad::conv1d(tape, x, p("stem.w"), p("stem.b"), 2, 2);
      h = ad::batchnorm(tape, h, p("stem.bn.g"), p("stem.bn.b"), bn_states_[bn++],
                        training);
      h = ad::relu(tape, h);
      int prev = cfg_.base_channels;
      for (int i = 0; i < cfg_.blocks; i++) {
        const int out = cfg_.base_channels << std::min(i, 3);
        const int stride = i == 0 ? 1 : 2;
        const std::string tag = "block" + std::to_string(i);
        Tensor y = ad::conv1d(tape, h, p(tag + ".conv1.w"), std::nullopt, stride, 1);
        y = ad::batchnorm(tape, y, p(tag + ".bn1.g"), p(tag + ".bn1.b"),
                          bn_states_[bn++], training);
        y = ad::relu(tape, y);
        y = ad::conv1d(tape, y, p(tag + ".conv2.w"), std::nullopt, 1, 1);
        y = ad::batchnorm(tape, y, p(tag + ".bn2.g"), p(tag + ".bn2.b"),
                          bn_states_[bn++], training);
        Tensor skip = (prev != out || i > 0)
                          ? ad::conv1d(tape, h, p(tag + ".skip.w"), std::nullopt, stride, 0)
                          : h;
        h = ad::relu(tape, ad::add(tape, y, skip));
        prev = out;
      }
      // global average pool over length
      Tensor pooled = ad::scale(tape, ad::sum_last(tape, h), 1.0 / h.dim(2));
      emb = ad::add(tape, ad::matmul(tape, pooled, p("emb.w")), p("emb.b"));
      break;
    }
  }

  Tensor logits = ad::add(tape, ad::matmul(tape, emb, p("head.w")), p("head.b"));
  return {emb, logits};
}

std::vector<Tensor> Backbone::parameters() {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (auto& [n, t] : params_) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() {
  return params_;
}

Backbone Backbone::clone_detached() const {
  Backbone c;
  c.cfg_ = cfg_;
  for (const auto& [n, t] : params_)
    c.params_.emplace_back(n, Tensor::leaf(t.shape(), t.data()));
  c.bn_states_ = bn_states_;
  return c;
}

void Backbone::copy_values_from(const Backbone& other) {
  if (params_.size() != other.params_.size())
    throw std::runtime_error("copy_values_from: architecture mismatch");
  for (size_t i = 0; i < params_.size(); i++)
    params_[i].second.data() = other.params_[i].second.data();
  bn_states_ = other.bn_states_;
}

MomentumEncoder::MomentumEncoder(const Backbone& online, double momentum)
    : shadow_(online.clone_detached()), momentum_(momentum) {
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("momentum must be in [0, 1)");
}

void MomentumEncoder::update(Backbone& online) {
  auto sp = shadow_.named_parameters();
  auto op = online.named_parameters();
  for (size_t i = 0; i < sp.size(); i++) {
    auto& s = sp[i].second.data();
    const auto& o = op[i].second.data();
    for (size_t j = 0; j < s.size(); j++)
      s[j] = momentum_ * s[j] + (1.0 - momentum_) * o[j];
  }
  shadow_.bn_states() = online.bn_states();
}

}  // namespace pllforge
