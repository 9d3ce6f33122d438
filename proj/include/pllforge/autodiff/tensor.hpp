#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pllforge/core/rng.hpp"

namespace pllforge::ad {

// Inputs to log and divisions are clamped here; several candidate-label
// losses take log of model outputs that can underflow.
inline constexpr double kLogClamp = 1e-12;

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward / ensure_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // null for leaves

  int64_t size() const {
    int64_t s = 1;
    for (int d : shape) s *= d;
    return s;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

// Value-semantics handle to a graph node. float64 throughout: desk-scale
// nets are tiny and gradient-check fidelity wins over speed.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(std::vector<int> shape, std::vector<double> data);
  static Tensor param(std::vector<int> shape, std::vector<double> data);
  static Tensor scalar(double v) { return leaf({}, {v}); }
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                      bool requires_grad = true);

  bool defined() const { return bool(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return int(n_->shape.size()); }
  int dim(int i) const { return n_->shape.at(i); }
  int64_t size() const { return n_->size(); }
  std::vector<double>& data() { return n_->value; }
  const std::vector<double>& data() const { return n_->value; }
  std::vector<double>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<double>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }
  bool requires_grad() const { return n_->requires_grad; }
  double item() const;
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }
  // Leaf copy of the current value, cut off from the graph.
  Tensor detach() const { return leaf(n_->shape, n_->value); }

  std::shared_ptr<Node> node() const { return n_; }
  Node* raw() const { return n_.get(); }

  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node> n_;
};

// Ordered record of operations. Backward walks the record in reverse, which
// is a topological order by construction, and visits each node exactly once.
// A tape and its tensors belong to one thread of execution.
class Tape {
 public:
  Tensor record(std::vector<int> shape, std::vector<double> value,
                std::vector<Tensor> parents, std::function<void(Node&)> backprop);

  // loss must be a scalar recorded on this tape (or a leaf, which is a no-op).
  void backward(const Tensor& loss);
  void reset();
  size_t num_ops() const { return ops_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  std::vector<std::shared_ptr<Node>> ops_;
  bool backward_done_ = false;
};

// ---- forward ops ----
// Elementwise binaries accept b with the same shape as a, or with a shape
// that is a trailing suffix of a's (b is repeated over the leading dims).
// No other broadcasting; reshape explicitly.
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor neg(Tape& t, const Tensor& a);
Tensor scale(Tape& t, const Tensor& a, double c);
Tensor add_const(Tape& t, const Tensor& a, double c);
// y[i, ...] = a[i, ...] * r[i], r indexed by the first axis.
Tensor scale_rows(Tape& t, const Tensor& a, const Tensor& r);

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& t, const Tensor& a);  // 2-D
Tensor conv1d(Tape& t, const Tensor& x, const Tensor& w,
              const std::optional<Tensor>& bias, int stride, int pad);

Tensor relu(Tape& t, const Tensor& a);
Tensor sigmoid(Tape& t, const Tensor& a);
Tensor tanh_(Tape& t, const Tensor& a);
Tensor exp_(Tape& t, const Tensor& a);
Tensor log_(Tape& t, const Tensor& a);   // log(max(x, kLogClamp))
Tensor sqrt_(Tape& t, const Tensor& a);  // sqrt(max(x, 0))
Tensor recip(Tape& t, const Tensor& a);  // 1 / max(x, kLogClamp)
Tensor softplus(Tape& t, const Tensor& a);
Tensor pow_const(Tape& t, const Tensor& a, double p);

Tensor softmax(Tape& t, const Tensor& a);      // over the last axis
Tensor log_softmax(Tape& t, const Tensor& a);  // over the last axis

Tensor sum(Tape& t, const Tensor& a);
Tensor mean(Tape& t, const Tensor& a);
Tensor sum_last(Tape& t, const Tensor& a);
Tensor broadcast_last(Tape& t, const Tensor& a, int n);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  void init(int channels) {
    running_mean.assign(channels, 0.0);
    running_var.assign(channels, 1.0);
  }
};
// x is [B,F] (normalized over B) or [B,C,L] (normalized over B and L).
Tensor batchnorm(Tape& t, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool training);

// sum_i p_i * (log p_i - log q_i); entries with p_i <= 0 contribute zero.
Tensor kl_div(Tape& t, const Tensor& p, const Tensor& q);

Tensor concat(Tape& t, const std::vector<Tensor>& parts, int axis);
Tensor slice(Tape& t, const Tensor& a, int axis, int start, int end);
Tensor reshape(Tape& t, const Tensor& a, std::vector<int> shape);

// Central finite differences (step h) for every entry of every parameter
// against the analytic gradient of f. Returns the max of
// |analytic - numeric| / max(1, |analytic|, |numeric|).
double grad_check(const std::function<Tensor(Tape&, std::vector<Tensor>&)>& f,
                  std::vector<Tensor>& params, double h = 1e-5);

std::string shape_str(const std::vector<int>& s);

}  // namespace pllforge::ad
