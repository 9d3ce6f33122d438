#include "pllforge/autodiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "pllforge/autodiff/kernels.hpp"

namespace pllforge::ad {

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); i++) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

static int64_t shape_size(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

Tensor Tensor::leaf(std::vector<int> shape, std::vector<double> data) {
  if (shape_size(shape) != int64_t(data.size()))
    throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::param(std::vector<int> shape, std::vector<double> data) {
  Tensor t = leaf(std::move(shape), std::move(data));
  t.raw()->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  std::vector<double> d(size_t(shape_size(shape)), v);
  return requires_grad ? param(std::move(shape), std::move(d))
                       : leaf(std::move(shape), std::move(d));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> d(size_t(shape_size(shape)));
  for (auto& x : d) x = rng.gaussian() * stddev;
  return requires_grad ? param(std::move(shape), std::move(d))
                       : leaf(std::move(shape), std::move(d));
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
  return n_->value[0];
}

Tensor Tape::record(std::vector<int> shape, std::vector<double> value,
                    std::vector<Tensor> parents, std::function<void(Node&)> backprop) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
    ops_.push_back(n);
  }
  return Tensor(std::move(n));
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_)
    throw std::runtime_error("backward called twice on the same tape without reset");
  if (loss.size() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got " +
                                shape_str(loss.shape()));
  backward_done_ = true;
  if (!loss.requires_grad()) return;  // nothing reaches a parameter

  std::unordered_set<Node*> reachable;
  std::vector<Node*> stack{loss.raw()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!reachable.insert(n).second) continue;
    for (const auto& p : n->parents)
      if (p->requires_grad) stack.push_back(p.get());
  }

  loss.raw()->ensure_grad();
  loss.raw()->grad[0] += 1.0;

  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    Node* n = it->get();
    if (!reachable.count(n) || n->grad.empty() || !n->backprop) continue;
    n->backprop(*n);
  }
}

void Tape::reset() {
  ops_.clear();
  backward_done_ = false;
}

// ---- helpers ----

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Returns number of leading repeats if b is a trailing suffix of a, else -1.
int64_t suffix_repeats(const std::vector<int>& a, const std::vector<int>& b) {
  if (b.size() > a.size()) return -1;
  size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); i++)
    if (a[off + i] != b[i]) return -1;
  int64_t rep = 1;
  for (size_t i = 0; i < off; i++) rep *= a[i];
  return rep;
}

Tensor binary_bcast(Tape& t, const Tensor& a, const Tensor& b, const char* name,
                    double (*fwd)(double, double),
                    double (*dfa)(double, double),
                    double (*dfb)(double, double)) {
  int64_t rep = suffix_repeats(a.shape(), b.shape());
  if (rep < 0)
    throw std::invalid_argument(std::string(name) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  const size_t bn = bv.size();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = fwd(av[i], bv[i % bn]);
  return t.record(a.shape(), std::move(y), {a, b}, [bn, dfa, dfb](Node& out) {
    Node* A = out.parents[0].get();
    Node* B = out.parents[1].get();
    if (A->requires_grad) {
      A->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); i++)
        A->grad[i] += out.grad[i] * dfa(A->value[i], B->value[i % bn]);
    }
    if (B->requires_grad) {
      B->ensure_grad();
      for (size_t i = 0; i < out.grad.size(); i++)
        B->grad[i % bn] += out.grad[i] * dfb(A->value[i], B->value[i % bn]);
    }
  });
}

Tensor unary(Tape& t, const Tensor& a, double (*fwd)(double), double (*dfdx)(double)) {
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = fwd(av[i]);
  return t.record(a.shape(), std::move(y), {a}, [dfdx](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++)
      A->grad[i] += out.grad[i] * dfdx(A->value[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- elementwise ----

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  return binary_bcast(
      t, a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  return binary_bcast(
      t, a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  return binary_bcast(
      t, a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor neg(Tape& t, const Tensor& a) { return scale(t, a, -1.0); }

Tensor scale(Tape& t, const Tensor& a, double c) {
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = av[i] * c;
  return t.record(a.shape(), std::move(y), {a}, [c](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++) A->grad[i] += out.grad[i] * c;
  });
}

Tensor add_const(Tape& t, const Tensor& a, double c) {
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = av[i] + c;
  return t.record(a.shape(), std::move(y), {a}, [](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++) A->grad[i] += out.grad[i];
  });
}

Tensor scale_rows(Tape& t, const Tensor& a, const Tensor& r) {
  if (a.rank() < 1 || r.rank() != 1 || r.dim(0) != a.dim(0))
    throw std::invalid_argument("scale_rows: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(r.shape()));
  const int64_t rows = a.dim(0);
  const int64_t inner = a.size() / rows;
  const auto& av = a.data();
  const auto& rv = r.data();
  std::vector<double> y(av.size());
  for (int64_t i = 0; i < rows; i++)
    for (int64_t j = 0; j < inner; j++) y[i * inner + j] = av[i * inner + j] * rv[i];
  return t.record(a.shape(), std::move(y), {a, r}, [rows, inner](Node& out) {
    Node* A = out.parents[0].get();
    Node* R = out.parents[1].get();
    if (A->requires_grad) {
      A->ensure_grad();
      for (int64_t i = 0; i < rows; i++)
        for (int64_t j = 0; j < inner; j++)
          A->grad[i * inner + j] += out.grad[i * inner + j] * R->value[i];
    }
    if (R->requires_grad) {
      R->ensure_grad();
      for (int64_t i = 0; i < rows; i++) {
        double acc = 0;
        for (int64_t j = 0; j < inner; j++)
          acc += out.grad[i * inner + j] * A->value[i * inner + j];
        R->grad[i] += acc;
      }
    }
  });
}

// ---- linear algebra ----

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(size_t(m) * n);
  kernels::matmul(a.data().data(), b.data().data(), y.data(), m, k, n);
  return t.record({m, n}, std::move(y), {a, b}, [m, k, n](Node& out) {
    Node* A = out.parents[0].get();
    Node* B = out.parents[1].get();
    if (A->requires_grad) {
      A->ensure_grad();
      // dA = dY * B^T
      std::vector<double> bt(size_t(n) * k);
      for (int i = 0; i < k; i++)
        for (int j = 0; j < n; j++) bt[size_t(j) * k + i] = B->value[size_t(i) * n + j];
      std::vector<double> da(size_t(m) * k);
      kernels::matmul(out.grad.data(), bt.data(), da.data(), m, n, k);
      for (size_t i = 0; i < da.size(); i++) A->grad[i] += da[i];
    }
    if (B->requires_grad) {
      B->ensure_grad();
      // dB = A^T * dY
      std::vector<double> at(size_t(k) * m);
      for (int i = 0; i < m; i++)
        for (int j = 0; j < k; j++) at[size_t(j) * m + i] = A->value[size_t(i) * k + j];
      std::vector<double> db(size_t(k) * n);
      kernels::matmul(at.data(), out.grad.data(), db.data(), k, m, n);
      for (size_t i = 0; i < db.size(); i++) B->grad[i] += db[i];
    }
  });
}

Tensor transpose(Tape& t, const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expects rank 2");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> y(size_t(m) * n);
  const auto& av = a.data();
  for (int i = 0; i < m; i++)
    for (int j = 0; j < n; j++) y[size_t(j) * m + i] = av[size_t(i) * n + j];
  return t.record({n, m}, std::move(y), {a}, [m, n](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (int i = 0; i < m; i++)
      for (int j = 0; j < n; j++) A->grad[size_t(i) * n + j] += out.grad[size_t(j) * m + i];
  });
}

Tensor conv1d(Tape& t, const Tensor& x, const Tensor& w,
              const std::optional<Tensor>& bias, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1))
    throw std::invalid_argument("conv1d: shape mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(w.shape()));
  const int batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const int cout = w.dim(0), ksize = w.dim(2);
  if (bias && (bias->rank() != 1 || bias->dim(0) != cout))
    throw std::invalid_argument("conv1d: bias shape mismatch " + shape_str(bias->shape()));
  if (stride < 1 || pad < 0 || len + 2 * pad < ksize)
    throw std::invalid_argument("conv1d: invalid stride/pad/kernel for length " +
                                std::to_string(len));
  const int lout = kernels::conv1d_out_len(len, ksize, stride, pad);
  std::vector<double> y(size_t(batch) * cout * lout);
  kernels::conv1d(x.data().data(), w.data().data(), bias ? bias->data().data() : nullptr,
                  y.data(), batch, cin, len, cout, ksize, stride, pad);
  std::vector<Tensor> parents{x, w};
  if (bias) parents.push_back(*bias);
  return t.record(
      {batch, cout, lout}, std::move(y), std::move(parents),
      [batch, cin, len, cout, ksize, stride, pad, lout, has_bias = bool(bias)](Node& out) {
        Node* X = out.parents[0].get();
        Node* W = out.parents[1].get();
        if (X->requires_grad) {
          X->ensure_grad();
          std::vector<double> dx(X->value.size());
          kernels::conv1d_grad_input(out.grad.data(), W->value.data(), dx.data(), batch,
                                     cin, len, cout, ksize, stride, pad);
          for (size_t i = 0; i < dx.size(); i++) X->grad[i] += dx[i];
        }
        std::vector<double> db(has_bias ? size_t(cout) : 0);
        if (W->requires_grad) {
          W->ensure_grad();
          std::vector<double> dw(W->value.size());
          kernels::conv1d_grad_weight(out.grad.data(), X->value.data(), dw.data(),
                                      has_bias ? db.data() : nullptr, batch, cin, len,
                                      cout, ksize, stride, pad);
          for (size_t i = 0; i < dw.size(); i++) W->grad[i] += dw[i];
        }
        if (has_bias) {
          Node* B = out.parents[2].get();
          if (B->requires_grad) {
            B->ensure_grad();
            if (!W->requires_grad) {
              // weight grad skipped above; recompute just the bias part
              for (int oc = 0; oc < cout; oc++) {
                double acc = 0;
                for (int b = 0; b < batch; b++)
                  for (int tt = 0; tt < lout; tt++)
                    acc += out.grad[(size_t(b) * cout + oc) * lout + tt];
                db[oc] = acc;
              }
            }
            for (int oc = 0; oc < cout; oc++) B->grad[oc] += db[oc];
          }
        }
      });
}

// ---- activations / pointwise ----

Tensor relu(Tape& t, const Tensor& a) {
  return unary(
      t, a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& t, const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = stable_sigmoid(av[i]);
  return t.record(a.shape(), std::move(y), {a}, [](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++) {
      double s = out.value[i];
      A->grad[i] += out.grad[i] * s * (1.0 - s);
    }
  });
}

Tensor tanh_(Tape& t, const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = std::tanh(av[i]);
  return t.record(a.shape(), std::move(y), {a}, [](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++)
      A->grad[i] += out.grad[i] * (1.0 - out.value[i] * out.value[i]);
  });
}

Tensor exp_(Tape& t, const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = std::exp(av[i]);
  return t.record(a.shape(), std::move(y), {a}, [](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++) A->grad[i] += out.grad[i] * out.value[i];
  });
}

Tensor log_(Tape& t, const Tensor& a) {
  return unary(
      t, a, [](double x) { return std::log(std::max(x, kLogClamp)); },
      [](double x) { return x > kLogClamp ? 1.0 / x : 0.0; });
}

Tensor sqrt_(Tape& t, const Tensor& a) {
  return unary(
      t, a, [](double x) { return std::sqrt(std::max(x, 0.0)); },
      [](double x) {
        return x > 0 ? 0.5 / std::sqrt(x) : 0.0;
      });
}

Tensor recip(Tape& t, const Tensor& a) {
  return unary(
      t, a, [](double x) { return 1.0 / std::max(x, kLogClamp); },
      [](double x) {
        return x > kLogClamp ? -1.0 / (x * x) : 0.0;
      });
}

Tensor softplus(Tape& t, const Tensor& a) {
  return unary(
      t, a,
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](double x) { return stable_sigmoid(x); });
}

Tensor pow_const(Tape& t, const Tensor& a, double p) {
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (size_t i = 0; i < av.size(); i++) y[i] = std::pow(av[i], p);
  return t.record(a.shape(), std::move(y), {a}, [p](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++) {
      double x = A->value[i];
      double d = (x == 0.0 && p <= 1.0) ? (p == 1.0 ? 1.0 : 0.0) : p * std::pow(x, p - 1.0);
      A->grad[i] += out.grad[i] * d;
    }
  });
}

// ---- softmax family (over the last axis) ----

Tensor softmax(Tape& t, const Tensor& a) {
  if (a.rank() < 1) throw std::invalid_argument("softmax: expects rank >= 1");
  const int n = a.dim(a.rank() - 1);
  const int64_t rows = a.size() / n;
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (int64_t r = 0; r < rows; r++) {
    const double* in = av.data() + r * n;
    double* out = y.data() + r * n;
    double mx = in[0];
    for (int j = 1; j < n; j++) mx = std::max(mx, in[j]);
    double denom = 0;
    for (int j = 0; j < n; j++) {
      out[j] = std::exp(in[j] - mx);
      denom += out[j];
    }
    for (int j = 0; j < n; j++) out[j] /= denom;
  }
  return t.record(a.shape(), std::move(y), {a}, [n, rows](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (int64_t r = 0; r < rows; r++) {
      const double* s = out.value.data() + r * n;
      const double* g = out.grad.data() + r * n;
      double dot = 0;
      for (int j = 0; j < n; j++) dot += g[j] * s[j];
      double* da = A->grad.data() + r * n;
      for (int j = 0; j < n; j++) da[j] += s[j] * (g[j] - dot);
    }
  });
}

Tensor log_softmax(Tape& t, const Tensor& a) {
  if (a.rank() < 1) throw std::invalid_argument("log_softmax: expects rank >= 1");
  const int n = a.dim(a.rank() - 1);
  const int64_t rows = a.size() / n;
  const auto& av = a.data();
  std::vector<double> y(av.size());
  for (int64_t r = 0; r < rows; r++) {
    const double* in = av.data() + r * n;
    double* out = y.data() + r * n;
    double mx = in[0];
    for (int j = 1; j < n; j++) mx = std::max(mx, in[j]);
    double denom = 0;
    for (int j = 0; j < n; j++) denom += std::exp(in[j] - mx);
    double lse = mx + std::log(denom);
    for (int j = 0; j < n; j++) out[j] = in[j] - lse;
  }
  return t.record(a.shape(), std::move(y), {a}, [n, rows](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (int64_t r = 0; r < rows; r++) {
      const double* ls = out.value.data() + r * n;
      const double* g = out.grad.data() + r * n;
      double gsum = 0;
      for (int j = 0; j < n; j++) gsum += g[j];
      double* da = A->grad.data() + r * n;
      for (int j = 0; j < n; j++) da[j] += g[j] - std::exp(ls[j]) * gsum;
    }
  });
}

// ---- reductions ----

Tensor sum(Tape& t, const Tensor& a) {
  double acc = 0;
  for (double v : a.data()) acc += v;
  return t.record({}, {acc}, {a}, [](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < A->grad.size(); i++) A->grad[i] += out.grad[0];
  });
}

Tensor mean(Tape& t, const Tensor& a) {
  const double inv = 1.0 / double(a.size());
  double acc = 0;
  for (double v : a.data()) acc += v;
  return t.record({}, {acc * inv}, {a}, [inv](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < A->grad.size(); i++) A->grad[i] += out.grad[0] * inv;
  });
}

Tensor sum_last(Tape& t, const Tensor& a) {
  if (a.rank() < 1) throw std::invalid_argument("sum_last: expects rank >= 1");
  const int n = a.dim(a.rank() - 1);
  const int64_t rows = a.size() / n;
  std::vector<int> shape(a.shape().begin(), a.shape().end() - 1);
  const auto& av = a.data();
  std::vector<double> y(size_t(rows));
  for (int64_t r = 0; r < rows; r++) {
    double acc = 0;
    for (int j = 0; j < n; j++) acc += av[r * n + j];
    y[r] = acc;
  }
  return t.record(std::move(shape), std::move(y), {a}, [n, rows](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (int64_t r = 0; r < rows; r++)
      for (int j = 0; j < n; j++) A->grad[r * n + j] += out.grad[r];
  });
}

Tensor broadcast_last(Tape& t, const Tensor& a, int n) {
  std::vector<int> shape = a.shape();
  shape.push_back(n);
  const auto& av = a.data();
  std::vector<double> y(av.size() * n);
  for (size_t r = 0; r < av.size(); r++)
    for (int j = 0; j < n; j++) y[r * n + j] = av[r];
  return t.record(std::move(shape), std::move(y), {a}, [n](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t r = 0; r < A->grad.size(); r++)
      for (int j = 0; j < n; j++) A->grad[r] += out.grad[r * n + j];
  });
}

// ---- batchnorm ----

Tensor batchnorm(Tape& t, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool training) {
  int channels, reduce;
  int64_t total = x.size();
  if (x.rank() == 2) {
    channels = x.dim(1);
    reduce = x.dim(0);
  } else if (x.rank() == 3) {
    channels = x.dim(1);
    reduce = x.dim(0) * x.dim(2);
  } else {
    throw std::invalid_argument("batchnorm: expects rank 2 or 3, got " +
                                shape_str(x.shape()));
  }
  if (gamma.size() != channels || beta.size() != channels)
    throw std::invalid_argument("batchnorm: gamma/beta must have one entry per channel");
  if (int(state.running_mean.size()) != channels) state.init(channels);

  // index helper: channel of flat position
  const int last = x.rank() == 3 ? x.dim(2) : 1;
  auto chan_of = [channels, last](int64_t i) { return int((i / last) % channels); };

  std::vector<double> mu(channels), var(channels);
  if (training) {
    std::vector<double> cnt(channels, 0.0);
    for (int64_t i = 0; i < total; i++) {
      mu[chan_of(i)] += x.data()[i];
    }
    for (int c = 0; c < channels; c++) mu[c] /= reduce;
    for (int64_t i = 0; i < total; i++) {
      double d = x.data()[i] - mu[chan_of(i)];
      var[chan_of(i)] += d * d;
    }
    for (int c = 0; c < channels; c++) var[c] /= reduce;
    for (int c = 0; c < channels; c++) {
      state.running_mean[c] =
          (1 - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
      state.running_var[c] =
          (1 - state.momentum) * state.running_var[c] + state.momentum * var[c];
    }
    (void)cnt;
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }

  std::vector<double> istd(channels);
  for (int c = 0; c < channels; c++) istd[c] = 1.0 / std::sqrt(var[c] + state.eps);

  const auto& xv = x.data();
  std::vector<double> xhat(total), y(total);
  for (int64_t i = 0; i < total; i++) {
    int c = chan_of(i);
    xhat[i] = (xv[i] - mu[c]) * istd[c];
    y[i] = gamma.data()[c] * xhat[i] + beta.data()[c];
  }

  return t.record(
      x.shape(), std::move(y), {x, gamma, beta},
      [xhat = std::move(xhat), istd = std::move(istd), chan_of, channels, reduce,
       training, total](Node& out) {
        Node* X = out.parents[0].get();
        Node* G = out.parents[1].get();
        Node* B = out.parents[2].get();
        std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
        for (int64_t i = 0; i < total; i++) {
          int c = chan_of(i);
          sum_dy[c] += out.grad[i];
          sum_dy_xhat[c] += out.grad[i] * xhat[i];
        }
        if (G->requires_grad) {
          G->ensure_grad();
          for (int c = 0; c < channels; c++) G->grad[c] += sum_dy_xhat[c];
        }
        if (B->requires_grad) {
          B->ensure_grad();
          for (int c = 0; c < channels; c++) B->grad[c] += sum_dy[c];
        }
        if (X->requires_grad) {
          X->ensure_grad();
          if (training) {
            for (int64_t i = 0; i < total; i++) {
              int c = chan_of(i);
              X->grad[i] += G->value[c] * istd[c] *
                            (out.grad[i] - sum_dy[c] / reduce -
                             xhat[i] * sum_dy_xhat[c] / reduce);
            }
          } else {
            for (int64_t i = 0; i < total; i++) {
              int c = chan_of(i);
              X->grad[i] += out.grad[i] * G->value[c] * istd[c];
            }
          }
        }
      });
}

// ---- divergences ----

Tensor kl_div(Tape& t, const Tensor& p, const Tensor& q) {
  check_same_shape(p, q, "kl_div");
  const auto& pv = p.data();
  const auto& qv = q.data();
  double acc = 0;
  for (size_t i = 0; i < pv.size(); i++) {
    if (pv[i] <= 0) continue;
    acc += pv[i] * (std::log(std::max(pv[i], kLogClamp)) -
                    std::log(std::max(qv[i], kLogClamp)));
  }
  return t.record({}, {acc}, {p, q}, [](Node& out) {
    Node* P = out.parents[0].get();
    Node* Q = out.parents[1].get();
    const double g = out.grad[0];
    if (P->requires_grad) {
      P->ensure_grad();
      for (size_t i = 0; i < P->value.size(); i++) {
        if (P->value[i] <= kLogClamp) continue;
        P->grad[i] += g * (std::log(P->value[i]) -
                           std::log(std::max(Q->value[i], kLogClamp)) + 1.0);
      }
    }
    if (Q->requires_grad) {
      Q->ensure_grad();
      for (size_t i = 0; i < Q->value.size(); i++) {
        if (P->value[i] <= 0 || Q->value[i] <= kLogClamp) continue;
        Q->grad[i] += -g * P->value[i] / Q->value[i];
      }
    }
  });
}

// ---- shape ops ----

Tensor concat(Tape& t, const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: bad axis");
  std::vector<int> shape = parts[0].shape();
  int cat_dim = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < rank; i++)
      if (i != axis && p.dim(i) != shape[i])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) +
                                    " vs " + shape_str(shape));
    cat_dim += p.dim(axis);
  }
  shape[axis] = cat_dim;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; i++) outer *= shape[i];
  for (int i = axis + 1; i < rank; i++) inner *= shape[i];

  std::vector<double> y(size_t(outer) * cat_dim * inner);
  std::vector<int64_t> offsets;  // start of each part along the axis
  int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int pd = p.dim(axis);
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; o++)
      for (int64_t j = 0; j < pd; j++)
        for (int64_t k = 0; k < inner; k++)
          y[(o * cat_dim + off + j) * inner + k] = pv[(o * pd + j) * inner + k];
    off += pd;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return t.record(std::move(shape), std::move(y), std::move(parents),
                  [outer, inner, cat_dim, offsets, axis](Node& out) {
                    for (size_t pi = 0; pi < out.parents.size(); pi++) {
                      Node* P = out.parents[pi].get();
                      if (!P->requires_grad) continue;
                      P->ensure_grad();
                      const int pd = P->shape[axis];
                      const int64_t off = offsets[pi];
                      for (int64_t o = 0; o < outer; o++)
                        for (int64_t j = 0; j < pd; j++)
                          for (int64_t k = 0; k < inner; k++)
                            P->grad[(o * pd + j) * inner + k] +=
                                out.grad[(o * cat_dim + off + j) * inner + k];
                    }
                  });
}

Tensor slice(Tape& t, const Tensor& a, int axis, int start, int end) {
  const int rank = a.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("slice: bad axis");
  if (start < 0 || end > a.dim(axis) || start >= end)
    throw std::invalid_argument("slice: bad range [" + std::to_string(start) + "," +
                                std::to_string(end) + ") on " + shape_str(a.shape()));
  std::vector<int> shape = a.shape();
  const int ad = shape[axis];
  shape[axis] = end - start;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; i++) outer *= shape[i];
  for (int i = axis + 1; i < rank; i++) inner *= shape[i];
  const int sd = end - start;
  const auto& av = a.data();
  std::vector<double> y(size_t(outer) * sd * inner);
  for (int64_t o = 0; o < outer; o++)
    for (int j = 0; j < sd; j++)
      for (int64_t k = 0; k < inner; k++)
        y[(o * sd + j) * inner + k] = av[(o * ad + start + j) * inner + k];
  return t.record(std::move(shape), std::move(y), {a},
                  [outer, inner, sd, ad, start](Node& out) {
                    Node* A = out.parents[0].get();
                    if (!A->requires_grad) return;
                    A->ensure_grad();
                    for (int64_t o = 0; o < outer; o++)
                      for (int j = 0; j < sd; j++)
                        for (int64_t k = 0; k < inner; k++)
                          A->grad[(o * ad + start + j) * inner + k] +=
                              out.grad[(o * sd + j) * inner + k];
                  });
}

Tensor reshape(Tape& t, const Tensor& a, std::vector<int> shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape: size mismatch " + shape_str(a.shape()) +
                                " -> " + shape_str(shape));
  std::vector<double> y = a.data();
  return t.record(std::move(shape), std::move(y), {a}, [](Node& out) {
    Node* A = out.parents[0].get();
    if (!A->requires_grad) return;
    A->ensure_grad();
    for (size_t i = 0; i < out.grad.size(); i++) A->grad[i] += out.grad[i];
  });
}

// ---- gradient checking ----

double grad_check(const std::function<Tensor(Tape&, std::vector<Tensor>&)>& f,
                  std::vector<Tensor>& params, double h) {
  for (auto& p : params) p.zero_grad();
  Tape tape;
  Tensor loss = f(tape, params);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  auto eval = [&](void) {
    Tape t2;
    return f(t2, params).item();
  };

  double max_err = 0;
  for (size_t pi = 0; pi < params.size(); pi++) {
    auto& data = params[pi].data();
    for (size_t i = 0; i < data.size(); i++) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = eval();
      data[i] = keep - h;
      const double dn = eval();
      data[i] = keep;
      const double numeric = (up - dn) / (2 * h);
      const double a = analytic[pi][i];
      const double err =
          std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace pllforge::ad
