#include "pllforge/autodiff/kernels.hpp"

#include <atomic>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pllforge::kernels {

namespace {
std::atomic<bool> g_parallel{true};
std::atomic<int> g_threads{0};

inline int effective_threads() {
#ifdef _OPENMP
  int n = g_threads.load();
  return n > 0 ? n : omp_get_max_threads();
#else
  return 1;
#endif
}
}  // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() {
#ifdef _OPENMP
  return g_parallel.load();
#else
  return false;
#endif
}
void set_threads(int n) { g_threads.store(n); }
int threads() { return effective_threads(); }

void matmul_serial(const double* a, const double* b, double* y, int m, int k, int n) {
  for (int i = 0; i < m; i++) {
    double* yrow = y + size_t(i) * n;
    for (int j = 0; j < n; j++) yrow[j] = 0.0;
    const double* arow = a + size_t(i) * k;
    for (int t = 0; t < k; t++) {
      const double av = arow[t];
      const double* brow = b + size_t(t) * n;
      for (int j = 0; j < n; j++) yrow[j] += av * brow[j];
    }
  }
}

void matmul_parallel(const double* a, const double* b, double* y, int m, int k, int n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(effective_threads())
  for (int i = 0; i < m; i++)
    matmul_serial(a + size_t(i) * k, b, y + size_t(i) * n, 1, k, n);
#else
  matmul_serial(a, b, y, m, k, n);
#endif
}

void matmul(const double* a, const double* b, double* y, int m, int k, int n) {
  // Parallel dispatch only when the work amortizes thread startup.
  if (parallel_enabled() && m > 1 && size_t(m) * k * n >= 1u << 15)
    matmul_parallel(a, b, y, m, k, n);
  else
    matmul_serial(a, b, y, m, k, n);
}

static inline void conv1d_one(const double* x, const double* w, const double* bias,
                              double* y, int cin, int len, int cout, int ksize,
                              int stride, int pad, int b, int oc, int t) {
  const int lout = conv1d_out_len(len, ksize, stride, pad);
  double acc = bias ? bias[oc] : 0.0;
  const int start = t * stride - pad;
  for (int ic = 0; ic < cin; ic++) {
    const double* xrow = x + (size_t(b) * cin + ic) * len;
    const double* wrow = w + (size_t(oc) * cin + ic) * ksize;
    for (int kk = 0; kk < ksize; kk++) {
      const int src = start + kk;
      if (src >= 0 && src < len) acc += wrow[kk] * xrow[src];
    }
  }
  y[(size_t(b) * cout + oc) * lout + t] = acc;
}

void conv1d_serial(const double* x, const double* w, const double* bias, double* y,
                   int batch, int cin, int len, int cout, int ksize, int stride, int pad) {
  const int lout = conv1d_out_len(len, ksize, stride, pad);
  for (int b = 0; b < batch; b++)
    for (int oc = 0; oc < cout; oc++)
      for (int t = 0; t < lout; t++)
        conv1d_one(x, w, bias, y, cin, len, cout, ksize, stride, pad, b, oc, t);
}

void conv1d_parallel(const double* x, const double* w, const double* bias, double* y,
                     int batch, int cin, int len, int cout, int ksize, int stride, int pad) {
#ifdef _OPENMP
  const int lout = conv1d_out_len(len, ksize, stride, pad);
  const long total = long(batch) * cout * lout;
#pragma omp parallel for schedule(static) num_threads(effective_threads())
  for (long idx = 0; idx < total; idx++) {
    const int t = int(idx % lout);
    const int oc = int((idx / lout) % cout);
    const int b = int(idx / (long(lout) * cout));
    conv1d_one(x, w, bias, y, cin, len, cout, ksize, stride, pad, b, oc, t);
  }
#else
  conv1d_serial(x, w, bias, y, batch, cin, len, cout, ksize, stride, pad);
#endif
}

void conv1d(const double* x, const double* w, const double* bias, double* y,
            int batch, int cin, int len, int cout, int ksize, int stride, int pad) {
  const long total = long(batch) * cout * conv1d_out_len(len, ksize, stride, pad);
  if (parallel_enabled() && total * cin * ksize >= 1 << 15)
    conv1d_parallel(x, w, bias, y, batch, cin, len, cout, ksize, stride, pad);
  else
    conv1d_serial(x, w, bias, y, batch, cin, len, cout, ksize, stride, pad);
}

static inline void conv1d_dx_one(const double* dy, const double* w, double* dx,
                                 int cin, int len, int cout, int ksize, int stride,
                                 int pad, int lout, int b, int ic, int l) {
  // dx[b,ic,l] = sum over (oc, k) with t*stride - pad + k == l
  double acc = 0.0;
  for (int oc = 0; oc < cout; oc++) {
    const double* dyrow = dy + (size_t(b) * cout + oc) * lout;
    const double* wrow = w + (size_t(oc) * cin + ic) * ksize;
    for (int kk = 0; kk < ksize; kk++) {
      const int num = l + pad - kk;
      if (num < 0 || num % stride != 0) continue;
      const int t = num / stride;
      if (t >= 0 && t < lout) acc += wrow[kk] * dyrow[t];
    }
  }
  dx[(size_t(b) * cin + ic) * len + l] = acc;
}

void conv1d_grad_input_serial(const double* dy, const double* w, double* dx,
                              int batch, int cin, int len, int cout, int ksize,
                              int stride, int pad) {
  const int lout = conv1d_out_len(len, ksize, stride, pad);
  for (int b = 0; b < batch; b++)
    for (int ic = 0; ic < cin; ic++)
      for (int l = 0; l < len; l++)
        conv1d_dx_one(dy, w, dx, cin, len, cout, ksize, stride, pad, lout, b, ic, l);
}

void conv1d_grad_input_parallel(const double* dy, const double* w, double* dx,
                                int batch, int cin, int len, int cout, int ksize,
                                int stride, int pad) {
#ifdef _OPENMP
  const int lout = conv1d_out_len(len, ksize, stride, pad);
  const long total = long(batch) * cin * len;
#pragma omp parallel for schedule(static) num_threads(effective_threads())
  for (long idx = 0; idx < total; idx++) {
    const int l = int(idx % len);
    const int ic = int((idx / len) % cin);
    const int b = int(idx / (long(len) * cin));
    conv1d_dx_one(dy, w, dx, cin, len, cout, ksize, stride, pad, lout, b, ic, l);
  }
#else
  conv1d_grad_input_serial(dy, w, dx, batch, cin, len, cout, ksize, stride, pad);
#endif
}

void conv1d_grad_input(const double* dy, const double* w, double* dx,
                       int batch, int cin, int len, int cout, int ksize,
                       int stride, int pad) {
  const long total = long(batch) * cin * len;
  if (parallel_enabled() && total * cout * ksize >= 1 << 15)
    conv1d_grad_input_parallel(dy, w, dx, batch, cin, len, cout, ksize, stride, pad);
  else
    conv1d_grad_input_serial(dy, w, dx, batch, cin, len, cout, ksize, stride, pad);
}

static inline double conv1d_dw_one(const double* dy, const double* x, int cin, int len,
                                   int cout, int ksize, int stride, int pad, int lout,
                                   int batch, int oc, int ic, int kk) {
  double acc = 0.0;
  for (int b = 0; b < batch; b++) {
    const double* dyrow = dy + (size_t(b) * cout + oc) * lout;
    const double* xrow = x + (size_t(b) * cin + ic) * len;
    for (int t = 0; t < lout; t++) {
      const int src = t * stride - pad + kk;
      if (src >= 0 && src < len) acc += dyrow[t] * xrow[src];
    }
  }
  (void)ksize;
  return acc;
}

void conv1d_grad_weight_serial(const double* dy, const double* x, double* dw, double* db,
                               int batch, int cin, int len, int cout, int ksize,
                               int stride, int pad) {
  const int lout = conv1d_out_len(len, ksize, stride, pad);
  for (int oc = 0; oc < cout; oc++) {
    for (int ic = 0; ic < cin; ic++)
      for (int kk = 0; kk < ksize; kk++)
        dw[(size_t(oc) * cin + ic) * ksize + kk] =
            conv1d_dw_one(dy, x, cin, len, cout, ksize, stride, pad, lout, batch, oc, ic, kk);
    if (db) {
      double acc = 0.0;
      for (int b = 0; b < batch; b++) {
        const double* dyrow = dy + (size_t(b) * cout + oc) * lout;
        for (int t = 0; t < lout; t++) acc += dyrow[t];
      }
      db[oc] = acc;
    }
  }
}

void conv1d_grad_weight_parallel(const double* dy, const double* x, double* dw, double* db,
                                 int batch, int cin, int len, int cout, int ksize,
                                 int stride, int pad) {
#ifdef _OPENMP
  const int lout = conv1d_out_len(len, ksize, stride, pad);
  const long total = long(cout) * cin * ksize;
#pragma omp parallel for schedule(static) num_threads(effective_threads())
  for (long idx = 0; idx < total; idx++) {
    const int kk = int(idx % ksize);
    const int ic = int((idx / ksize) % cin);
    const int oc = int(idx / (long(ksize) * cin));
    dw[idx] = conv1d_dw_one(dy, x, cin, len, cout, ksize, stride, pad, lout, batch, oc, ic, kk);
  }
  if (db) {
#pragma omp parallel for schedule(static) num_threads(effective_threads())
    for (int oc = 0; oc < cout; oc++) {
      double acc = 0.0;
      for (int b = 0; b < batch; b++) {
        const double* dyrow = dy + (size_t(b) * cout + oc) * lout;
        for (int t = 0; t < lout; t++) acc += dyrow[t];
      }
      db[oc] = acc;
    }
  }
#else
  conv1d_grad_weight_serial(dy, x, dw, db, batch, cin, len, cout, ksize, stride, pad);
#endif
}

void conv1d_grad_weight(const double* dy, const double* x, double* dw, double* db,
                        int batch, int cin, int len, int cout, int ksize,
                        int stride, int pad) {
  const long total = long(cout) * cin * ksize;
  if (parallel_enabled() &&
      total * batch * conv1d_out_len(len, ksize, stride, pad) >= 1 << 15)
    conv1d_grad_weight_parallel(dy, x, dw, db, batch, cin, len, cout, ksize, stride, pad);
  else
    conv1d_grad_weight_serial(dy, x, dw, db, batch, cin, len, cout, ksize, stride, pad);
}

}  // namespace pllforge::kernels
