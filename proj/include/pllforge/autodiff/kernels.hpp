#pragma once

namespace pllforge::kernels {

// Parallel kernels partition work over independent output elements only, so
// the floating-point evaluation order per element is fixed and results are
// bit-identical to the serial reference at any thread count. Reductions that
// would reorder sums stay serial in the tensor layer.

void set_parallel(bool enabled);
bool parallel_enabled();
void set_threads(int n);  // 0 = library default
int threads();

// y[m x n] = a[m x k] * b[k x n]
void matmul_serial(const double* a, const double* b, double* y, int m, int k, int n);
void matmul_parallel(const double* a, const double* b, double* y, int m, int k, int n);
void matmul(const double* a, const double* b, double* y, int m, int k, int n);

// x[B x Ci x L], w[Co x Ci x K], bias[Co] or nullptr, y[B x Co x Lo]
// Lo = (L + 2*pad - K) / stride + 1
void conv1d_serial(const double* x, const double* w, const double* bias, double* y,
                   int batch, int cin, int len, int cout, int ksize, int stride, int pad);
void conv1d_parallel(const double* x, const double* w, const double* bias, double* y,
                     int batch, int cin, int len, int cout, int ksize, int stride, int pad);
void conv1d(const double* x, const double* w, const double* bias, double* y,
            int batch, int cin, int len, int cout, int ksize, int stride, int pad);

// Gather-style conv1d backward. dx/dw/db are written, not accumulated.
void conv1d_grad_input_serial(const double* dy, const double* w, double* dx,
                              int batch, int cin, int len, int cout, int ksize,
                              int stride, int pad);
void conv1d_grad_input_parallel(const double* dy, const double* w, double* dx,
                                int batch, int cin, int len, int cout, int ksize,
                                int stride, int pad);
void conv1d_grad_input(const double* dy, const double* w, double* dx,
                       int batch, int cin, int len, int cout, int ksize,
                       int stride, int pad);

void conv1d_grad_weight_serial(const double* dy, const double* x, double* dw, double* db,
                               int batch, int cin, int len, int cout, int ksize,
                               int stride, int pad);
void conv1d_grad_weight_parallel(const double* dy, const double* x, double* dw, double* db,
                                 int batch, int cin, int len, int cout, int ksize,
                                 int stride, int pad);
void conv1d_grad_weight(const double* dy, const double* x, double* dw, double* db,
                        int batch, int cin, int len, int cout, int ksize,
                        int stride, int pad);

inline int conv1d_out_len(int len, int ksize, int stride, int pad) {
  return (len + 2 * pad - ksize) / stride + 1;
}

}  // namespace pllforge::kernels
