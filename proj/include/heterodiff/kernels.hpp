#pragma once
#include <string>

// Hot numeric loops for the denoiser. Each primitive has a plain scalar reference
// and a std::experimental::simd variant (the only TU built with -mavx2 -mfma on
// x86_64); the backend is picked once at runtime from cpuid and can be overridden
// via set_backend() or the HETERODIFF_KERNELS env var ("scalar"/"simd"/"auto").
// All matrices are dense row-major.

namespace hd::kernels {

enum class Backend { scalar, simd };

Backend active();
void set_backend(Backend b);
bool set_backend_by_name(const std::string& name);  // "auto"/"scalar"/"simd"; false if unknown
bool simd_supported();                              // compiled-in simd variant usable on this CPU
const char* backend_name();

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T> void gemm_nn(const T* A, const T* B, T* C, int m, int k, int n, bool accumulate);
// C[m x n] (+)= A[m x k] * B[n x k]^T
template <class T> void gemm_nt(const T* A, const T* B, T* C, int m, int k, int n, bool accumulate);
// C[m x n] (+)= A[k x m]^T * B[k x n]   (the dW = X^T * dY shape)
template <class T> void gemm_tn(const T* A, const T* B, T* C, int m, int k, int n, bool accumulate);

template <class T> T dot(const T* a, const T* b, int n);
template <class T> void axpy(T* y, const T* x, T a, int n);      // y += a*x
template <class T> void add(T* y, const T* x, int n);            // y += x
template <class T> void scale(T* x, T a, int n);
template <class T> T sum_squares(const T* x, int n);
template <class T> void softmax_row(T* x, int n);                // in place, max-subtracted
template <class T> void gelu(const T* x, T* y, int n);           // y = x * Phi(x)
template <class T> void gelu_backward(const T* x, const T* dy, T* dx, int n);  // dx += dy * gelu'(x)
template <class T> void adamw_update(T* p, T* m, T* v, const T* g, int n,
                                     T lr, T beta1, T beta2, T eps, T wd, T bc1, T bc2);
template <class T> void ema_update(T* shadow, const T* p, T rate, int n);

}  // namespace hd::kernels
