// Scalar reference kernels: straightforward loops, no intrinsics. These define the
// semantics the simd backend is equivalence-tested against.

#include "kernels_detail.hpp"

#include <cmath>
#include <cstring>

namespace hd::kernels::detail {

template <class T>
void gemm_nn_scalar(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        T* c = C + size_t(i) * n;
        if (!acc) std::memset(c, 0, sizeof(T) * n);
        const T* a = A + size_t(i) * k;
        for (int p = 0; p < k; ++p) {
            T av = a[p];
            const T* b = B + size_t(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

template <class T>
void gemm_nt_scalar(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    for (int i = 0; i < m; ++i) {
        const T* a = A + size_t(i) * k;
        T* c = C + size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* b = B + size_t(j) * k;
            T s = 0;
            for (int p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] = acc ? c[j] + s : s;
        }
    }
}

template <class T>
void gemm_tn_scalar(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    if (!acc) std::memset(C, 0, sizeof(T) * size_t(m) * n);
    for (int p = 0; p < k; ++p) {
        const T* a = A + size_t(p) * m;
        const T* b = B + size_t(p) * n;
        for (int i = 0; i < m; ++i) {
            T av = a[i];
            T* c = C + size_t(i) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

template <class T>
T dot_scalar(const T* a, const T* b, int n) {
    T s = 0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
void axpy_scalar(T* y, const T* x, T a, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
void add_scalar(T* y, const T* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += x[i];
}

template <class T>
void scale_scalar(T* x, T a, int n) {
    for (int i = 0; i < n; ++i) x[i] *= a;
}

template <class T>
T sum_squares_scalar(const T* x, int n) {
    T s = 0;
    for (int i = 0; i < n; ++i) s += x[i] * x[i];
    return s;
}

template <class T>
void softmax_row_scalar(T* x, int n) {
    T mx = x[0];
    for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
    T z = 0;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        z += x[i];
    }
    T inv = T(1) / z;
    for (int i = 0; i < n; ++i) x[i] *= inv;
}

// exact gelu: x * Phi(x), Phi the standard normal CDF
template <class T>
void gelu_scalar(const T* x, T* y, int n) {
    for (int i = 0; i < n; ++i) {
        T phi = T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
        y[i] = x[i] * phi;
    }
}

template <class T>
void gelu_backward_scalar(const T* x, const T* dy, T* dx, int n) {
    constexpr T inv_sqrt2pi = T(0.3989422804014326779);
    for (int i = 0; i < n; ++i) {
        T phi = T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
        dx[i] += dy[i] * (phi + x[i] * pdf);
    }
}

template <class T>
void adamw_update_scalar(T* p, T* m, T* v, const T* g, int n,
                         T lr, T beta1, T beta2, T eps, T wd, T bc1, T bc2) {
    for (int i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
        v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
        T mhat = m[i] / bc1;
        T vhat = v[i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
    }
}

template <class T>
void ema_update_scalar(T* shadow, const T* p, T rate, int n) {
    for (int i = 0; i < n; ++i) shadow[i] = rate * shadow[i] + (T(1) - rate) * p[i];
}

#define HD_INSTANTIATE(T)                                                                \
    template void gemm_nn_scalar<T>(const T*, const T*, T*, int, int, int, bool);       \
    template void gemm_nt_scalar<T>(const T*, const T*, T*, int, int, int, bool);       \
    template void gemm_tn_scalar<T>(const T*, const T*, T*, int, int, int, bool);       \
    template T dot_scalar<T>(const T*, const T*, int);                                  \
    template void axpy_scalar<T>(T*, const T*, T, int);                                 \
    template void add_scalar<T>(T*, const T*, int);                                     \
    template void scale_scalar<T>(T*, T, int);                                          \
    template T sum_squares_scalar<T>(const T*, int);                                    \
    template void softmax_row_scalar<T>(T*, int);                                       \
    template void gelu_scalar<T>(const T*, T*, int);                                    \
    template void gelu_backward_scalar<T>(const T*, const T*, T*, int);                 \
    template void adamw_update_scalar<T>(T*, T*, T*, const T*, int, T, T, T, T, T, T, T); \
    template void ema_update_scalar<T>(T*, const T*, T, int);

HD_INSTANTIATE(float)
HD_INSTANTIATE(double)
#undef HD_INSTANTIATE

}  // namespace hd::kernels::detail
