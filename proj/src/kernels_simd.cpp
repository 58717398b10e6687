// std::experimental::simd kernels. This is the only TU built with wide-vector flags
// (-mavx2 -mfma on x86_64), so native_simd is 8-wide float / 4-wide double there;
// kernels.cpp only routes here after the cpuid check passes.

#include "kernels_detail.hpp"

#include <cmath>
#include <cstring>
#include <experimental/simd>

namespace stdx = std::experimental;

namespace hd::kernels::detail {

template <class T> using V = stdx::native_simd<T>;
template <class T> constexpr int W = int(V<T>::size());

template <class T>
static inline V<T> load(const T* p) { return V<T>(p, stdx::element_aligned); }
template <class T>
static inline void store(V<T> v, T* p) { v.copy_to(p, stdx::element_aligned); }

// 4 rows x 2 vector columns of accumulators kept in registers across the k loop
template <class T>
void gemm_nn_simd(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    constexpr int w = W<T>;
    const int jb = 2 * w;
    if (!acc) std::memset(C, 0, sizeof(T) * size_t(m) * n);
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const T *a0 = A + size_t(i) * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
        T *c0 = C + size_t(i) * n, *c1 = c0 + n, *c2 = c1 + n, *c3 = c2 + n;
        int j = 0;
        for (; j + jb <= n; j += jb) {
            V<T> s00 = load(c0 + j), s01 = load(c0 + j + w);
            V<T> s10 = load(c1 + j), s11 = load(c1 + j + w);
            V<T> s20 = load(c2 + j), s21 = load(c2 + j + w);
            V<T> s30 = load(c3 + j), s31 = load(c3 + j + w);
            for (int p = 0; p < k; ++p) {
                const T* b = B + size_t(p) * n + j;
                V<T> b0 = load(b), b1 = load(b + w);
                V<T> v0 = V<T>(a0[p]), v1 = V<T>(a1[p]), v2 = V<T>(a2[p]), v3 = V<T>(a3[p]);
                s00 += v0 * b0; s01 += v0 * b1;
                s10 += v1 * b0; s11 += v1 * b1;
                s20 += v2 * b0; s21 += v2 * b1;
                s30 += v3 * b0; s31 += v3 * b1;
            }
            store(s00, c0 + j); store(s01, c0 + j + w);
            store(s10, c1 + j); store(s11, c1 + j + w);
            store(s20, c2 + j); store(s21, c2 + j + w);
            store(s30, c3 + j); store(s31, c3 + j + w);
        }
        for (; j < n; ++j) {
            T t0 = 0, t1 = 0, t2 = 0, t3 = 0;
            for (int p = 0; p < k; ++p) {
                T b = B[size_t(p) * n + j];
                t0 += a0[p] * b; t1 += a1[p] * b; t2 += a2[p] * b; t3 += a3[p] * b;
            }
            c0[j] += t0; c1[j] += t1; c2[j] += t2; c3[j] += t3;
        }
    }
    for (; i < m; ++i) {
        const T* a = A + size_t(i) * k;
        T* c = C + size_t(i) * n;
        int j = 0;
        for (; j + jb <= n; j += jb) {
            V<T> s0 = load(c + j), s1 = load(c + j + w);
            for (int p = 0; p < k; ++p) {
                const T* b = B + size_t(p) * n + j;
                V<T> av = V<T>(a[p]);
                s0 += av * load(b);
                s1 += av * load(b + w);
            }
            store(s0, c + j); store(s1, c + j + w);
        }
        for (; j < n; ++j) {
            T t = 0;
            for (int p = 0; p < k; ++p) t += a[p] * B[size_t(p) * n + j];
            c[j] += t;
        }
    }
}

template <class T>
void gemm_nt_simd(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    constexpr int w = W<T>;
    const int kv = k / (2 * w) * (2 * w);
    const int kv1 = k / w * w;
    for (int i = 0; i < m; ++i) {
        const T* a = A + size_t(i) * k;
        T* c = C + size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* b = B + size_t(j) * k;
            V<T> s0 = T(0), s1 = T(0);
            int p = 0;
            for (; p < kv; p += 2 * w) {
                s0 += load(a + p) * load(b + p);
                s1 += load(a + p + w) * load(b + p + w);
            }
            for (; p < kv1; p += w) s0 += load(a + p) * load(b + p);
            T s = stdx::reduce(s0 + s1);
            for (; p < k; ++p) s += a[p] * b[p];
            c[j] = acc ? c[j] + s : s;
        }
    }
}

template <class T>
void gemm_tn_simd(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    constexpr int w = W<T>;
    const int jb = 2 * w;
    if (!acc) std::memset(C, 0, sizeof(T) * size_t(m) * n);
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        T *c0 = C + size_t(i) * n, *c1 = c0 + n, *c2 = c1 + n, *c3 = c2 + n;
        int j = 0;
        for (; j + jb <= n; j += jb) {
            V<T> s00 = load(c0 + j), s01 = load(c0 + j + w);
            V<T> s10 = load(c1 + j), s11 = load(c1 + j + w);
            V<T> s20 = load(c2 + j), s21 = load(c2 + j + w);
            V<T> s30 = load(c3 + j), s31 = load(c3 + j + w);
            for (int p = 0; p < k; ++p) {
                const T* ap = A + size_t(p) * m + i;
                const T* b = B + size_t(p) * n + j;
                V<T> b0 = load(b), b1 = load(b + w);
                V<T> v0 = V<T>(ap[0]), v1 = V<T>(ap[1]), v2 = V<T>(ap[2]), v3 = V<T>(ap[3]);
                s00 += v0 * b0; s01 += v0 * b1;
                s10 += v1 * b0; s11 += v1 * b1;
                s20 += v2 * b0; s21 += v2 * b1;
                s30 += v3 * b0; s31 += v3 * b1;
            }
            store(s00, c0 + j); store(s01, c0 + j + w);
            store(s10, c1 + j); store(s11, c1 + j + w);
            store(s20, c2 + j); store(s21, c2 + j + w);
            store(s30, c3 + j); store(s31, c3 + j + w);
        }
        for (; j < n; ++j) {
            T t0 = 0, t1 = 0, t2 = 0, t3 = 0;
            for (int p = 0; p < k; ++p) {
                const T* ap = A + size_t(p) * m + i;
                T b = B[size_t(p) * n + j];
                t0 += ap[0] * b; t1 += ap[1] * b; t2 += ap[2] * b; t3 += ap[3] * b;
            }
            c0[j] += t0; c1[j] += t1; c2[j] += t2; c3[j] += t3;
        }
    }
    for (; i < m; ++i) {
        T* c = C + size_t(i) * n;
        int j = 0;
        for (; j + jb <= n; j += jb) {
            V<T> s0 = load(c + j), s1 = load(c + j + w);
            for (int p = 0; p < k; ++p) {
                V<T> av = V<T>(A[size_t(p) * m + i]);
                const T* b = B + size_t(p) * n + j;
                s0 += av * load(b);
                s1 += av * load(b + w);
            }
            store(s0, c + j); store(s1, c + j + w);
        }
        for (; j < n; ++j) {
            T t = 0;
            for (int p = 0; p < k; ++p) t += A[size_t(p) * m + i] * B[size_t(p) * n + j];
            c[j] += t;
        }
    }
}

template <class T>
T dot_simd(const T* a, const T* b, int n) {
    constexpr int w = W<T>;
    V<T> s0 = T(0), s1 = T(0);
    int i = 0;
    for (; i + 2 * w <= n; i += 2 * w) {
        s0 += load(a + i) * load(b + i);
        s1 += load(a + i + w) * load(b + i + w);
    }
    for (; i + w <= n; i += w) s0 += load(a + i) * load(b + i);
    T s = stdx::reduce(s0 + s1);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
void axpy_simd(T* y, const T* x, T a, int n) {
    constexpr int w = W<T>;
    V<T> av = V<T>(a);
    int i = 0;
    for (; i + w <= n; i += w) store(load(y + i) + av * load(x + i), y + i);
    for (; i < n; ++i) y[i] += a * x[i];
}

template <class T>
void add_simd(T* y, const T* x, int n) {
    constexpr int w = W<T>;
    int i = 0;
    for (; i + w <= n; i += w) store(load(y + i) + load(x + i), y + i);
    for (; i < n; ++i) y[i] += x[i];
}

template <class T>
void scale_simd(T* x, T a, int n) {
    constexpr int w = W<T>;
    V<T> av = V<T>(a);
    int i = 0;
    for (; i + w <= n; i += w) store(load(x + i) * av, x + i);
    for (; i < n; ++i) x[i] *= a;
}

template <class T>
T sum_squares_simd(const T* x, int n) {
    constexpr int w = W<T>;
    V<T> s0 = T(0), s1 = T(0);
    int i = 0;
    for (; i + 2 * w <= n; i += 2 * w) {
        V<T> v0 = load(x + i), v1 = load(x + i + w);
        s0 += v0 * v0;
        s1 += v1 * v1;
    }
    for (; i + w <= n; i += w) { V<T> v = load(x + i); s0 += v * v; }
    T s = stdx::reduce(s0 + s1);
    for (; i < n; ++i) s += x[i] * x[i];
    return s;
}

template <class T>
void softmax_row_simd(T* x, int n) {
    constexpr int w = W<T>;
    T mx = x[0];
    for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
    V<T> mv = V<T>(mx), zv = T(0);
    int i = 0;
    for (; i + w <= n; i += w) {
        V<T> e = stdx::exp(load(x + i) - mv);
        store(e, x + i);
        zv += e;
    }
    T z = stdx::reduce(zv);
    for (; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        z += x[i];
    }
    scale_simd(x, T(1) / z, n);
}

template <class T>
void gelu_simd(const T* x, T* y, int n) {
    constexpr int w = W<T>;
    const V<T> half = T(0.5), one = T(1), is2 = T(M_SQRT1_2);
    int i = 0;
    for (; i + w <= n; i += w) {
        V<T> v = load(x + i);
        store(v * half * (one + stdx::erf(v * is2)), y + i);
    }
    for (; i < n; ++i) y[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
}

template <class T>
void gelu_backward_simd(const T* x, const T* dy, T* dx, int n) {
    constexpr int w = W<T>;
    const V<T> half = T(0.5), one = T(1), is2 = T(M_SQRT1_2);
    const V<T> isq2pi = T(0.3989422804014326779), mhalf = T(-0.5);
    int i = 0;
    for (; i + w <= n; i += w) {
        V<T> v = load(x + i);
        V<T> phi = half * (one + stdx::erf(v * is2));
        V<T> pdf = isq2pi * stdx::exp(mhalf * v * v);
        store(load(dx + i) + load(dy + i) * (phi + v * pdf), dx + i);
    }
    constexpr T inv_sqrt2pi = T(0.3989422804014326779);
    for (; i < n; ++i) {
        T phi = T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
        dx[i] += dy[i] * (phi + x[i] * pdf);
    }
}

template <class T>
void adamw_update_simd(T* p, T* m, T* v, const T* g, int n,
                       T lr, T beta1, T beta2, T eps, T wd, T bc1, T bc2) {
    constexpr int w = W<T>;
    const V<T> b1 = beta1, b2 = beta2, nb1 = T(1) - beta1, nb2 = T(1) - beta2;
    const V<T> ibc1 = T(1) / bc1, ibc2 = T(1) / bc2, ev = eps, lv = lr, wv = wd;
    int i = 0;
    for (; i + w <= n; i += w) {
        V<T> gv = load(g + i);
        V<T> mv = b1 * load(m + i) + nb1 * gv;
        V<T> vv = b2 * load(v + i) + nb2 * gv * gv;
        store(mv, m + i);
        store(vv, v + i);
        V<T> pv = load(p + i);
        pv -= lv * (mv * ibc1 / (stdx::sqrt(vv * ibc2) + ev) + wv * pv);
        store(pv, p + i);
    }
    for (; i < n; ++i) {
        m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
        v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
        p[i] -= lr * ((m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps) + wd * p[i]);
    }
}

template <class T>
void ema_update_simd(T* shadow, const T* p, T rate, int n) {
    constexpr int w = W<T>;
    const V<T> rv = rate, nv = T(1) - rate;
    int i = 0;
    for (; i + w <= n; i += w) store(rv * load(shadow + i) + nv * load(p + i), shadow + i);
    for (; i < n; ++i) shadow[i] = rate * shadow[i] + (T(1) - rate) * p[i];
}

#define HD_INSTANTIATE(T)                                                              \
    template void gemm_nn_simd<T>(const T*, const T*, T*, int, int, int, bool);       \
    template void gemm_nt_simd<T>(const T*, const T*, T*, int, int, int, bool);       \
    template void gemm_tn_simd<T>(const T*, const T*, T*, int, int, int, bool);       \
    template T dot_simd<T>(const T*, const T*, int);                                  \
    template void axpy_simd<T>(T*, const T*, T, int);                                 \
    template void add_simd<T>(T*, const T*, int);                                     \
    template void scale_simd<T>(T*, T, int);                                          \
    template T sum_squares_simd<T>(const T*, int);                                    \
    template void softmax_row_simd<T>(T*, int);                                       \
    template void gelu_simd<T>(const T*, T*, int);                                    \
    template void gelu_backward_simd<T>(const T*, const T*, T*, int);                 \
    template void adamw_update_simd<T>(T*, T*, T*, const T*, int, T, T, T, T, T, T, T); \
    template void ema_update_simd<T>(T*, const T*, T, int);

HD_INSTANTIATE(float)
HD_INSTANTIATE(double)
#undef HD_INSTANTIATE

}  // namespace hd::kernels::detail
