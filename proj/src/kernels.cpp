#include "heterodiff/kernels.hpp"

#include <cstdlib>

#include "kernels_detail.hpp"

namespace hd::kernels {

bool simd_supported() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    // non-x86 simd TU is built with baseline flags, so it is always runnable
    return true;
#endif
}

static Backend initial_backend() {
    if (const char* env = std::getenv("HETERODIFF_KERNELS")) {
        std::string v(env);
        if (v == "scalar") return Backend::scalar;
        if (v == "simd" && simd_supported()) return Backend::simd;
        // "auto" or anything else falls through to detection
    }
    return simd_supported() ? Backend::simd : Backend::scalar;
}

static Backend& backend_slot() {
    static Backend b = initial_backend();
    return b;
}

Backend active() { return backend_slot(); }

void set_backend(Backend b) {
    if (b == Backend::simd && !simd_supported()) b = Backend::scalar;
    backend_slot() = b;
}

bool set_backend_by_name(const std::string& name) {
    if (name == "auto") { set_backend(simd_supported() ? Backend::simd : Backend::scalar); return true; }
    if (name == "scalar") { set_backend(Backend::scalar); return true; }
    if (name == "simd") { set_backend(Backend::simd); return true; }
    return false;
}

const char* backend_name() { return active() == Backend::simd ? "simd" : "scalar"; }

#define HD_DISPATCH(fn, ...)                                  \
    if (active() == Backend::simd)                            \
        detail::fn##_simd(__VA_ARGS__);                       \
    else                                                      \
        detail::fn##_scalar(__VA_ARGS__)

#define HD_DISPATCH_RET(fn, ...)                              \
    return active() == Backend::simd                          \
               ? detail::fn##_simd(__VA_ARGS__)               \
               : detail::fn##_scalar(__VA_ARGS__)

template <class T>
void gemm_nn(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    HD_DISPATCH(gemm_nn, A, B, C, m, k, n, acc);
}
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    HD_DISPATCH(gemm_nt, A, B, C, m, k, n, acc);
}
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int m, int k, int n, bool acc) {
    HD_DISPATCH(gemm_tn, A, B, C, m, k, n, acc);
}
template <class T> T dot(const T* a, const T* b, int n) { HD_DISPATCH_RET(dot, a, b, n); }
template <class T> void axpy(T* y, const T* x, T a, int n) { HD_DISPATCH(axpy, y, x, a, n); }
template <class T> void add(T* y, const T* x, int n) { HD_DISPATCH(add, y, x, n); }
template <class T> void scale(T* x, T a, int n) { HD_DISPATCH(scale, x, a, n); }
template <class T> T sum_squares(const T* x, int n) { HD_DISPATCH_RET(sum_squares, x, n); }
template <class T> void softmax_row(T* x, int n) { HD_DISPATCH(softmax_row, x, n); }
template <class T> void gelu(const T* x, T* y, int n) { HD_DISPATCH(gelu, x, y, n); }
template <class T> void gelu_backward(const T* x, const T* dy, T* dx, int n) {
    HD_DISPATCH(gelu_backward, x, dy, dx, n);
}
template <class T>
void adamw_update(T* p, T* m, T* v, const T* g, int n, T lr, T b1, T b2, T eps, T wd, T bc1, T bc2) {
    HD_DISPATCH(adamw_update, p, m, v, g, n, lr, b1, b2, eps, wd, bc1, bc2);
}
template <class T>
void ema_update(T* shadow, const T* p, T rate, int n) {
    HD_DISPATCH(ema_update, shadow, p, rate, n);
}

#undef HD_DISPATCH
#undef HD_DISPATCH_RET

#define HD_INSTANTIATE(T)                                                          \
    template void gemm_nn<T>(const T*, const T*, T*, int, int, int, bool);         \
    template void gemm_nt<T>(const T*, const T*, T*, int, int, int, bool);         \
    template void gemm_tn<T>(const T*, const T*, T*, int, int, int, bool);         \
    template T dot<T>(const T*, const T*, int);                                    \
    template void axpy<T>(T*, const T*, T, int);                                   \
    template void add<T>(T*, const T*, int);                                       \
    template void scale<T>(T*, T, int);                                            \
    template T sum_squares<T>(const T*, int);                                      \
    template void softmax_row<T>(T*, int);                                         \
    template void gelu<T>(const T*, T*, int);                                      \
    template void gelu_backward<T>(const T*, const T*, T*, int);                   \
    template void adamw_update<T>(T*, T*, T*, const T*, int, T, T, T, T, T, T, T); \
    template void ema_update<T>(T*, const T*, T, int);

HD_INSTANTIATE(float)
HD_INSTANTIATE(double)
#undef HD_INSTANTIATE

}  // namespace hd::kernels
