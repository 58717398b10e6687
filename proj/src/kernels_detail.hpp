#pragma once
// Internal: per-backend kernel entry points. Instantiated for float and double in
// kernels_scalar.cpp / kernels_simd.cpp, dispatched from kernels.cpp.

namespace hd::kernels::detail {

#define HD_KERNEL_DECLS(suffix)                                                              \
    template <class T> void gemm_nn_##suffix(const T*, const T*, T*, int, int, int, bool);  \
    template <class T> void gemm_nt_##suffix(const T*, const T*, T*, int, int, int, bool);  \
    template <class T> void gemm_tn_##suffix(const T*, const T*, T*, int, int, int, bool);  \
    template <class T> T dot_##suffix(const T*, const T*, int);                             \
    template <class T> void axpy_##suffix(T*, const T*, T, int);                            \
    template <class T> void add_##suffix(T*, const T*, int);                                \
    template <class T> void scale_##suffix(T*, T, int);                                     \
    template <class T> T sum_squares_##suffix(const T*, int);                               \
    template <class T> void softmax_row_##suffix(T*, int);                                  \
    template <class T> void gelu_##suffix(const T*, T*, int);                               \
    template <class T> void gelu_backward_##suffix(const T*, const T*, T*, int);            \
    template <class T> void adamw_update_##suffix(T*, T*, T*, const T*, int, T, T, T, T, T, T, T); \
    template <class T> void ema_update_##suffix(T*, const T*, T, int);

HD_KERNEL_DECLS(scalar)
HD_KERNEL_DECLS(simd)

#undef HD_KERNEL_DECLS

}  // namespace hd::kernels::detail
