# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv2d / max-pool kernels.

All arrays are C-contiguous float32 ``[B, C, H, W]``. Convolutions use
stride 1 and zero "same" padding with odd square kernels. Inputs are
zero-padded and widened to float64 once; every sum is accumulated in
double and rounded to float32 once, in a fixed order, so results are
bit-reproducible run to run.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.float32_t f32
ctypedef cnp.float64_t f64

cdef extern from "_gemm.h" nogil:
    void _gemm_bias "camlab_gemm_bias"(const double* wm, const double* bias, const double* cols,
                                       Py_ssize_t O, Py_ssize_t R, Py_ssize_t P, f32* y)
    void _conv_wgrad "camlab_conv_wgrad"(const double* g, const double* xp, Py_ssize_t B, Py_ssize_t O,
                                         Py_ssize_t C, Py_ssize_t H, Py_ssize_t W, Py_ssize_t K,
                                         double* gw, double* gb, double* part)

def _pad64(a, Py_ssize_t p):
    out = np.zeros(a.shape[:2] + (a.shape[2] + 2 * p, a.shape[3] + 2 * p), dtype=np.float64)
    out[:, :, p:p + a.shape[2], p:p + a.shape[3]] = a
    return out


cdef void _im2col(const f64[:, :, ::1] xp, Py_ssize_t K, Py_ssize_t H, Py_ssize_t W,
                  double* cols) noexcept nogil:
    """cols[(c*K + ky)*K + kx, i*W + j] = xp[c, i+ky, j+kx]."""
    cdef Py_ssize_t C = xp.shape[0], c, ky, kx, i, j, r = 0
    cdef double* dst
    for c in range(C):
        for ky in range(K):
            for kx in range(K):
                dst = cols + r * H * W
                for i in range(H):
                    for j in range(W):
                        dst[i * W + j] = xp[c, i + ky, j + kx]
                r = r + 1


cdef object _same_conv(x, w, b):
    """y[n,o,i,j] = bias[o] + sum_{c,ky,kx} w[o,c,ky,kx] * x[n,c,i+ky-p,j+kx-p].

    Summation order per output element: bias, then c, ky, kx ascending.
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2], R = w.shape[1] * K * K, n
    out = np.empty((B, O, H, W), dtype=np.float32)
    if out.size == 0:
        return out
    cdef const f64[:, :, :, ::1] xp = _pad64(x, K // 2)
    cdef const f64[:, ::1] wm = np.ascontiguousarray(np.asarray(w, dtype=np.float64).reshape(O, R))
    cdef const f64[::1] bias = np.asarray(b, dtype=np.float64)
    cdef f32[:, :, :, ::1] y = out
    cdef double* cols = <double*>malloc(R * H * W * sizeof(double))
    if cols == NULL:
        raise MemoryError()
    try:
        with nogil:
            for n in range(B):
                _im2col(xp[n], K, H, W, cols)
                _gemm_bias(&wm[0, 0], &bias[0], cols, O, R, H * W, &y[n, 0, 0, 0])
    finally:
        free(cols)
    return out


def conv2d_forward(const f32[:, :, :, ::1] x, const f32[:, :, :, ::1] w,
                   const f32[::1] b):
    return _same_conv(np.asarray(x), np.asarray(w), np.asarray(b))


def conv2d_backward_input(const f32[:, :, :, ::1] gy, const f32[:, :, :, ::1] w):
    """Gradient w.r.t. the conv input: a 'same' correlation of ``gy`` with
    the channel-transposed, spatially flipped kernel."""
    wt = np.ascontiguousarray(np.asarray(w).transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return _same_conv(np.asarray(gy), wt, np.zeros(wt.shape[0], dtype=np.float32))


def conv2d_backward_params(const f32[:, :, :, ::1] x, const f32[:, :, :, ::1] gy,
                           Py_ssize_t K):
    """Batch-summed float64 gradients of the kernel and bias.

    Each sum runs over (n, i) into per-column partials, which are then
    added in column order.
    """
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = gy.shape[1]
    gw_arr = np.zeros((O, C, K, K), dtype=np.float64)
    gb_arr = np.zeros(O, dtype=np.float64)
    if B == 0 or H * W == 0:
        return gw_arr, gb_arr
    cdef f64[:, :, :, ::1] gw = gw_arr
    cdef f64[::1] gb = gb_arr
    cdef const f64[:, :, :, ::1] xp = _pad64(x, K // 2)
    cdef const f64[:, :, :, ::1] g = np.ascontiguousarray(gy, dtype=np.float64)
    cdef double* part = <double*>malloc(W * sizeof(double))
    if part == NULL:
        raise MemoryError()
    try:
        with nogil:
            _conv_wgrad(&g[0, 0, 0, 0], &xp[0, 0, 0, 0], B, O, C, H, W, K, &gw[0, 0, 0, 0], &gb[0], part)
    finally:
        free(part)
    return gw_arr, gb_arr


def maxpool2x2_forward(const f32[:, :, :, ::1] x):
    """2x2/stride-2 max pool; ``argmax`` holds the window offset 0..3
    (raster order), first maximal element on ties."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2] // 2, W = x.shape[3] // 2
    cdef Py_ssize_t n, c, i, j, d, best_d
    cdef f32 v, best
    out = np.empty((B, C, H, W), dtype=np.float32)
    idx = np.empty((B, C, H, W), dtype=np.int8)
    cdef f32[:, :, :, ::1] y = out
    cdef cnp.int8_t[:, :, :, ::1] am = idx
    with nogil:
        for n in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        best = x[n, c, 2 * i, 2 * j]
                        best_d = 0
                        for d in range(1, 4):
                            v = x[n, c, 2 * i + d // 2, 2 * j + d % 2]
                            if v > best:
                                best = v
                                best_d = d
                        y[n, c, i, j] = best
                        am[n, c, i, j] = <cnp.int8_t>best_d
    return out, idx


def maxpool2x2_backward(const f32[:, :, :, ::1] gy, const cnp.int8_t[:, :, :, ::1] am):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], H = gy.shape[2], W = gy.shape[3]
    cdef Py_ssize_t n, c, i, j, d
    out = np.zeros((B, C, 2 * H, 2 * W), dtype=np.float32)
    cdef f32[:, :, :, ::1] gx = out
    with nogil:
        for n in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        d = am[n, c, i, j]
                        gx[n, c, 2 * i + d // 2, 2 * j + d % 2] = gy[n, c, i, j]
    return out
