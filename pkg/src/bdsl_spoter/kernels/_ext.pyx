# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused attention, GELU and LayerNorm.

Every routine accepts float32 or float64 C-contiguous arrays and mirrors the
numpy fallback in :mod:`bdsl_spoter.kernels._numpy` (same signatures, same
dropout masks).
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from cython.parallel cimport prange, parallel
from libc.math cimport exp, expf, erf, erff, sqrt, sqrtf
from libc.stdint cimport uint32_t
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm, sgemm

cimport openmp

cnp.import_array()

cdef uint32_t GOLDEN = 0x9E3779B9u
cdef uint32_t ROW_SALT = 0x7F4A7C15u

cdef int _num_threads = openmp.omp_get_max_threads()


def set_num_threads(int n):
    global _num_threads
    _num_threads = max(1, n)


def get_num_threads():
    return _num_threads


cdef inline uint32_t _fmix32(uint32_t h) noexcept nogil:
    h ^= h >> 16
    h *= 0x85EBCA6Bu
    h ^= h >> 13
    h *= 0xC2B2AE35u
    h ^= h >> 16
    return h


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline floating _erf(floating x) noexcept nogil:
    if floating is float:
        return erff(x)
    else:
        return erf(x)


cdef inline floating _sqrt(floating x) noexcept nogil:
    if floating is float:
        return sqrtf(x)
    else:
        return sqrt(x)


cdef inline void _keep_row(floating* kv, Py_ssize_t T, uint32_t seed, uint32_t row,
                           uint32_t thr, floating keep_scale) noexcept nogil:
    cdef uint32_t rk = _fmix32(seed ^ _fmix32(row * GOLDEN + ROW_SALT))
    cdef uint32_t h
    cdef Py_ssize_t j
    for j in range(T):
        h = _fmix32(rk + <uint32_t>j * GOLDEN)
        kv[j] = keep_scale * <floating>((h >> 8) >= thr)


cdef inline void _gemm(char ta, char tb, int m, int n, int k, floating alpha,
                       const floating* a, int lda, const floating* b, int ldb,
                       floating* c, int ldc) noexcept nogil:
    # column-major BLAS; callers pass row-major operands in swapped order
    cdef floating beta = 0
    if floating is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, <float*>a, &lda, <float*>b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, <double*>a, &lda, <double*>b, &ldb, &beta, c, &ldc)


cdef void _attn_fwd_head(const floating* q, const floating* kT, const floating* vT,
                         floating* out, floating* p, Py_ssize_t T, Py_ssize_t dk,
                         floating scale, uint32_t thr, floating keep_scale,
                         uint32_t seed, uint32_t row0, floating* pd, floating* kv) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef floating m, tot, inv
    cdef floating* s
    cdef floating* d
    # S = scale * q kT, one row per query
    _gemm(c'N', c'N', <int>T, <int>T, <int>dk, scale, kT, <int>T, q, <int>dk, p, <int>T)
    for i in range(T):
        s = p + i * T
        m = s[0]
        for j in range(1, T):
            if s[j] > m:
                m = s[j]
        tot = 0
        for j in range(T):
            s[j] = _exp(s[j] - m)
            tot += s[j]
        inv = 1 / tot
        for j in range(T):
            s[j] *= inv
        if thr > 0:
            d = pd + i * T
            _keep_row(kv, T, seed, row0 + <uint32_t>i, thr, keep_scale)
            for j in range(T):
                d[j] = s[j] * kv[j]
    # out = P v
    _gemm(c'T', c'N', <int>dk, <int>T, <int>T, 1, vT, <int>T, pd if thr > 0 else p, <int>T,
          out, <int>dk)


cdef void _attn_bwd_head(const floating* dout, const floating* q, const floating* kT,
                         const floating* vT, const floating* probs, floating* dq,
                         floating* dkT, floating* dvT, Py_ssize_t T, Py_ssize_t dk,
                         floating scale, uint32_t thr, floating keep_scale,
                         uint32_t seed, uint32_t row0, floating* pd, floating* g,
                         floating* kv) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef floating r
    cdef const floating* p
    cdef const floating* pm = probs
    cdef floating* gi
    if thr > 0:
        for i in range(T):
            _keep_row(kv, T, seed, row0 + <uint32_t>i, thr, keep_scale)
            p = probs + i * T
            for j in range(T):
                pd[i * T + j] = p[j] * kv[j]
        pm = pd
    # dv = Pd^T dout, G = dout vT
    _gemm(c'N', c'T', <int>T, <int>dk, <int>T, 1, pm, <int>T, dout, <int>dk, dvT, <int>T)
    _gemm(c'N', c'N', <int>T, <int>T, <int>dk, 1, vT, <int>T, dout, <int>dk, g, <int>T)
    for i in range(T):
        p = probs + i * T
        gi = g + i * T
        if thr > 0:
            _keep_row(kv, T, seed, row0 + <uint32_t>i, thr, keep_scale)
            for j in range(T):
                gi[j] *= kv[j]
        r = 0
        for j in range(T):
            r += p[j] * gi[j]
        for j in range(T):
            gi[j] = p[j] * (gi[j] - r)
    # dq = scale dS k, dk = scale dS^T q
    _gemm(c'T', c'N', <int>dk, <int>T, <int>T, scale, kT, <int>T, g, <int>T, dq, <int>dk)
    _gemm(c'N', c'T', <int>T, <int>dk, <int>T, scale, g, <int>T, q, <int>dk, dkT, <int>T)


def _attention_forward(floating[:, :, ::1] q, floating[:, :, ::1] kT, floating[:, :, ::1] vT,
                       double scale, uint32_t thr, double keep_scale, uint32_t seed,
                       bint store_probs):
    cdef Py_ssize_t BH = q.shape[0], T = q.shape[1], dk = q.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((BH, T, dk), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, :, ::1] probs
    cdef floating* pp = NULL
    probs_arr = None
    if store_probs:
        probs_arr = np.empty((BH, T, T), dtype=dtype)
        probs = probs_arr
    cdef Py_ssize_t bh
    cdef floating* s
    cdef floating* pd
    cdef floating* kv
    cdef floating fscale = scale, fkeep = keep_scale
    if BH == 0 or T == 0:
        return out_arr, probs_arr
    with nogil, parallel(num_threads=_num_threads):
        s = <floating*>malloc(T * T * sizeof(floating))
        pd = <floating*>malloc(T * T * sizeof(floating))
        kv = <floating*>malloc(T * sizeof(floating))
        for bh in prange(BH, schedule="static"):
            if store_probs:
                pp = &probs[bh, 0, 0]
            else:
                pp = s
            _attn_fwd_head(&q[bh, 0, 0], &kT[bh, 0, 0], &vT[bh, 0, 0], &out[bh, 0, 0],
                           pp, T, dk, fscale, thr, fkeep, seed, <uint32_t>(bh * T), pd, kv)
        free(s)
        free(pd)
        free(kv)
    return out_arr, probs_arr


def _attention_backward(floating[:, :, ::1] dout, floating[:, :, ::1] q,
                        floating[:, :, ::1] kT, floating[:, :, ::1] vT,
                        floating[:, :, ::1] probs, double scale, uint32_t thr,
                        double keep_scale, uint32_t seed):
    cdef Py_ssize_t BH = q.shape[0], T = q.shape[1], dk = q.shape[2]
    dtype = np.float32 if floating is float else np.float64
    dq_arr = np.empty((BH, T, dk), dtype=dtype)
    dkT_arr = np.empty((BH, dk, T), dtype=dtype)
    dvT_arr = np.empty((BH, dk, T), dtype=dtype)
    cdef floating[:, :, ::1] dq = dq_arr
    cdef floating[:, :, ::1] dkT = dkT_arr
    cdef floating[:, :, ::1] dvT = dvT_arr
    cdef Py_ssize_t bh
    cdef floating* g
    cdef floating* pd
    cdef floating* kv
    cdef floating fscale = scale, fkeep = keep_scale
    if BH == 0 or T == 0:
        return dq_arr, dkT_arr, dvT_arr
    with nogil, parallel(num_threads=_num_threads):
        g = <floating*>malloc(T * T * sizeof(floating))
        pd = <floating*>malloc(T * T * sizeof(floating))
        kv = <floating*>malloc(T * sizeof(floating))
        for bh in prange(BH, schedule="static"):
            _attn_bwd_head(&dout[bh, 0, 0], &q[bh, 0, 0], &kT[bh, 0, 0], &vT[bh, 0, 0],
                           &probs[bh, 0, 0], &dq[bh, 0, 0], &dkT[bh, 0, 0], &dvT[bh, 0, 0],
                           T, dk, fscale, thr, fkeep, seed, <uint32_t>(bh * T), pd, g, kv)
        free(g)
        free(pd)
        free(kv)
    return dq_arr, dkT_arr, dvT_arr


cdef inline void _gelu_span(const floating* x, floating* y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating v
    for i in range(n):
        v = x[i]
        y[i] = <floating>0.5 * v * (1 + _erf(v * <floating>0.7071067811865476))


cdef inline void _gelu_grad_span(const floating* x, const floating* dy, floating* dx,
                                 Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating v, cdf, pdf
    for i in range(n):
        v = x[i]
        cdf = <floating>0.5 * (1 + _erf(v * <floating>0.7071067811865476))
        pdf = <floating>0.3989422804014327 * _exp(<floating>-0.5 * v * v)
        dx[i] = dy[i] * (cdf + v * pdf)


cdef enum:
    CHUNK = 16384


def _gelu_forward(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], nchunks = (n + CHUNK - 1) // CHUNK, ch, lo
    y_arr = np.empty(n, dtype=np.float32 if floating is float else np.float64)
    cdef floating[::1] y = y_arr
    if n == 0:
        return y_arr
    for ch in prange(nchunks, nogil=True, schedule="static", num_threads=_num_threads):
        lo = ch * CHUNK
        _gelu_span(&x[lo], &y[lo], min(CHUNK, n - lo))
    return y_arr


def _gelu_backward(floating[::1] x, floating[::1] dy):
    cdef Py_ssize_t n = x.shape[0], nchunks = (n + CHUNK - 1) // CHUNK, ch, lo
    dx_arr = np.empty(n, dtype=np.float32 if floating is float else np.float64)
    cdef floating[::1] dx = dx_arr
    if n == 0:
        return dx_arr
    for ch in prange(nchunks, nogil=True, schedule="static", num_threads=_num_threads):
        lo = ch * CHUNK
        _gelu_grad_span(&x[lo], &dy[lo], &dx[lo], min(CHUNK, n - lo))
    return dx_arr


cdef inline void _ln_row(const floating* x, const floating* gain, const floating* bias,
                         floating* y, floating* xhat, floating* rstd, Py_ssize_t d,
                         floating eps) noexcept nogil:
    cdef Py_ssize_t j
    cdef floating mean = 0, var = 0, diff, r
    for j in range(d):
        mean += x[j]
    mean /= d
    for j in range(d):
        diff = x[j] - mean
        var += diff * diff
    var /= d
    r = 1 / _sqrt(var + eps)
    rstd[0] = r
    for j in range(d):
        xhat[j] = (x[j] - mean) * r
        y[j] = xhat[j] * gain[j] + bias[j]


cdef inline void _ln_grad_row(const floating* dy, const floating* xhat, floating rstd,
                              const floating* gain, floating* dx, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t j
    cdef floating m1 = 0, m2 = 0, dxh
    for j in range(d):
        dxh = dy[j] * gain[j]
        m1 += dxh
        m2 += dxh * xhat[j]
    m1 /= d
    m2 /= d
    for j in range(d):
        dx[j] = rstd * (dy[j] * gain[j] - m1 - xhat[j] * m2)


def _layer_norm_forward(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef floating feps = eps
    if n == 0:
        return y_arr, xhat_arr, rstd_arr
    for i in prange(n, nogil=True, schedule="static", num_threads=_num_threads):
        _ln_row(&x[i, 0], &gain[0], &bias[0], &y[i, 0], &xhat[i, 0], &rstd[i], d, feps)
    return y_arr, xhat_arr, rstd_arr


def _layer_norm_backward(floating[:, ::1] dy, floating[:, ::1] xhat, floating[::1] rstd,
                         floating[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i
    dx_arr = np.empty((n, d), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] dx = dx_arr
    if n == 0:
        return dx_arr
    for i in prange(n, nogil=True, schedule="static", num_threads=_num_threads):
        _ln_grad_row(&dy[i, 0], &xhat[i, 0], rstd[i], &gain[0], &dx[i, 0], d)
    return dx_arr
