"""Pure-numpy reference versions of the compiled kernels.

Signatures and dropout masks match :mod:`bdsl_spoter.kernels._ext` exactly, so
either backend can train a model and the other can check it.
"""
import numpy as np
from scipy.special import erf

GOLDEN = np.uint32(0x9E3779B9)
ROW_SALT = np.uint32(0x7F4A7C15)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def set_num_threads(n):
    pass


def get_num_threads():
    return 1


def _fmix32(h):
    h = h ^ (h >> np.uint32(16))
    h = h * np.uint32(0x85EBCA6B)
    h = h ^ (h >> np.uint32(13))
    h = h * np.uint32(0xC2B2AE35)
    return h ^ (h >> np.uint32(16))


def keep_mask(n_rows, T, seed, thr, keep_scale, dtype):
    """Scaled keep mask of shape (n_rows, T); row r uses hash key ``r``."""
    with np.errstate(over="ignore"):
        rows = np.arange(n_rows, dtype=np.uint32)
        rk = _fmix32(np.uint32(seed) ^ _fmix32(rows * GOLDEN + ROW_SALT))
        cols = np.arange(T, dtype=np.uint32) * GOLDEN
        h = _fmix32(rk[:, None] + cols[None, :])
    return ((h >> np.uint32(8)) >= np.uint32(thr)).astype(dtype) * dtype(keep_scale)


def _softmax_last(s):
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _attention_forward(q, kT, vT, scale, thr, keep_scale, seed, store_probs):
    BH, T, _ = q.shape
    dt = q.dtype.type
    probs = _softmax_last(np.matmul(q * dt(scale), kT))
    weights = probs
    if thr > 0:
        weights = probs * keep_mask(BH * T, T, seed, thr, keep_scale, dt).reshape(BH, T, T)
    out = np.matmul(weights, vT.transpose(0, 2, 1))
    return np.ascontiguousarray(out), (probs if store_probs else None)


def _attention_backward(dout, q, kT, vT, probs, scale, thr, keep_scale, seed):
    BH, T, _ = q.shape
    dt = q.dtype.type
    if thr > 0:
        mask = keep_mask(BH * T, T, seed, thr, keep_scale, dt).reshape(BH, T, T)
    else:
        mask = np.ones((BH, T, T), dtype=q.dtype)
    weights = probs * mask
    dvT = np.matmul(dout.transpose(0, 2, 1), weights)
    dweights = np.matmul(dout, vT) * mask
    r = (dweights * probs).sum(axis=-1, keepdims=True)
    dscores = probs * (dweights - r) * dt(scale)
    dq = np.matmul(dscores, kT.transpose(0, 2, 1))
    dkT = np.matmul(q.transpose(0, 2, 1), dscores)
    return np.ascontiguousarray(dq), np.ascontiguousarray(dkT), np.ascontiguousarray(dvT)


def _gelu_forward(x):
    dt = x.dtype.type
    return dt(0.5) * x * (dt(1) + erf(x * dt(_INV_SQRT2)))


def _gelu_backward(x, dy):
    dt = x.dtype.type
    cdf = dt(0.5) * (dt(1) + erf(x * dt(_INV_SQRT2)))
    pdf = dt(_INV_SQRT_2PI) * np.exp(dt(-0.5) * x * x)
    return dy * (cdf + x * pdf)


def _layer_norm_forward(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layer_norm_backward(dy, xhat, rstd, gain):
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (dxhat - m1 - xhat * m2)
