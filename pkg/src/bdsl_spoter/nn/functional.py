"""Elementwise and row-wise building blocks with their analytic derivatives."""
import numpy as np

from .. import kernels

LN_EPS = 1e-5


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    return kernels.active.gelu_forward(x)


def gelu_grad(x, dy):
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    return kernels.active.gelu_backward(x, np.asarray(dy, dtype=x.dtype))


def layer_norm(x, gain, bias, eps=LN_EPS):
    """LayerNorm over the last axis with biased variance."""
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    flat = x.reshape(-1, x.shape[-1])
    y, _, _ = kernels.active.layer_norm_forward(flat, np.asarray(gain, x.dtype), np.asarray(bias, x.dtype), eps)
    return y.reshape(x.shape)


def softmax_rows(S):
    """Row-wise softmax with max subtraction, over the last axis."""
    S = np.asarray(S, dtype=np.result_type(S, np.float32))
    e = np.exp(S - S.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(S):
    S = np.asarray(S, dtype=np.result_type(S, np.float32))
    shifted = S - S.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def dropout_mask(rng, shape, p, dtype):
    """Inverted-dropout multiplier: 0 with probability ``p``, else ``1/(1-p)``."""
    dt = np.dtype(dtype).type
    keep = rng.random(shape, dtype=np.float64 if dt is np.float64 else np.float32) >= p
    return keep.astype(dt) * dt(1.0 / (1.0 - p))
