"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``BDSL_SPOTER_KERNELS=numpy``
to force the fallback. ``get_backend(name)`` returns either one explicitly, which
the tests use to cross-check them.
"""
import os
from types import SimpleNamespace

import numpy as np

from . import _numpy

try:
    from . import _ext
except ImportError:  # pragma: no cover - depends on the build
    _ext = None

# Dropout probabilities are quantized to 24 bits by the mask hash.
_MASK_BITS = 24


def dropout_threshold(p):
    """Integer threshold such that a hashed 24-bit draw below it is dropped."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    return int(round(p * (1 << _MASK_BITS)))


class Backend:
    """Uniform front end over one kernel module."""

    def __init__(self, name, module):
        self.name = name
        self._m = module

    def set_num_threads(self, n):
        self._m.set_num_threads(int(n))

    def attention_forward(self, q, kT, vT, scale, drop_p=0.0, seed=0, store_probs=False):
        """Fused scaled-dot-product attention over (BH, T, dk) heads.

        ``kT``/``vT`` are (BH, dk, T). Returns ``(out, probs)`` where ``probs``
        holds the pre-dropout attention weights when ``store_probs`` is set.
        """
        thr = dropout_threshold(drop_p)
        keep = 1.0 / (1.0 - drop_p)
        return self._m._attention_forward(_c(q), _c(kT), _c(vT), float(scale), thr, keep,
                                          int(seed) & 0xFFFFFFFF, bool(store_probs))

    def attention_backward(self, dout, q, kT, vT, probs, scale, drop_p=0.0, seed=0):
        thr = dropout_threshold(drop_p)
        keep = 1.0 / (1.0 - drop_p)
        return self._m._attention_backward(_c(dout), _c(q), _c(kT), _c(vT), _c(probs),
                                           float(scale), thr, keep, int(seed) & 0xFFFFFFFF)

    def gelu_forward(self, x):
        x = _c(x)
        return self._m._gelu_forward(x.reshape(-1)).reshape(x.shape)

    def gelu_backward(self, x, dy):
        x = _c(x)
        return self._m._gelu_backward(x.reshape(-1), _c(dy).reshape(-1)).reshape(x.shape)

    def layer_norm_forward(self, x, gain, bias, eps=1e-5):
        """Row-wise LayerNorm of a 2-D array. Returns ``(y, xhat, rstd)``."""
        return self._m._layer_norm_forward(_c(x), _c(gain), _c(bias), float(eps))

    def layer_norm_backward(self, dy, xhat, rstd, gain):
        """Returns ``(dx, dgain, dbias)``."""
        dy = _c(dy)
        dx = self._m._layer_norm_backward(dy, _c(xhat), _c(rstd), _c(gain))
        return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)

    def __repr__(self):
        return f"Backend({self.name!r})"


def _c(a):
    return np.ascontiguousarray(a)


_BACKENDS = {"numpy": Backend("numpy", _numpy)}
if _ext is not None:
    _BACKENDS["compiled"] = Backend("compiled", _ext)


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name=None):
    if name is None:
        return active
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}") from None


def _select():
    forced = os.environ.get("BDSL_SPOTER_KERNELS", "").strip().lower()
    if forced:
        return get_backend(forced)
    return _BACKENDS.get("compiled", _BACKENDS["numpy"])


active = _select()


def use_backend(name):
    """Switch the process-wide backend; returns the previous one."""
    global active
    prev, active = active, get_backend(name)
    return prev


def set_num_threads(n):
    for b in _BACKENDS.values():
        b.set_num_threads(n)


__all__ = ["Backend", "active", "available_backends", "dropout_threshold", "get_backend",
           "set_num_threads", "use_backend"]
