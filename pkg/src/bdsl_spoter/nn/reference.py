"""Straight-from-the-formulas forward pass in extended precision.

Used as the finite-difference oracle for the analytic backward pass: it shares
no code with the kernel path except the dropout-mask hash, and it replays the
masks a training forward recorded so both see the same network.
"""
import math

import numpy as np

from ..kernels import _numpy as mask_source
from ..kernels import dropout_threshold
from .functional import LN_EPS

XP = np.longdouble
_TWO_OVER_SQRT_PI = XP(2) / np.sqrt(XP(np.pi))


def erf_ext(x):
    """erf in long double: positive-term series ``e^{-x^2} sum (2x^2)^n x / (2n+1)!!``.

    All terms are positive, so there is no cancellation; beyond ``|x| = 7``
    the value is +-1 to long-double precision.
    """
    x = np.asarray(x, dtype=XP)
    a = np.minimum(np.abs(x), XP(7))
    term = a.copy()
    total = a.copy()
    two_a2 = 2 * a * a
    for n in range(1, 400):
        term = term * two_a2 / (2 * n + 1)
        total += term
        if np.all(term <= total * XP(1e-22)):
            break
    out = _TWO_OVER_SQRT_PI * np.exp(-a * a) * total
    out = np.where(np.abs(x) >= 7, XP(1), out)
    return np.sign(x) * out


def gelu_ext(x):
    return XP(0.5) * x * (1 + erf_ext(x / np.sqrt(XP(2))))


def layer_norm_ext(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + XP(LN_EPS)) * gain + bias


def softmax_ext(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def frozen_masks(trace):
    """Dropout multipliers recorded in a training trace, in extended precision."""
    cfg = trace.config
    B, T, _ = trace.shape
    layers = []
    for c in trace.layers:
        att = None
        if c["p"] > 0:
            thr = dropout_threshold(c["p"])
            att = mask_source.keep_mask(B * cfg.n_heads * T, T, c["seed"], thr,
                                        1.0 / (1.0 - c["p"]), np.float64)
            att = att.reshape(B, cfg.n_heads, T, T).astype(XP)
        layers.append(dict(att=att, m1=_ext_or_none(c["m1"]), m2=_ext_or_none(c["m2"])))
    head = [_ext_or_none(c["mask"]) for c in trace.head]
    return dict(layers=layers, head=head)


def _ext_or_none(a):
    return None if a is None else np.asarray(a, dtype=XP)


def reference_forward(P, params, masks=None):
    """Logits in long double, optionally with frozen dropout masks."""
    cfg = params.config
    p = {k: np.asarray(v, dtype=XP) for k, v in params.items()}
    X = np.asarray(P, dtype=XP)
    B, T, d = X.shape
    h, dk = cfg.n_heads, cfg.d_k
    H = X + p["pos_table"][:T]
    for l in range(1, cfg.n_layers + 1):
        pre = f"layer{l}."
        lm = masks["layers"][l - 1] if masks else {"att": None, "m1": None, "m2": None}
        q = (H @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(B, T, h, dk).transpose(0, 2, 1, 3)
        k = (H @ p[pre + "attn.wk"] + p[pre + "attn.bk"]).reshape(B, T, h, dk).transpose(0, 2, 1, 3)
        v = (H @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(B, T, h, dk).transpose(0, 2, 1, 3)
        w = softmax_ext(q @ k.transpose(0, 1, 3, 2) / np.sqrt(XP(dk)))
        if lm["att"] is not None:
            w = w * lm["att"]
        heads = (w @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        mh = heads @ p[pre + "attn.wo"] + p[pre + "attn.bo"]
        if lm["m1"] is not None:
            mh = mh * lm["m1"].reshape(B, T, d)
        A = layer_norm_ext(H + mh, p[pre + "norm1.gain"], p[pre + "norm1.bias"])
        ff = gelu_ext(A @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        if lm["m2"] is not None:
            ff = ff * lm["m2"].reshape(B, T, d)
        H = layer_norm_ext(A + ff, p[pre + "norm2.gain"], p[pre + "norm2.bias"])
    z = H.mean(axis=1)
    for i in range(1, len(cfg.head_hidden) + 1):
        z = gelu_ext(layer_norm_ext(z @ p[f"head.fc{i}.weight"] + p[f"head.fc{i}.bias"],
                                    p[f"head.norm{i}.gain"], p[f"head.norm{i}.bias"]))
        if masks and masks["head"][i - 1] is not None:
            z = z * masks["head"][i - 1]
    return z @ p["head.out.weight"] + p["head.out.bias"]


def erf_matches_math(n=2001):
    """Self-check of :func:`erf_ext` against ``math.erf`` on a grid."""
    xs = np.linspace(-8, 8, n)
    ref = np.array([math.erf(v) for v in xs])
    return float(np.max(np.abs(erf_ext(xs).astype(np.float64) - ref)))
