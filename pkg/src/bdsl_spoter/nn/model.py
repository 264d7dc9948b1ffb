"""Pose transformer encoder with a hand-written backward pass.

Input ``P`` is ``(B, T', 108)`` with ``T' <= config.T``; the first ``T'`` rows
of the positional table are added, the sum passes through post-norm encoder
layers, is averaged over time and classified by an MLP head. Weights are
stored ``(fan_in, fan_out)`` so every linear map is ``x @ W + b``.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import kernels
from .functional import LN_EPS, dropout_mask

ENCODING_TYPES = ("learnable", "sinusoidal", "fixed_random")


class ConfigError(ValueError):
    """Inconsistent model configuration or tensor shapes."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 108
    n_layers: int = 4
    n_heads: int = 9
    d_ff: int = 432
    T: int = 200
    n_classes: int = 60
    head_hidden: tuple = (512, 256, 128)
    dropout_p: float = 0.15
    encoding_type: str = "learnable"

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if min(self.d_model, self.n_heads, self.d_ff, self.T, self.n_classes) <= 0 or self.n_layers < 0:
            raise ConfigError(f"all model dimensions must be positive: {self}")
        if any(h <= 0 for h in self.head_hidden):
            raise ConfigError("head widths must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.encoding_type not in ENCODING_TYPES:
            raise ConfigError(f"encoding_type must be one of {ENCODING_TYPES}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self):
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _layer_shapes(cfg: ModelConfig, l: int):
    d, f = cfg.d_model, cfg.d_ff
    p = f"layer{l}."
    return [
        (p + "attn.wq", (d, d)), (p + "attn.bq", (d,)),
        (p + "attn.wk", (d, d)), (p + "attn.bk", (d,)),
        (p + "attn.wv", (d, d)), (p + "attn.bv", (d,)),
        (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
        (p + "norm1.gain", (d,)), (p + "norm1.bias", (d,)),
        (p + "ffn.w1", (d, f)), (p + "ffn.b1", (f,)),
        (p + "ffn.w2", (f, d)), (p + "ffn.b2", (d,)),
        (p + "norm2.gain", (d,)), (p + "norm2.bias", (d,)),
    ]


def param_shapes(cfg: ModelConfig):
    """Ordered ``(name, shape)`` list of every tensor the config defines."""
    shapes = [("pos_table", (cfg.T, cfg.d_model))]
    for l in range(1, cfg.n_layers + 1):
        shapes += _layer_shapes(cfg, l)
    width = cfg.d_model
    for i, h in enumerate(cfg.head_hidden, start=1):
        shapes += [
            (f"head.fc{i}.weight", (width, h)), (f"head.fc{i}.bias", (h,)),
            (f"head.norm{i}.gain", (h,)), (f"head.norm{i}.bias", (h,)),
        ]
        width = h
    shapes += [("head.out.weight", (width, cfg.n_classes)), ("head.out.bias", (cfg.n_classes,))]
    return shapes


def is_norm_or_position(name: str) -> bool:
    return name == "pos_table" or ".norm" in name


class ModelParams(OrderedDict):
    """Named tensors of one model, in canonical order, plus its config."""

    def __init__(self, config: ModelConfig, tensors=()):
        super().__init__(tensors)
        self.config = config

    @property
    def dtype(self):
        return self["pos_table"].dtype

    def validate(self):
        expected = param_shapes(self.config)
        if [n for n, _ in expected] != list(self.keys()):
            raise ConfigError("parameter names do not match the config")
        for name, shape in expected:
            t = self[name]
            if t.shape != shape:
                raise ConfigError(f"{name}: shape {t.shape} != {shape}")
            if not np.all(np.isfinite(t)):
                raise ConfigError(f"{name}: non-finite values")
        return self

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, ((k, v.astype(dtype)) for k, v in self.items()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, ((k, v.copy()) for k, v in self.items()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, ((k, np.zeros_like(v)) for k, v in self.items()))

    def n_elements(self) -> int:
        return int(sum(v.size for v in self.values()))

    def trainable(self, name: str) -> bool:
        return name != "pos_table" or self.config.encoding_type == "learnable"


def sinusoidal_table(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit gains.

    The positional table is N(0, 0.02) for learnable and fixed_random
    encodings and the standard sine/cosine table for sinusoidal.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams(cfg)
    for name, shape in param_shapes(cfg):
        if name == "pos_table":
            if cfg.encoding_type == "sinusoidal":
                t = sinusoidal_table(*shape)
            else:
                t = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".gain"):
            t = np.ones(shape)
        elif len(shape) == 1:
            t = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            t = rng.uniform(-bound, bound, size=shape)
        params[name] = t.astype(dtype)
    return params


def param_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for _, s in param_shapes(cfg)))


def flops_formula(cfg: ModelConfig) -> str:
    widths = " + ".join(f"{a}*{b}" for a, b in _head_dims(cfg))
    return (f"MACs = n_layers*(4*T*d^2 + 2*T^2*d + 2*T*d*d_ff) + head"
            f" with n_layers={cfg.n_layers}, T={cfg.T}, d={cfg.d_model}, d_ff={cfg.d_ff},"
            f" head={widths}")


def _head_dims(cfg):
    dims, width = [], cfg.d_model
    for h in cfg.head_hidden:
        dims.append((width, h))
        width = h
    dims.append((width, cfg.n_classes))
    return dims


def flops_estimate(cfg: ModelConfig, include_head: bool = True) -> int:
    """Multiply-accumulate count for one sequence at full length."""
    T, d, f = cfg.T, cfg.d_model, cfg.d_ff
    per_layer = 4 * T * d * d + 2 * T * T * d + 2 * T * d * f
    head = sum(a * b for a, b in _head_dims(cfg)) if include_head else 0
    return cfg.n_layers * per_layer + head


# --------------------------------------------------------------------- forward

@dataclass
class ForwardTrace:
    """Activations kept by a training forward pass for :func:`model_backward`."""
    config: ModelConfig
    shape: tuple
    layers: list = field(default_factory=list)
    head: list = field(default_factory=list)
    head_out_in: np.ndarray = None
    param_ids: tuple = ()


def _check_input(P, params):
    cfg = params.config
    P = np.asarray(P)
    if P.ndim != 3 or P.shape[2] != cfg.d_model:
        raise ConfigError(f"input must be (B, T, {cfg.d_model}), got {P.shape}")
    if not 1 <= P.shape[1] <= cfg.T:
        raise ConfigError(f"sequence length {P.shape[1]} outside [1, {cfg.T}]")
    if not np.all(np.isfinite(P)):
        raise ValueError("input contains non-finite values")
    return P.astype(params.dtype, copy=False)


def _split_heads(x, B, T, h, dk, transpose):
    x = x.reshape(B, T, h, dk)
    x = x.transpose(0, 2, 3, 1) if transpose else x.transpose(0, 2, 1, 3)
    return np.ascontiguousarray(x).reshape(B * h, *x.shape[2:])


def _mhsa(x2, B, T, params, pre, cfg, p, seed, store):
    """Multi-head self-attention on flattened rows; returns ``(output, cache)``."""
    h, dk, d = cfg.n_heads, cfg.d_k, cfg.d_model
    w_qkv = np.concatenate([params[pre + "attn.wq"], params[pre + "attn.wk"], params[pre + "attn.wv"]], axis=1)
    b_qkv = np.concatenate([params[pre + "attn.bq"], params[pre + "attn.bk"], params[pre + "attn.bv"]])
    qkv = x2 @ w_qkv + b_qkv
    q = _split_heads(qkv[:, :d], B, T, h, dk, False)
    kT = _split_heads(qkv[:, d:2 * d], B, T, h, dk, True)
    vT = _split_heads(qkv[:, 2 * d:], B, T, h, dk, True)
    scale = 1.0 / math.sqrt(dk)
    att, probs = kernels.active.attention_forward(q, kT, vT, scale, p, seed, store_probs=store)
    concat = np.ascontiguousarray(att.reshape(B, h, T, dk).transpose(0, 2, 1, 3)).reshape(B * T, d)
    out = concat @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
    cache = dict(x2=x2, w_qkv=w_qkv, q=q, kT=kT, vT=vT, probs=probs, seed=seed, p=p, scale=scale,
                 concat=concat) if store else None
    return out, cache


def _encoder_layer(H, params, l, cfg, rng, train):
    K = kernels.active
    B, T, d = H.shape
    dt = H.dtype.type
    pre = f"layer{l}."
    x2 = H.reshape(B * T, d)
    p = cfg.dropout_p if train else 0.0
    seed = int(rng.integers(0, 2**32)) if p > 0 else 0
    mh, cache = _mhsa(x2, B, T, params, pre, cfg, p, seed, train)
    m1 = m2 = None
    if p > 0:
        m1 = dropout_mask(rng, mh.shape, p, dt)
        mh = mh * m1
    a, xhat1, rstd1 = K.layer_norm_forward(x2 + mh, params[pre + "norm1.gain"], params[pre + "norm1.bias"], LN_EPS)
    f = a @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
    g = K.gelu_forward(f)
    f2 = g @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
    if p > 0:
        m2 = dropout_mask(rng, f2.shape, p, dt)
        f2 = f2 * m2
    out, xhat2, rstd2 = K.layer_norm_forward(a + f2, params[pre + "norm2.gain"], params[pre + "norm2.bias"], LN_EPS)
    if train:
        cache.update(m1=m1, a=a, xhat1=xhat1, rstd1=rstd1, f=f, g=g, m2=m2, xhat2=xhat2, rstd2=rstd2)
    return out.reshape(B, T, d), cache


def _as_batch(X, params):
    cfg = params.config
    X = np.asarray(X)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != cfg.d_model:
        raise ConfigError(f"input must be (T, {cfg.d_model}) or (B, T, {cfg.d_model}), got {X.shape}")
    return X.astype(params.dtype, copy=False), single


def mhsa_forward(X, params: ModelParams, layer: int = 1, train_mode: bool = False, rng=None):
    """Self-attention sublayer of encoder ``layer`` on ``(T, d)`` or ``(B, T, d)``."""
    X, single = _as_batch(X, params)
    B, T, d = X.shape
    p = params.config.dropout_p if train_mode else 0.0
    seed = int(rng.integers(0, 2**32)) if p > 0 else 0
    out, _ = _mhsa(X.reshape(B * T, d), B, T, params, f"layer{layer}.", params.config, p, seed, False)
    out = out.reshape(B, T, d)
    return out[0] if single else out


def encoder_layer_forward(H, params: ModelParams, layer: int = 1, train_mode: bool = False, rng=None):
    """One post-norm encoder layer on ``(T, d)`` or ``(B, T, d)``."""
    H, single = _as_batch(H, params)
    out, _ = _encoder_layer(H, params, layer, params.config, rng, train_mode)
    return out[0] if single else out


def _forward(P, params, train, rng):
    cfg = params.config
    P = _check_input(P, params)
    if train and cfg.dropout_p > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    B, T, _ = P.shape
    trace = ForwardTrace(cfg, P.shape) if train else None
    H = P + params["pos_table"][:T]
    for l in range(1, cfg.n_layers + 1):
        H, cache = _encoder_layer(H, params, l, cfg, rng, train)
        if train:
            trace.layers.append(cache)
    z = H.mean(axis=1)
    K = kernels.active
    dt = z.dtype.type
    p = cfg.dropout_p if train else 0.0
    for i in range(1, len(cfg.head_hidden) + 1):
        pre = f"head.fc{i}."
        u = z @ params[pre + "weight"] + params[pre + "bias"]
        n, xhat, rstd = K.layer_norm_forward(u, params[f"head.norm{i}.gain"], params[f"head.norm{i}.bias"], LN_EPS)
        a = K.gelu_forward(n)
        mask = dropout_mask(rng, a.shape, p, dt) if p > 0 else None
        if train:
            trace.head.append(dict(z=z, xhat=xhat, rstd=rstd, n=n, mask=mask))
        z = a * mask if mask is not None else a
    logits = z @ params["head.out.weight"] + params["head.out.bias"]
    if train:
        trace.head_out_in = z
        trace.param_ids = tuple(id(v) for v in params.values())
    return logits, trace


def model_forward(P, params: ModelParams, train_mode: bool = False, rng=None) -> np.ndarray:
    """Raw logits ``(B, n_classes)``; ``train_mode`` enables dropout."""
    logits, _ = _forward(P, params, train_mode, rng)
    return logits


def forward_with_trace(P, params: ModelParams, rng=None):
    """Training-mode forward returning ``(logits, trace)``."""
    return _forward(P, params, True, rng)


# -------------------------------------------------------------------- backward

def _merge_heads(x, B, T, h, dk, transposed):
    x = x.reshape(B, h, dk, T).transpose(0, 3, 1, 2) if transposed else x.reshape(B, h, T, dk).transpose(0, 2, 1, 3)
    return x.reshape(B * T, h * dk)


def _encoder_layer_backward(dout, params, l, cfg, c, grads):
    K = kernels.active
    B, T, d = dout.shape
    h, dk = cfg.n_heads, cfg.d_k
    pre = f"layer{l}."
    dy = dout.reshape(B * T, d)
    dsum2, grads[pre + "norm2.gain"], grads[pre + "norm2.bias"] = K.layer_norm_backward(
        dy, c["xhat2"], c["rstd2"], params[pre + "norm2.gain"])
    df2 = dsum2 * c["m2"] if c["m2"] is not None else dsum2
    grads[pre + "ffn.w2"] = c["g"].T @ df2
    grads[pre + "ffn.b2"] = df2.sum(axis=0)
    df = K.gelu_backward(c["f"], df2 @ params[pre + "ffn.w2"].T)
    grads[pre + "ffn.w1"] = c["a"].T @ df
    grads[pre + "ffn.b1"] = df.sum(axis=0)
    da = dsum2 + df @ params[pre + "ffn.w1"].T
    dsum1, grads[pre + "norm1.gain"], grads[pre + "norm1.bias"] = K.layer_norm_backward(
        da, c["xhat1"], c["rstd1"], params[pre + "norm1.gain"])
    dmh = dsum1 * c["m1"] if c["m1"] is not None else dsum1
    grads[pre + "attn.wo"] = c["concat"].T @ dmh
    grads[pre + "attn.bo"] = dmh.sum(axis=0)
    datt = _split_heads(dmh @ params[pre + "attn.wo"].T, B, T, h, dk, False)
    dq, dkT, dvT = K.attention_backward(datt, c["q"], c["kT"], c["vT"], c["probs"], c["scale"], c["p"], c["seed"])
    dqkv = np.concatenate([_merge_heads(dq, B, T, h, dk, False),
                           _merge_heads(dkT, B, T, h, dk, True),
                           _merge_heads(dvT, B, T, h, dk, True)], axis=1)
    dw = c["x2"].T @ dqkv
    db = dqkv.sum(axis=0)
    for j, s in enumerate("qkv"):
        grads[pre + f"attn.w{s}"] = np.ascontiguousarray(dw[:, j * d:(j + 1) * d])
        grads[pre + f"attn.b{s}"] = db[j * d:(j + 1) * d]
    dx = dsum1 + dqkv @ c["w_qkv"].T
    return dx.reshape(B, T, d)


def model_backward(trace: ForwardTrace, dlogits, params: ModelParams) -> ModelParams:
    """Gradients of the loss for every tensor, given ``dLoss/dLogits``."""
    cfg = params.config
    if trace is None:
        raise ValueError("backward needs a trace from a training-mode forward")
    if trace.config != cfg or trace.param_ids != tuple(id(v) for v in params.values()):
        raise ConfigError("trace was produced with different parameters")
    B, T, d = trace.shape
    dlogits = np.asarray(dlogits, dtype=params.dtype)
    if dlogits.shape != (B, cfg.n_classes):
        raise ConfigError(f"dlogits must be {(B, cfg.n_classes)}, got {dlogits.shape}")
    K = kernels.active
    grads = ModelParams(cfg)
    g = {}
    g["head.out.weight"] = trace.head_out_in.T @ dlogits
    g["head.out.bias"] = dlogits.sum(axis=0)
    dz = dlogits @ params["head.out.weight"].T
    for i in range(len(cfg.head_hidden), 0, -1):
        c = trace.head[i - 1]
        if c["mask"] is not None:
            dz = dz * c["mask"]
        dn = K.gelu_backward(c["n"], dz)
        du, g[f"head.norm{i}.gain"], g[f"head.norm{i}.bias"] = K.layer_norm_backward(
            dn, c["xhat"], c["rstd"], params[f"head.norm{i}.gain"])
        g[f"head.fc{i}.weight"] = c["z"].T @ du
        g[f"head.fc{i}.bias"] = du.sum(axis=0)
        dz = du @ params[f"head.fc{i}.weight"].T
    dH = np.broadcast_to((dz / T)[:, None, :], (B, T, d)).astype(dz.dtype)
    for l in range(cfg.n_layers, 0, -1):
        dH = _encoder_layer_backward(dH, params, l, cfg, trace.layers[l - 1], g)
    dpos = np.zeros_like(params["pos_table"])
    if params.trainable("pos_table"):
        dpos[:T] = dH.sum(axis=0)
    g["pos_table"] = dpos
    for name in params:
        grads[name] = g[name].astype(params.dtype, copy=False)
    return grads
