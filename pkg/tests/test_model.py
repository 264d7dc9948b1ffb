import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdsl_spoter.nn.functional import gelu, layer_norm, log_softmax_rows, softmax_rows
from bdsl_spoter.nn.model import (
    ConfigError,
    ModelConfig,
    ModelParams,
    encoder_layer_forward,
    flops_estimate,
    flops_formula,
    forward_with_trace,
    init_params,
    mhsa_forward,
    model_backward,
    model_forward,
    param_count,
    param_shapes,
)
from bdsl_spoter.nn.reference import XP, erf_matches_math, reference_forward


# ------------------------------------------------------------- functional

def test_gelu_examples(backend):
    assert gelu(np.array([0.0]))[0] == 0.0
    assert 9.999 <= gelu(np.array([10.0]))[0] <= 10.0
    assert abs(gelu(np.array([1.0]))[0] - 0.841345) < 1e-6


def test_layer_norm_examples(backend, rng):
    d = 16
    assert np.all(layer_norm(np.full((1, d), 3.0), np.ones(d), np.zeros(d)) == 0)
    y = layer_norm(rng.normal(5, 3, size=(4, d)), np.ones(d), np.zeros(d))
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-4)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_rows(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]], rtol=1e-15)
    out = softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out)) and out[0, 0] == 1.0 and out[0, 1] == math.exp(-1000.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        S = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 9)))) * 10 ** rng.uniform(-2, 4)
        np.testing.assert_allclose(softmax_rows(S).sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.exp(log_softmax_rows(S)).sum(axis=1), 1.0, atol=1e-12)


def test_extended_erf():
    assert erf_matches_math() < 1e-15


# --------------------------------------------------------------------- MHSA

def _params(cfg, seed=0, dtype=np.float64):
    return init_params(cfg, seed, dtype)


def naive_mhsa(X, p, pre, h):
    T, d = X.shape
    dk = d // h
    Q = X @ p[pre + "attn.wq"] + p[pre + "attn.bq"]
    K = X @ p[pre + "attn.wk"] + p[pre + "attn.bk"]
    V = X @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
    cat = np.zeros((T, d))
    for i in range(h):
        cols = slice(i * dk, (i + 1) * dk)
        for t in range(T):
            s = [sum(Q[t, c] * K[u, c] for c in range(cols.start, cols.stop)) / math.sqrt(dk) for u in range(T)]
            m = max(s)
            w = [math.exp(v - m) for v in s]
            z = sum(w)
            for c in range(cols.start, cols.stop):
                cat[t, c] = sum(w[u] / z * V[u, c] for u in range(T))
    return cat @ p[pre + "attn.wo"] + p[pre + "attn.bo"]


def test_mhsa_matches_triple_loop(backend, rng):
    cfg = ModelConfig(d_model=12, n_heads=2, d_ff=8, T=4, n_classes=3, head_hidden=(), n_layers=1)
    p = _params(cfg)
    for k in p:
        if p[k].ndim == 1:
            p[k][:] = rng.normal(size=p[k].shape)
    X = rng.normal(size=(4, 12))
    np.testing.assert_allclose(mhsa_forward(X, p), naive_mhsa(X, p, "layer1.", 2), atol=1e-10)


def test_mhsa_single_token(backend, rng):
    cfg = ModelConfig(d_model=12, n_heads=3, d_ff=8, T=5, n_classes=2, head_hidden=(), n_layers=1)
    p = _params(cfg)
    X = rng.normal(size=(1, 12))
    v = X @ p["layer1.attn.wv"] + p["layer1.attn.bv"]
    np.testing.assert_allclose(mhsa_forward(X, p), v @ p["layer1.attn.wo"] + p["layer1.attn.bo"], atol=1e-14)


def test_mhsa_uniform_attention(backend, rng):
    cfg = ModelConfig(d_model=12, n_heads=3, d_ff=8, T=6, n_classes=2, head_hidden=(), n_layers=1)
    p = _params(cfg)
    p["layer1.attn.wq"][:] = 0
    p["layer1.attn.wk"][:] = 0
    p["layer1.attn.wv"][:] = np.eye(12)
    p["layer1.attn.wo"][:] = np.eye(12)
    X = rng.normal(size=(6, 12))
    np.testing.assert_allclose(mhsa_forward(X, p), np.repeat(X.mean(axis=0, keepdims=True), 6, 0), atol=1e-14)


def test_shape_mismatch_is_config_error():
    p = _params(ModelConfig(d_model=12, n_heads=3, d_ff=8, T=6, n_classes=2, head_hidden=(), n_layers=1))
    with pytest.raises(ConfigError):
        mhsa_forward(np.zeros((3, 11)), p)
    with pytest.raises(ConfigError):
        model_forward(np.zeros((1, 7, 12)), p)
    with pytest.raises(ValueError):
        model_forward(np.full((1, 3, 12), np.nan), p)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=100, n_heads=9)
    with pytest.raises(ConfigError):
        ModelConfig(encoding_type="rotary")
    assert ModelConfig().d_k == 12


# ------------------------------------------------------------ encoder layer

def test_encoder_layer_zero_weights(backend, rng):
    cfg = ModelConfig(d_model=12, n_heads=3, d_ff=8, T=6, n_classes=2, head_hidden=(), n_layers=1)
    p = _params(cfg)
    for k in p:
        if "layer1" in k and "norm" not in k:
            p[k][:] = 0
    H = rng.normal(size=(6, 12))

    def ln(x):
        m = x.mean(axis=1, keepdims=True)
        return (x - m) / np.sqrt(((x - m) ** 2).mean(axis=1, keepdims=True) + 1e-5)

    np.testing.assert_allclose(encoder_layer_forward(H, p), ln(ln(H)), atol=1e-12)


def test_encoder_layer_shape_and_determinism(backend, rng):
    cfg = ModelConfig(d_model=18, n_heads=9, d_ff=24, T=8, n_classes=3, head_hidden=(16,), n_layers=2)
    p = _params(cfg)
    H = rng.normal(size=(2, 8, 18))
    a = encoder_layer_forward(H, p, 2)
    assert a.shape == H.shape
    assert np.array_equal(a, encoder_layer_forward(H, p, 2))
    b = encoder_layer_forward(H, p, 2, train_mode=True, rng=np.random.default_rng(0))
    assert not np.allclose(a, b)


# ----------------------------------------------------------------- forward

def test_forward_shape_and_batch_independence(backend, rng):
    p = init_params(ModelConfig())
    P = rng.normal(size=(3, 200, 108))
    P[1] = P[0]
    out = model_forward(P, p)
    assert out.shape == (3, 60)
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out, model_forward(P, p))


def test_permutation_invariance_equal_frames(backend, rng):
    cfg = replace(ModelConfig(T=30), dropout_p=0.0)
    p = init_params(cfg, 1, np.float64)
    p["pos_table"][:] = 0
    P = np.repeat(rng.normal(size=(2, 1, 108)), 30, axis=1)
    perm = rng.permutation(30)
    np.testing.assert_allclose(model_forward(P[:, perm], p), model_forward(P, p), atol=1e-6)


def test_shorter_sequence_uses_leading_positions(backend, rng):
    cfg = ModelConfig(d_model=18, n_heads=9, d_ff=24, T=8, n_classes=3, head_hidden=(16,), n_layers=1)
    p = _params(cfg)
    P = rng.normal(size=(1, 5, 18))
    q = p.copy()
    q["pos_table"][5:] = 99.0
    assert np.array_equal(model_forward(P, p), model_forward(P, q))


@pytest.mark.parametrize("enc", ["learnable", "sinusoidal", "fixed_random"])
def test_reference_forward_agrees(backend, rng, enc, tiny_config):
    cfg = replace(tiny_config, encoding_type=enc)
    p = _params(cfg)
    P = rng.normal(size=(2, 8, 18))
    ref = reference_forward(P.astype(XP), _wrap(p), None)
    np.testing.assert_allclose(model_forward(P, p), ref.astype(np.float64), atol=1e-12)


def _wrap(p):
    from bdsl_spoter.training import _Wrap
    return _Wrap(p.config, {k: v.astype(XP) for k, v in p.items()})


# ---------------------------------------------------------------- backward

def test_zero_upstream_gives_zero_grads(backend, rng, tiny_config):
    p = _params(tiny_config)
    _, tr = forward_with_trace(rng.normal(size=(2, 8, 18)), p, np.random.default_rng(0))
    g = model_backward(tr, np.zeros((2, 3)), p)
    assert list(g) == list(p)
    assert all(np.all(v == 0) for v in g.values())


def test_backward_rejects_foreign_trace(rng, tiny_config):
    p = _params(tiny_config)
    _, tr = forward_with_trace(rng.normal(size=(1, 8, 18)), p, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        model_backward(tr, np.zeros((1, 3)), p.copy())


def test_pos_grad_rows_only_where_used(backend, rng, tiny_config):
    p = _params(tiny_config)
    for T in (1, 2):
        _, tr = forward_with_trace(rng.normal(size=(1, T, 18)), p, np.random.default_rng(0))
        g = model_backward(tr, rng.normal(size=(1, 3)), p)["pos_table"]
        assert np.all(np.any(g[:T] != 0, axis=1)) and np.all(g[T:] == 0)


def test_pos_grad_zero_for_fixed_encodings(rng, tiny_config):
    p = _params(replace(tiny_config, encoding_type="sinusoidal"))
    _, tr = forward_with_trace(rng.normal(size=(1, 8, 18)), p, np.random.default_rng(0))
    assert np.all(model_backward(tr, np.ones((1, 3)), p)["pos_table"] == 0)


def test_backward_float64_fd_spot_check(backend, rng):
    cfg = ModelConfig(d_model=6, n_heads=2, d_ff=5, T=4, n_classes=3, head_hidden=(4,), n_layers=2)
    p = _params(cfg, 3)
    P = rng.normal(size=(2, 4, 6))
    w = rng.normal(size=(2, 3))
    _, tr = forward_with_trace(P, p, np.random.default_rng(9))
    g = model_backward(tr, w, p)
    for name in ("layer1.attn.wq", "layer2.ffn.w1", "head.fc1.weight", "pos_table", "layer1.norm1.gain"):
        t = p[name].reshape(-1)
        for i in range(0, t.size, max(1, t.size // 5)):
            o = t[i]
            vals = []
            for h in (1e-6, -1e-6):
                t[i] = o + h
                vals.append((model_forward(P, p, True, np.random.default_rng(9)) * w).sum())
            t[i] = o
            assert abs((vals[0] - vals[1]) / 2e-6 - g[name].reshape(-1)[i]) < 1e-6


# ----------------------------------------------------------- counts, flops

def test_param_count_default_budget():
    n = param_count(ModelConfig())
    assert 762_000 <= n <= 932_000
    assert n == init_params(ModelConfig()).n_elements()


def test_param_count_linear_case():
    assert param_count(ModelConfig(n_layers=0, head_hidden=())) == 28_140


@given(st.integers(1, 6), st.integers(1, 200), st.integers(1, 300))
@settings(max_examples=30)
def test_param_count_dff_delta(n_layers, dff, extra):
    a = ModelConfig(n_layers=n_layers, d_ff=dff)
    b = replace(a, d_ff=dff + extra)
    assert param_count(b) - param_count(a) == n_layers * (2 * 108 * extra + extra)


def test_param_shapes_names_unique():
    names = [n for n, _ in param_shapes(ModelConfig())]
    assert len(names) == len(set(names))
    ModelParams(ModelConfig(), init_params(ModelConfig()).items()).validate()


def test_flops_examples():
    d, f = 108, 432
    assert flops_estimate(ModelConfig(T=1, n_layers=1), include_head=False) == 4 * d * d + 2 * d + 2 * d * f
    cfg = ModelConfig()
    hand = 4 * (4 * 200 * d * d + 2 * 200 * 200 * d + 2 * 200 * d * f) + (108 * 512 + 512 * 256 + 256 * 128 + 128 * 60)
    assert flops_estimate(cfg) == hand == 146_761_216
    assert "n_layers*(4*T*d^2 + 2*T^2*d + 2*T*d*d_ff)" in flops_formula(cfg)
    a = flops_estimate(ModelConfig(T=50), include_head=False)
    b = flops_estimate(ModelConfig(T=100), include_head=False)
    attn = lambda T: 4 * 2 * T * T * d
    assert b - a == (attn(100) - attn(50)) + 4 * (4 * 50 * d * d + 2 * 50 * d * f)
