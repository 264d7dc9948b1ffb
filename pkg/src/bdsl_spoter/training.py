"""Training engine: smoothed cross-entropy, AdamW, one-cycle LR, length curriculum,
early stopping, and the finite-difference gradient check."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .nn.functional import log_softmax_rows
from .nn.model import (
    ModelConfig,
    ModelParams,
    forward_with_trace,
    init_params,
    is_norm_or_position,
    model_backward,
    model_forward,
    param_count,
)
from .pose_data import FEATURE_DIM
from .preprocess import AugmentationConfig, PreprocessConfig, preprocess_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    label_smoothing_eps: float = 0.1
    weight_decay: float = 1e-4
    max_lr: float = 1e-3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    curriculum_lengths: tuple = (80, 140, 200)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "curriculum_lengths", tuple(int(v) for v in self.curriculum_lengths))
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must be in [0, max_epochs]")
        if not 0.0 <= self.label_smoothing_eps < 1.0:
            raise ValueError("label_smoothing_eps must be in [0, 1)")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError("pct_start must be in (0, 1)")
        lengths = self.curriculum_lengths
        if not lengths or any(b < a for a, b in zip(lengths, lengths[1:])) or lengths[0] < 1:
            raise ValueError("curriculum_lengths must be a non-empty non-decreasing list of positive ints")

    def to_dict(self):
        d = asdict(self)
        d["curriculum_lengths"] = list(self.curriculum_lengths)
        return d


# ------------------------------------------------------------------------ loss

def label_smoothing_loss(logits, labels, eps: float = 0.1):
    """Mean cross-entropy against ``(1-eps) onehot + eps/C``; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not align")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must be in [0, 1)")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError("label out of range")
    logp = log_softmax_rows(logits.astype(np.float64))
    q = np.full((B, C), eps / C)
    q[np.arange(B), labels] += 1.0 - eps
    loss = float(-(q * logp).sum() / B)
    grad = (np.exp(logp) - q) / B
    return loss, grad.astype(logits.dtype)


# -------------------------------------------------------------------- schedule

def _cos_anneal(start, end, frac):
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * frac))


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine ramp from ``max_lr/div_factor`` up to ``max_lr`` at ``round(pct_start*N)``,
    then cosine decay to ``max_lr/final_div_factor`` at step ``N``."""
    if total_steps < 2:
        raise ValueError("total_steps must be >= 2")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    initial = cfg.max_lr / cfg.div_factor
    final = cfg.max_lr / cfg.final_div_factor
    peak = min(max(int(round(cfg.pct_start * total_steps)), 1), total_steps - 1)
    if step == 0:
        return initial
    if step == peak:
        return cfg.max_lr
    if step == total_steps:
        return final
    if step < peak:
        return _cos_anneal(initial, cfg.max_lr, step / peak)
    return _cos_anneal(cfg.max_lr, final, (step - peak) / (total_steps - peak))


def curriculum_length(epoch: int, cfg: TrainConfig) -> int:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lengths = cfg.curriculum_lengths
    return lengths[min(epoch, len(lengths) - 1)]


# ------------------------------------------------------------------- optimizer

@dataclass
class AdamWState:
    m: dict
    v: dict
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay; LayerNorm and positional tensors are not decayed."""

    def __init__(self, params: ModelParams, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamWState(m={k: np.zeros_like(v) for k, v in params.items()},
                                v={k: np.zeros_like(v) for k, v in params.items()})

    def step(self, params: ModelParams, grads, lr: float):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in params.items():
            if not params.trainable(name):
                continue
            g = grads[name]
            dt = p.dtype.type
            m, v = st.m[name], st.v[name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            if self.weight_decay and not is_norm_or_position(name):
                p *= dt(1.0 - lr * self.weight_decay)
            p -= dt(lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(self.eps))
        return params


def optimizer_step(params: ModelParams, grads, lr: float, weight_decay: float, state: AdamW | None = None):
    """Functional wrapper: one AdamW update in place; returns ``(params, state)``."""
    if state is None:
        state = AdamW(params, weight_decay)
    state.weight_decay = weight_decay
    state.step(params, grads, lr)
    return params, state


# -------------------------------------------------------------- run tracking

@dataclass
class EarlyStopState:
    patience: int
    best_val_top1: float = -math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0

    def update(self, epoch: int, val_top1: float) -> bool:
        """Record an epoch; returns True if it is the new best."""
        if val_top1 > self.best_val_top1:
            self.best_val_top1 = val_top1
            self.best_epoch = epoch
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_improvement > self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float
    lr: float
    curriculum_length: int
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "val_loss", "val_top1", "lr", "curriculum_length", "seconds")

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.records:
            lines.append("\t".join(repr(getattr(r, c)) if isinstance(getattr(r, c), float) else str(getattr(r, c))
                                   for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


@dataclass
class FitResult:
    params: ModelParams
    log: TrainLog
    best_epoch: int
    best_val_top1: float


# -------------------------------------------------------------------- trainer

class Trainer:
    """Owns one parameter set, its optimizer state and the dropout stream."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.opt = AdamW(params, cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 0x5EED])

    def train_step(self, P, labels, lr: float) -> float:
        logits, trace = forward_with_trace(P, self.params, self.rng)
        loss, dlogits = label_smoothing_loss(logits, labels, self.cfg.label_smoothing_eps)
        grads = model_backward(trace, dlogits, self.params)
        del trace
        self.opt.step(self.params, grads, lr)
        return loss


def predict_logits(params: ModelParams, features, batch_size: int = 64) -> np.ndarray:
    out = []
    for lo in range(0, len(features), batch_size):
        out.append(model_forward(features[lo:lo + batch_size], params).astype(np.float64))
    if not out:
        return np.zeros((0, params.config.n_classes))
    return np.concatenate(out)


def evaluate_features(params: ModelParams, features, labels, eps: float, batch_size: int = 64):
    """``(loss, top1, logits)`` for preprocessed features in inference mode."""
    logits = predict_logits(params, features, batch_size)
    loss, _ = label_smoothing_loss(logits, labels, eps)
    top1 = float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
    return loss, top1, logits


def fit(train_samples: Sequence, val_samples: Sequence, model_cfg: ModelConfig, cfg: TrainConfig,
        aug: AugmentationConfig | None = None, prep: PreprocessConfig | None = None,
        params: ModelParams | None = None, executor=None, on_epoch=None) -> FitResult:
    """Train with curriculum and early stopping; returns the best-validation parameters."""
    if not train_samples or not val_samples:
        raise ValueError("fit needs non-empty train and validation sets")
    train_signers = {s.signer_id for s in train_samples}
    val_signers = {s.signer_id for s in val_samples}
    if train_signers & val_signers:
        raise ValueError(f"train and validation share signers: {sorted(train_signers & val_signers)}")
    if model_cfg.d_model != FEATURE_DIM:
        raise ValueError(f"d_model must equal the pose feature size {FEATURE_DIM}, got {model_cfg.d_model}")
    if cfg.curriculum_lengths[-1] != model_cfg.T:
        raise ValueError("last curriculum length must equal the model sequence length")
    for s in list(train_samples) + list(val_samples):
        if s.label >= model_cfg.n_classes:
            raise ValueError(f"{s.video_id}: label {s.label} >= n_classes {model_cfg.n_classes}")
    aug = aug if aug is not None else AugmentationConfig()
    prep = prep if prep is not None else PreprocessConfig(T=model_cfg.T)
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    dtype = params.dtype
    trainer = Trainer(params, cfg)

    val_x = preprocess_batch(val_samples, model_cfg.T, prep, None, executor=executor, dtype=dtype)
    val_y = np.array([s.label for s in val_samples])
    train_y = np.array([s.label for s in train_samples])
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(2, steps_per_epoch * cfg.max_epochs)
    step = 0
    stopper = EarlyStopState(cfg.patience)
    best = params.copy()
    log_ = TrainLog()
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        L = curriculum_length(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        feats = preprocess_batch([train_samples[i] for i in order], L, prep, aug, seed=cfg.seed,
                                 epoch=epoch, indices=order, executor=executor, dtype=dtype)
        losses = []
        lr = onecycle_lr(step, total_steps, cfg)
        for b in range(steps_per_epoch):
            sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
            lr = onecycle_lr(step, total_steps, cfg)
            losses.append(trainer.train_step(feats[sl], train_y[order[sl]], lr))
            step += 1
        del feats
        val_loss, val_top1, _ = evaluate_features(params, val_x, val_y, cfg.label_smoothing_eps)
        rec = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_top1, lr, L, time.perf_counter() - t0)
        log_.append(rec)
        if stopper.update(epoch, val_top1):
            best = params.copy()
        log.info("epoch %d len=%d train_loss=%.4f val_loss=%.4f val_top1=%.4f lr=%.2e (%.1fs)",
                 epoch, L, rec.train_loss, val_loss, val_top1, lr, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.should_stop:
            break
    return FitResult(best, log_, stopper.best_epoch, stopper.best_val_top1)


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_text(self) -> str:
        width = max((len(k) for k in self.errors), default=4)
        rows = [f"{k:<{width}}  {v:.3e}" for k, v in self.errors.items()]
        rows.append(f"{'max':<{width}}  {self.max_error:.3e}  ({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g})")
        return "\n".join(rows)


def gradient_check(config: ModelConfig, tolerance: float = 1e-4, seed: int = 0, batch: int = 2,
                   step: float = 1e-5, train_mode: bool = True) -> GradCheckReport:
    """Compare analytic gradients with long-double central differences.

    The scalar checked is ``sum(w * logits)`` for a fixed random ``w``. Dropout
    masks drawn by the analytic forward are replayed in every perturbed
    evaluation. Per-tensor error is ``max|g - n| / max(max|g|, max|n|, floor)``
    with ``floor = 1e-8 * max|n|`` over all tensors, so tensors whose true
    gradient is identically zero (e.g. key biases) are judged absolutely.
    """
    from .nn.reference import XP, frozen_masks, reference_forward

    if (n := param_count(config)) > 50_000:
        raise ValueError(f"config has {n} parameters; gradient_check is for tiny configs")
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, np.float64)
    if config.encoding_type == "learnable":
        params["pos_table"][:] = rng.normal(0.0, 0.5, params["pos_table"].shape)
    for name in params:
        if name.endswith((".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
            params[name][:] = rng.normal(0.0, 0.1, params[name].shape)
        elif name.endswith(".gain"):
            params[name][:] = 1.0 + rng.normal(0.0, 0.1, params[name].shape)
    P = rng.normal(size=(batch, config.T, config.d_model))
    w = rng.normal(size=(batch, config.n_classes))

    if not train_mode:
        params = ModelParams(replace(config, dropout_p=0.0), params.items())
    _, trace = forward_with_trace(P, params, np.random.default_rng([seed, 1]))
    grads = model_backward(trace, w, params)
    masks = frozen_masks(trace)

    ext = {k: v.astype(XP) for k, v in params.items()}
    Pext = P.astype(XP)
    wext = w.astype(XP)
    h = XP(step)

    def objective():
        return (reference_forward(Pext, _Wrap(params.config, ext), masks) * wext).sum()

    numeric = {}
    for name, t in ext.items():
        num = np.zeros(t.shape, dtype=XP)
        if params.trainable(name):
            flat = t.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = objective()
                flat[i] = orig - h
                down = objective()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
        numeric[name] = num.astype(np.float64)
    floor = 1e-8 * max(float(np.max(np.abs(v))) if v.size else 0.0 for v in numeric.values())
    errors = {}
    for name in params:
        a, nm = grads[name], numeric[name]
        denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(nm))), floor, np.finfo(float).tiny)
        errors[name] = float(np.max(np.abs(a - nm))) / denom
    return GradCheckReport(errors, tolerance)


class _Wrap(dict):
    def __init__(self, config, tensors):
        super().__init__(tensors)
        self.config = config
