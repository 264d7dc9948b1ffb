"""Classification metrics, confusion analysis, cross-validation statistics and
inference throughput profiling."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .pose_data import DataError

Z95 = 1.96


# --------------------------------------------------------------------- ranking

def rank_classes(logits) -> np.ndarray:
    """Class indices per row, best first; equal logits rank the lower index first."""
    logits = np.asarray(logits)
    # stable sort on the negated scores keeps index order inside ties
    return np.argsort(-logits, axis=1, kind="stable")


def topk_accuracy(logits, labels, k: int) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("topk_accuracy needs a non-empty (N, C) logit matrix")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels must have shape ({logits.shape[0]},), got {labels.shape}")
    C = logits.shape[1]
    if not 1 <= k <= C:
        raise ValueError(f"k must be in [1, {C}], got {k}")
    top = rank_classes(logits)[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


# ------------------------------------------------------------------ confusion

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
            raise ValueError(f"confusion matrix must be square and non-empty, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise ValueError("confusion counts must be integers")
        c = c.astype(np.int64)
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_predictions(cls, labels, preds, n_classes: int) -> "ConfusionMatrix":
        labels = np.asarray(labels, dtype=np.intp)
        preds = np.asarray(preds, dtype=np.intp)
        if labels.shape != preds.shape:
            raise ValueError("labels and predictions differ in length")
        if labels.size and (labels.min() < 0 or preds.min() < 0
                            or labels.max() >= n_classes or preds.max() >= n_classes):
            raise ValueError("class index out of range")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (labels, preds), 1)
        return cls(counts)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def per_class_f1(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(float)
        pred = self.counts.sum(axis=0).astype(float)
        true = self.counts.sum(axis=1).astype(float)
        # F1 = 2TP / (pred + true); zero denominator counts as 0
        denom = pred + true
        return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)

    def per_class_accuracy(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(float)
        sup = self.support.astype(float)
        return np.divide(tp, sup, out=np.zeros_like(tp), where=sup > 0)

    def to_tsv(self, names: Sequence[str] | None = None) -> str:
        names = list(names) if names is not None else [str(i) for i in range(self.n_classes)]
        lines = ["true\\pred\t" + "\t".join(names)]
        for name, row in zip(names, self.counts.tolist()):
            lines.append(name + "\t" + "\t".join(map(str, row)))
        return "\n".join(lines) + "\n"

    def to_pgm(self, cell: int = 8) -> bytes:
        """Binary PGM of row-normalised counts; dark means frequent."""
        sup = self.support.astype(float)[:, None]
        frac = np.divide(self.counts, sup, out=np.zeros(self.counts.shape), where=sup > 0)
        img = np.round(255 * (1.0 - frac)).astype(np.uint8)
        img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def macro_f1(confusion: ConfusionMatrix) -> float:
    if confusion.total == 0:
        raise ValueError("macro_f1 needs at least one sample")
    return float(np.mean(confusion.per_class_f1()))


@dataclass(frozen=True, eq=False)
class MetricsReport:
    top1: float
    top5: float
    macro_f1: float
    per_class_f1: tuple
    confusion: ConfusionMatrix
    n_samples: int
    per_class_accuracy: tuple = ()
    loss: float | None = None

    def __post_init__(self):
        if self.top5 < self.top1:
            raise ValueError(f"top5 {self.top5} < top1 {self.top1}")
        for v in (self.top1, self.top5, self.macro_f1):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {v} outside [0, 1]")
        if self.confusion.total != self.n_samples:
            raise ValueError("confusion total differs from n_samples")

    def to_dict(self, names=None) -> dict:
        names = list(names) if names is not None else [str(i) for i in range(len(self.per_class_f1))]
        return {
            "n_samples": self.n_samples,
            "top1": self.top1,
            "top5": self.top5,
            "macro_f1": self.macro_f1,
            "loss": self.loss,
            "per_class": [
                {"class": n, "f1": f, "accuracy": a, "support": int(s)}
                for n, f, a, s in zip(names, self.per_class_f1, self.per_class_accuracy,
                                      self.confusion.support)
            ],
        }


def evaluate_logits(logits, labels, loss: float | None = None) -> MetricsReport:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    C = logits.shape[1]
    preds = rank_classes(logits)[:, 0]
    cm = ConfusionMatrix.from_predictions(labels, preds, C)
    return MetricsReport(
        top1=topk_accuracy(logits, labels, 1),
        top5=topk_accuracy(logits, labels, min(5, C)),
        macro_f1=macro_f1(cm),
        per_class_f1=tuple(cm.per_class_f1().tolist()),
        confusion=cm,
        n_samples=len(labels),
        per_class_accuracy=tuple(cm.per_class_accuracy().tolist()),
        loss=loss,
    )


# ------------------------------------------------------------------ statistics

def cohens_d(group_a, group_b) -> float:
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least 2 values")
    pooled = math.sqrt(((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2))
    if pooled == 0:
        raise ValueError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / pooled)


@dataclass(frozen=True)
class CVResult:
    fold_accuracies: tuple
    mean: float
    std: float
    ci95: tuple
    cohens_d_vs_baseline: float | None = None
    folds: tuple = ()

    def __post_init__(self):
        lo, hi = self.ci95
        if not (lo <= self.mean <= hi) or self.std < 0:
            raise ValueError("inconsistent cross-validation summary")

    def to_dict(self) -> dict:
        return {
            "fold_accuracies": list(self.fold_accuracies),
            "mean": self.mean,
            "std": self.std,
            "ci95": list(self.ci95),
            "cohens_d_vs_baseline": self.cohens_d_vs_baseline,
            "folds": [sorted(f) for f in self.folds],
        }


def cv_summary(fold_accuracies, baseline=None, folds=()) -> CVResult:
    acc = np.asarray(fold_accuracies, dtype=float)
    if acc.size < 2:
        raise ValueError("need at least 2 folds")
    mean = float(acc.mean())
    std = float(acc.std(ddof=1))
    half = Z95 * std / math.sqrt(acc.size)
    d = cohens_d(acc, baseline) if baseline is not None else None
    return CVResult(tuple(acc.tolist()), mean, std, (mean - half, mean + half), d, tuple(folds))


def signer_folds(samples, K: int, seed: int = 0) -> list[frozenset]:
    """Split the distinct signers into ``K`` disjoint, covering groups.

    Signers are shuffled by ``seed``, then dealt to the fold with the fewest
    videos so far (ties to the lower fold index).
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.signer_id] = counts.get(s.signer_id, 0) + 1
    signers = sorted(counts)
    if len(signers) < K:
        raise DataError(f"{len(signers)} signers cannot fill {K} signer-disjoint folds")
    order = np.random.default_rng(seed).permutation(len(signers))
    folds = [[] for _ in range(K)]
    load = np.zeros(K, dtype=np.int64)
    for pos, i in enumerate(order):
        sid = signers[i]
        # the first K signers seed one fold each so none stays empty
        k = pos if pos < K else int(np.argmin(load))
        folds[k].append(sid)
        load[k] += counts[sid]
    return [frozenset(f) for f in folds]


def cross_validate(samples, K: int, model_cfg, train_cfg, seed: int = 0, aug=None, prep=None,
                   baseline=None, executor=None, on_fold=None) -> CVResult:
    """Signer-disjoint K-fold: each fold is held out once for evaluation.

    For early stopping, ``max(1, n // K)`` of the remaining ``n`` signers
    (chosen by ``(seed, fold)``) are set aside as the validation set.
    """
    from .training import fit, predict_logits
    from .preprocess import PreprocessConfig, preprocess_batch

    folds = signer_folds(samples, K, seed)
    prep = prep if prep is not None else PreprocessConfig(T=model_cfg.T)
    accs = []
    for k, held in enumerate(folds):
        pool = sorted(frozenset().union(*(f for j, f in enumerate(folds) if j != k)))
        if len(pool) < 2:
            raise DataError("each round needs at least 2 non-held-out signers for train and validation")
        order = np.random.default_rng([seed, k]).permutation(len(pool))
        val_signers = {pool[i] for i in order[:max(1, len(pool) // K)]}
        train = [s for s in samples if s.signer_id not in held and s.signer_id not in val_signers]
        val = [s for s in samples if s.signer_id in val_signers]
        test = [s for s in samples if s.signer_id in held]
        cfg_k = replace(train_cfg, seed=train_cfg.seed + k)
        result = fit(train, val, model_cfg, cfg_k, aug=aug, prep=prep, executor=executor)
        x = preprocess_batch(test, model_cfg.T, prep, None, executor=executor, dtype=result.params.dtype)
        y = np.array([s.label for s in test])
        acc = topk_accuracy(predict_logits(result.params, x), y, 1)
        accs.append(acc)
        if on_fold is not None:
            on_fold(k, acc)
    return cv_summary(accs, baseline, folds)


# ------------------------------------------------------------------ throughput

@dataclass(frozen=True)
class ThroughputReport:
    param_count: int
    flops: int
    T: int
    n_timed: int
    mean_latency_ms: float
    p95_latency_ms: float
    fps: float
    peak_working_set_bytes: int
    backend: str
    latencies_ms: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "param_count", "flops", "T", "n_timed", "mean_latency_ms", "p95_latency_ms", "fps",
            "peak_working_set_bytes", "backend")}
        return d


def working_set_estimate(cfg, batch: int = 1, itemsize: int = 4) -> int:
    """Bytes of weights plus the largest simultaneously live inference activations."""
    from .nn.model import param_count
    T, d = cfg.T, cfg.d_model
    attn = batch * cfg.n_heads * T * T          # one score matrix per head
    rows = batch * T * (3 * d + cfg.d_ff + 2 * d)
    return itemsize * (param_count(cfg) + attn + rows)


def throughput_profile(params, n_warmup: int = 5, n_timed: int = 50, T: int | None = None,
                       seed: int = 0) -> ThroughputReport:
    """Time single-sequence inference on fixed random input."""
    from . import kernels
    from .nn.model import flops_estimate, model_forward, param_count

    if n_timed < 10:
        raise ValueError("n_timed must be >= 10")
    cfg = params.config
    T = cfg.T if T is None else T
    x = np.random.default_rng(seed).normal(size=(1, T, cfg.d_model)).astype(params.dtype)
    for _ in range(n_warmup):
        model_forward(x, params)
    lat = np.empty(n_timed)
    for i in range(n_timed):
        t0 = time.perf_counter()
        model_forward(x, params)
        lat[i] = (time.perf_counter() - t0) * 1e3
    mean = float(lat.mean())
    return ThroughputReport(
        param_count=param_count(cfg),
        flops=flops_estimate(replace(cfg, T=T)),
        T=T,
        n_timed=n_timed,
        mean_latency_ms=mean,
        p95_latency_ms=float(np.percentile(lat, 95)),
        fps=1000.0 / mean,
        peak_working_set_bytes=working_set_estimate(replace(cfg, T=T), 1, params.dtype.itemsize),
        backend=kernels.active.name,
        latencies_ms=tuple(lat.tolist()),
    )
