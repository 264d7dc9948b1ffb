"""Turn a keypoint sequence into the fixed ``T x 108`` model input.

Pipeline per sample: repair missing landmarks, optional training augmentations
in pixel space (mirror, coordinate jitter, frame dropout), signing-space
normalization, flattening to ``(x, y)`` pairs per landmark, and linear
resampling to ``T`` frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pose_data import (
    BODY_LANDMARKS,
    FEATURE_DIM,
    LEFT_HAND,
    N_BODY,
    N_HAND,
    N_LANDMARKS,
    RIGHT_HAND,
    SignSample,
)

DEFAULT_ALPHA = 0.85
DEFAULT_T = 200
NORMALIZATION_MODES = ("bdsl_box", "standard")


def _flip_permutation():
    perm = np.arange(N_LANDMARKS)
    index = {name: i for i, name in enumerate(BODY_LANDMARKS)}
    for i, name in enumerate(BODY_LANDMARKS):
        if name.startswith("left_"):
            perm[i] = index["right_" + name[5:]]
        elif name.startswith("right_"):
            perm[i] = index["left_" + name[6:]]
    perm[LEFT_HAND] = np.arange(RIGHT_HAND.start, RIGHT_HAND.stop)
    perm[RIGHT_HAND] = np.arange(LEFT_HAND.start, LEFT_HAND.stop)
    return perm


# Output slot i of a mirrored frame takes landmark FLIP_PERMUTATION[i].
FLIP_PERMUTATION = _flip_permutation()


@dataclass(frozen=True)
class NormalizationParams:
    center_x: float
    center_y: float
    box_w: float
    box_h: float
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not (self.alpha > 0 and self.box_w > 0 and self.box_h > 0):
            raise ValueError(f"invalid normalization params {self}")


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    temporal_dropout_rate: float = 0.10
    noise_sigma: float = 2.0
    hflip_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.temporal_dropout_rate < 1.0:
            raise ValueError("temporal_dropout_rate must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.hflip_probability <= 1.0:
            raise ValueError("hflip_probability must be in [0, 1]")


@dataclass(frozen=True)
class PreprocessConfig:
    T: int = DEFAULT_T
    alpha: float = DEFAULT_ALPHA
    normalization_mode: str = "bdsl_box"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.normalization_mode not in NORMALIZATION_MODES:
            raise ValueError(f"normalization_mode must be one of {NORMALIZATION_MODES}")


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[1] != FEATURE_DIM:
            raise ValueError(f"feature sequence must be (T, {FEATURE_DIM}), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature sequence has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def T(self) -> int:
        return self.data.shape[0]


def repair_missing(coords: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Fill invalid landmarks by carrying the last valid value forward.

    Leading gaps take the first valid value; landmarks never valid become
    ``(0, 0)``. Returns a new ``(L, 54, 2)`` array, all entries valid.
    """
    coords = np.asarray(coords, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    L = coords.shape[0]
    if valid.all():
        return coords.copy()
    idx = np.where(valid, np.arange(L)[:, None], -1)
    last = np.maximum.accumulate(idx, axis=0)
    nxt = np.where(valid, np.arange(L)[:, None], L)
    nxt = np.minimum.accumulate(nxt[::-1], axis=0)[::-1]
    src = np.where(last >= 0, last, nxt)
    never = src >= L
    src = np.where(never, 0, src)
    out = np.take_along_axis(coords, src[:, :, None], axis=0)
    out[never] = 0.0
    return out


def compute_signing_box(coords: np.ndarray, alpha: float = DEFAULT_ALPHA) -> NormalizationParams:
    """Bounding box over every landmark of every frame.

    A zero extent on an axis is replaced by 1 pixel.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.size == 0:
        raise ValueError("cannot compute a signing box for an empty sequence")
    pts = coords.reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    w, h = hi - lo
    return NormalizationParams(
        center_x=float((lo[0] + hi[0]) / 2),
        center_y=float((lo[1] + hi[1]) / 2),
        box_w=float(w) if w > 0 else 1.0,
        box_h=float(h) if h > 0 else 1.0,
        alpha=alpha,
    )


def normalize_signing_space(coords: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """``x' = (x - cx) / (alpha w)``, ``y' = (y - cy) / (alpha h)``."""
    coords = np.asarray(coords, dtype=np.float64)
    center = np.array([params.center_x, params.center_y])
    scale = params.alpha * np.array([params.box_w, params.box_h])
    return (coords - center) / scale


def denormalize_signing_space(coords: np.ndarray, params: NormalizationParams) -> np.ndarray:
    center = np.array([params.center_x, params.center_y])
    scale = params.alpha * np.array([params.box_w, params.box_h])
    return np.asarray(coords, dtype=np.float64) * scale + center


def _normalize_per_frame(coords: np.ndarray, alpha: float) -> np.ndarray:
    lo = coords.min(axis=1, keepdims=True)
    hi = coords.max(axis=1, keepdims=True)
    extent = hi - lo
    extent[extent <= 0] = 1.0
    return (coords - (lo + hi) / 2) / (alpha * extent)


def resample_temporal(frames: np.ndarray, T: int) -> np.ndarray:
    """Linearly interpolate ``L x D`` rows at ``t_i = i (L-1)/(T-1)``."""
    frames = np.asarray(frames)
    L = frames.shape[0]
    if L < 1 or T < 1:
        raise ValueError("resample_temporal needs L >= 1 and T >= 1")
    if L == 1:
        return np.repeat(frames[:1], T, axis=0)
    if T == 1:
        return frames[:1].copy()
    if L == T:
        return frames.copy()
    pos = np.arange(T) * (L - 1) / (T - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), L - 2)
    frac = (pos - lo)[:, None]
    # a + f (b - a) keeps constant segments exact
    out = frames[lo] + frac * (frames[lo + 1] - frames[lo])
    out[-1] = frames[-1]
    return out


def temporal_dropout(frames: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Remove ``round(rate * L)`` uniformly chosen frames, keeping order."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must be in [0, 1)")
    L = frames.shape[0]
    if L < 2:
        return frames
    n_drop = min(int(round(rate * L)), L - 1)
    if n_drop == 0:
        return frames
    drop = rng.choice(L, size=n_drop, replace=False)
    keep = np.ones(L, dtype=bool)
    keep[drop] = False
    return frames[keep]


def coordinate_noise(coords: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return coords
    return coords + rng.normal(0.0, sigma, size=coords.shape)


def horizontal_flip(coords: np.ndarray, image_width: int) -> np.ndarray:
    """Mirror about the vertical image axis and swap left/right landmarks."""
    coords = np.asarray(coords)
    out = coords[:, FLIP_PERMUTATION].copy()
    out[..., 0] = image_width - out[..., 0]
    return out


def flatten_frames(coords: np.ndarray) -> np.ndarray:
    """``(L, 54, 2)`` to ``(L, 108)`` with x then y per landmark."""
    return np.asarray(coords).reshape(coords.shape[0], FEATURE_DIM)


def preprocess_sample(sample: SignSample, T: int = DEFAULT_T, aug: AugmentationConfig | None = None,
                      rng: np.random.Generator | None = None, alpha: float = DEFAULT_ALPHA,
                      normalization_mode: str = "bdsl_box") -> FeatureSequence:
    coords = repair_missing(sample.coords, sample.valid)
    if aug is not None and aug.enabled:
        if rng is None:
            raise ValueError("augmentation requires an rng")
        if rng.random() < aug.hflip_probability:
            coords = horizontal_flip(coords, sample.image_width)
        coords = coordinate_noise(coords, aug.noise_sigma, rng)
        coords = temporal_dropout(coords, aug.temporal_dropout_rate, rng)
    if normalization_mode == "bdsl_box":
        norm = normalize_signing_space(coords, compute_signing_box(coords, alpha))
    elif normalization_mode == "standard":
        # ablation baseline: per-frame box, no compaction factor
        norm = _normalize_per_frame(coords, 1.0)
    else:
        raise ValueError(f"unknown normalization_mode {normalization_mode!r}")
    return FeatureSequence(resample_temporal(flatten_frames(norm), T))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator keyed by (seed, epoch, index) so worker count never matters."""
    return np.random.default_rng([seed, epoch, index])


def _one(args):
    sample, T, aug, key, alpha, mode = args
    rng = sample_rng(*key) if key is not None else None
    return preprocess_sample(sample, T, aug, rng, alpha, mode).data


def preprocess_batch(samples, T: int, cfg: PreprocessConfig, aug: AugmentationConfig | None = None,
                     seed: int = 0, epoch: int = 0, indices=None, executor=None,
                     dtype=np.float32) -> np.ndarray:
    """Stack preprocessed samples into a ``(B, T, 108)`` array.

    ``indices`` give each sample's stable position for RNG keying. An optional
    executor maps work in order, so results are identical for any worker count.
    """
    if indices is None:
        indices = range(len(samples))
    use_aug = aug if (aug is not None and aug.enabled) else None
    jobs = [(s, T, use_aug, (seed, epoch, int(i)) if use_aug else None, cfg.alpha, cfg.normalization_mode)
            for s, i in zip(samples, indices)]
    if executor is None:
        rows = [_one(j) for j in jobs]
    else:
        rows = list(executor.map(_one, jobs, chunksize=max(1, len(jobs) // 64)))
    out = np.empty((len(rows), T, FEATURE_DIM), dtype=dtype)
    for k, r in enumerate(rows):
        out[k] = r
    return out


__all__ = [
    "AugmentationConfig", "FLIP_PERMUTATION", "FeatureSequence", "NormalizationParams",
    "PreprocessConfig", "compute_signing_box", "coordinate_noise", "denormalize_signing_space",
    "flatten_frames", "horizontal_flip", "normalize_signing_space", "preprocess_batch",
    "preprocess_sample", "repair_missing", "resample_temporal", "sample_rng", "temporal_dropout",
    "N_BODY", "N_HAND",
]
