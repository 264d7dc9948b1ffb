"""Deterministic synthetic sign dataset.

Each class owns a template: wrist paths for both hands (a pair of sinusoids
per axis with class-specific frequencies, phases, amplitudes and anchors), a
finger-curl pattern and a wrist-rotation rhythm. Signers apply their own
affine style (scale, rotation, shear, placement), body proportions and
tempo. Every sample adds a random length, a mild time warp, trajectory
jitter, pixel noise and occasional detector dropouts.

All randomness is keyed by ``(seed, role, ids...)``, so any sample can be
regenerated in isolation and output never depends on generation order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .pose_data import (
    LEFT_HAND,
    N_LANDMARKS,
    RIGHT_HAND,
    LabelVocab,
    SignSample,
    write_manifest,
    write_vocab,
)

IMAGE_W, IMAGE_H = 1280, 720
FPS = 30.0
QUANTUM = 1.0 / 64          # coordinates are snapped to 1/64 px

# Body-frame coordinates (shoulder half-width = 0.5, y grows downwards).
# The signer's right side appears on the viewer's left.
_BODY = {
    "nose": (0.0, -0.45), "neck": (0.0, 0.0),
    "right_eye": (-0.08, -0.52), "left_eye": (0.08, -0.52),
    "right_ear": (-0.16, -0.48), "left_ear": (0.16, -0.48),
    "right_shoulder": (-0.5, 0.05), "left_shoulder": (0.5, 0.05),
}
_ROLE_CLASS, _ROLE_SIGNER, _ROLE_SAMPLE = 1, 2, 3


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 60
    n_signers: int = 18
    samples_per_class_per_signer: int = 10
    frame_range: tuple = (50, 170)
    noise_scale: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "frame_range", tuple(int(v) for v in self.frame_range))
        lo, hi = self.frame_range
        if not 2 <= lo <= hi <= 400:
            raise ValueError(f"frame_range must satisfy 2 <= min <= max <= 400, got {self.frame_range}")
        if min(self.n_classes, self.n_signers, self.samples_per_class_per_signer) < 1:
            raise ValueError("counts must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["frame_range"] = list(self.frame_range)
        return d


def class_names(n: int) -> list[str]:
    return [f"sign_{i:03d}" for i in range(n)]


def _class_template(seed: int, c: int) -> dict:
    rng = np.random.default_rng([seed, _ROLE_CLASS, c])
    hands = []
    for side in (-1.0, 1.0):
        hands.append(dict(
            anchor=np.array([side * rng.uniform(0.1, 0.55), rng.uniform(0.05, 0.75)]),
            freq=rng.choice([0.5, 1.0, 1.5, 2.0, 2.5, 3.0], size=2),
            phase=rng.uniform(0, 2 * np.pi, size=2),
            amp=rng.uniform(0.05, 0.35, size=2),
            drift=rng.uniform(-0.3, 0.3, size=2),
            curl=rng.uniform(0.0, 1.0, size=5),
            curl_amp=rng.uniform(0.0, 0.5),
            turn=rng.uniform(-1.2, 1.2),
            turn_amp=rng.uniform(0.0, 0.8),
            turn_freq=rng.choice([0.5, 1.0, 2.0]),
        ))
    return dict(hands=hands)


def _signer_style(seed: int, s: int) -> dict:
    rng = np.random.default_rng([seed, _ROLE_SIGNER, s])
    theta = rng.uniform(-0.08, 0.08)
    shear = rng.uniform(-0.06, 0.06)
    sx, sy = rng.uniform(0.9, 1.1, size=2)
    A = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]) @ np.array(
        [[sx, shear], [0.0, sy]])
    return dict(
        A=A,
        px_scale=rng.uniform(150.0, 230.0),
        origin=np.array([rng.uniform(540.0, 740.0), rng.uniform(260.0, 330.0)]),
        amp_gain=rng.uniform(0.85, 1.15),
        hand_size=rng.uniform(0.2, 0.26),
        tempo=rng.uniform(0.9, 1.1),
    )


def _hand_shape(wrist, angle, curl, size):
    """21 hand landmarks for each frame: wrist then 4 joints per finger."""
    L = wrist.shape[0]
    spread = np.array([-0.9, -0.35, 0.0, 0.3, 0.6])           # thumb .. little finger
    lengths = np.array([0.7, 1.0, 1.1, 1.0, 0.8])
    out = np.empty((L, 21, 2))
    out[:, 0] = wrist
    for f in range(5):
        a = angle + spread[f]
        # each joint bends a little more as the finger curls
        seg = size * lengths[f] / 4
        pos = wrist.copy()
        heading = a.copy()
        for j in range(4):
            heading = heading + curl[:, f] * 0.55
            pos = pos + seg * np.stack([np.sin(heading), -np.cos(heading)], axis=1)
            out[:, 1 + 4 * f + j] = pos
    return out


def generate_sample(spec: SyntheticSpec, seed: int, c: int, s: int, k: int,
                    template=None, style=None) -> np.ndarray:
    """Coordinates ``(L, 54, 2)`` in pixels and the validity mask."""
    template = template or _class_template(seed, c)
    style = style or _signer_style(seed, s)
    rng = np.random.default_rng([seed, _ROLE_SAMPLE, c, s, k])
    lo, hi = spec.frame_range
    L = int(rng.integers(lo, hi + 1))
    u = np.linspace(0.0, 1.0, L)
    # monotone time warp plus signer tempo
    warp = rng.uniform(-0.08, 0.08)
    tau = np.clip((u + warp * np.sin(np.pi * u)) * style["tempo"], 0.0, 1.2)
    noise = spec.noise_scale

    pts = np.zeros((L, N_LANDMARKS, 2))
    body_names = list(_BODY)
    for i, name in enumerate(body_names):
        pts[:, i] = _BODY[name]
    sway = rng.uniform(-0.02, 0.02, size=2) * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * tau)[:, None]
    pts[:, :8] += sway[:, None, :]

    wrists = []
    for h, blk in zip(template["hands"], (LEFT_HAND, RIGHT_HAND)):
        amp = h["amp"] * style["amp_gain"]
        ph = h["phase"] + rng.normal(0.0, 0.15, size=2)
        path = (h["anchor"][None] + h["drift"][None] * tau[:, None]
                + amp[None] * np.sin(2 * np.pi * h["freq"][None] * tau[:, None] + ph[None]))
        path += rng.normal(0.0, noise, size=path.shape).cumsum(axis=0) / np.sqrt(L)
        angle = h["turn"] + h["turn_amp"] * np.sin(2 * np.pi * h["turn_freq"] * tau)
        curl = np.clip(h["curl"][None] + h["curl_amp"] * np.sin(2 * np.pi * tau)[:, None], 0.0, 1.2)
        pts[:, blk] = _hand_shape(path, angle, curl, style["hand_size"])
        wrists.append(path)
    # the left-hand block belongs to the signer's left side (viewer's right)
    left_w, right_w = wrists
    sh_r, sh_l = pts[:, 6].copy(), pts[:, 7].copy()
    pts[:, 8] = (sh_r + right_w) / 2 + np.array([-0.12, 0.1])   # right elbow
    pts[:, 9] = (sh_l + left_w) / 2 + np.array([0.12, 0.1])     # left elbow
    pts[:, 10] = right_w
    pts[:, 11] = left_w

    px = pts @ style["A"].T * style["px_scale"] + style["origin"]
    px += rng.normal(0.0, 1.0, size=px.shape)
    px = np.clip(px, 0.0, [IMAGE_W - 1, IMAGE_H - 1])
    px = np.round(px / QUANTUM) * QUANTUM

    valid = np.ones((L, N_LANDMARKS), dtype=bool)
    if rng.random() < 0.3:
        blk = LEFT_HAND if rng.random() < 0.5 else RIGHT_HAND
        start = int(rng.integers(0, L))
        valid[start:start + int(rng.integers(1, 8)), blk] = False
    if rng.random() < 0.05:
        valid[:, int(rng.integers(2, 6))] = False        # an eye or ear never detected
    px[~valid] = 0.0
    return px.astype(np.float32), valid


def iter_samples(spec: SyntheticSpec, seed: int = 0):
    """Yield samples ordered by signer, class, repetition."""
    templates = [_class_template(seed, c) for c in range(spec.n_classes)]
    for s in range(spec.n_signers):
        style = _signer_style(seed, s)
        for c in range(spec.n_classes):
            for k in range(spec.samples_per_class_per_signer):
                coords, valid = generate_sample(spec, seed, c, s, k, templates[c], style)
                yield SignSample(
                    video_id=f"s{s:02d}_c{c:03d}_{k:02d}",
                    signer_id=f"signer_{s:02d}",
                    label=c,
                    fps=FPS,
                    image_width=IMAGE_W,
                    image_height=IMAGE_H,
                    coords=coords,
                    valid=valid,
                )


def generate_dataset(spec: SyntheticSpec, seed: int = 0):
    """Return ``(vocab, samples)`` held in memory."""
    return LabelVocab(tuple(class_names(spec.n_classes))), list(iter_samples(spec, seed))


def write_dataset(spec: SyntheticSpec, seed: int, out_dir) -> dict:
    """Write ``samples.jsonl``, ``vocab.txt`` and ``synth.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = LabelVocab(tuple(class_names(spec.n_classes)))
    write_vocab(vocab, out / "vocab.txt")
    write_manifest(iter_samples(spec, seed), out / "samples.jsonl", vocab)
    info = {"spec": spec.to_dict(), "seed": seed,
            "n_samples": spec.n_classes * spec.n_signers * spec.samples_per_class_per_signer}
    (out / "synth.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info
