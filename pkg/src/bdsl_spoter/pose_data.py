"""Keypoint-sequence data model, JSON-lines sample files and signer-disjoint splits.

Frames are stored as arrays rather than per-landmark objects: ``coords`` has
shape ``(L, 54, 2)`` in pixels (float32, the precision pose detectors emit) and
``valid`` has shape ``(L, 54)``. Landmarks
0-11 are upper body, 12-32 the left hand and 33-53 the right hand. Missing
landmarks carry ``valid=False`` and coordinates exactly ``0.0``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_LANDMARKS = 54
N_BODY = 12
N_HAND = 21
BODY = slice(0, N_BODY)
LEFT_HAND = slice(N_BODY, N_BODY + N_HAND)
RIGHT_HAND = slice(N_BODY + N_HAND, N_LANDMARKS)
FEATURE_DIM = 2 * N_LANDMARKS

# Upper-body landmark order used by the sample files.
BODY_LANDMARKS = (
    "nose", "neck",
    "right_eye", "left_eye",
    "right_ear", "left_ear",
    "right_shoulder", "left_shoulder",
    "right_elbow", "left_elbow",
    "right_wrist", "left_wrist",
)


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(frozen=True)
class Landmark:
    x: float
    y: float
    valid: bool = True

    def __post_init__(self):
        if not self.valid and (self.x != 0.0 or self.y != 0.0):
            raise DataError("invalid landmark must have x = y = 0.0")


@dataclass(frozen=True)
class PoseFrame:
    landmarks: tuple[Landmark, ...]

    def __post_init__(self):
        if len(self.landmarks) != N_LANDMARKS:
            raise DataError(f"frame must have {N_LANDMARKS} landmarks, got {len(self.landmarks)}")


@dataclass(frozen=True, eq=False)
class SignSample:
    video_id: str
    signer_id: str
    label: int
    fps: float
    image_width: int
    image_height: int
    coords: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float32)
        valid = np.array(self.valid, dtype=bool)
        if coords.ndim != 3 or coords.shape[1:] != (N_LANDMARKS, 2):
            raise DataError(f"{self.video_id}: coords must be (L, {N_LANDMARKS}, 2), got {coords.shape}")
        if coords.shape[0] < 1:
            raise DataError(f"{self.video_id}: sample has no frames")
        if valid.shape != coords.shape[:2]:
            raise DataError(f"{self.video_id}: valid mask shape {valid.shape} != {coords.shape[:2]}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise DataError(f"{self.video_id}: image dimensions must be positive")
        if self.label < 0:
            raise DataError(f"{self.video_id}: negative label")
        if not np.all(np.isfinite(coords)):
            raise DataError(f"{self.video_id}: non-finite coordinates")
        coords[~valid] = 0.0
        coords.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "valid", valid)

    @property
    def n_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def frames(self) -> list[PoseFrame]:
        return [
            PoseFrame(tuple(Landmark(float(x), float(y), bool(v))
                            for (x, y), v in zip(c, m)))
            for c, m in zip(self.coords, self.valid)
        ]

    @classmethod
    def from_frames(cls, frames: Sequence[PoseFrame], **meta) -> "SignSample":
        coords = np.array([[(lm.x, lm.y) for lm in f.landmarks] for f in frames], dtype=np.float64)
        valid = np.array([[lm.valid for lm in f.landmarks] for f in frames], dtype=bool)
        return cls(coords=coords.reshape(len(frames), N_LANDMARKS, 2), valid=valid, **meta)

    def replace(self, **changes) -> "SignSample":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return SignSample(**kw)

    def __eq__(self, other):
        if not isinstance(other, SignSample):
            return NotImplemented
        return (
            (self.video_id, self.signer_id, self.label, self.fps, self.image_width, self.image_height)
            == (other.video_id, other.signer_id, other.label, other.fps, other.image_width, other.image_height)
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.valid, other.valid)
        )

    __hash__ = None


@dataclass(frozen=True)
class LabelVocab:
    names: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        index = {n: i for i, n in enumerate(names)}
        if len(index) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate class names in vocabulary: {dupes}")
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown class name {name!r}") from None

    def name(self, idx: int) -> str:
        return self.names[idx]


@dataclass(frozen=True)
class SplitSpec:
    train_signers: frozenset
    val_signers: frozenset
    test_signers: frozenset

    def __post_init__(self):
        for f in ("train_signers", "val_signers", "test_signers"):
            object.__setattr__(self, f, frozenset(getattr(self, f)))
        a, b, c = self.train_signers, self.val_signers, self.test_signers
        if a & b or a & c or b & c:
            raise DataError("split signer sets overlap")

    def partition(self, samples: Iterable[SignSample]):
        """Return ``(train, val, test)`` sample lists."""
        out = ([], [], [])
        for s in samples:
            if s.signer_id in self.train_signers:
                out[0].append(s)
            elif s.signer_id in self.val_signers:
                out[1].append(s)
            elif s.signer_id in self.test_signers:
                out[2].append(s)
            else:
                raise DataError(f"signer {s.signer_id!r} not in split")
        return out

    def to_dict(self):
        return {k: sorted(getattr(self, k)) for k in ("train_signers", "val_signers", "test_signers")}


# ---------------------------------------------------------------- vocab files

def load_vocab(path) -> LabelVocab:
    text = Path(path).read_text(encoding="utf-8")
    names = text.split("\n")
    if names and names[-1] == "":
        names.pop()
    return LabelVocab(tuple(names))


def write_vocab(vocab: LabelVocab, path) -> None:
    Path(path).write_text("".join(n + "\n" for n in vocab.names), encoding="utf-8")


# --------------------------------------------------------------- sample files

def _frame_to_json(coords, valid):
    return [[float(x), float(y)] if v else None for (x, y), v in zip(coords.tolist(), valid.tolist())]


def sample_to_record(sample: SignSample, vocab: LabelVocab) -> dict:
    return {
        "video_id": sample.video_id,
        "signer_id": sample.signer_id,
        "label": vocab.name(sample.label),
        "fps": sample.fps,
        "image_width": sample.image_width,
        "image_height": sample.image_height,
        "frames": [_frame_to_json(c, v) for c, v in zip(sample.coords, sample.valid)],
    }


def write_manifest(samples: Iterable[SignSample], path, vocab: LabelVocab) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s, vocab), separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def _require(rec, key, types, idx):
    if key not in rec:
        raise DataError(f"record {idx}: missing field {key!r}")
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, types):
        raise DataError(f"record {idx}: field {key!r} has wrong type {type(val).__name__}")
    return val


def record_to_sample(rec: dict, vocab: LabelVocab, idx: int = 0) -> SignSample:
    if not isinstance(rec, dict):
        raise DataError(f"record {idx}: expected an object")
    video_id = _require(rec, "video_id", str, idx)
    signer_id = _require(rec, "signer_id", str, idx)
    label_name = _require(rec, "label", str, idx)
    fps = float(_require(rec, "fps", (int, float), idx))
    width = _require(rec, "image_width", int, idx)
    height = _require(rec, "image_height", int, idx)
    frames = _require(rec, "frames", list, idx)
    if not frames:
        raise DataError(f"record {idx}: field 'frames' is empty")
    try:
        label = vocab.index(label_name)
    except DataError as exc:
        raise DataError(f"record {idx}: field 'label': {exc}") from None
    coords = np.zeros((len(frames), N_LANDMARKS, 2), dtype=np.float32)
    valid = np.zeros((len(frames), N_LANDMARKS), dtype=bool)
    for f, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != N_LANDMARKS:
            n = len(frame) if isinstance(frame, list) else "non-list"
            raise DataError(f"record {idx}: frame {f} has {n} landmarks, expected {N_LANDMARKS}")
        for k, lm in enumerate(frame):
            if lm is None:
                continue
            if (not isinstance(lm, list) or len(lm) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in lm)):
                raise DataError(f"record {idx}: field 'frames' frame {f} landmark {k} is not [x, y] or null")
            if not (math.isfinite(lm[0]) and math.isfinite(lm[1])):
                raise DataError(f"record {idx}: field 'frames' frame {f} landmark {k} is not finite")
            coords[f, k] = lm
            valid[f, k] = True
    try:
        return SignSample(video_id, signer_id, label, fps, width, height, coords, valid)
    except DataError as exc:
        raise DataError(f"record {idx}: {exc}") from None


def load_manifest(path, vocab: LabelVocab) -> list[SignSample]:
    """Read every record of a JSON-lines sample file, in file order."""
    out = []
    with open(path, encoding="utf-8") as fh:
        idx = 0
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"record {idx}: invalid JSON ({exc.msg})") from None
            out.append(record_to_sample(rec, vocab, idx))
            idx += 1
    return out


# ------------------------------------------------------------------- splitting

def speaker_disjoint_split(samples: Sequence[SignSample], ratios=(0.7, 0.15, 0.15), seed: int = 0) -> SplitSpec:
    """Partition signers into train/val/test so video counts track ``ratios``.

    Signers are shuffled by ``seed`` and assigned greedily: each goes to the
    split whose video count is furthest below its target, with every split
    guaranteed at least one signer.
    """
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.signer_id] = counts.get(s.signer_id, 0) + 1
    signers = sorted(counts)
    if len(signers) < 3:
        raise DataError(f"need at least 3 distinct signers for a 3-way split, got {len(signers)}")
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r <= 0):
        raise ValueError("ratios must be three positive numbers")
    r = r / r.sum()
    order = np.random.default_rng(seed).permutation(len(signers))
    shuffled = [signers[i] for i in order]
    total = sum(counts.values())
    targets = r * total
    assigned = [[], [], []]
    have = np.zeros(3)
    for pos, sid in enumerate(shuffled):
        remaining = len(shuffled) - pos
        empty = [k for k in range(3) if not assigned[k]]
        if len(empty) >= remaining:
            k = empty[0]
        else:
            # deficit relative to target, ties to the lower split index
            k = int(np.argmax(targets - have))
        assigned[k].append(sid)
        have[k] += counts[sid]
    return SplitSpec(frozenset(assigned[0]), frozenset(assigned[1]), frozenset(assigned[2]))
