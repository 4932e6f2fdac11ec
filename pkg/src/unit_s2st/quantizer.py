"""K-means codebook training and frame-to-unit encoding.

Default features are the 80-dim log-mel frames; the codebook records a
feature_tag so a codebook fit on one feature kind refuses frames of another.
Units are never run-length reduced inside the pipeline (mel and unit lengths
must stay 1:1); the collapse helper exists for analysis and transcription.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import MelSpectrogram
from .errors import InvalidInputError, MissingFileError

DEFAULT_FEATURE_TAG = "logmel80"


@dataclass
class Codebook:
    centroids: np.ndarray  # [K, D]
    feature_tag: str = DEFAULT_FEATURE_TAG
    inertia_history: list[float] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise InvalidInputError(f"codebook needs [K>=2, D] centroids, got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise InvalidInputError("codebook centroids contain non-finite values")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class UnitSequence:
    units: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.units = np.asarray(self.units, dtype=np.int64)
        if self.units.ndim != 1:
            raise InvalidInputError("units must be a 1-D integer sequence")
        if len(self.units) and (self.units.min() < 0 or self.units.max() >= self.codebook_size):
            raise InvalidInputError(
                f"units must lie in [0, {self.codebook_size}), got range "
                f"[{self.units.min()}, {self.units.max()}]"
            )

    def __len__(self):
        return len(self.units)


def _assign(frames: np.ndarray, centroids: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Nearest centroid per frame (exact squared distances, ties to lowest index)."""
    out = np.empty(len(frames), dtype=np.int64)
    for start in range(0, len(frames), chunk):
        block = frames[start : start + chunk]
        d2 = np.sum((block[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        out[start : start + chunk] = np.argmin(d2, axis=1)
    return out


def _inertia(frames: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum((frames - centroids[labels]) ** 2))


def _kmeanspp_init(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(frames)
    centroids = np.empty((k, frames.shape[1]))
    centroids[0] = frames[int(rng.integers(n))]
    d2 = np.sum((frames - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0:
            centroids[j] = frames[int(rng.integers(n))]
            continue
        probs = d2 / total
        centroids[j] = frames[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, np.sum((frames - centroids[j]) ** 2, axis=1))
    return centroids


def fit_kmeans(
    frames: np.ndarray,
    k: int = 100,
    max_iters: int = 50,
    tol: float = 1e-6,
    seed: int = 0,
    feature_tag: str = DEFAULT_FEATURE_TAG,
) -> Codebook:
    """Lloyd's algorithm from a k-means++ start.

    Stops at max_iters or when the relative inertia improvement drops below
    tol. Empty clusters are re-seeded with the point farthest from its own
    centroid. The returned codebook carries the per-iteration inertia history.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise InvalidInputError(f"frames must be [N, D], got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise InvalidInputError("frames contain non-finite values")
    n = len(frames)
    if n < k:
        raise InvalidInputError(f"need at least k={k} frames, got {n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(frames, k, rng)
    history: list[float] = []
    prev = np.inf
    for _ in range(max_iters):
        labels = _assign(frames, centroids)
        dist_to_own = np.sum((frames - centroids[labels]) ** 2, axis=1)
        counts = np.bincount(labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist_to_own))
            labels[far] = empty
            dist_to_own[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, frames)
        centroids = sums / counts[:, None]
        cur = _inertia(frames, centroids, _assign(frames, centroids))
        history.append(cur)
        if prev < np.inf and (prev - cur) < tol * max(prev, 1e-12):
            break
        prev = cur
    return Codebook(centroids=centroids, feature_tag=feature_tag, inertia_history=history)


def encode(frames: np.ndarray | MelSpectrogram, cb: Codebook) -> UnitSequence:
    """unit_t = argmin_k ||frame_t - centroid_k||_2, ties broken by lowest index."""
    tag_hint = None
    if isinstance(frames, MelSpectrogram):
        tag_hint = f"logmel{frames.n_mels}"
        frames = frames.frames
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cb.dim:
        raise InvalidInputError(
            f"frames of shape {frames.shape} do not match codebook dim {cb.dim}"
        )
    if tag_hint is not None and tag_hint != cb.feature_tag:
        raise InvalidInputError(
            f"feature tag mismatch: frames are {tag_hint}, codebook expects {cb.feature_tag}"
        )
    return UnitSequence(units=_assign(frames, cb.centroids), codebook_size=cb.k)


def run_length_collapse(u: UnitSequence) -> tuple[np.ndarray, np.ndarray]:
    """Collapse maximal runs; sum(durations) == len(u)."""
    units = u.units
    if len(units) == 0:
        return np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    boundaries = np.flatnonzero(np.diff(units) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(units)]])
    return units[starts].copy(), (ends - starts).astype(np.int64)


def run_length_expand(reduced: np.ndarray, durations: np.ndarray, codebook_size: int) -> UnitSequence:
    return UnitSequence(units=np.repeat(reduced, durations), codebook_size=codebook_size)


def save_codebook(path: str | Path, cb: Codebook) -> None:
    """Binary layout: uint32 K, uint32 D, uint32 tag length, tag bytes, row-major f32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tag = cb.feature_tag.encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<III", cb.k, cb.dim, len(tag)))
        f.write(tag)
        f.write(cb.centroids.astype("<f4").tobytes())


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) != 12:
            raise InvalidInputError(f"{path}: truncated codebook header")
        k, d, tag_len = struct.unpack("<III", header)
        tag = f.read(tag_len).decode("utf-8")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != k * d:
        raise InvalidInputError(f"{path}: expected {k * d} floats, found {data.size}")
    return Codebook(centroids=data.reshape(k, d).astype(np.float64), feature_tag=tag)


def save_units(path: str | Path, units_by_id: dict[str, UnitSequence]) -> None:
    """One utterance per line: the id followed by space-separated unit integers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, seq in units_by_id.items():
            f.write(" ".join([utt_id] + [str(int(x)) for x in seq.units]) + "\n")


def load_units(path: str | Path, codebook_size: int) -> dict[str, UnitSequence]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    out: dict[str, UnitSequence] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                units = np.array([int(x) for x in parts[1:]], dtype=np.int64)
            except ValueError:
                raise InvalidInputError(f"{path}: line {line_no}: non-integer unit") from None
            out[parts[0]] = UnitSequence(units=units, codebook_size=codebook_size)
    return out
