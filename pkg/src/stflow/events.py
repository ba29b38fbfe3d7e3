"""Event-sequence data model, coordinate/time transforms, and batch padding.

An event sequence is an ordered list of timestamps with a spatial location
attached to each event. All downstream modules (simulation, training,
inference, evaluation) exchange data through the types defined here and
through the one-record-per-line dataset file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

#: Default additive constant inside the log transform of inter-event gaps.
DEFAULT_LOG_EPS = 1e-6


@dataclass
class EventSequence:
    """Strictly time-ordered events with d-dimensional locations (d <= 3)."""

    times: np.ndarray
    locations: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        locs = np.asarray(self.locations, dtype=np.float64)
        if locs.ndim == 1:
            locs = locs.reshape(-1, 1) if locs.size else locs.reshape(0, 2)
        self.locations = locs
        if self.locations.shape[0] != self.times.shape[0]:
            raise ValueError(
                f"times ({self.times.shape[0]}) and locations "
                f"({self.locations.shape[0]}) disagree in length"
            )
        if self.locations.ndim != 2 or not (1 <= self.locations.shape[1] <= 3):
            raise ValueError(f"locations must be (N, d) with 1 <= d <= 3, got {self.locations.shape}")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            bad = int(np.argmax(np.diff(self.times) <= 0))
            raise ValueError(f"times must be strictly increasing (violated at index {bad + 1})")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def dim(self) -> int:
        return int(self.locations.shape[1])

    @classmethod
    def empty(cls, dim: int = 2) -> "EventSequence":
        return cls(np.empty(0), np.empty((0, dim)))

    def prefix(self, n: int) -> "EventSequence":
        """Events strictly before index ``n``."""
        return EventSequence(self.times[:n].copy(), self.locations[:n].copy())


@dataclass
class DomainSpec:
    """Observation window [0, T] and axis-aligned spatial box."""

    time_horizon: float
    spatial_box: np.ndarray  # (d, 2) rows of [lo, hi]

    def __post_init__(self):
        self.time_horizon = float(self.time_horizon)
        self.spatial_box = np.asarray(self.spatial_box, dtype=np.float64).reshape(-1, 2)
        if self.time_horizon <= 0:
            raise ValueError("time_horizon must be positive")
        if np.any(self.spatial_box[:, 0] >= self.spatial_box[:, 1]):
            raise ValueError("spatial_box must satisfy lo < hi on every axis")

    @property
    def dim(self) -> int:
        return int(self.spatial_box.shape[0])

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.spatial_box[:, 1] - self.spatial_box[:, 0]))

    def to_dict(self) -> dict:
        return {"time_horizon": self.time_horizon, "spatial_box": self.spatial_box.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(d["time_horizon"], np.asarray(d["spatial_box"]))


@dataclass
class AffineMap:
    """Per-axis map ``y = scale * x + shift`` with its exact inverse.

    ``log_jacobian`` is the log-determinant of the forward map, needed to
    convert densities between original and normalized coordinates.
    """

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        self.shift = np.asarray(self.shift, dtype=np.float64).reshape(-1)
        if self.scale.shape != self.shift.shape:
            raise ValueError("scale and shift must share a shape")
        if np.any(self.scale == 0):
            raise ValueError("scale entries must be nonzero")

    @property
    def log_jacobian(self) -> float:
        return float(np.sum(np.log(np.abs(self.scale))))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.shift

    def invert(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.shift) / self.scale

    @classmethod
    def identity(cls, dim: int) -> "AffineMap":
        return cls(np.ones(dim), np.zeros(dim))

    def to_dict(self) -> dict:
        return {"scale": self.scale.tolist(), "shift": self.shift.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineMap":
        return cls(np.asarray(d["scale"]), np.asarray(d["shift"]))


def normalize_space(seq: EventSequence, domain: DomainSpec) -> tuple[EventSequence, AffineMap]:
    """Map locations into the unit box, returning the applied affine map.

    Raises ValueError naming the offending axis if a location falls outside
    ``domain.spatial_box``.
    """
    box = domain.spatial_box
    if seq.dim != box.shape[0]:
        raise ValueError(f"sequence dim {seq.dim} != domain dim {box.shape[0]}")
    amap = box_normalizer(domain)
    if len(seq):
        for axis in range(seq.dim):
            lo, hi = box[axis]
            col = seq.locations[:, axis]
            if np.any(col < lo) or np.any(col > hi):
                raise ValueError(
                    f"location outside spatial box on axis {axis}: "
                    f"range [{col.min():.6g}, {col.max():.6g}] vs [{lo:.6g}, {hi:.6g}]"
                )
    return EventSequence(seq.times.copy(), amap.apply(seq.locations)), amap


def box_normalizer(domain: DomainSpec) -> AffineMap:
    """Affine map sending ``domain.spatial_box`` onto the unit box."""
    lo, hi = domain.spatial_box[:, 0], domain.spatial_box[:, 1]
    scale = 1.0 / (hi - lo)
    return AffineMap(scale, -lo * scale)


def to_log_interevent(times: np.ndarray, eps: float = DEFAULT_LOG_EPS) -> np.ndarray:
    """Log-transformed gaps ``z_i = log(s_i - s_{i-1} + eps)`` with ``s_0 = 0``.

    The first gap is measured from the window origin, so the transform is
    invertible given only ``eps``.
    """
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    if t.size == 0:
        return np.empty(0)
    gaps = np.diff(t, prepend=0.0)
    if np.any(gaps[1:] <= 0):
        raise ValueError("times must be strictly increasing")
    if t[0] < 0:
        raise ValueError("times must be nonnegative")
    return np.log(gaps + eps)


def from_log_interevent(z: np.ndarray, eps: float = DEFAULT_LOG_EPS) -> np.ndarray:
    """Inverse of :func:`to_log_interevent`."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    return np.cumsum(np.exp(z) - eps)


@dataclass
class Batch:
    """Padded stack of sequences. ``mask`` is 1 for real events, 0 for pads.

    Real events always occupy a prefix of each row; pads carry a zero
    sentinel and are neutralized by masks downstream, never by the sentinel.
    """

    times: np.ndarray      # (B, L)
    locations: np.ndarray  # (B, L, d)
    mask: np.ndarray       # (B, L) bool
    lengths: np.ndarray = field(default=None)  # (B,) int

    def __post_init__(self):
        if self.lengths is None:
            self.lengths = self.mask.sum(axis=1).astype(np.int64)

    @property
    def batch_size(self) -> int:
        return int(self.times.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.times.shape[1])


def pad_batch(seqs: Sequence[EventSequence]) -> Batch:
    """Stack sequences into padded arrays; never reorders events."""
    if not seqs:
        raise ValueError("pad_batch needs at least one sequence")
    dims = {s.dim for s in seqs if len(s)} or {seqs[0].dim}
    if len(dims) != 1:
        raise ValueError(f"sequences disagree on spatial dim: {sorted(dims)}")
    d = dims.pop()
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    L = int(lengths.max())
    B = len(seqs)
    times = np.zeros((B, L))
    locs = np.zeros((B, L, d))
    mask = np.zeros((B, L), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        times[i, :n] = s.times
        locs[i, :n] = s.locations
        mask[i, :n] = True
    return Batch(times, locs, mask, lengths)


def batch_log_gaps(batch: Batch, eps: float = DEFAULT_LOG_EPS) -> np.ndarray:
    """Per-row log inter-event gaps; padded slots are zero."""
    z = np.zeros_like(batch.times)
    for i in range(batch.batch_size):
        n = int(batch.lengths[i])
        if n:
            z[i, :n] = to_log_interevent(batch.times[i, :n], eps)
    return z


# ---------------------------------------------------------------------------
# Dataset file format: one JSON record per line, fields "t" and "x".
# ---------------------------------------------------------------------------

def save_sequences(path: str | Path, seqs: Iterable[EventSequence]) -> None:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            for s in seqs:
                rec = {"t": s.times.tolist(), "x": s.locations.tolist()}
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset file {path}: {exc}") from exc


def load_sequences(path: str | Path, dim: int = 2) -> list[EventSequence]:
    path = Path(path)
    out: list[EventSequence] = []
    try:
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    t = np.asarray(rec["t"], dtype=np.float64)
                    x = np.asarray(rec["x"], dtype=np.float64)
                    if x.size == 0:
                        x = np.empty((0, dim))
                    out.append(EventSequence(t, x))
                except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read dataset file {path}: {exc}") from exc
    return out


def gap_statistics(seqs: Sequence[EventSequence]) -> dict:
    """Mean inter-event gap and mean location over a split (origin-anchored)."""
    gaps, locs = [], []
    for s in seqs:
        if len(s):
            gaps.append(np.diff(s.times, prepend=0.0))
            locs.append(s.locations)
    if not gaps:
        raise ValueError("no events in split")
    all_gaps = np.concatenate(gaps)
    all_locs = np.concatenate(locs, axis=0)
    return {
        "mean_gap": float(all_gaps.mean()),
        "mean_location": all_locs.mean(axis=0),
        "n_events": int(all_gaps.size),
    }


def sequence_length_summary(seqs: Sequence[EventSequence]) -> dict:
    ls = np.array([len(s) for s in seqs], dtype=np.int64)
    if ls.size == 0:
        return {"count": 0, "min_len": 0, "max_len": 0, "mean_len": 0.0}
    return {
        "count": int(ls.size),
        "min_len": int(ls.min()),
        "max_len": int(ls.max()),
        "mean_len": float(ls.mean()),
    }


def check_monotone(times: np.ndarray, label: str = "times") -> None:
    t = np.asarray(times).reshape(-1)
    if t.size and np.any(np.diff(t) <= 0):
        raise ValueError(f"{label} must be strictly increasing")
