"""Ground-truth synthetic processes, thinning simulation, and intensity grids.

Two planar processes are provided: a self-exciting process whose intensity is
a baseline plus exponentially decaying Gaussian kernels around past events,
and a self-correcting process whose intensity grows with time and is
suppressed multiplicatively near past events. Both are simulated exactly by
thinning: between events the spatially integrated intensity of the first
process is nonincreasing and that of the second is nondecreasing, so exact
envelopes are available from the current value or a short lookahead window.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, SimulationIntegrityError
from .events import DomainSpec, EventSequence, save_sequences


@dataclass
class HawkesParams:
    """Self-exciting process: base rate plus decaying Gaussian kernels."""

    lambda0: float = 1.0
    alpha: float = 0.72
    beta: float = 1.2
    sigma: float = 0.05

    def __post_init__(self):
        if self.lambda0 < 0 or self.alpha < 0 or self.beta <= 0 or self.sigma <= 0:
            raise ValueError("require lambda0 >= 0, alpha >= 0, beta > 0, sigma > 0")
        if self.beta > 0 and self.alpha / self.beta >= 1.0:
            warnings.warn(
                f"branching ratio alpha/beta = {self.alpha / self.beta:.3f} >= 1; "
                "sequences may explode",
                stacklevel=2,
            )


@dataclass
class SelfCorrectingParams:
    """Self-correcting process: exponential time drift with event inhibition."""

    mu: float = 1.0
    alpha: float = 0.2
    beta: float = 0.4
    c0: float = 0.25
    c1: float = 0.2

    def __post_init__(self):
        vals = (self.mu, self.alpha, self.beta, self.c0, self.c1)
        if any(v <= 0 for v in vals):
            raise ValueError("all self-correcting parameters must be positive")


def default_domain(process_name: str) -> DomainSpec:
    unit_box = [[0.0, 1.0], [0.0, 1.0]]
    if process_name == "sthp":
        return DomainSpec(60.0, unit_box)
    if process_name == "stsc":
        return DomainSpec(100.0, unit_box)
    raise ValueError(f"unknown process '{process_name}'")


def _gauss2(points: np.ndarray, center: np.ndarray, var: float) -> np.ndarray:
    """Isotropic planar Gaussian density N(points | center, var * I)."""
    d2 = np.sum((points - center) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * var)) / (2.0 * np.pi * var)


def sthp_intensity(s, x, history: EventSequence, p: HawkesParams) -> float:
    """Conditional intensity of the self-exciting process at (s, x)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(history) and s <= history.times[-1]:
        raise ValueError(f"query time {s} is not after the last history event {history.times[-1]}")
    val = p.lambda0
    if len(history):
        w = p.alpha * np.exp(-p.beta * (s - history.times))
        k = _gauss2(history.locations, x, p.sigma**2)
        val += float(w @ k)
    return float(val)


def stsc_intensity(s, x, history: EventSequence, p: SelfCorrectingParams) -> float:
    """Conditional intensity of the self-correcting process at (s, x)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(history) and s <= history.times[-1]:
        raise ValueError(f"query time {s} is not after the last history event {history.times[-1]}")
    expo = p.alpha * s * _gauss2(x, np.zeros_like(x), p.c0)
    if len(history):
        expo -= p.beta * float(np.sum(_gauss2(history.locations, x, p.c1)))
    return float(p.mu * np.exp(expo))


class HawkesProcess:
    """Planar self-exciting process over a fixed domain."""

    name = "sthp"
    ground_monotone = "decreasing"  # between events

    def __init__(self, params: HawkesParams | None = None, domain: DomainSpec | None = None):
        self.params = params or HawkesParams()
        self.domain = domain or default_domain("sthp")

    def intensity_at(self, s, points, hist_times, hist_locs) -> np.ndarray:
        """Vectorized intensity over ``points`` (M, 2) for a given history."""
        p = self.params
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.full(points.shape[0], p.lambda0)
        if len(hist_times):
            w = p.alpha * np.exp(-p.beta * (s - np.asarray(hist_times)))
            diff = points[:, None, :] - np.asarray(hist_locs)[None, :, :]
            k = np.exp(-np.sum(diff**2, axis=-1) / (2 * p.sigma**2)) / (2 * np.pi * p.sigma**2)
            out = out + k @ w
        return out

    def intensity(self, s, x, history: EventSequence) -> float:
        return sthp_intensity(s, x, history, self.params)

    def params_dict(self) -> dict:
        return {"lambda0": self.params.lambda0, "alpha": self.params.alpha,
                "beta": self.params.beta, "sigma": self.params.sigma}


class SelfCorrectingProcess:
    """Planar self-correcting process over a fixed domain."""

    name = "stsc"
    ground_monotone = "increasing"

    def __init__(self, params: SelfCorrectingParams | None = None, domain: DomainSpec | None = None):
        self.params = params or SelfCorrectingParams()
        self.domain = domain or default_domain("stsc")

    def intensity_at(self, s, points, hist_times, hist_locs) -> np.ndarray:
        p = self.params
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        expo = p.alpha * s * _gauss2(points, np.zeros(2), p.c0)
        if len(hist_times):
            diff = points[:, None, :] - np.asarray(hist_locs)[None, :, :]
            k = np.exp(-np.sum(diff**2, axis=-1) / (2 * p.c1)) / (2 * np.pi * p.c1)
            expo = expo - p.beta * k.sum(axis=1)
        return p.mu * np.exp(expo)

    def intensity(self, s, x, history: EventSequence) -> float:
        return stsc_intensity(s, x, history, self.params)

    def params_dict(self) -> dict:
        return {"mu": self.params.mu, "alpha": self.params.alpha, "beta": self.params.beta,
                "c0": self.params.c0, "c1": self.params.c1}


Process = HawkesProcess | SelfCorrectingProcess


def make_process(name: str, params: dict | None = None, domain: DomainSpec | None = None) -> Process:
    params = params or {}
    if name == "sthp":
        return HawkesProcess(HawkesParams(**params), domain)
    if name == "stsc":
        return SelfCorrectingProcess(SelfCorrectingParams(**params), domain)
    raise ValueError(f"unknown process '{name}'")


def make_grid(box: np.ndarray, g: int) -> tuple[np.ndarray, float]:
    """Uniform cell centers over a (2, 2) box; returns ((g*g, 2), cell_area)."""
    box = np.asarray(box, dtype=np.float64)
    xs = box[0, 0] + (np.arange(g) + 0.5) * (box[0, 1] - box[0, 0]) / g
    ys = box[1, 0] + (np.arange(g) + 0.5) * (box[1, 1] - box[1, 0]) / g
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    cell_area = float((box[0, 1] - box[0, 0]) * (box[1, 1] - box[1, 0]) / (g * g))
    return centers, cell_area


def ground_intensity(s, history: EventSequence, process: Process, quad_grid_size: int = 50) -> float:
    """Midpoint-rule spatial integral of the intensity over the domain box."""
    centers, cell_area = make_grid(process.domain.spatial_box, quad_grid_size)
    vals = process.intensity_at(s, centers, history.times, history.locations)
    return float(vals.sum() * cell_area)


class _HawkesCache:
    """Incremental kernel caches so ground/slice evaluations stay O(history)."""

    def __init__(self, proc: HawkesProcess, quad_grid: int, loc_grid: int):
        self.p = proc.params
        box = proc.domain.spatial_box
        self.quad_centers, self.quad_area = make_grid(box, quad_grid)
        self.loc_centers, self.loc_area = make_grid(box, loc_grid)
        self.box_volume = proc.domain.box_volume
        self.times: list[float] = []
        self.mass: list[float] = []          # per-event kernel mass on the quad grid
        self._rows = np.empty((64, self.loc_centers.shape[0]))
        self.n = 0

    def add_event(self, s: float, x: np.ndarray) -> None:
        k_quad = _gauss2(self.quad_centers, x, self.p.sigma**2)
        self.times.append(s)
        self.mass.append(float(k_quad.sum() * self.quad_area))
        if self.n == self._rows.shape[0]:
            self._rows = np.vstack([self._rows, np.empty_like(self._rows)])
        self._rows[self.n] = _gauss2(self.loc_centers, x, self.p.sigma**2)
        self.n += 1

    def ground(self, s: float) -> float:
        val = self.p.lambda0 * self.box_volume
        if self.n:
            w = self.p.alpha * np.exp(-self.p.beta * (s - np.asarray(self.times)))
            val += float(w @ np.asarray(self.mass))
        return val

    def slice_values(self, s: float) -> np.ndarray:
        vals = np.full(self.loc_centers.shape[0], self.p.lambda0)
        if self.n:
            w = self.p.alpha * np.exp(-self.p.beta * (s - np.asarray(self.times)))
            vals = vals + w @ self._rows[: self.n]
        return vals


class _SelfCorrectingCache:
    """Accumulated inhibition fields on the quadrature and sampling grids."""

    def __init__(self, proc: SelfCorrectingProcess, quad_grid: int, loc_grid: int):
        self.p = proc.params
        box = proc.domain.spatial_box
        self.quad_centers, self.quad_area = make_grid(box, quad_grid)
        self.loc_centers, self.loc_area = make_grid(box, loc_grid)
        self.phi0_quad = _gauss2(self.quad_centers, np.zeros(2), self.p.c0)
        self.phi0_loc = _gauss2(self.loc_centers, np.zeros(2), self.p.c0)
        self.inhib_quad = np.zeros(self.quad_centers.shape[0])
        self.inhib_loc = np.zeros(self.loc_centers.shape[0])

    def add_event(self, s: float, x: np.ndarray) -> None:
        self.inhib_quad -= self.p.beta * _gauss2(self.quad_centers, x, self.p.c1)
        self.inhib_loc -= self.p.beta * _gauss2(self.loc_centers, x, self.p.c1)

    def ground(self, s: float) -> float:
        expo = self.p.alpha * s * self.phi0_quad + self.inhib_quad
        return float(self.p.mu * np.exp(expo).sum() * self.quad_area)

    def slice_values(self, s: float) -> np.ndarray:
        return self.p.mu * np.exp(self.p.alpha * s * self.phi0_loc + self.inhib_loc)


def _sample_grid_location(values: np.ndarray, centers: np.ndarray, cell_width: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    """Categorical draw over grid cells with uniform jitter inside the cell."""
    total = values.sum()
    if not np.isfinite(total) or total <= 0:
        raise SimulationIntegrityError("spatial slice has non-finite or zero mass")
    idx = rng.choice(values.shape[0], p=values / total)
    jitter = (rng.random(2) - 0.5) * cell_width
    return centers[idx] + jitter


def simulate_thinning(
    process: Process,
    domain: DomainSpec | None = None,
    rng: np.random.Generator | None = None,
    quad_grid: int = 50,
    loc_grid: int = 100,
    lookahead: float = 1.0,
    max_events: int = 100_000,
) -> EventSequence:
    """Draw one sequence on [0, T] by thinning with exact monotone envelopes.

    Candidate times are proposed from an upper bound of the spatially
    integrated intensity and accepted with probability value/bound; accepted
    locations come from the normalized spatial slice at the accepted time.
    """
    domain = domain or process.domain
    rng = rng if rng is not None else np.random.default_rng()
    T = domain.time_horizon
    box = domain.spatial_box
    cell_width = (box[:, 1] - box[:, 0]) / loc_grid

    if isinstance(process, HawkesProcess):
        cache = _HawkesCache(process, quad_grid, loc_grid)
    else:
        cache = _SelfCorrectingCache(process, quad_grid, loc_grid)
    increasing = process.ground_monotone == "increasing"

    times: list[float] = []
    locs: list[np.ndarray] = []
    s = 0.0
    while s < T and len(times) < max_events:
        if increasing:
            window_end = min(s + lookahead, T)
            bound = cache.ground(window_end)
            if bound <= 0:
                s = window_end
                continue
            delta = rng.exponential(1.0 / bound)
            if s + delta > window_end:
                s = window_end
                continue
        else:
            bound = cache.ground(s)
            if bound <= 0:
                break
            delta = rng.exponential(1.0 / bound)
            if s + delta > T:
                break
        s_cand = s + delta
        g = cache.ground(s_cand)
        if g > bound * (1.0 + 1e-9):
            raise SimulationIntegrityError(
                f"thinning bound violated at s={s_cand:.6g}: intensity {g:.6g} > bound {bound:.6g}"
            )
        if rng.random() * bound <= g:
            x = _sample_grid_location(cache.slice_values(s_cand), cache.loc_centers, cell_width, rng)
            times.append(s_cand)
            locs.append(x)
            cache.add_event(s_cand, x)
        s = s_cand
    if not times:
        return EventSequence.empty(2)
    return EventSequence(np.array(times), np.array(locs))


@dataclass
class IntensityGrid:
    """Per-event-time snapshots of the intensity on a uniform spatial grid."""

    eval_times: np.ndarray    # (N,)
    grid_centers: np.ndarray  # (G, G, 2)
    values: np.ndarray        # (N, G, G)
    cell_area: float
    meta: dict | None = None

    def __post_init__(self):
        self.eval_times = np.asarray(self.eval_times, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != self.eval_times.shape[0]:
            raise ValueError("values and eval_times disagree on snapshot count")

    @property
    def grid_size(self) -> int:
        return int(self.values.shape[1])


def true_intensity_grid(process: Process, seq: EventSequence, g: int) -> IntensityGrid:
    """Ground-truth snapshots at every event time, conditioned on the strict past."""
    if g < 1:
        raise ValueError("grid size must be >= 1")
    centers, cell_area = make_grid(process.domain.spatial_box, g)
    n = len(seq)
    values = np.empty((n, g, g))
    for i in range(n):
        vals = process.intensity_at(seq.times[i], centers, seq.times[:i], seq.locations[:i])
        values[i] = vals.reshape(g, g)
    return IntensityGrid(seq.times.copy(), centers.reshape(g, g, 2), values, cell_area)


def generate_dataset(
    process: Process,
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int,
    out_dir: str | Path | None = None,
) -> tuple[list[EventSequence], list[EventSequence], list[EventSequence]]:
    """Simulate train/val/test splits from disjoint RNG streams.

    When ``out_dir`` is given, writes one file per split plus a manifest
    capturing the process parameters and counts.
    """
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split counts must be nonnegative")
    root = np.random.SeedSequence(seed)
    split_seeds = root.spawn(3)
    splits = []
    for count, ss in zip((n_train, n_val, n_test), split_seeds):
        seqs = []
        for child in ss.spawn(count):
            seqs.append(simulate_thinning(process, rng=np.random.default_rng(child)))
        splits.append(seqs)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            for name, seqs in zip(("train", "val", "test"), splits):
                save_sequences(out / f"{name}.jsonl", seqs)
            manifest = {
                "process": process.name,
                "params": process.params_dict(),
                "domain": process.domain.to_dict(),
                "counts": {"train": n_train, "val": n_val, "test": n_test},
                "seed": seed,
                "files": {name: f"{name}.jsonl" for name in ("train", "val", "test")},
            }
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        except OSError as exc:
            raise DataError(f"cannot write dataset under {out}: {exc}") from exc
    return tuple(splits)


def load_process_from_manifest(path: str | Path) -> Process:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        return make_process(
            manifest["process"],
            manifest.get("params"),
            DomainSpec.from_dict(manifest["domain"]),
        )
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load process manifest {path}: {exc}") from exc
