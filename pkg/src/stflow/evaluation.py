"""Metrics, reference baselines, and the conditioned-inference task harness.

Temporal error is the RMSE of predicted absolute event times pooled over all
target events; spatial error is the mean Euclidean distance in original
coordinates. Intensity recovery uses the per-snapshot relative L2 error,
averaged over snapshots within a sequence, then mean +- std across sequences.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .events import EventSequence, gap_statistics
from .infer import GenerationTask, forecast_ar, generate_batch, next_event_tasks
from .intensity import model_intensity_grid
from .model import TrainedBundle
from .ode import SolverConfig
from .simulate import IntensityGrid, Process, true_intensity_grid

KNN_TASKS = ("inverse", "impute-random", "recover-block", "partial-attribute")


# ------------------------------------------------------------------- metrics


def relative_l2(pred: IntensityGrid, truth: IntensityGrid) -> tuple[float, int]:
    """Mean per-snapshot relative L2 error for one sequence.

    Snapshots with zero-norm truth are excluded; the count comes back with
    the value.
    """
    if pred.values.shape != truth.values.shape:
        raise ValueError("prediction and truth grids disagree in shape")
    if not np.allclose(pred.eval_times, truth.eval_times):
        raise ValueError("prediction and truth grids disagree on eval times")
    diffs = np.linalg.norm((pred.values - truth.values).reshape(len(truth.eval_times), -1), axis=1)
    norms = np.linalg.norm(truth.values.reshape(len(truth.eval_times), -1), axis=1)
    ok = norms > 0
    excluded = int((~ok).sum())
    if not ok.any():
        return float("nan"), excluded
    return float(np.mean(diffs[ok] / norms[ok])), excluded


def aggregate_relative_l2(pairs: list[tuple[IntensityGrid, IntensityGrid]]) -> dict:
    vals, excluded = [], 0
    for pred, truth in pairs:
        v, ex = relative_l2(pred, truth)
        excluded += ex
        if np.isfinite(v):
            vals.append(v)
    arr = np.asarray(vals)
    return {
        "mean": float(arr.mean()) if arr.size else float("nan"),
        "std": float(arr.std()) if arr.size else float("nan"),
        "per_sequence": [float(v) for v in arr],
        "n_sequences": int(arr.size),
        "excluded_snapshots": excluded,
    }


def prediction_metrics(
    pred_times: np.ndarray, true_times: np.ndarray,
    pred_locs: np.ndarray, true_locs: np.ndarray,
) -> tuple[float, float]:
    """(temporal RMSE, mean Euclidean distance) over aligned targets."""
    pred_times = np.asarray(pred_times, dtype=np.float64).reshape(-1)
    true_times = np.asarray(true_times, dtype=np.float64).reshape(-1)
    if pred_times.shape != true_times.shape:
        raise ValueError("misaligned temporal targets")
    pred_locs = np.asarray(pred_locs, dtype=np.float64)
    true_locs = np.asarray(true_locs, dtype=np.float64)
    if pred_locs.shape != true_locs.shape:
        raise ValueError("misaligned spatial targets")
    rmse = float(np.sqrt(np.mean((pred_times - true_times) ** 2))) if pred_times.size else 0.0
    dist = float(np.mean(np.linalg.norm(pred_locs - true_locs, axis=-1))) if pred_locs.size else 0.0
    return rmse, dist


def constant_grid_predictor(train_grids: list[IntensityGrid]) -> np.ndarray:
    """History-independent baseline: the mean training intensity surface."""
    stacks = [g.values for g in train_grids if len(g.eval_times)]
    if not stacks:
        raise ValueError("no training snapshots")
    return np.concatenate(stacks, axis=0).mean(axis=0)


# ----------------------------------------------------------------- baselines


@dataclass
class HPPBaseline:
    """Homogeneous predictor: training mean gap and mean location for all."""

    mean_gap: float
    mean_location: np.ndarray

    @classmethod
    def fit(cls, train_seqs: list[EventSequence]) -> "HPPBaseline":
        stats = gap_statistics(train_seqs)
        return cls(stats["mean_gap"], np.asarray(stats["mean_location"]))

    def predict_next(self, prev_time: float) -> tuple[float, np.ndarray]:
        return prev_time + self.mean_gap, self.mean_location.copy()


def nan_euclidean_distances(rows: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distance over co-observed features, scaled by the
    total feature count; pairs with no co-observed feature get +inf."""
    present = ~np.isnan(rows)
    filled = np.where(present, rows, 0.0)
    n_feat = rows.shape[1]
    sq = (filled**2).sum(axis=1)
    cross = filled @ filled.T
    # pairwise sum over co-observed features of a_i^2, b_i^2, and the cross term
    a2 = (filled**2) @ present.T.astype(float)
    b2 = present.astype(float) @ (filled**2).T
    seen = present.astype(float) @ present.T.astype(float)
    d2 = a2 + b2 - 2 * cross
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = d2 * (n_feat / seen)
    scaled[seen == 0] = np.inf
    np.fill_diagonal(scaled, 0.0)
    return np.sqrt(np.maximum(scaled, 0.0))


def knn_impute(rows: np.ndarray, k: int) -> np.ndarray:
    """Fill NaN entries from the k nearest donor rows per feature.

    Donors for a feature are rows observing it, ranked by nan-aware distance
    with stable index tie-breaking; a feature with no donors falls back to
    its column mean (0 if the column is entirely missing).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = np.asarray(rows, dtype=np.float64)
    out = rows.copy()
    present = ~np.isnan(rows)
    dist = nan_euclidean_distances(rows)
    col_means = np.zeros(rows.shape[1])
    for f in range(rows.shape[1]):
        col = rows[present[:, f], f]
        col_means[f] = col.mean() if col.size else 0.0
    for i in range(rows.shape[0]):
        missing = np.where(~present[i])[0]
        if missing.size == 0:
            continue
        order = np.argsort(dist[i], kind="stable")
        for f in missing:
            donors = [j for j in order if j != i and present[j, f] and np.isfinite(dist[i, j])]
            if not donors:
                out[i, f] = col_means[f]
            else:
                out[i, f] = rows[donors[:k], f].mean()
    return out


def flatten_for_knn(seqs: list[EventSequence], length: int, d: int) -> np.ndarray:
    """Fixed-length per-sequence feature rows [t_1, x_1, ..., t_L, x_L].

    Sequences shorter than ``length`` are NaN-padded; longer ones truncated.
    """
    rows = np.full((len(seqs), length * (1 + d)), np.nan)
    for i, s in enumerate(seqs):
        n = min(len(s), length)
        for j in range(n):
            base = j * (1 + d)
            rows[i, base] = s.times[j]
            rows[i, base + 1: base + 1 + d] = s.locations[j]
    return rows


# -------------------------------------------------------------- task harness


def parse_task(name: str) -> tuple[str, float | int | None]:
    """'impute-random-0.2' -> ('impute-random', 0.2); 'next' -> ('next', None)."""
    known = ("next", "inverse", "impute-random", "recover-block",
             "forecast-joint", "forecast-ar", "partial-attribute")
    for mode in sorted(known, key=len, reverse=True):
        if name == mode:
            return mode, None
        if name.startswith(mode + "-"):
            raw = name[len(mode) + 1:]
            val = float(raw) if "." in raw else int(raw)
            return mode, val
    raise ValueError(f"unknown task '{name}'")


def build_condition(mode: str, param, n: int, rng: np.random.Generator):
    """Condition vectors (time, loc) for one sequence, or None if ineligible."""
    if mode == "next":
        c = np.zeros(n, dtype=np.int8)
        return c, c.copy()
    if mode == "inverse":
        k = int(param or 1)
        if n < k + 1:
            return None
        c = np.ones(n, dtype=np.int8)
        c[:k] = 0
        return c, c.copy()
    if mode == "impute-random":
        ratio = float(param if param is not None else 0.2)
        if n < 2:
            return None
        while True:
            c = (rng.random(n) >= ratio).astype(np.int8)
            if 0 < c.sum() < n:
                return c, c.copy()
    if mode == "recover-block":
        blen = int(param or 5)
        if n < blen + 1:
            return None
        a = int(rng.integers(1, n - blen + 2))
        c = np.ones(n, dtype=np.int8)
        c[a - 1: a - 1 + blen] = 0
        return c, c.copy()
    if mode in ("forecast-joint", "forecast-ar"):
        k = int(param or 5)
        if n < k + 1:
            return None
        c = np.ones(n, dtype=np.int8)
        c[-k:] = 0
        return c, c.copy()
    if mode == "partial-attribute":
        ratio = float(param if param is not None else 0.1)
        if n < 2:
            return None
        while True:
            sel = rng.random(n) < ratio
            if not sel.any() or sel.all():
                continue
            ct = np.ones(n, dtype=np.int8)
            cl = np.ones(n, dtype=np.int8)
            for j in np.where(sel)[0]:
                u = rng.random()
                if u < 1 / 3:
                    ct[j] = 0
                elif u < 2 / 3:
                    cl[j] = 0
                else:
                    ct[j] = 0
                    cl[j] = 0
            if (ct == 0).any() or (cl == 0).any():
                return ct, cl
    raise ValueError(f"unknown task mode '{mode}'")


@dataclass
class TaskReport:
    task: str
    predictor: str
    temporal_rmse: float
    spatial_dist: float
    n_sequences: int
    n_targets_time: int
    n_targets_loc: int
    n_skipped: int
    per_sequence: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "TaskReport":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"cannot read task report {path}: {exc}") from exc


def _accumulate(report_rows, seq_idx, pt, tt, pl, tl):
    pt, tt = np.asarray(pt, dtype=float), np.asarray(tt, dtype=float)
    pl, tl = np.asarray(pl, dtype=float), np.asarray(tl, dtype=float)
    dists = np.linalg.norm(pl - tl, axis=-1) if pl.size else np.empty(0)
    report_rows.append({
        "seq": int(seq_idx),
        "n_time": int(pt.size),
        "n_loc": int(dists.size),
        "sq_err_time": float(np.sum((pt - tt) ** 2)),
        "sum_dist": float(dists.sum()),
        "pred_times": pt.tolist(),
        "true_times": tt.tolist(),
        "pred_locs": pl.tolist(),
        "true_locs": tl.tolist(),
    })


def _finalize(task, predictor, rows, n_skipped, meta) -> TaskReport:
    n_time = sum(r["n_time"] for r in rows)
    n_loc = sum(r["n_loc"] for r in rows)
    rmse = float(np.sqrt(sum(r["sq_err_time"] for r in rows) / n_time)) if n_time else float("nan")
    dist = float(sum(r["sum_dist"] for r in rows) / n_loc) if n_loc else float("nan")
    return TaskReport(task, predictor, rmse, dist, len(rows), n_time, n_loc, n_skipped, rows, meta)


def run_task(
    task_name: str,
    predictor: str,
    test_seqs: list[EventSequence],
    train_seqs: list[EventSequence],
    bundle: TrainedBundle | None = None,
    seed: int = 0,
    n_euler_steps: int = 10,
    m_samples: int = 1,
    batch_size: int = 64,
) -> TaskReport:
    """Evaluate one conditioned-inference task with a fixed evaluation seed.

    ``predictor`` is 'arch', 'hpp', or 'knn-<k>'. Masks are sampled from the
    evaluation seed so every predictor sees identical conditioning.
    """
    mode, param = parse_task(task_name)
    rng_masks = np.random.default_rng([seed, 101])
    rng_gen = np.random.default_rng([seed, 202])
    conds, kept = [], []
    n_skipped = 0
    for i, s in enumerate(test_seqs):
        built = build_condition(mode, param, len(s), rng_masks)
        if built is None:
            n_skipped += 1
            continue
        conds.append(built)
        kept.append(i)
    meta = {"seed": seed, "task": task_name, "predictor": predictor,
            "n_euler_steps": n_euler_steps, "m_samples": m_samples}

    rows: list[dict] = []
    if predictor == "arch":
        if bundle is None:
            raise ValueError("the flow predictor needs a checkpoint bundle")
        _run_arch(mode, test_seqs, kept, conds, bundle, rng_gen, n_euler_steps, m_samples,
                  batch_size, rows)
    elif predictor == "hpp":
        _run_hpp(mode, test_seqs, kept, conds, train_seqs, rows)
    elif predictor.startswith("knn-"):
        k = int(predictor.split("-", 1)[1])
        if mode not in KNN_TASKS:
            raise ValueError(f"KNN baseline does not apply to task '{mode}'")
        _run_knn(mode, test_seqs, kept, conds, train_seqs, k, rows)
    else:
        raise ValueError(f"unknown predictor '{predictor}'")
    return _finalize(task_name, predictor, rows, n_skipped, meta)


def _target_slices(mode, cond_time, cond_loc):
    t_idx = np.where(cond_time == 0)[0]
    l_idx = np.where(cond_loc == 0)[0]
    return t_idx, l_idx


def _run_arch(mode, test_seqs, kept, conds, bundle, rng, n_steps, m_samples, batch_size, rows):
    if mode in ("next", "forecast-ar"):
        if mode == "next":
            tasks = next_event_tasks([test_seqs[i] for i in kept])
            for start in range(0, len(tasks), batch_size):
                chunk = tasks[start:start + batch_size]
                res = generate_batch(bundle, chunk, n_steps, rng, m_samples)
                for local, r in enumerate(res):
                    i = kept[start + local]
                    s = test_seqs[i]
                    _accumulate(rows, i, r.times, s.times, r.locations, s.locations)
        else:
            for i, (ct, _) in zip(kept, conds):
                s = test_seqs[i]
                k = int((ct == 0).sum())
                hist = s.prefix(len(s) - k)
                r = forecast_ar(bundle, hist, k, n_steps, rng, m_samples)
                _accumulate(rows, i, r.times, s.times[-k:], r.locations, s.locations[-k:])
        return
    tasks, metas = [], []
    for i, (ct, cl) in zip(kept, conds):
        s = test_seqs[i]
        tasks.append(GenerationTask(s, ct, cl))
        metas.append((i, ct, cl))
    for start in range(0, len(tasks), batch_size):
        chunk = tasks[start:start + batch_size]
        res = generate_batch(bundle, chunk, n_steps, rng, m_samples)
        for local, r in enumerate(res):
            i, ct, cl = metas[start + local]
            s = test_seqs[i]
            t_idx, l_idx = _target_slices(mode, ct, cl)
            _accumulate(rows, i, r.times[t_idx], s.times[t_idx],
                        r.locations[l_idx], s.locations[l_idx])


def _run_hpp(mode, test_seqs, kept, conds, train_seqs, rows):
    hpp = HPPBaseline.fit(train_seqs)
    for i, (ct, cl) in zip(kept, conds):
        s = test_seqs[i]
        t_idx, l_idx = _target_slices(mode, ct, cl)
        pred_t = np.empty(t_idx.size)
        if mode in ("next",):
            for j, idx in enumerate(t_idx):
                prev = s.times[idx - 1] if idx else 0.0
                pred_t[j], _ = hpp.predict_next(prev)
        else:
            # chain from the last observed event before each target run
            prev_by_idx = {}
            prev = 0.0
            for idx in range(len(s)):
                if ct[idx] == 1:
                    prev = s.times[idx]
                else:
                    prev = prev + hpp.mean_gap
                    prev_by_idx[idx] = prev
            for j, idx in enumerate(t_idx):
                pred_t[j] = prev_by_idx[idx]
        pred_l = np.tile(hpp.mean_location, (l_idx.size, 1))
        _accumulate(rows, i, pred_t, s.times[t_idx], pred_l, s.locations[l_idx])


def _knn_mask_rows(test_seqs, kept, conds, length, d):
    rows = flatten_for_knn([test_seqs[i] for i in kept], length, d)
    for r, (_, (ct, cl)) in enumerate(zip(kept, conds)):
        n = min(len(ct), length)
        for j in range(n):
            base = j * (1 + d)
            if ct[j] == 0:
                rows[r, base] = np.nan
            if cl[j] == 0:
                rows[r, base + 1: base + 1 + d] = np.nan
    return rows


def _run_knn(mode, test_seqs, kept, conds, train_seqs, k, rows):
    d = test_seqs[kept[0]].dim if kept else 2
    length = max(
        max((len(s) for s in train_seqs), default=1),
        max((len(test_seqs[i]) for i in kept), default=1),
    )
    train_rows = flatten_for_knn(train_seqs, length, d)
    test_rows = _knn_mask_rows(test_seqs, kept, conds, length, d)
    stacked = np.vstack([train_rows, test_rows])
    imputed = knn_impute(stacked, k)[len(train_rows):]
    for r, (i, (ct, cl)) in enumerate(zip(kept, conds)):
        s = test_seqs[i]
        t_idx, l_idx = _target_slices(mode, ct, cl)
        t_idx = t_idx[t_idx < length]
        l_idx = l_idx[l_idx < length]
        pred_t = np.array([imputed[r, j * (1 + d)] for j in t_idx])
        pred_l = np.array([imputed[r, j * (1 + d) + 1: j * (1 + d) + 1 + d] for j in l_idx])
        pred_l = pred_l.reshape(-1, d)
        _accumulate(rows, i, pred_t, s.times[t_idx], pred_l, s.locations[l_idx])


# ------------------------------------------------- intensity recovery suite


def evaluate_intensity_recovery(
    bundle: TrainedBundle,
    process: Process,
    test_seqs: list[EventSequence],
    train_seqs: list[EventSequence],
    g: int = 8,
    solver: SolverConfig | None = None,
    limit: int | None = None,
    baseline_limit: int | None = None,
    log_fn=None,
) -> tuple[dict, list[dict]]:
    """Model vs truth intensity snapshots plus the constant-surface baseline.

    Returns the report dict and the snapshot records for the columnar file.
    """
    solver = solver or SolverConfig()
    use = test_seqs[:limit] if limit else test_seqs
    records: list[dict] = []
    model_pairs, const_pairs = [], []

    base_train = train_seqs[:baseline_limit] if baseline_limit else train_seqs
    train_grids = [true_intensity_grid(process, s, g) for s in base_train if len(s)]
    const_surface = constant_grid_predictor(train_grids)

    for i, seq in enumerate(use):
        if not len(seq):
            continue
        truth = true_intensity_grid(process, seq, g)
        pred = model_intensity_grid(bundle, seq, g, solver, box=process.domain.spatial_box)
        const = IntensityGrid(
            truth.eval_times.copy(), truth.grid_centers,
            np.broadcast_to(const_surface, truth.values.shape).copy(), truth.cell_area,
        )
        model_pairs.append((pred, truth))
        const_pairs.append((const, truth))
        records.append({"seq": i, "times": seq.times, "pred": pred.values, "truth": truth.values})
        if log_fn:
            log_fn({"sequence": i, "n_snapshots": len(seq)})
    report = {
        "grid": g,
        "solver": {"method": solver.method, "budget": solver.budget,
                   "rtol": solver.rtol, "atol": solver.atol},
        "model": aggregate_relative_l2(model_pairs),
        "constant_baseline": aggregate_relative_l2(const_pairs),
        "n_train_baseline": len(train_grids),
    }
    return report, records


# -------------------------------------------------------- snapshot file I/O


def save_snapshots(path: str | Path, records: list[dict]) -> None:
    """Columnar snapshot file: one row per (sequence, event, cell)."""
    cols = {k: [] for k in ("seq", "event", "time", "row", "col", "pred", "truth")}
    for rec in records:
        pred, truth = rec["pred"], rec.get("truth")
        n_t, g, _ = pred.shape
        ev, rr, cc = np.meshgrid(np.arange(n_t), np.arange(g), np.arange(g), indexing="ij")
        cols["seq"].append(np.full(n_t * g * g, rec["seq"]))
        cols["event"].append(ev.ravel())
        cols["time"].append(np.asarray(rec["times"])[ev.ravel()])
        cols["row"].append(rr.ravel())
        cols["col"].append(cc.ravel())
        cols["pred"].append(pred.ravel())
        cols["truth"].append(truth.ravel() if truth is not None else np.full(n_t * g * g, np.nan))
    np.savez_compressed(
        path,
        **{k: np.concatenate(v) if v else np.empty(0) for k, v in cols.items()},
    )


def load_snapshots(path: str | Path) -> dict:
    try:
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read snapshot file {path}: {exc}") from exc


def snapshots_to_grids(data: dict) -> dict[int, dict]:
    """Group a columnar snapshot table back into (pred, truth) arrays."""
    out: dict[int, dict] = {}
    g = int(data["row"].max()) + 1
    for seq in np.unique(data["seq"]):
        sel = data["seq"] == seq
        events = np.unique(data["event"][sel])
        n = events.size
        pred = np.zeros((n, g, g))
        truth = np.full((n, g, g), np.nan)
        times = np.zeros(n)
        pred[data["event"][sel], data["row"][sel], data["col"][sel]] = data["pred"][sel]
        truth[data["event"][sel], data["row"][sel], data["col"][sel]] = data["truth"][sel]
        for e in events:
            esel = sel & (data["event"] == e)
            times[e] = data["time"][esel][0]
        out[int(seq)] = {"pred": pred, "truth": truth, "times": times}
    return out
