"""Figure rendering: intensity heatmaps and report summary charts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .evaluation import load_snapshots, snapshots_to_grids


def plot_snapshots(
    snapshot_path: str | Path,
    out_dir: str | Path,
    n_times: int = 5,
    max_sequences: int | None = None,
) -> list[Path]:
    """One heatmap panel per sequence: representative time points, truth on
    top when available, model below, one shared color scale per sequence."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create figure directory {out}: {exc}") from exc
    grids = snapshots_to_grids(load_snapshots(snapshot_path))
    written: list[Path] = []
    for seq_id, rec in sorted(grids.items()):
        if max_sequences is not None and len(written) >= max_sequences:
            break
        pred, truth, times = rec["pred"], rec["truth"], rec["times"]
        has_truth = np.isfinite(truth).any()
        n = pred.shape[0]
        picks = np.unique(np.linspace(0, n - 1, min(n_times, n)).round().astype(int))
        vmax = float(np.nanmax([pred[picks].max(), np.nanmax(truth[picks]) if has_truth else 0.0]))
        n_rows = 2 if has_truth else 1
        fig, axes = plt.subplots(n_rows, len(picks), figsize=(2.4 * len(picks), 2.4 * n_rows),
                                 squeeze=False)
        for col, ti in enumerate(picks):
            if has_truth:
                axes[0][col].imshow(truth[ti].T, origin="lower", vmin=0.0, vmax=vmax,
                                    cmap="viridis")
                axes[0][col].set_title(f"truth  s={times[ti]:.2f}", fontsize=8)
                axes[0][col].set_axis_off()
            ax = axes[-1][col]
            im = ax.imshow(pred[ti].T, origin="lower", vmin=0.0, vmax=vmax, cmap="viridis")
            ax.set_title(f"model  s={times[ti]:.2f}", fontsize=8)
            ax.set_axis_off()
        fig.colorbar(im, ax=[a for row in axes for a in row], shrink=0.8)
        path = out / f"intensity_seq{seq_id:04d}.png"
        fig.savefig(path, dpi=130, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def plot_report_bars(rows: list[dict], out_path: str | Path) -> Path:
    """Grouped bars of temporal/spatial error per predictor and task."""
    out_path = Path(out_path)
    tasks = sorted({r["task"] for r in rows})
    predictors = sorted({r["predictor"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(3.2 * max(len(tasks), 2), 3.2))
    width = 0.8 / max(len(predictors), 1)
    for ax, key, label in zip(axes, ("temporal_rmse", "spatial_dist"),
                              ("temporal RMSE", "spatial distance")):
        for pi, pred in enumerate(predictors):
            xs, ys = [], []
            for ti, task in enumerate(tasks):
                match = [r for r in rows if r["task"] == task and r["predictor"] == pred]
                if match:
                    xs.append(ti + pi * width)
                    ys.append(match[0][key])
            ax.bar(xs, ys, width=width, label=pred)
        ax.set_xticks(np.arange(len(tasks)) + 0.4 - width / 2)
        ax.set_xticklabels(tasks, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel(label)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
