"""Benchmark ingestion: convert locally provided raw files to the canonical
dataset layout and validate them against the published split sizes.

No network access: raw files must already be on disk. Two raw layouts are
accepted per split (train/val/test): a JSON-lines file of records with fields
"t" and "x", or an .npz archive with object arrays "t" and "x".
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .errors import IngestionError
from .events import EventSequence, save_sequences, sequence_length_summary

BENCHMARKS = {
    "earthquake": {"counts": (950, 50, 50), "length_range": (22, 554), "horizon": 30.0},
    "covid19": {"counts": (1450, 100, 100), "length_range": (5, 287), "horizon": 7.0},
    "citibike": {"counts": (2440, 300, 320), "length_range": (14, 204), "horizon": 24.0},
}
SPLITS = ("train", "val", "test")


def _load_raw_split(raw_dir: Path, split: str) -> list[EventSequence]:
    jsonl = raw_dir / f"{split}.jsonl"
    npz = raw_dir / f"{split}.npz"
    if jsonl.exists():
        seqs = []
        with jsonl.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    seqs.append(EventSequence(np.asarray(rec["t"]), np.asarray(rec["x"])))
                except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                    raise IngestionError(f"{jsonl}:{lineno}: malformed record: {exc}") from exc
        return seqs
    if npz.exists():
        try:
            with np.load(npz, allow_pickle=True) as z:
                ts, xs = z["t"], z["x"]
            return [EventSequence(np.asarray(t), np.asarray(x)) for t, x in zip(ts, xs)]
        except (KeyError, ValueError) as exc:
            raise IngestionError(f"{npz}: malformed archive: {exc}") from exc
    raise IngestionError(f"no raw file for split '{split}' under {raw_dir} "
                         f"(expected {split}.jsonl or {split}.npz)")


def ingest_benchmark(name: str, raw_path: str | Path, out_dir: str | Path) -> dict:
    """Convert a raw benchmark drop to the canonical layout and validate it.

    Returns the ingestion summary (also written to the output manifest).
    Split-count mismatches are errors; out-of-range sequence lengths are
    reported as warnings since preprocessing variants differ slightly.
    """
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark '{name}' (choose from {sorted(BENCHMARKS)})")
    spec = BENCHMARKS[name]
    raw_dir = Path(raw_path)
    if not raw_dir.exists():
        raise IngestionError(f"raw path {raw_dir} does not exist")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    summary: dict = {"benchmark": name, "raw_path": str(raw_dir), "splits": {}}
    all_lengths = []
    for split, expected in zip(SPLITS, spec["counts"]):
        seqs = _load_raw_split(raw_dir, split)
        if len(seqs) != expected:
            raise IngestionError(
                f"{name} split '{split}': expected {expected} sequences, found {len(seqs)}"
            )
        stats = sequence_length_summary(seqs)
        summary["splits"][split] = stats
        all_lengths.extend(len(s) for s in seqs)
        save_sequences(out / f"{split}.jsonl", seqs)
    lo, hi = spec["length_range"]
    mn, mx = int(min(all_lengths)), int(max(all_lengths))
    if mn < lo or mx > hi:
        warnings.warn(
            f"{name}: sequence lengths [{mn}, {mx}] fall outside the published range [{lo}, {hi}]",
            stacklevel=2,
        )
    summary["length_range"] = [mn, mx]
    summary["average_length"] = float(np.mean(all_lengths))
    summary["time_horizon"] = spec["horizon"]
    manifest = {
        "benchmark": name,
        "files": {s: f"{s}.jsonl" for s in SPLITS},
        "summary": summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return summary
