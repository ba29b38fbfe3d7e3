import json

import numpy as np
import pytest

from stflow.errors import IngestionError
from stflow.events import load_sequences
from stflow.ingest import BENCHMARKS, ingest_benchmark


def fabricate_raw(tmp_path, counts, fmt="jsonl", seq_len=30):
    """A synthetic raw drop with the requested split sizes."""
    rng = np.random.default_rng(0)
    raw = tmp_path / "raw"
    raw.mkdir()
    for split, count in zip(("train", "val", "test"), counts):
        seqs = []
        for _ in range(count):
            t = np.sort(rng.uniform(0, 30, seq_len))
            x = rng.uniform(-5, 5, (seq_len, 2))
            seqs.append((t, x))
        if fmt == "jsonl":
            with (raw / f"{split}.jsonl").open("w") as fh:
                for t, x in seqs:
                    fh.write(json.dumps({"t": t.tolist(), "x": x.tolist()}) + "\n")
        else:
            np.savez(raw / f"{split}.npz",
                     t=np.array([t for t, _ in seqs], dtype=object),
                     x=np.array([x for _, x in seqs], dtype=object))
    return raw


class TestIngest:
    def test_earthquake_counts_accepted(self, tmp_path):
        raw = fabricate_raw(tmp_path, BENCHMARKS["earthquake"]["counts"])
        out = tmp_path / "out"
        summary = ingest_benchmark("earthquake", raw, out)
        assert summary["splits"]["train"]["count"] == 950
        assert summary["average_length"] == pytest.approx(30.0)
        assert (out / "manifest.json").exists()
        assert len(load_sequences(out / "train.jsonl")) == 950

    def test_count_mismatch_lists_expected_vs_found(self, tmp_path):
        raw = fabricate_raw(tmp_path, (10, 50, 50))
        with pytest.raises(IngestionError, match="expected 950.*found 10"):
            ingest_benchmark("earthquake", raw, tmp_path / "out")

    def test_npz_layout_supported(self, tmp_path):
        raw = fabricate_raw(tmp_path, BENCHMARKS["covid19"]["counts"], fmt="npz", seq_len=10)
        summary = ingest_benchmark("covid19", raw, tmp_path / "out")
        assert summary["splits"]["val"]["count"] == 100

    def test_malformed_record_is_line_numbered(self, tmp_path):
        raw = tmp_path / "raw"
        raw.mkdir()
        (raw / "train.jsonl").write_text('{"t": [1.0], "x": [[0, 0]]}\n{"bad": true}\n')
        with pytest.raises(IngestionError, match="train.jsonl:2"):
            ingest_benchmark("earthquake", raw, tmp_path / "out")

    def test_unknown_benchmark(self, tmp_path):
        with pytest.raises(ValueError, match="unknown benchmark"):
            ingest_benchmark("lightning", tmp_path, tmp_path / "out")

    def test_missing_raw_path(self, tmp_path):
        with pytest.raises(IngestionError, match="does not exist"):
            ingest_benchmark("earthquake", tmp_path / "nope", tmp_path / "out")

    def test_out_of_range_lengths_warn(self, tmp_path):
        raw = fabricate_raw(tmp_path, BENCHMARKS["earthquake"]["counts"], seq_len=3)
        with pytest.warns(UserWarning, match="outside the published range"):
            ingest_benchmark("earthquake", raw, tmp_path / "out")
