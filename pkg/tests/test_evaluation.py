import math

import numpy as np
import pytest

from stflow.evaluation import (
    HPPBaseline,
    TaskReport,
    aggregate_relative_l2,
    build_condition,
    constant_grid_predictor,
    flatten_for_knn,
    knn_impute,
    load_snapshots,
    nan_euclidean_distances,
    parse_task,
    prediction_metrics,
    relative_l2,
    run_task,
    save_snapshots,
    snapshots_to_grids,
)
from stflow.events import EventSequence
from stflow.simulate import IntensityGrid


def grid_of(values, times=None):
    values = np.asarray(values, dtype=float)
    n, g, _ = values.shape
    centers = np.zeros((g, g, 2))
    return IntensityGrid(times if times is not None else np.arange(1, n + 1, dtype=float),
                         centers, values, 1.0 / (g * g))


def brute_force_knn(rows, k):
    """Loop-based reference with the same donor and tie-break semantics."""
    rows = np.asarray(rows, dtype=float)
    n, f = rows.shape
    out = rows.copy()
    dist = np.full((n, n), np.inf)
    for i in range(n):
        for j in range(n):
            if i == j:
                dist[i, j] = 0.0
                continue
            both = ~np.isnan(rows[i]) & ~np.isnan(rows[j])
            if both.any():
                d2 = float(((np.where(both, rows[i], 0.0) - np.where(both, rows[j], 0.0))**2).sum())
                dist[i, j] = math.sqrt(max(d2 * f / int(both.sum()), 0.0))
    for i in range(n):
        for feat in range(f):
            if not np.isnan(rows[i, feat]):
                continue
            order = np.argsort(dist[i], kind="stable")
            donors = [j for j in order if j != i and not np.isnan(rows[j, feat])
                      and np.isfinite(dist[i, j])]
            if donors:
                out[i, feat] = rows[donors[:k], feat].mean()
            else:
                col = rows[~np.isnan(rows[:, feat]), feat]
                out[i, feat] = col.mean() if col.size else 0.0
    return out


class TestRelativeL2:
    def test_perfect_prediction_zero(self):
        t = grid_of(np.random.default_rng(0).uniform(1, 2, (4, 3, 3)))
        val, excluded = relative_l2(t, t)
        assert val == 0.0 and excluded == 0

    def test_double_is_one(self):
        truth = grid_of(np.random.default_rng(1).uniform(1, 2, (5, 3, 3)))
        pred = grid_of(2 * truth.values)
        val, _ = relative_l2(pred, truth)
        assert val == pytest.approx(1.0, abs=1e-12)

    def test_zero_norm_snapshots_excluded(self):
        truth = grid_of(np.stack([np.zeros((2, 2)), np.ones((2, 2))]))
        pred = grid_of(np.ones((2, 2, 2)))
        val, excluded = relative_l2(pred, truth)
        assert excluded == 1
        assert val == 0.0  # the surviving snapshot matches exactly

    def test_aggregate_mean_std(self):
        rng = np.random.default_rng(2)
        pairs = []
        for _ in range(4):
            truth = grid_of(rng.uniform(1, 2, (3, 2, 2)))
            pred = grid_of(truth.values * rng.uniform(1.0, 1.5))
            pairs.append((pred, truth))
        agg = aggregate_relative_l2(pairs)
        assert agg["n_sequences"] == 4
        assert agg["mean"] == pytest.approx(np.mean(agg["per_sequence"]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            relative_l2(grid_of(np.ones((2, 2, 2))), grid_of(np.ones((2, 3, 3))))


class TestPredictionMetrics:
    def test_perfect(self):
        rmse, dist = prediction_metrics([1, 2], [1, 2], [[0, 0]], [[0, 0]])
        assert rmse == 0.0 and dist == 0.0

    def test_unit_offset_rmse(self):
        rmse, _ = prediction_metrics([2, 3, 4], [1, 2, 3], np.zeros((3, 2)), np.zeros((3, 2)))
        assert rmse == pytest.approx(1.0)

    def test_misalignment_rejected(self):
        with pytest.raises(ValueError):
            prediction_metrics([1], [1, 2], [[0, 0]], [[0, 0]])


class TestConstantGridPredictor:
    def test_mean_surface(self):
        g1 = grid_of(np.ones((2, 2, 2)))
        g2 = grid_of(3 * np.ones((4, 2, 2)))
        surface = constant_grid_predictor([g1, g2])
        # six snapshots: two of value 1, four of value 3
        assert np.allclose(surface, (2 * 1 + 4 * 3) / 6)


class TestHPP:
    def test_constant_gap_data_perfect(self):
        seqs = [EventSequence(np.arange(1.0, 6.0), np.tile([0.5, 0.5], (5, 1)))]
        hpp = HPPBaseline.fit(seqs)
        assert hpp.mean_gap == pytest.approx(1.0)
        t, loc = hpp.predict_next(7.0)
        assert t == pytest.approx(8.0)
        assert np.allclose(loc, [0.5, 0.5])

    def test_history_independence(self):
        seqs = [EventSequence([1.0, 4.0], [[0, 0], [1, 1]])]
        hpp = HPPBaseline.fit(seqs)
        assert hpp.predict_next(0.0)[0] - 0.0 == hpp.predict_next(100.0)[0] - 100.0


class TestKnnImpute:
    def test_mean_of_two_neighbors(self):
        rows = np.array([
            [0.0, 1.0],
            [0.0, 3.0],
            [0.0, np.nan],
        ])
        out = knn_impute(rows, k=2)
        assert out[2, 1] == pytest.approx(2.0)

    def test_k_all_complete_rows_gives_column_mean(self):
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(6, 3))
        rows[0, 2] = np.nan
        out = knn_impute(rows, k=5)
        assert out[0, 2] == pytest.approx(rows[1:, 2].mean())

    def test_feature_missing_everywhere_falls_back_to_zero(self):
        rows = np.array([[1.0, np.nan], [2.0, np.nan]])
        out = knn_impute(rows, k=1)
        assert np.allclose(out[:, 1], 0.0)

    def test_exact_match_with_brute_force_small(self):
        rng = np.random.default_rng(4)
        rows = rng.normal(size=(20, 8))
        mask = rng.random((20, 8)) < 0.1
        rows[mask] = np.nan
        for k in (1, 3, 5):
            assert np.array_equal(knn_impute(rows, k), brute_force_knn(rows, k))

    def test_exact_match_fifty_rows(self):
        rng = np.random.default_rng(5)
        rows = rng.normal(size=(50, 12))
        rows[rng.random((50, 12)) < 0.15] = np.nan
        assert np.array_equal(knn_impute(rows, 10), brute_force_knn(rows, 10))

    def test_nan_distance_scaling(self):
        rows = np.array([[0.0, 0.0, np.nan], [3.0, 4.0, 1.0]])
        d = nan_euclidean_distances(rows)
        # co-observed squared distance 25 over 2 of 3 features -> 25 * 3/2
        assert d[0, 1] == pytest.approx(math.sqrt(37.5))

    def test_flatten_layout(self):
        s = EventSequence([1.0, 2.0], [[0.1, 0.2], [0.3, 0.4]])
        rows = flatten_for_knn([s], length=3, d=2)
        assert rows.shape == (1, 9)
        assert rows[0, 0] == 1.0 and rows[0, 3] == 2.0
        assert np.isnan(rows[0, 6:]).all()


class TestTaskParsing:
    def test_known_tasks(self):
        assert parse_task("next") == ("next", None)
        assert parse_task("inverse-2") == ("inverse", 2)
        assert parse_task("impute-random-0.2") == ("impute-random", 0.2)
        assert parse_task("recover-block-10") == ("recover-block", 10)
        assert parse_task("forecast-joint-5") == ("forecast-joint", 5)
        assert parse_task("partial-attribute-0.05") == ("partial-attribute", 0.05)

    def test_unknown(self):
        with pytest.raises(ValueError):
            parse_task("teleport-3")


class TestBuildCondition:
    def test_inverse_mask_layout(self):
        ct, cl = build_condition("inverse", 1, 5, np.random.default_rng(0))
        assert ct.tolist() == [0, 1, 1, 1, 1]
        assert np.array_equal(ct, cl)

    def test_inverse_two(self):
        ct, _ = build_condition("inverse", 2, 5, np.random.default_rng(0))
        assert ct.tolist() == [0, 0, 1, 1, 1]

    def test_impute_ratio_statistics(self):
        rng = np.random.default_rng(1)
        fractions = []
        for _ in range(3000):
            ct, _ = build_condition("impute-random", 0.2, 20, rng)
            fractions.append(np.mean(ct == 0))
        assert abs(np.mean(fractions) - 0.2) < 0.02

    def test_block_contiguous(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            ct, _ = build_condition("recover-block", 10, 25, rng)
            zeros = np.where(ct == 0)[0]
            assert zeros.size == 10
            assert np.all(np.diff(zeros) == 1)

    def test_forecast_suffix(self):
        ct, _ = build_condition("forecast-joint", 5, 12, np.random.default_rng(3))
        assert ct.tolist() == [1] * 7 + [0] * 5

    def test_ineligible_returns_none(self):
        assert build_condition("recover-block", 10, 10, np.random.default_rng(4)) is None
        assert build_condition("inverse", 3, 3, np.random.default_rng(4)) is None

    def test_partial_attribute_mixture(self):
        rng = np.random.default_rng(5)
        kinds = {"time": 0, "loc": 0, "both": 0}
        for _ in range(400):
            ct, cl = build_condition("partial-attribute", 0.3, 12, rng)
            for j in range(12):
                if ct[j] == 0 and cl[j] == 0:
                    kinds["both"] += 1
                elif ct[j] == 0:
                    kinds["time"] += 1
                elif cl[j] == 0:
                    kinds["loc"] += 1
        total = sum(kinds.values())
        for v in kinds.values():
            assert abs(v / total - 1 / 3) < 0.05


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(6)
    seqs = []
    for _ in range(12):
        n = int(rng.integers(6, 12))
        seqs.append(EventSequence(np.sort(rng.uniform(0.2, 9.8, n)), rng.uniform(0, 1, (n, 2))))
    return seqs[:8], seqs[8:]


class TestRunTask:
    def test_knn_task_report(self, data):
        train, test = data
        rep = run_task("inverse-1", "knn-3", test, train, seed=0)
        assert rep.n_sequences == len(test)
        assert rep.n_targets_time == len(test)
        assert np.isfinite(rep.temporal_rmse)
        recomputed = math.sqrt(sum(r["sq_err_time"] for r in rep.per_sequence) / rep.n_targets_time)
        assert rep.temporal_rmse == pytest.approx(recomputed)

    def test_hpp_next(self, data):
        train, test = data
        rep = run_task("next", "hpp", test, train, seed=0)
        assert rep.n_targets_time == sum(len(s) for s in test)
        assert np.isfinite(rep.temporal_rmse) and np.isfinite(rep.spatial_dist)

    def test_arch_impute(self, data, tiny_bundle):
        train, test = data
        rep = run_task("impute-random-0.3", "arch", test, train, tiny_bundle, seed=1)
        assert rep.n_sequences == len(test)
        assert rep.n_targets_time > 0
        assert np.isfinite(rep.temporal_rmse)

    def test_same_seed_identical_reports(self, data, tiny_bundle):
        train, test = data
        r1 = run_task("recover-block-3", "arch", test, train, tiny_bundle, seed=3)
        r2 = run_task("recover-block-3", "arch", test, train, tiny_bundle, seed=3)
        assert r1.temporal_rmse == r2.temporal_rmse
        assert r1.spatial_dist == r2.spatial_dist

    def test_identical_masks_across_predictors(self, data, tiny_bundle):
        train, test = data
        r_knn = run_task("inverse-2", "knn-5", test, train, seed=7)
        r_arch = run_task("inverse-2", "arch", test, train, tiny_bundle, seed=7)
        assert [r["true_times"] for r in r_knn.per_sequence] == \
            [r["true_times"] for r in r_arch.per_sequence]

    def test_report_json_roundtrip(self, data, tmp_path):
        train, test = data
        rep = run_task("inverse-1", "knn-3", test, train, seed=0)
        p = tmp_path / "rep.json"
        rep.to_json(p)
        back = TaskReport.from_json(p)
        assert back.temporal_rmse == rep.temporal_rmse
        assert back.per_sequence == rep.per_sequence

    def test_knn_rejected_for_forecast(self, data):
        train, test = data
        with pytest.raises(ValueError, match="apply"):
            run_task("forecast-joint-2", "knn-3", test, train, seed=0)

    def test_unknown_predictor(self, data):
        train, test = data
        with pytest.raises(ValueError, match="predictor"):
            run_task("next", "oracle", test, train, seed=0)


class TestSnapshotIO:
    def test_roundtrip_grouping(self, tmp_path):
        rng = np.random.default_rng(7)
        records = [
            {"seq": 0, "times": np.array([1.0, 2.0]), "pred": rng.uniform(size=(2, 3, 3)),
             "truth": rng.uniform(size=(2, 3, 3))},
            {"seq": 1, "times": np.array([1.5]), "pred": rng.uniform(size=(1, 3, 3)),
             "truth": None},
        ]
        path = tmp_path / "snaps.npz"
        save_snapshots(path, records)
        grids = snapshots_to_grids(load_snapshots(path))
        assert set(grids) == {0, 1}
        assert np.allclose(grids[0]["pred"], records[0]["pred"])
        assert np.allclose(grids[0]["truth"], records[0]["truth"])
        assert np.isnan(grids[1]["truth"]).all()
        assert np.allclose(grids[0]["times"], [1.0, 2.0])
