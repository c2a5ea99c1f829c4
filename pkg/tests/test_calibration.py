import itertools
import math

import numpy as np
import pytest

from conftest import random_cascade, random_data
from gatecascade import (
    CalibrationSpec,
    InfeasibleError,
    UsageError,
    calibrate_exhaustive,
    calibrate_sequential,
    cascade_evaluate,
)
from gatecascade.calibration import report_rows, with_sentinel
from gatecascade.cascade import score_table

INF = math.inf


def desk_case(rng, n_gates=2, points=3, n=60):
    while True:
        model = random_cascade(rng, n_gates=n_gates)
        if model.n_gates == n_gates:
            break
    data = random_data(rng, model, n)
    scores = score_table(model, data).max_scores
    grids = []
    for k in range(n_gates):
        qs = np.quantile(scores[:, k], np.linspace(0.1, 0.9, points - 1))
        grids.append(with_sentinel(np.round(qs, 6)))
    return model, data, grids


def hand_sequential(model, data, grids, floor):
    """Greedy reference built from cascade_evaluate, one gate at a time."""
    chosen = [INF] * model.n_gates
    for k, grid in enumerate(grids):
        for t in grid:
            trial = chosen[:k] + [t] + [INF] * (model.n_gates - k - 1)
            if cascade_evaluate(model.with_thresholds(trial), data).accuracy >= floor:
                chosen[k] = t
                break
    return tuple(chosen)


def brute_force(model, data, grids, floor):
    best = None
    for combo in itertools.product(*grids):
        m = cascade_evaluate(model.with_thresholds(combo), data)
        if m.accuracy < floor:
            continue
        key = (m.avg_flops, -m.accuracy, combo)
        if best is None or key < best:
            best = key
    return None if best is None else best[2]


class TestSpec:
    def test_requires_sentinel(self):
        with pytest.raises(UsageError, match="sentinel"):
            CalibrationSpec(0.5, ((0.0, 1.0),))

    def test_requires_sorted(self):
        with pytest.raises(UsageError, match="sorted"):
            CalibrationSpec(0.5, ((1.0, 0.0, INF),))

    def test_floor_range(self):
        with pytest.raises(UsageError):
            CalibrationSpec(1.5, ((INF,),))

    def test_with_sentinel(self):
        assert with_sentinel([2, 1, 2]) == (1.0, 2.0, INF)


class TestSequential:
    def test_zero_floor_picks_smallest(self, rng):
        model, data, grids = desk_case(rng)
        result = calibrate_sequential(model, data, CalibrationSpec(0.0, tuple(grids)))
        assert result.thresholds == tuple(g[0] for g in grids)

    def test_infeasible_reports_ceiling(self, rng):
        model, data, grids = desk_case(rng)
        base = cascade_evaluate(model.with_thresholds([INF] * 2), data).accuracy
        floor = min(1.0, base + 1e-9)
        if floor == base:
            pytest.skip("backbone already perfect")
        with pytest.raises(InfeasibleError) as info:
            calibrate_sequential(model, data, CalibrationSpec(floor, tuple(grids)))
        assert info.value.ceiling == base
        assert "exceeds" in str(info.value)

    def test_matches_hand_trace(self, rng):
        for _ in range(10):
            model, data, grids = desk_case(rng, points=3)
            base = cascade_evaluate(model.with_thresholds([INF] * 2), data).accuracy
            floor = max(0.0, base - 0.05)
            result = calibrate_sequential(model, data, CalibrationSpec(floor, tuple(grids)))
            assert result.thresholds == hand_sequential(model, data, grids, floor)
            assert result.metrics.accuracy >= floor
            for t, grid in zip(result.thresholds, grids):
                assert t in grid

    def test_report(self, rng):
        model, data, grids = desk_case(rng)
        result = calibrate_sequential(model, data, CalibrationSpec(0.0, tuple(grids)))
        rows = list(report_rows(result))
        assert rows[0] == "gate,chosen_t,val_accuracy,avg_flops"
        assert [r.split(",")[0] for r in rows[1:]] == ["0", "1", "all"]

    def test_grid_count_checked(self, rng):
        model, data, grids = desk_case(rng)
        with pytest.raises(UsageError):
            calibrate_sequential(model, data, CalibrationSpec(0.0, tuple(grids[:1])))


class TestExhaustive:
    def test_matches_brute_force(self, rng):
        for _ in range(8):
            model, data, grids = desk_case(rng, points=4)
            base = cascade_evaluate(model.with_thresholds([INF] * 2), data).accuracy
            floor = max(0.0, base - 0.05)
            spec = CalibrationSpec(floor, tuple(grids))
            result = calibrate_exhaustive(model, data, spec)
            assert result.thresholds == brute_force(model, data, grids, floor)
            seq = calibrate_sequential(model, data, spec)
            assert result.metrics.avg_flops <= seq.metrics.avg_flops

    def test_singleton_grids(self, rng):
        model, data, _ = desk_case(rng)
        spec = CalibrationSpec(0.0, ((INF,), (INF,)))
        assert calibrate_exhaustive(model, data, spec).thresholds == (INF, INF)

    def test_cap(self, rng):
        model, data, grids = desk_case(rng, points=4)
        with pytest.raises(UsageError, match="cap"):
            calibrate_exhaustive(model, data, CalibrationSpec(0.0, tuple(grids), product_cap=10))

    def test_infeasible(self, rng):
        model, data, grids = desk_case(rng)
        base = cascade_evaluate(model.with_thresholds([INF] * 2), data).accuracy
        if base == 1.0:
            pytest.skip("backbone already perfect")
        with pytest.raises(InfeasibleError):
            calibrate_exhaustive(model, data, CalibrationSpec(1.0, tuple(grids)))

    def test_deterministic(self, rng):
        model, data, grids = desk_case(rng)
        spec = CalibrationSpec(0.2, tuple(grids))
        assert calibrate_exhaustive(model, data, spec).thresholds == calibrate_exhaustive(model, data, spec).thresholds
        assert calibrate_sequential(model, data, spec).thresholds == calibrate_sequential(model, data, spec).thresholds
