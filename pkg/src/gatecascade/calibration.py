"""Choosing gate thresholds that keep validation accuracy above a floor.

Both searches minimise average FLOPs subject to ``accuracy >= floor`` over
per-gate candidate grids. The greedy sequential search is what the pipeline
uses; the exhaustive search is its optimality check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .cascade import (
    DEFAULT_SWEEP_CAP,
    CascadeMetrics,
    CascadeModel,
    metrics_from_table,
    score_table,
    sweep_size,
)
from .data import LabeledDataset, format_real
from .errors import InfeasibleError, UsageError

NEVER_EXIT = math.inf


@dataclass(frozen=True)
class CalibrationSpec:
    """Accuracy floor and candidate thresholds for every gate.

    Each grid must be sorted ascending and contain the never-exit sentinel
    ``inf``.
    """

    accuracy_floor: float
    grids: Tuple[Tuple[float, ...], ...]
    product_cap: int = DEFAULT_SWEEP_CAP

    def __post_init__(self):
        grids = tuple(tuple(float(t) for t in g) for g in self.grids)
        object.__setattr__(self, "grids", grids)
        if not 0.0 <= self.accuracy_floor <= 1.0:
            raise UsageError(f"accuracy_floor must lie in [0, 1], got {self.accuracy_floor}")
        for k, g in enumerate(grids):
            if not g:
                raise UsageError(f"grid for gate {k} is empty")
            if list(g) != sorted(g) or any(math.isnan(t) for t in g):
                raise UsageError(f"grid for gate {k} must be sorted ascending")
            if NEVER_EXIT not in g:
                raise UsageError(f"grid for gate {k} lacks the never-exit sentinel inf")


def with_sentinel(values: Sequence[float]) -> Tuple[float, ...]:
    """Sorted, de-duplicated grid with ``inf`` appended if missing."""
    return tuple(sorted(set(float(v) for v in values) | {NEVER_EXIT}))


@dataclass
class CalibrationStep:
    gate: int
    chosen_t: float
    metrics: CascadeMetrics


@dataclass
class CalibrationResult:
    thresholds: Tuple[float, ...]
    metrics: CascadeMetrics
    steps: List[CalibrationStep] = field(default_factory=list)


def _check(model, spec):
    if len(spec.grids) != model.n_gates:
        raise UsageError(f"need one grid per gate ({model.n_gates}), got {len(spec.grids)}")


def _ceiling_check(model, table, floor):
    base = metrics_from_table(model, table, [NEVER_EXIT] * model.n_gates)
    if base.accuracy < floor:
        raise InfeasibleError(
            f"accuracy floor {floor:.6g} exceeds the backbone validation accuracy "
            f"{base.accuracy:.6g}",
            ceiling=base.accuracy,
        )
    return base


def calibrate_sequential(model: CascadeModel, val: LabeledDataset, spec: CalibrationSpec) -> CalibrationResult:
    """Greedy first-to-last threshold choice.

    For gate ``k`` the earlier gates keep their chosen thresholds and the
    later ones are disabled; the smallest grid value whose validation accuracy
    meets the floor wins, falling back to the sentinel. The last step already
    evaluates the full vector, so the result always meets the floor.

    Raises:
        InfeasibleError: the floor is above the gate-free validation accuracy.
    """
    _check(model, spec)
    table = score_table(model, val)
    _ceiling_check(model, table, spec.accuracy_floor)
    chosen = [NEVER_EXIT] * model.n_gates
    steps = []
    for k, grid in enumerate(spec.grids):
        pick = None
        for t in grid:
            trial = chosen[:k] + [t] + [NEVER_EXIT] * (model.n_gates - k - 1)
            m = metrics_from_table(model, table, trial)
            if m.accuracy >= spec.accuracy_floor:
                pick = (t, m)
                break
        if pick is None:
            trial = chosen[:k] + [NEVER_EXIT] * (model.n_gates - k)
            pick = (NEVER_EXIT, metrics_from_table(model, table, trial))
        chosen[k] = pick[0]
        steps.append(CalibrationStep(k, pick[0], pick[1]))
    final = metrics_from_table(model, table, chosen)
    return CalibrationResult(tuple(chosen), final, steps)


def _better(a: CascadeMetrics, b: CascadeMetrics) -> bool:
    """True if ``a`` beats ``b``: lower FLOPs, then higher accuracy, then smaller thresholds."""
    if a.avg_flops != b.avg_flops:
        return a.avg_flops < b.avg_flops
    if a.accuracy != b.accuracy:
        return a.accuracy > b.accuracy
    return a.thresholds < b.thresholds


def calibrate_exhaustive(model: CascadeModel, val: LabeledDataset, spec: CalibrationSpec) -> CalibrationResult:
    """Best feasible point of the full grid product.

    Raises:
        UsageError: the product exceeds ``spec.product_cap``.
        InfeasibleError: no combination meets the floor.
    """
    _check(model, spec)
    size = sweep_size(spec.grids)
    if size > spec.product_cap:
        raise UsageError(
            f"{size} threshold combinations exceed the cap of {spec.product_cap}"
        )
    table = score_table(model, val)
    best = None
    for combo in itertools.product(*spec.grids):
        m = metrics_from_table(model, table, combo)
        if m.accuracy >= spec.accuracy_floor and (best is None or _better(m, best)):
            best = m
    if best is None:
        base = metrics_from_table(model, table, [NEVER_EXIT] * model.n_gates)
        raise InfeasibleError(
            f"no threshold combination reaches accuracy {spec.accuracy_floor:.6g}",
            ceiling=base.accuracy,
        )
    return CalibrationResult(best.thresholds, best)


def report_rows(result: CalibrationResult):
    """Lines of the calibration report CSV (no comment header)."""
    yield "gate,chosen_t,val_accuracy,avg_flops"
    for step in result.steps:
        yield ",".join([
            str(step.gate),
            format_real(step.chosen_t),
            format_real(step.metrics.accuracy),
            format_real(step.metrics.avg_flops),
        ])
    yield ",".join([
        "all",
        " ".join(format_real(t) for t in result.thresholds),
        format_real(result.metrics.accuracy),
        format_real(result.metrics.avg_flops),
    ])


def default_grid(max_scores: np.ndarray, points: int = 17) -> Tuple[float, ...]:
    """Quantile-based grid over observed gate scores, plus the sentinel."""
    qs = np.quantile(max_scores, np.linspace(0.0, 1.0, points))
    return with_sentinel(float(format_real(q)) for q in qs)
