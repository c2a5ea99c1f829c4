"""Early-exit inference over a backbone instrumented with decision gates.

Cost accounting: a sample pays for every block it runs and for every gate it
reaches, whether or not that gate lets it exit. The FLOPs-reduction baseline
is the plain backbone (blocks plus final classifier, no gates).
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .backbone import Backbone, argmax_first, check_input
from .data import LabeledDataset, format_real
from .dgate import DGate, decide_scores, gate_scores
from .errors import DataError, UsageError

DEFAULT_SWEEP_CAP = 200_000


@dataclass(frozen=True, eq=False)
class CascadeModel:
    """Backbone plus gates at increasing tap points, each with a threshold."""

    backbone: Backbone
    gates: Tuple[Tuple[int, DGate], ...] = ()
    thresholds: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        gates = tuple((int(p), g) for p, g in self.gates)
        taps = [p for p, _ in gates]
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise DataError(f"gate taps must be strictly increasing, got {taps}")
        for p, gate in gates:
            if p not in self.backbone.tap_points:
                raise DataError(f"gate at {p} is not on a backbone tap point")
            if gate.feature_dim != self.backbone.tap_dim(p):
                raise DataError(
                    f"gate at tap {p} expects {gate.feature_dim} features, "
                    f"tap provides {self.backbone.tap_dim(p)}"
                )
            if gate.class_count != self.backbone.class_count:
                raise DataError("gate class count differs from the backbone's")
        thresholds = self.thresholds
        if thresholds is None:
            thresholds = tuple(g.threshold for _, g in gates)
        thresholds = tuple(float(t) for t in thresholds)
        if len(thresholds) != len(gates):
            raise DataError(f"{len(gates)} gates but {len(thresholds)} thresholds")
        if any(np.isnan(t) for t in thresholds):
            raise DataError("thresholds must not be NaN")
        object.__setattr__(self, "gates", gates)
        object.__setattr__(self, "thresholds", thresholds)

    @property
    def n_gates(self) -> int:
        return len(self.gates)

    @property
    def class_count(self) -> int:
        return self.backbone.class_count

    @property
    def gate_flops(self) -> Tuple[int, ...]:
        return tuple(g.flops for _, g in self.gates)

    def with_thresholds(self, thresholds) -> "CascadeModel":
        return CascadeModel(self.backbone, self.gates, tuple(thresholds))

    def component_flops(self, name: str) -> int:
        """FLOPs of a component named as in :attr:`InferenceTrace.executed`."""
        kind, _, index = name.partition(":")
        if kind == "block":
            return self.backbone.blocks[int(index)].flops
        if kind == "gate":
            return self.gates[int(index)][1].flops
        if kind == "classifier":
            return self.backbone.classifier.flops
        raise ValueError(f"unknown component {name!r}")


@dataclass(frozen=True)
class InferenceTrace:
    """Per-sample record of one cascade run.

    ``exit_stage`` is the index of the gate that fired, or ``None`` when the
    sample fell through to the final classifier. ``executed`` names every
    component run, in order (``block:i``, ``gate:k``, ``classifier``).
    """

    exit_stage: Optional[int]
    predicted_label: int
    exit_distance: float
    flops_used: int
    executed: Tuple[str, ...]

    @property
    def is_final(self) -> bool:
        return self.exit_stage is None


@dataclass(frozen=True)
class CascadeMetrics:
    """Aggregate results of evaluating a cascade on a dataset.

    ``exit_histogram`` has one count per gate followed by the final-classifier
    count. ``wall_time`` is in seconds and is not deterministic.
    """

    thresholds: Tuple[float, ...]
    accuracy: float
    avg_flops: float
    flops_reduction: float
    exit_histogram: Tuple[int, ...]
    n_samples: int
    wall_time: float = 0.0

    def same_numbers(self, other: "CascadeMetrics") -> bool:
        return (
            self.thresholds == other.thresholds
            and self.accuracy == other.accuracy
            and self.avg_flops == other.avg_flops
            and self.flops_reduction == other.flops_reduction
            and self.exit_histogram == other.exit_histogram
            and self.n_samples == other.n_samples
        )


def cascade_infer(model: CascadeModel, x) -> InferenceTrace:
    """Run one sample through blocks and gates until a gate fires or the end."""
    bb = model.backbone
    h = check_input(x, bb.feature_dim)
    executed = []
    flops = 0
    next_block = 0
    for k, ((tap, gate), t) in enumerate(zip(model.gates, model.thresholds)):
        while next_block <= tap:
            h = bb.blocks[next_block](h)
            flops += bb.blocks[next_block].flops
            executed.append(f"block:{next_block}")
            next_block += 1
        decision = decide_scores(gate_scores(gate, h), t)
        flops += gate.flops
        executed.append(f"gate:{k}")
        if decision.exited:
            return InferenceTrace(k, decision.label, decision.distance, flops, tuple(executed))
    while next_block < len(bb.blocks):
        h = bb.blocks[next_block](h)
        flops += bb.blocks[next_block].flops
        executed.append(f"block:{next_block}")
        next_block += 1
    logits = bb.classifier(h)
    flops += bb.classifier.flops
    executed.append("classifier")
    label = argmax_first(logits)
    return InferenceTrace(None, label, float(logits[label]), flops, tuple(executed))


def _check_data(model, data):
    if data.n_samples == 0:
        raise DataError("empty dataset")
    if data.class_count != model.class_count:
        raise DataError(
            f"dataset has {data.class_count} classes, model has {model.class_count}"
        )
    if data.feature_dim != model.backbone.feature_dim:
        raise DataError(
            f"dataset has {data.feature_dim} features, model expects {model.backbone.feature_dim}"
        )


def _metrics(model, thresholds, correct, flops_total, histogram, n, wall):
    avg = flops_total / n
    return CascadeMetrics(
        thresholds=tuple(float(t) for t in thresholds),
        accuracy=correct / n,
        avg_flops=avg,
        flops_reduction=1.0 - avg / model.backbone.total_flops,
        exit_histogram=tuple(int(h) for h in histogram),
        n_samples=n,
        wall_time=wall,
    )


def cascade_evaluate(model: CascadeModel, data: LabeledDataset) -> CascadeMetrics:
    """Route every sample with :func:`cascade_infer` and aggregate."""
    _check_data(model, data)
    start = time.perf_counter()
    correct = 0
    flops_total = 0
    histogram = [0] * (model.n_gates + 1)
    for x, y in zip(data.features, data.labels):
        trace = cascade_infer(model, x)
        correct += int(trace.predicted_label == y)
        flops_total += trace.flops_used
        histogram[model.n_gates if trace.is_final else trace.exit_stage] += 1
    wall = time.perf_counter() - start
    return _metrics(model, model.thresholds, correct, flops_total, histogram, data.n_samples, wall)


# --- score tables and sweeps ------------------------------------------------------


@dataclass(frozen=True)
class ScoreTable:
    """Threshold-independent per-sample quantities for fast re-thresholding.

    Attributes:
        max_scores: (n, K) best gate score per sample and gate.
        gate_labels: (n, K) argmax label per sample and gate.
        final_labels: (n,) final-classifier label.
        labels: (n,) ground truth.
        exit_flops: (K + 1,) cost of exiting at gate k; last entry is the
            fall-through cost (all blocks, all gates, classifier).
        total_flops: gate-free backbone cost.
    """

    max_scores: np.ndarray
    gate_labels: np.ndarray
    final_labels: np.ndarray
    labels: np.ndarray
    exit_flops: np.ndarray
    total_flops: int

    @property
    def n_gates(self) -> int:
        return self.max_scores.shape[1]


def exit_costs(model: CascadeModel) -> np.ndarray:
    bb = model.backbone
    costs = []
    gate_total = 0
    for tap, gate in model.gates:
        gate_total += gate.flops
        costs.append(bb.flops_through(tap) + gate_total)
    costs.append(bb.total_flops + gate_total)
    return np.array(costs, dtype=np.int64)


def score_table(model: CascadeModel, data: LabeledDataset) -> ScoreTable:
    """Evaluate every gate and the final classifier once per sample."""
    _check_data(model, data)
    bb = model.backbone
    n, K = data.n_samples, model.n_gates
    max_scores = np.empty((n, K))
    gate_labels = np.empty((n, K), dtype=np.int64)
    final_labels = np.empty(n, dtype=np.int64)
    gate_at = {tap: k for k, (tap, _) in enumerate(model.gates)}
    for i, x in enumerate(data.features):
        h = check_input(x, bb.feature_dim)
        for b, block in enumerate(bb.blocks):
            h = block(h)
            if b in gate_at:
                k = gate_at[b]
                s = gate_scores(model.gates[k][1], h)
                j = argmax_first(s)
                max_scores[i, k] = s[j]
                gate_labels[i, k] = j
        final_labels[i] = argmax_first(bb.classifier(h))
    return ScoreTable(max_scores, gate_labels, final_labels, data.labels.copy(),
                      exit_costs(model), bb.total_flops)


def route(table: ScoreTable, thresholds) -> np.ndarray:
    """Exit stage per sample (K for the final classifier)."""
    K = table.n_gates
    n = table.labels.size
    stage = np.full(n, K, dtype=np.int64)
    pending = np.ones(n, dtype=bool)
    for k, t in enumerate(thresholds):
        fires = pending & (table.max_scores[:, k] >= t)
        stage[fires] = k
        pending &= ~fires
    return stage


def metrics_from_table(model, table: ScoreTable, thresholds, wall=0.0) -> CascadeMetrics:
    thresholds = tuple(float(t) for t in thresholds)
    if len(thresholds) != table.n_gates:
        raise DataError(f"{table.n_gates} gates but {len(thresholds)} thresholds")
    stage = route(table, thresholds)
    n = stage.size
    all_labels = np.column_stack([table.gate_labels, table.final_labels])
    predicted = all_labels[np.arange(n), stage]
    correct = int(np.sum(predicted == table.labels))
    flops_total = int(table.exit_flops[stage].sum())
    histogram = np.bincount(stage, minlength=table.n_gates + 1)
    return _metrics(model, thresholds, correct, flops_total, histogram, n, wall)


def sweep_size(grids) -> int:
    size = 1
    for g in grids:
        size *= len(g)
    return size


def threshold_sweep(
    model: CascadeModel,
    data: LabeledDataset,
    grids: Sequence[Sequence[float]],
    cap: int = DEFAULT_SWEEP_CAP,
    table: Optional[ScoreTable] = None,
):
    """Evaluate every threshold combination in the Cartesian product of ``grids``.

    Gate scores are computed once per sample; each grid point only re-routes.

    Returns:
        List of ``(thresholds, CascadeMetrics)`` in ``itertools.product`` order.
    """
    grids = [list(g) for g in grids]
    if len(grids) != model.n_gates:
        raise UsageError(f"need one grid per gate ({model.n_gates}), got {len(grids)}")
    if any(len(g) == 0 for g in grids):
        raise UsageError("threshold grids must be nonempty")
    size = sweep_size(grids)
    if size > cap:
        raise UsageError(f"sweep has {size} points, above the cap of {cap}; use a coarser grid")
    if table is None:
        table = score_table(model, data)
    results = []
    for combo in itertools.product(*grids):
        start = time.perf_counter()
        m = metrics_from_table(model, table, combo)
        m = CascadeMetrics(**{**m.__dict__, "wall_time": time.perf_counter() - start})
        results.append((m.thresholds, m))
    return results


def exit_class_stats(model: CascadeModel, data: LabeledDataset, margin: float = 1.0) -> np.ndarray:
    """Per gate and true class, count samples the gate gets right with score >= margin.

    Each gate is evaluated on every sample, ignoring thresholds and routing.

    Returns:
        (K, c) integer array.
    """
    if np.isnan(margin):
        raise UsageError("margin must not be NaN")
    table = score_table(model, data)
    counts = np.zeros((model.n_gates, model.class_count), dtype=np.int64)
    for k in range(model.n_gates):
        hit = (table.gate_labels[:, k] == table.labels) & (table.max_scores[:, k] >= margin)
        counts[k] = np.bincount(table.labels[hit], minlength=model.class_count)
    return counts


# --- report rows -----------------------------------------------------------------------


def metrics_header(n_gates: int) -> str:
    cols = [f"t{k + 1}" for k in range(n_gates)]
    cols += ["accuracy", "avg_flops", "flops_reduction"]
    cols += [f"exit{k}" for k in range(n_gates)] + ["final", "wall_ms"]
    return ",".join(cols)


def metrics_row(m: CascadeMetrics) -> str:
    cells = [format_real(t) for t in m.thresholds]
    cells += [format_real(m.accuracy), format_real(m.avg_flops), format_real(m.flops_reduction)]
    cells += [str(h) for h in m.exit_histogram]
    cells.append(f"{m.wall_time * 1000:.3f}")
    return ",".join(cells)


def stats_rows(counts: np.ndarray):
    yield "gate,class,count"
    for k in range(counts.shape[0]):
        for c in range(counts.shape[1]):
            yield f"{k},{c},{int(counts[k, c])}"
