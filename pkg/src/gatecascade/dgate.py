"""Decision gates: linear one-vs-all classifiers that can stop inference early.

A gate computes signed distances ``d = w.T @ x - b`` to each class
hyperplane. If ``max(d)`` reaches the gate threshold the sample exits with
label ``argmax(d)``; otherwise it moves deeper into the network.

Hinge gates are trained on the regularised one-vs-all hinge objective

    (1/n) * sum_i sum_k max(0, 1 - y_ik * (w_k . x_i - b_k)) + lam * ||w||^2

with ``y_ik = +1`` when sample ``i`` has class ``k`` and ``-1`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import _LineReader, argmax_first, canonical
from .data import atomic_write_text, format_real
from .errors import DataError, NumericalError, UsageError

HINGE = "hinge"
CROSS_ENTROPY = "cross_entropy"
GATE_HEADER = "gatecascade-gate v1"


@dataclass(frozen=True, eq=False)
class DGate:
    """Linear gate with weights (f, c), biases (c,) and a default threshold."""

    weights: np.ndarray
    biases: np.ndarray
    threshold: float = 0.0
    trained_with: str = HINGE

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.biases, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 2:
            raise DataError(f"gate weights must be (f, c) with c >= 2, got {w.shape}")
        if b.shape != (w.shape[1],):
            raise DataError(f"gate biases {b.shape} do not match weights {w.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DataError("gate parameters must be finite")
        if self.trained_with not in (HINGE, CROSS_ENTROPY):
            raise DataError(f"unknown gate loss {self.trained_with!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def class_count(self) -> int:
        return self.weights.shape[1]

    @property
    def flops(self) -> int:
        """Cost of one evaluation: ``2 * f * c + c``."""
        return 2 * self.feature_dim * self.class_count + self.class_count

    def with_threshold(self, t: float) -> "DGate":
        return DGate(self.weights, self.biases, t, self.trained_with)


@dataclass(frozen=True)
class GateDecision:
    """Outcome of one gate evaluation.

    ``label`` and ``distance`` are ``None`` when the sample passes deeper.
    """

    exited: bool
    label: Optional[int]
    distance: Optional[float]
    distances: np.ndarray


@dataclass(frozen=True)
class HingeTrainConfig:
    lam: float = 1e-4
    epochs: int = 50
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be > 0")
        if self.lam < 0:
            raise UsageError("lam must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")


def _check_features(gate, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (gate.feature_dim,):
        raise DataError(f"gate expects {gate.feature_dim} features, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("gate input contains non-finite values")
    return x


def gate_distances(gate: DGate, x) -> np.ndarray:
    """Signed distances ``w.T @ x - b``; also accepts an (n, f) matrix."""
    x = _check_features(gate, x)
    return x @ gate.weights - gate.biases


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gate_scores(gate: DGate, x) -> np.ndarray:
    """Confidence vector used for the exit decision.

    Hinge gates use raw distances; cross-entropy gates use softmax
    probabilities of the same linear map.
    """
    d = gate_distances(gate, x)
    return softmax(d) if gate.trained_with == CROSS_ENTROPY else d


def decide_scores(scores, t: float) -> GateDecision:
    scores = np.asarray(scores, dtype=np.float64)
    best = argmax_first(scores)
    if scores[best] >= t:
        return GateDecision(True, best, float(scores[best]), scores)
    return GateDecision(False, None, None, scores)


def gate_decide(gate: DGate, x, t: Optional[float] = None) -> GateDecision:
    """Exit with ``argmax(scores)`` if ``max(scores) >= t``, else pass deeper.

    ``t`` defaults to the gate's own threshold.
    """
    if t is None:
        t = gate.threshold
    return decide_scores(gate_scores(gate, x), t)


# --- hinge objective ------------------------------------------------------------


def one_vs_all_signs(labels, c: int) -> np.ndarray:
    """(n, c) matrix with +1 at each sample's class and -1 elsewhere."""
    labels = np.asarray(labels, dtype=np.int64)
    Y = -np.ones((labels.size, c))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def _check_batch(gate, X, Y):
    X = np.atleast_2d(_check_features(gate, X))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("empty dataset")
    if Y.shape != (X.shape[0], gate.class_count):
        raise DataError(f"sign labels must be shaped {(X.shape[0], gate.class_count)}, got {Y.shape}")
    return X, Y


def hinge_terms(gate: DGate, X, Y) -> np.ndarray:
    X, Y = _check_batch(gate, X, Y)
    return np.maximum(0.0, 1.0 - Y * gate_distances(gate, X))


def hinge_objective(gate: DGate, X, Y, lam: float = 0.0) -> float:
    """Mean (over samples) of the summed one-vs-all hinge terms plus ``lam * ||w||^2``."""
    terms = hinge_terms(gate, X, Y)
    return float(terms.sum() / terms.shape[0] + lam * np.sum(gate.weights**2))


def hinge_subgradient(gate: DGate, X, Y, lam: float = 0.0):
    """Subgradient of :func:`hinge_objective` with respect to ``(w, b)``.

    A term with margin ``y * d < 1`` contributes ``-y * x`` to column ``k`` of
    the weight gradient and ``+y`` to the bias gradient; at or above the margin
    it contributes nothing.

    Returns:
        ``(grad_w, grad_b)`` shaped like the gate's weights and biases.
    """
    X, Y = _check_batch(gate, X, Y)
    active = (Y * gate_distances(gate, X)) < 1.0
    coef = np.where(active, Y, 0.0)
    n = X.shape[0]
    grad_w = -(X.T @ coef) / n + 2.0 * lam * gate.weights
    grad_b = coef.sum(axis=0) / n
    return grad_w, grad_b


# --- training -------------------------------------------------------------------


def _check_training_inputs(tap_features, labels, c, cfg):
    cfg.validate()
    X = np.asarray(tap_features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2:
        raise DataError(f"tap features must be a matrix, got shape {X.shape}")
    if labels.shape != (X.shape[0],):
        raise DataError("one label per feature row required")
    if c < 2:
        raise DataError("c must be >= 2")
    if X.shape[0] < c:
        raise DataError(f"need at least c={c} samples, got {X.shape[0]}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c})")
    if not np.all(np.isfinite(X)):
        raise DataError("tap features contain non-finite values")
    return X, labels


def _sgd(X, labels, c, cfg, grad_fn, objective_fn, kind):
    rng = np.random.default_rng(cfg.seed)
    n, f = X.shape
    w = np.zeros((f, c))
    b = np.zeros(c)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            gw, gb = grad_fn(w, b, X[idx], labels[idx])
            w -= cfg.learning_rate * gw
            b -= cfg.learning_rate * gb
        with np.errstate(over="ignore", invalid="ignore"):
            value = objective_fn(w, b)
        if not np.isfinite(value):
            raise NumericalError(
                f"{kind} gate objective became non-finite at epoch {epoch}; "
                f"learning rate {cfg.learning_rate:g} too high?"
            )
    return DGate(canonical(w), canonical(b), 0.0, kind)


def train_gate_hinge(tap_features, labels, c: int, cfg: HingeTrainConfig) -> DGate:
    """Fit a hinge gate by mini-batch subgradient descent from zero weights.

    The returned gate has threshold 0 until calibrated.
    """
    X, labels = _check_training_inputs(tap_features, labels, c, cfg)
    Y_all = one_vs_all_signs(labels, c)

    def grad(w, b, Xb, yb):
        return hinge_subgradient(DGate(w, b), Xb, one_vs_all_signs(yb, c), cfg.lam)

    def objective(w, b):
        return hinge_objective(DGate(w, b), X, Y_all, cfg.lam)

    return _sgd(X, labels, c, cfg, grad, objective, HINGE)


def _xent_grad(w, b, X, labels, lam):
    n, c = X.shape[0], w.shape[1]
    p = softmax(X @ w - b)
    p[np.arange(n), labels] -= 1.0
    p /= n
    return X.T @ p + 2.0 * lam * w, -p.sum(axis=0)


def crossentropy_objective(gate: DGate, X, labels, lam: float = 0.0) -> float:
    z = gate_distances(gate, X)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(labels)), np.asarray(labels)].mean()
    return float(nll + lam * np.sum(gate.weights**2))


def train_gate_crossentropy(tap_features, labels, c: int, cfg: HingeTrainConfig) -> DGate:
    """Fit the same linear map with softmax cross-entropy (baseline gate)."""
    X, labels = _check_training_inputs(tap_features, labels, c, cfg)

    def grad(w, b, Xb, yb):
        return _xent_grad(w, b, Xb, yb, cfg.lam)

    def objective(w, b):
        return crossentropy_objective(DGate(w, b, 0.0, CROSS_ENTROPY), X, labels, cfg.lam)

    return _sgd(X, labels, c, cfg, grad, objective, CROSS_ENTROPY)


def gate_accuracy(gate: DGate, X, labels) -> float:
    pred = np.argmax(gate_scores(gate, X), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# --- gate file ----------------------------------------------------------------------


def gate_to_text(gate: DGate) -> str:
    lines = [
        GATE_HEADER,
        f"f {gate.feature_dim}",
        f"c {gate.class_count}",
        f"trained_with {gate.trained_with}",
        f"threshold {format_real(gate.threshold)}",
        "w " + " ".join(format_real(v) for v in gate.weights.ravel()),
        "b " + " ".join(format_real(v) for v in gate.biases),
    ]
    return "\n".join(lines) + "\n"


def save_gate(gate: DGate, path):
    atomic_write_text(path, gate_to_text(gate))


def load_gate(path) -> DGate:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    reader = _LineReader(text, path)
    if reader.next() != GATE_HEADER.split():
        reader.fail(f"missing header {GATE_HEADER!r}")
    try:
        f = int(reader.next("f")[1])
        c = int(reader.next("c")[1])
        kind = reader.next("trained_with")[1]
        threshold = float(reader.next("threshold")[1])
    except (IndexError, ValueError):
        reader.fail("malformed gate field")
    w = reader.reals("w", f * c).reshape(f, c)
    b = reader.reals("b", c)
    return DGate(w, b, threshold, kind)
