"""A small dense feed-forward network with tap points and exact FLOPs counts.

Every dense layer costs ``2 * in * out + out`` FLOPs (one multiply and one add
per weight, one add per bias). Activations are free.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np

from .data import LabeledDataset, atomic_write_text, format_real
from .errors import DataError, NumericalError, UsageError

ACTIVATIONS = ("rectifier", "identity")
BACKBONE_HEADER = "gatecascade-backbone v1"


def dense_flops(input_dim: int, output_dim: int) -> int:
    return 2 * input_dim * output_dim + output_dim


def canonical(a) -> np.ndarray:
    """Round to the 9 significant digits used by the text file formats.

    Frozen models hold canonical values, so writing and re-reading them is
    exact.
    """
    a = np.asarray(a, dtype=np.float64)
    out = np.array([float(format_real(v)) for v in a.ravel()], dtype=np.float64)
    return out.reshape(a.shape)


@dataclass(frozen=True, eq=False)
class Block:
    """Dense layer ``activation(x @ weights + bias)``; weights are (in, out)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "rectifier"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise DataError(f"block weights must be a non-empty matrix, got {w.shape}")
        if b.shape != (w.shape[1],):
            raise DataError(f"bias shape {b.shape} does not match weights {w.shape}")
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DataError("block parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def flops(self) -> int:
        return dense_flops(self.input_dim, self.output_dim)

    def __call__(self, h):
        z = h @ self.weights + self.bias
        if self.activation == "rectifier":
            z = np.maximum(z, 0.0)
        return z


@dataclass(frozen=True, eq=False)
class Backbone:
    """Ordered dense blocks, the tap points gates may attach to, and a classifier.

    ``tap_points`` are block indices; tap ``p`` exposes the output of block ``p``.
    """

    blocks: Tuple[Block, ...]
    tap_points: Tuple[int, ...]
    classifier: Block

    def __post_init__(self):
        blocks = tuple(self.blocks)
        taps = tuple(int(p) for p in self.tap_points)
        if not blocks:
            raise DataError("backbone needs at least one block")
        for k in range(len(blocks) - 1):
            if blocks[k].output_dim != blocks[k + 1].input_dim:
                raise DataError(
                    f"block {k} outputs {blocks[k].output_dim} but block {k + 1} "
                    f"expects {blocks[k + 1].input_dim}"
                )
        if self.classifier.input_dim != blocks[-1].output_dim:
            raise DataError("classifier input does not match the last block output")
        if self.classifier.output_dim < 2:
            raise DataError("classifier needs at least 2 outputs")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise DataError(f"tap points must be strictly increasing, got {taps}")
        if any(p < 0 or p >= len(blocks) for p in taps):
            raise DataError(f"tap points {taps} out of range for {len(blocks)} blocks")
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "tap_points", taps)

    @property
    def feature_dim(self) -> int:
        return self.blocks[0].input_dim

    @property
    def class_count(self) -> int:
        return self.classifier.output_dim

    @property
    def block_flops(self) -> Tuple[int, ...]:
        return tuple(b.flops for b in self.blocks)

    @property
    def total_flops(self) -> int:
        return sum(self.block_flops) + self.classifier.flops

    def flops_through(self, block_index: int) -> int:
        """FLOPs of blocks ``0..=block_index``."""
        return sum(self.block_flops[: block_index + 1])

    def tap_dim(self, tap: int) -> int:
        self._check_tap(tap)
        return self.blocks[tap].output_dim

    def _check_tap(self, tap):
        if tap not in self.tap_points:
            raise UsageError(f"{tap} is not a tap point (taps: {list(self.tap_points)})")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for block in self.blocks + (self.classifier,):
            h.update(block.weights.tobytes())
            h.update(block.bias.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ForwardTrace:
    tap_activations: Dict[int, np.ndarray]
    logits: np.ndarray
    flops_used: int


def check_input(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise DataError(f"expected a feature vector of length {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("feature vector contains non-finite values")
    return x


def argmax_first(v) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(v))


def forward_collect(bb: Backbone, x) -> ForwardTrace:
    h = check_input(x, bb.feature_dim)
    taps = {}
    for k, block in enumerate(bb.blocks):
        h = block(h)
        if k in bb.tap_points:
            taps[k] = h
    logits = bb.classifier(h)
    return ForwardTrace(taps, logits, bb.total_flops)


def forward_partial(bb: Backbone, x, upto_tap: int):
    """Run blocks ``0..=upto_tap`` only.

    Returns:
        ``(activation, flops)`` where ``activation`` is bit-identical to the
        matching entry of :func:`forward_collect`.
    """
    bb._check_tap(upto_tap)
    h = check_input(x, bb.feature_dim)
    for block in bb.blocks[: upto_tap + 1]:
        h = block(h)
    return h, bb.flops_through(upto_tap)


def predict_final(bb: Backbone, x):
    trace = forward_collect(bb, x)
    return argmax_first(trace.logits), trace.flops_used


def predict_batch(bb: Backbone, features) -> np.ndarray:
    """Final-classifier labels for a feature matrix (training-time helper)."""
    return np.argmax(_forward_batch(bb.blocks, bb.classifier, features)[-1], axis=1)


def _forward_batch(blocks, classifier, X):
    outs = [X]
    for block in blocks:
        outs.append(block(outs[-1]))
    outs.append(classifier(outs[-1]))
    return outs


# --- training ----------------------------------------------------------------


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def default_taps(n_blocks: int) -> Tuple[int, ...]:
    return tuple(range(n_blocks - 1)) if n_blocks > 1 else (0,)


def train_backbone(
    train: LabeledDataset,
    layer_dims: Sequence[int],
    epochs: int = 100,
    learning_rate: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
    tap_points: Sequence[int] = None,
    activation: str = "rectifier",
    return_history: bool = False,
):
    """Train blocks and classifier jointly with mini-batch SGD on cross-entropy.

    Args:
        train: training data.
        layer_dims: ``[feature_dim, h1, ..., hK]``; block ``k`` maps
            ``layer_dims[k] -> layer_dims[k + 1]``.
        epochs: passes over the data, at least 1.
        learning_rate: constant SGD step size.
        batch_size: mini-batch size.
        seed: seeds initialisation and shuffling.
        tap_points: block indices to expose; defaults to every block but the
            last.
        activation: activation of every block (classifier is linear).
        return_history: also return the per-epoch mean training loss.

    Returns:
        A frozen :class:`Backbone` (and the loss history if requested).

    Raises:
        NumericalError: when the loss becomes non-finite.
    """
    layer_dims = [int(d) for d in layer_dims]
    if epochs < 1:
        raise UsageError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    if not learning_rate > 0:
        raise UsageError("learning_rate must be > 0")
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise UsageError(f"layer_dims needs >= 2 positive entries, got {layer_dims}")
    if layer_dims[0] != train.feature_dim:
        raise DataError(
            f"layer_dims start at {layer_dims[0]} but data has {train.feature_dim} features"
        )

    rng = np.random.default_rng(seed)
    dims = layer_dims + [train.class_count]
    Ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        Ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
    n_layers = len(Ws)
    relu = [activation == "rectifier"] * (n_layers - 1) + [False]

    X = train.features
    y = train.labels
    n = len(y)
    onehot = np.eye(train.class_count)[y]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            hs = [X[idx]]
            with np.errstate(over="ignore", invalid="ignore"):
                for W, b, r in zip(Ws, bs, relu):
                    z = hs[-1] @ W + b
                    hs.append(np.maximum(z, 0.0) if r else z)
                logits = hs[-1]
                loss = cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}; learning rate {learning_rate:g} too high?"
                )
            total += loss * len(idx)
            delta = (_softmax(logits) - onehot[idx]) / len(idx)
            for k in range(n_layers - 1, -1, -1):
                gW = hs[k].T @ delta
                gb = delta.sum(axis=0)
                if k > 0:
                    delta = delta @ Ws[k].T
                    if relu[k - 1]:
                        delta = delta * (hs[k] > 0)
                Ws[k] -= learning_rate * gW
                bs[k] -= learning_rate * gb
        history.append(total / n)
        if not np.isfinite(history[-1]):
            raise NumericalError(f"non-finite loss at epoch {epoch}")

    blocks = tuple(
        Block(canonical(W), canonical(b), activation) for W, b in zip(Ws[:-1], bs[:-1])
    )
    classifier = Block(canonical(Ws[-1]), canonical(bs[-1]), "identity")
    if tap_points is None:
        tap_points = default_taps(len(blocks))
    bb = Backbone(blocks, tuple(tap_points), classifier)
    return (bb, history) if return_history else bb


# --- model file ----------------------------------------------------------------


def _fmt_row(values):
    return " ".join(format_real(v) for v in np.ravel(values))


def _block_lines(tag, block):
    return [
        f"{tag} {block.input_dim} {block.output_dim} {block.activation}",
        "w " + _fmt_row(block.weights),
        "b " + _fmt_row(block.bias),
    ]


def backbone_to_text(bb: Backbone) -> str:
    lines = [BACKBONE_HEADER, f"blocks {len(bb.blocks)}"]
    for block in bb.blocks:
        lines += _block_lines("block", block)
    lines += _block_lines("classifier", bb.classifier)
    lines.append("taps " + " ".join(str(p) for p in bb.tap_points))
    return "\n".join(lines) + "\n"


def save_backbone(bb: Backbone, path):
    atomic_write_text(path, backbone_to_text(bb))


class _LineReader:
    def __init__(self, text, source):
        self.lines = [ln for ln in text.splitlines() if ln.strip()]
        self.pos = 0
        self.source = source

    def fail(self, msg):
        raise DataError(f"{self.source}: line {self.pos}: {msg}")

    def next(self, key=None):
        if self.pos >= len(self.lines):
            raise DataError(f"{self.source}: unexpected end of file")
        parts = self.lines[self.pos].split()
        self.pos += 1
        if key is not None and (not parts or parts[0] != key):
            self.fail(f"expected {key!r}")
        return parts

    def reals(self, key, count):
        parts = self.next(key)[1:]
        if len(parts) != count:
            self.fail(f"expected {count} values for {key!r}, found {len(parts)}")
        try:
            return np.array([float(p) for p in parts])
        except ValueError:
            self.fail(f"non-numeric value in {key!r}")


def _read_block(reader, tag):
    parts = reader.next(tag)
    if len(parts) != 4:
        reader.fail(f"malformed {tag} line")
    try:
        d_in, d_out = int(parts[1]), int(parts[2])
    except ValueError:
        reader.fail("block dims must be integers")
    w = reader.reals("w", d_in * d_out).reshape(d_in, d_out)
    b = reader.reals("b", d_out)
    return Block(w, b, parts[3])


def load_backbone(path) -> Backbone:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    reader = _LineReader(text, path)
    if reader.next() != BACKBONE_HEADER.split():
        reader.fail(f"missing header {BACKBONE_HEADER!r}")
    parts = reader.next("blocks")
    n_blocks = int(parts[1])
    blocks = tuple(_read_block(reader, "block") for _ in range(n_blocks))
    classifier = _read_block(reader, "classifier")
    taps = tuple(int(p) for p in reader.next("taps")[1:])
    return Backbone(blocks, taps, classifier)
