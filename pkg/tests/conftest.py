import numpy as np
import pytest

from gatecascade import Backbone, Block, CascadeModel, DGate, LabeledDataset


def random_block(rng, d_in, d_out, activation="rectifier"):
    return Block(rng.normal(size=(d_in, d_out)), rng.normal(size=d_out), activation)


def random_cascade(rng, n_gates=None, class_count=None):
    """Untrained backbone with random weights and random gates on some taps."""
    n_blocks = int(rng.integers(2, 6))
    dims = [int(d) for d in rng.integers(2, 7, size=n_blocks + 1)]
    c = class_count or int(rng.integers(2, 5))
    blocks = tuple(random_block(rng, dims[k], dims[k + 1]) for k in range(n_blocks))
    taps = tuple(range(n_blocks - 1)) or (0,)
    bb = Backbone(blocks, taps, random_block(rng, dims[-1], c, "identity"))
    if n_gates is None:
        n_gates = int(rng.integers(1, min(4, len(taps)) + 1))
    gate_taps = sorted(rng.choice(taps, size=min(n_gates, len(taps)), replace=False))
    gates = tuple(
        (int(p), DGate(rng.normal(size=(bb.tap_dim(int(p)), c)), rng.normal(size=c)))
        for p in gate_taps
    )
    return CascadeModel(bb, gates)


def random_data(rng, model, n=30):
    bb = model.backbone
    return LabeledDataset(
        rng.normal(size=(n, bb.feature_dim)) * 2,
        rng.integers(0, bb.class_count, size=n),
        bb.class_count,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_backbone():
    """Blocks 4->8 and 8->8 plus an 8->3 classifier: 72 + 136 + 51 = 259 FLOPs."""
    r = np.random.default_rng(0)
    return Backbone(
        (random_block(r, 4, 8), random_block(r, 8, 8)),
        (0, 1),
        random_block(r, 8, 3, "identity"),
    )


ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    """Record one acceptance line; the terminal summary prints them all."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
