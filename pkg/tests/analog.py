"""Desk-scale analog experiment shared by the acceptance criteria.

Four coarse groups of three fine classes. Fine sub-clusters in groups 0 and 1
are spread wide (easy), group 3 is squeezed tight (hardest). Settings are
fixed here once and not tuned per criterion.
"""

import functools
import time
from dataclasses import dataclass

import numpy as np

from gatecascade import (
    CascadeModel,
    HierarchyConfig,
    HingeTrainConfig,
    generate_hierarchical_blobs,
    split_dataset,
    train_backbone,
    train_gate_crossentropy,
    train_gate_hinge,
)
from gatecascade.backbone import forward_partial
from gatecascade.calibration import default_grid
from gatecascade.cascade import score_table

SEED = 0
FINE_SCALES = (3.0, 3.0, 1.0, 0.3)
EASY_GROUPS = (0, 1)
HARD_GROUP = 3

DATA = HierarchyConfig(
    coarse_count=4,
    fine_per_coarse=3,
    samples_per_class=100,
    coarse_separation=10.0,
    fine_separation=2.0,
    noise_sigma=1.0,
    feature_dim=8,
    seed=SEED,
    fine_scales=FINE_SCALES,
)
LAYER_DIMS = (8, 32, 64, 64)
GATES = HingeTrainConfig(lam=1e-4, epochs=50, learning_rate=0.01, batch_size=32, seed=SEED)

CONFIG_TEXT = f"""gatecascade-config v1
[run]
seed = {SEED}
[data]
fine_scales = {",".join(str(s) for s in FINE_SCALES)}
"""


@dataclass
class Analog:
    train: object
    val: object
    test: object
    backbone: object
    hinge: CascadeModel
    cross_entropy: CascadeModel
    build_seconds: float


def _gates(bb, train, trainer):
    gates = []
    for tap in bb.tap_points:
        X = np.array([forward_partial(bb, x, tap)[0] for x in train.features])
        gates.append((tap, trainer(X, train.labels, bb.class_count, GATES)))
    return CascadeModel(bb, tuple(gates))


@functools.lru_cache(maxsize=None)
def build() -> Analog:
    start = time.perf_counter()
    data = generate_hierarchical_blobs(DATA)
    train, val, test = split_dataset(data, (0.6, 0.2, 0.2), seed=SEED)
    bb = train_backbone(train, list(LAYER_DIMS), epochs=100, learning_rate=0.05,
                        batch_size=32, seed=SEED)
    hinge = _gates(bb, train, train_gate_hinge)
    elapsed = time.perf_counter() - start
    ce = _gates(bb, train, train_gate_crossentropy)
    return Analog(train, val, test, bb, hinge, ce, elapsed)


def quantile_grids(model, val, points):
    table = score_table(model, val)
    return [default_grid(table.max_scores[:, k], points) for k in range(model.n_gates)]
