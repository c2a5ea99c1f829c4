"""
Calibrating thresholds to an accuracy floor
===========================================

Pick per-gate thresholds on the validation split so accuracy stays within
two points of the backbone while average FLOPs drop as far as possible.
"""

import numpy as np

from gatecascade import (
    CalibrationSpec,
    CascadeModel,
    HierarchyConfig,
    HingeTrainConfig,
    calibrate_exhaustive,
    calibrate_sequential,
    cascade_evaluate,
    generate_hierarchical_blobs,
    split_dataset,
    train_backbone,
    train_gate_hinge,
)
from gatecascade.backbone import forward_partial
from gatecascade.calibration import default_grid, report_rows
from gatecascade.cascade import score_table

data = generate_hierarchical_blobs(HierarchyConfig(
    coarse_count=4, fine_per_coarse=3, samples_per_class=100, coarse_separation=10,
    fine_separation=2, noise_sigma=1, feature_dim=8, seed=0, fine_scales=(3, 3, 1, 0.3)))
train, val, test = split_dataset(data, (0.6, 0.2, 0.2), seed=0)
backbone = train_backbone(train, [8, 32, 64, 64], epochs=100, seed=0)
gates = []
for tap in backbone.tap_points:
    feats = np.array([forward_partial(backbone, x, tap)[0] for x in train.features])
    gates.append((tap, train_gate_hinge(feats, train.labels, 12, HingeTrainConfig(seed=0))))
model = CascadeModel(backbone, tuple(gates))

base = cascade_evaluate(CascadeModel(backbone), val).accuracy
floor = base - 0.02
print(f"backbone val accuracy {base:.4f}, floor {floor:.4f}")

# candidate thresholds come from quantiles of each gate's validation scores
table = score_table(model, val)
grids = tuple(default_grid(table.max_scores[:, k], 21) for k in range(model.n_gates))
spec = CalibrationSpec(floor, grids)

greedy = calibrate_sequential(model, val, spec)
print("\n".join(report_rows(greedy)))

# the exhaustive search is the optimality check for the greedy one
best = calibrate_exhaustive(model, val, spec)
print("greedy avg_flops", greedy.metrics.avg_flops, "optimum", best.metrics.avg_flops)

for name, result in (("greedy", greedy), ("exhaustive", best)):
    m = cascade_evaluate(model.with_thresholds(result.thresholds), test)
    print(f"{name}: test accuracy {m.accuracy:.4f}, FLOPs reduction {m.flops_reduction:.3f}")
