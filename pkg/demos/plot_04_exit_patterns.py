"""
Who leaves early, and hinge against cross-entropy gates
=======================================================

Count confident, correct exits at the first gate per class, then sweep
thresholds for hinge and cross-entropy gates on the same features.
"""

import numpy as np

from gatecascade import (
    CascadeModel,
    HierarchyConfig,
    HingeTrainConfig,
    exit_class_stats,
    generate_hierarchical_blobs,
    split_dataset,
    threshold_sweep,
    train_backbone,
    train_gate_crossentropy,
    train_gate_hinge,
)
from gatecascade.backbone import forward_partial
from gatecascade.calibration import default_grid
from gatecascade.cascade import score_table
from gatecascade.cli import matched_comparison

# groups 0 and 1 have widely spread fine classes, group 3 is packed tight
data = generate_hierarchical_blobs(HierarchyConfig(
    coarse_count=4, fine_per_coarse=3, samples_per_class=100, coarse_separation=10,
    fine_separation=2, noise_sigma=1, feature_dim=8, seed=0, fine_scales=(3, 3, 1, 0.3)))
train, val, test = split_dataset(data, (0.6, 0.2, 0.2), seed=0)
backbone = train_backbone(train, [8, 32, 64, 64], epochs=100, seed=0)
feats = {tap: np.array([forward_partial(backbone, x, tap)[0] for x in train.features])
         for tap in backbone.tap_points}


def cascade(trainer):
    cfg = HingeTrainConfig(seed=0)
    return CascadeModel(backbone, tuple(
        (tap, trainer(feats[tap], train.labels, 12, cfg)) for tap in backbone.tap_points))


hinge = cascade(train_gate_hinge)
counts = exit_class_stats(hinge, test, margin=1.0)
rates = counts[0] / np.bincount(test.labels)
for g in range(4):
    print(f"coarse group {g}: gate 0 confident rate {rates[3 * g:3 * g + 3].mean():.2f}")

points = {}
for name, model in (("hinge", hinge), ("cross_entropy", cascade(train_gate_crossentropy))):
    table = score_table(model, val)
    grids = [default_grid(table.max_scores[:, k], 11) for k in range(model.n_gates)]
    points[name] = [(m.avg_flops, m.accuracy) for _, m in threshold_sweep(model, test, grids)]

print("ce_flops  ce_acc  hinge_acc (hinge within 5% more FLOPs)")
for flops, ce_acc, hinge_acc in matched_comparison(points["hinge"], points["cross_entropy"]):
    print(f"{flops:8.1f}  {ce_acc:6.3f}  {hinge_acc:9.3f}")
