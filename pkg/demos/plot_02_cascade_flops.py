"""
Counting the cost of early exits
================================

Train a small backbone, hang two gates on it and compare the accuracy and
average FLOPs of a few threshold settings.
"""

import numpy as np

from gatecascade import (
    CascadeModel,
    HierarchyConfig,
    HingeTrainConfig,
    cascade_evaluate,
    cascade_infer,
    generate_hierarchical_blobs,
    split_dataset,
    train_backbone,
    train_gate_hinge,
)
from gatecascade.backbone import forward_partial

data = generate_hierarchical_blobs(HierarchyConfig(
    coarse_count=4, fine_per_coarse=3, samples_per_class=100, coarse_separation=10,
    fine_separation=2, noise_sigma=1, feature_dim=8, seed=0, fine_scales=(3, 3, 1, 0.3)))
train, val, test = split_dataset(data, (0.6, 0.2, 0.2), seed=0)

backbone = train_backbone(train, [8, 32, 64, 64], epochs=100, seed=0)
print("block FLOPs", backbone.block_flops, "classifier", backbone.classifier.flops,
      "total", backbone.total_flops)

# one gate after each of the first two blocks, trained on frozen activations
gates = []
for tap in backbone.tap_points:
    feats = np.array([forward_partial(backbone, x, tap)[0] for x in train.features])
    gates.append((tap, train_gate_hinge(feats, train.labels, 12, HingeTrainConfig(seed=0))))
model = CascadeModel(backbone, tuple(gates))
print("gate FLOPs", model.gate_flops)

# a single sample shows which components ran
trace = cascade_infer(model.with_thresholds([1.0, 1.0]), test.features[0])
print("executed", trace.executed, "flops", trace.flops_used, "exit", trace.exit_stage)

print("thresholds        accuracy  avg_flops  reduction  exits")
for t in ([np.inf, np.inf], [2.0, 2.0], [1.0, 1.0], [0.0, 0.0], [-np.inf, -np.inf]):
    m = cascade_evaluate(model.with_thresholds(t), test)
    print(f"{str(t):17s} {m.accuracy:8.3f}  {m.avg_flops:9.1f}  {m.flops_reduction:9.3f}  {m.exit_histogram}")

# with both thresholds at +inf every gate still runs, so the reduction goes negative
