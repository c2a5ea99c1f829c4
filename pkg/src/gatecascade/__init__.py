"""Early-exit inference with hinge-trained decision gates."""

from .backbone import (
    Backbone,
    Block,
    ForwardTrace,
    forward_collect,
    forward_partial,
    load_backbone,
    predict_final,
    save_backbone,
    train_backbone,
)
from .calibration import (
    CalibrationSpec,
    calibrate_exhaustive,
    calibrate_sequential,
    with_sentinel,
)
from .cascade import (
    CascadeMetrics,
    CascadeModel,
    InferenceTrace,
    cascade_evaluate,
    cascade_infer,
    exit_class_stats,
    threshold_sweep,
)
from .data import (
    HierarchyConfig,
    LabeledDataset,
    generate_hierarchical_blobs,
    load_dataset_csv,
    save_dataset_csv,
    split_dataset,
)
from .dgate import (
    DGate,
    GateDecision,
    HingeTrainConfig,
    gate_decide,
    gate_distances,
    hinge_objective,
    hinge_subgradient,
    load_gate,
    save_gate,
    train_gate_crossentropy,
    train_gate_hinge,
)
from .errors import DataError, GateCascadeError, InfeasibleError, NumericalError, UsageError

__version__ = "0.1.0"
