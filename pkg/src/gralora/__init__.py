"""Granular low-rank adaptation of dense linear layers, with baselines.

The package factors an update to a frozen weight either as one low-rank
product (``lora``), as an independent low-rank product per cell of a k x k
grid (``gralora``), or as the sum of both (``hybrid``). Everything runs on
plain float64 numpy at desk scale; the point is measurement, not speed.
"""

from .adapters import (
    AdaptedLayer,
    Adapter,
    ConfigError,
    GraLoraAdapter,
    HybridGraLoraAdapter,
    LoraAdapter,
    adapter_kind,
    effective_rank,
    factors,
    fused_update,
    init_adapter,
    load_checkpoint,
    merge,
    param_count,
    randomize_factors,
    save_checkpoint,
    to_regularized_form,
)
from .costs import (
    CostReport,
    cost_report,
    gralora_flops,
    lora_flops,
    recommend_k,
)
from .gradients import (
    GradCheckReport,
    GradientCheckError,
    LayerGradients,
    backward,
    check_gradients,
    forward,
)
from .linalg import (
    Matrix,
    ShapeError,
    frobenius_norm,
    load_matrix,
    numerical_rank,
    save_matrix,
    singular_values,
    svd,
)
from .outliers import (
    DeviationReport,
    LocalityProfile,
    OutlierSpec,
    SweepProtocol,
    gradient_deviation,
    intersecting_block_columns,
    locality_profile,
    make_outlier_input,
    rank_sweep_deviation,
)
from .training import (
    OptimizerState,
    TeacherTask,
    TrainReport,
    TrainingError,
    apply_gradients,
    evaluate,
    make_task,
    step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptedLayer",
    "Adapter",
    "ConfigError",
    "CostReport",
    "DeviationReport",
    "GradCheckReport",
    "GradientCheckError",
    "GraLoraAdapter",
    "HybridGraLoraAdapter",
    "LayerGradients",
    "LocalityProfile",
    "LoraAdapter",
    "Matrix",
    "OptimizerState",
    "OutlierSpec",
    "ShapeError",
    "SweepProtocol",
    "TeacherTask",
    "TrainReport",
    "TrainingError",
    "adapter_kind",
    "apply_gradients",
    "backward",
    "check_gradients",
    "cost_report",
    "effective_rank",
    "evaluate",
    "factors",
    "forward",
    "frobenius_norm",
    "fused_update",
    "gradient_deviation",
    "gralora_flops",
    "init_adapter",
    "intersecting_block_columns",
    "load_checkpoint",
    "load_matrix",
    "locality_profile",
    "lora_flops",
    "make_outlier_input",
    "make_task",
    "merge",
    "numerical_rank",
    "param_count",
    "randomize_factors",
    "rank_sweep_deviation",
    "recommend_k",
    "save_checkpoint",
    "save_matrix",
    "singular_values",
    "step",
    "svd",
    "to_regularized_form",
    "train",
]
