"""Flow-based upscaling of heterogeneous conductivity fields.

Computes coarse-scale equivalent conductivity tensors from fine-scale
fields, either with a periodic-boundary flow solver per coarse block or
with a physics-guided convolutional surrogate trained on the same
discrete flow equations.
"""

from upflow.grid import (
    ConductivityField,
    CoarseModel,
    DimensionMismatchError,
    GridSpec,
    Patch,
    ScalarField,
    block_average,
    coarse_grid_spec,
    partition,
    reassemble,
)
from upflow.kle import CovarianceModel, KLEBasis, decompose, draw_xi, sample, to_conductivity
from upflow.network import LayerSpec, NetworkSpec, default_spec, init_params
from upflow.pipeline import (
    EvaluationReport,
    FaceCondition,
    GlobalBoundarySpec,
    benchmark_timing,
    coarse_solve,
    default_bc,
    evaluate,
    fine_solve,
    r_squared,
    upscale_numerical,
    upscale_surrogate,
)
from upflow.solver import PeriodicDrive, equivalent_tensor, solve_patch, tensor_from_heads
from upflow.training import TrainConfig, TrainingError, predict_heads, train

__version__ = "0.1.0"

__all__ = [
    "ConductivityField",
    "CoarseModel",
    "CovarianceModel",
    "DimensionMismatchError",
    "EvaluationReport",
    "FaceCondition",
    "GlobalBoundarySpec",
    "GridSpec",
    "KLEBasis",
    "LayerSpec",
    "NetworkSpec",
    "Patch",
    "PeriodicDrive",
    "ScalarField",
    "TrainConfig",
    "TrainingError",
    "benchmark_timing",
    "block_average",
    "coarse_grid_spec",
    "coarse_solve",
    "decompose",
    "default_bc",
    "default_spec",
    "draw_xi",
    "equivalent_tensor",
    "evaluate",
    "fine_solve",
    "init_params",
    "partition",
    "predict_heads",
    "r_squared",
    "reassemble",
    "sample",
    "solve_patch",
    "tensor_from_heads",
    "to_conductivity",
    "train",
    "upscale_numerical",
    "upscale_surrogate",
    "__version__",
]
