"""Sparse symbolic ODE discovery across task families.

Learns a shared gated dictionary ODE from many short experiments, then
adapts per-task coefficients on a test prefix to forecast under
out-of-distribution initial conditions and parameters.
"""

from .adaptation import AdaptConfig, adapt, adapt_batch, forecast, nrmse
from .basis import BasisLibrary, compose_layer2, default_xi, make_library
from .model import MetaModel, extract_equation, gates, predict_derivative, rollout
from .ode_sim import (
    Diverged,
    DivergenceGuard,
    TimeGrid,
    Trajectory,
    VectorField,
    estimate_derivatives,
    integrate,
    rk4_step,
)
from .sindy import StlsConfig, sindy_forecast, stls_fit
from .systems import (
    Dataset,
    EnvironmentSpec,
    SystemSpec,
    TaskRecord,
    environment_for,
    generate,
    get_system,
    ground_truth_field,
    split_prefix,
)
from .trainer import HyperConfig, SweepGrid, fit, sweep_and_select, task_risk, total_loss, vrex_penalty

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "BasisLibrary",
    "Dataset",
    "Diverged",
    "DivergenceGuard",
    "EnvironmentSpec",
    "HyperConfig",
    "MetaModel",
    "StlsConfig",
    "SweepGrid",
    "SystemSpec",
    "TaskRecord",
    "TimeGrid",
    "Trajectory",
    "VectorField",
    "adapt",
    "adapt_batch",
    "compose_layer2",
    "default_xi",
    "environment_for",
    "estimate_derivatives",
    "extract_equation",
    "fit",
    "forecast",
    "gates",
    "generate",
    "get_system",
    "ground_truth_field",
    "integrate",
    "make_library",
    "nrmse",
    "predict_derivative",
    "rk4_step",
    "rollout",
    "sindy_forecast",
    "split_prefix",
    "stls_fit",
    "sweep_and_select",
    "task_risk",
    "total_loss",
    "vrex_penalty",
]
