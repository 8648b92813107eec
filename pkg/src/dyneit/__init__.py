"""Online reconstruction for dynamic electrical impedance tomography.

Predictive primal-dual proximal splitting with TV regularization on a
complete-electrode forward model, with optical-flow based predictors.
"""

from .cem_derivative import Jacobian, jacobian
from .cem_forward import MeasurementFrame, forward_map
from .errors import (
    DependencyError,
    DynEITError,
    GeometryError,
    MeshParseError,
    NumericError,
    ParameterError,
    PreconditionError,
    SolverError,
    ValidationError,
)
from .harness import AlgoConfig, RunSummary, run_experiment, summarize
from .mesh import Mesh, build_disk_mesh, load_mesh, save_mesh
from .popdn_core import Coupling, OnlineState, StepParams, check_step_condition, popdn_step
from .predictors import Predictor, PredictorConfig, PredictorKind
from .scenarios import InverseCrimeWarning, ScenarioConfig, builtin_configs

__version__ = "0.1.0"

__all__ = [
    "AlgoConfig",
    "Coupling",
    "DependencyError",
    "DynEITError",
    "GeometryError",
    "InverseCrimeWarning",
    "Jacobian",
    "MeasurementFrame",
    "Mesh",
    "MeshParseError",
    "NumericError",
    "OnlineState",
    "ParameterError",
    "PreconditionError",
    "Predictor",
    "PredictorConfig",
    "PredictorKind",
    "RunSummary",
    "ScenarioConfig",
    "SolverError",
    "StepParams",
    "ValidationError",
    "build_disk_mesh",
    "builtin_configs",
    "check_step_condition",
    "forward_map",
    "jacobian",
    "load_mesh",
    "popdn_step",
    "run_experiment",
    "save_mesh",
    "summarize",
]
