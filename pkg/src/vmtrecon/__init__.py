"""Joint reconstruction, registration and super-resolution for dynamic MRI."""

from .estimators import JointReconstructor, SequentialReconstructor
from .operators import SystemOperator, apply_F, apply_F_adjoint, make_mask
from .phantom import Dataset, load_dataset, make_default_dataset, save_dataset
from .registration import Deformation, OgdenParams
from .solver import SolverParams, solve_joint, solve_sequential

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Deformation",
    "JointReconstructor",
    "OgdenParams",
    "SequentialReconstructor",
    "SolverParams",
    "SystemOperator",
    "apply_F",
    "apply_F_adjoint",
    "load_dataset",
    "make_default_dataset",
    "make_mask",
    "save_dataset",
    "solve_joint",
    "solve_sequential",
]
