"""Semi-discrete Carleman estimates and controllability for 1-D transmission problems."""

from .mesh import Mesh1D, MeshMap, build_from_map, build_piecewise_uniform, compute_zeta
from .operator import Coefficient, SemiDiscreteOperator, assemble, solve_adjoint, solve_forward
from .weights import CarlemanParams, WeightPsi, construct_psi, trace_matrix

__version__ = "0.1.0"

__all__ = [
    "Mesh1D",
    "MeshMap",
    "build_from_map",
    "build_piecewise_uniform",
    "compute_zeta",
    "Coefficient",
    "SemiDiscreteOperator",
    "assemble",
    "solve_adjoint",
    "solve_forward",
    "CarlemanParams",
    "WeightPsi",
    "construct_psi",
    "trace_matrix",
]
