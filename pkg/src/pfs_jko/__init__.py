"""Structure-preserving variational solver for droplet/surfactant wetting.

The package integrates a conserved phase field coupled to a bounded
surfactant density over a flat substrate with moving contact lines.  Each
time step solves a discrete minimizing-movement problem: transport cost plus
free energy, constrained by the discrete continuity equations, solved by a
preconditioned primal-dual splitting whose inner linear algebra runs through
fast cosine transforms.  Accepted steps dissipate the discrete energy, hold
both masses fixed, and keep the surfactant inside [0, 1] by construction.
"""

from .energy import EnergyBreakdown, grad_energy, total_energy
from .grid_fields import Grid, State
from .jko_driver import RunConfig, RunState, StructureError, run
from .model_config import (
    BcKind,
    ConfigError,
    DualProxMode,
    ModelParams,
    NumericalError,
    SolverParams,
    TimeParams,
)
from .pd_solver import ConvergenceError, JkoProblem, solve_subproblem

__version__ = "0.1.0"

__all__ = [
    "BcKind",
    "ConfigError",
    "ConvergenceError",
    "DualProxMode",
    "EnergyBreakdown",
    "Grid",
    "JkoProblem",
    "ModelParams",
    "NumericalError",
    "RunConfig",
    "RunState",
    "SolverParams",
    "State",
    "StructureError",
    "TimeParams",
    "grad_energy",
    "run",
    "solve_subproblem",
    "total_energy",
    "__version__",
]
