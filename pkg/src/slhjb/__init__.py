"""Semi-Lagrangian solver for finite-horizon HJB equations with a verification lab."""

__version__ = "0.1.0"

from .analysis import EocReport, refinement_study, sup_error, verify_dpp
from .dynamics import TimeGrid
from .grid import Grid, NodalField, build_grid, interpolate, make_grid
from .problem import ControlGrid, ControlSignal, Problem, builtin, sample_control_grid
from .solver import PolicyField, ValueField, closed_loop_simulate, solve

__all__ = [
    "ControlGrid", "ControlSignal", "EocReport", "Grid", "NodalField", "PolicyField", "Problem",
    "TimeGrid", "ValueField", "build_grid", "builtin", "closed_loop_simulate", "interpolate",
    "make_grid", "refinement_study", "sample_control_grid", "solve", "sup_error", "verify_dpp",
]
