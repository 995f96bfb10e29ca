"""Learning fast approximations of AC optimal power flow."""

from .grid import Network, load_case, parse_case, validate
from .powerflow import LoadPoint, OperatingPoint, violation_report
from .solver import SolverConfig, Status, solve_acopf, solve_loadflow

__all__ = [
    "Network", "load_case", "parse_case", "validate",
    "LoadPoint", "OperatingPoint", "violation_report",
    "SolverConfig", "Status", "solve_acopf", "solve_loadflow",
]
__version__ = "0.1.0"
