# Solver package
from .branch_and_bound import MilpSolution, SolverConfig, solve_milp
from .simplex import LinearProgram, LpSolution, LpStatus, NumericalBreakdown, solve_lp

__all__ = [
    "MilpSolution",
    "SolverConfig",
    "solve_milp",
    "LinearProgram",
    "LpSolution",
    "LpStatus",
    "NumericalBreakdown",
    "solve_lp",
]
