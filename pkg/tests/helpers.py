"""
Hand-built instances shared by the test modules.

tiny_spec() is a 2x2x2 network whose stage-1 optimum can be checked by hand:
open warehouse 0 only, ship 80 units from plant 0 and 30 from plant 1, for a
total cost of 780.
"""

from typing import Any, Dict

import numpy as np

TINY_OPTIMUM = 780.0


def tiny_dict(**overrides: Any) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "n_plants": 2,
        "n_warehouses": 2,
        "n_customers": 2,
        "p_upper": [100.0, 100.0],
        "p_lower": [0.0, 0.0],
        "q_upper_ij": [[80.0, 80.0], [80.0, 80.0]],
        "q_upper_jk": [[100.0, 100.0], [100.0, 100.0]],
        "w_upper": [200.0, 200.0],
        "inventory": [0.0, 0.0],
        "demand": [{"mu": 50.0, "sigma": 5.0}, {"mu": 60.0, "sigma": 6.0}],
        "a": [0.5, 0.5],
        "beta": [[0.1, 0.2], [0.1, 0.2]],
        "gamma": [[0.3, 0.3], [0.3, 0.3]],
        "h": [[20.0, 30.0], [20.0, 30.0]],
        "t_upper": 8.0,
        "t_lower": 2.0,
        "costs": {
            "c_prod": [2.0, 3.0],
            "c_var_ij": [[1.0, 4.0], [3.0, 1.0]],
            "c_fix_ij": [[10.0, 10.0], [10.0, 10.0]],
            "c_var_jk": [[2.0, 2.0], [2.0, 2.0]],
            "c_fix_jk": [[10.0, 10.0], [10.0, 10.0]],
            "c_install": [100.0, 150.0],
            "c_po": [[2.0, 2.0], [2.0, 2.0]],
            "c_pu": [[1.0, 1.0], [1.0, 1.0]],
        },
    }
    for key, value in overrides.items():
        if key in data["costs"]:
            data["costs"][key] = value
        else:
            data[key] = value
    return data


def tiny_spec(**overrides: Any):
    from src.network.instance import InstanceSpec

    return InstanceSpec.from_dict(tiny_dict(**overrides))


def zero_spec():
    """Zero demand and zero costs: the empty network is optimal."""
    from src.network.instance import InstanceSpec

    data = tiny_dict(demand=[{"mu": 0.0, "sigma": 0.0}, {"mu": 0.0, "sigma": 0.0}])
    for name in list(data["costs"]):
        data["costs"][name] = np.zeros_like(np.array(data["costs"][name])).tolist()
    return InstanceSpec.from_dict(data)


def solve_exact(spec, safety_factor: float = 0.0):
    """Stage-1 solution with a (practically) zero gap tolerance."""
    from src.network.milp import build_stage1, extract_stage1
    from src.solver.branch_and_bound import SolverConfig, solve_milp

    problem = build_stage1(spec, safety_factor)
    result = solve_milp(problem, SolverConfig(gap_tolerance=1e-9, time_limit_seconds=60))
    assert result.has_incumbent
    return problem, result, extract_stage1(
        problem, result.x, result.status, result.gap, result.nodes_explored
    )
