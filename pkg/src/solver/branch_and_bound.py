"""
Best-first branch-and-bound over the binary columns of a MilpProblem.

Nodes are solved lazily: a child enters the queue carrying its parent's LP
bound and is solved when popped. The queue orders by (bound, sequence number),
so equal bounds are processed first-in first-out and a solve is reproducible
node for node.
"""

import heapq
import logging
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..network.milp import MilpProblem, SolveStatus
from ..utils.logger import get_logger
from .simplex import LinearProgram, LpStatus, NumericalBreakdown, solve_lp

logger = get_logger(__name__)


class SolverConfig(BaseModel):
    """Branch-and-bound limits and tolerances."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    gap_tolerance: float = Field(default=1e-2, gt=0, description="Relative optimality gap")
    time_limit_seconds: float = Field(default=60.0, ge=0, description="Wall-clock limit")
    node_limit: Optional[int] = Field(default=None, ge=1, description="Maximum LP nodes")
    branching: Literal["most-fractional"] = Field(default="most-fractional")
    feasibility_tolerance: float = Field(default=1e-6, gt=0)
    integrality_tolerance: float = Field(default=1e-6, gt=0)
    rounding_heuristic: bool = Field(
        default=True, description="Round the root relaxation up and polish it"
    )
    refactor_every: int = Field(default=100, ge=10, description="Pivots between refactors")


@dataclass
class MilpSolution:
    x: Optional[np.ndarray]
    objective: float
    status: SolveStatus
    gap: float
    nodes_explored: int
    bound: float = -np.inf
    lp_iterations: int = 0
    bound_trace: List[float] = field(default_factory=list)
    incumbent_trace: List[float] = field(default_factory=list)

    @property
    def has_incumbent(self) -> bool:
        return self.x is not None


def relative_gap(incumbent: float, bound: float) -> float:
    if not np.isfinite(incumbent):
        return float("inf")
    if not np.isfinite(bound):
        return float("inf")
    return max(0.0, (incumbent - bound) / max(abs(incumbent), 1.0))


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    depth: int = field(compare=False)
    lower: np.ndarray = field(compare=False, repr=False)
    upper: np.ndarray = field(compare=False, repr=False)


class _Search:
    def __init__(self, problem: MilpProblem, cfg: SolverConfig):
        self.problem = problem
        self.cfg = cfg
        self.binaries = np.flatnonzero(problem.integrality)
        self.deadline = time.perf_counter() + cfg.time_limit_seconds
        self.incumbent: Optional[np.ndarray] = None
        self.incumbent_value = np.inf
        self.nodes = 0
        self.lp_iterations = 0
        self.bound_trace: List[float] = []
        self.incumbent_trace: List[float] = []
        self._seq = 0
        self.queue: List[_Node] = []

    def push(self, bound: float, depth: int, lower: np.ndarray, upper: np.ndarray) -> None:
        heapq.heappush(self.queue, _Node(bound, self._seq, depth, lower, upper))
        self._seq += 1

    def timed_out(self) -> bool:
        return time.perf_counter() > self.deadline

    def solve_node(self, node: _Node):
        lp = LinearProgram.from_milp(self.problem, node.lower, node.upper)
        try:
            result = solve_lp(lp, deadline=self.deadline, refactor_every=self.cfg.refactor_every)
        except NumericalBreakdown as e:
            raise NumericalBreakdown(
                f"{e} (node {node.seq}, depth {node.depth})",
                condition=e.condition,
                context={**e.context, "node": node.seq, "depth": node.depth},
            ) from e
        self.lp_iterations += result.iterations
        return result

    def accept(self, x: np.ndarray, source: str) -> bool:
        """Take x as incumbent when it is integral, in bounds, row feasible and better."""
        x = x.copy()
        b = self.binaries
        if np.any(np.abs(x[b] - np.round(x[b])) > self.cfg.integrality_tolerance):
            return False
        x[b] = np.round(x[b])
        x = np.clip(x, self.problem.var_lower, self.problem.var_upper)
        violation = self.problem.row_violations(x)
        worst = float(violation.max()) if violation.size else 0.0
        if worst > self.cfg.feasibility_tolerance:
            logger.warning("Rejected infeasible incumbent", source=source, max_violation=worst)
            return False
        value = float(self.problem.objective @ x)
        if value >= self.incumbent_value:
            return False
        self.incumbent = x
        self.incumbent_value = value
        self.incumbent_trace.append(value)
        logger.debug("New incumbent", source=source, objective=value, nodes=self.nodes)
        return True

    def most_fractional(self, x: np.ndarray) -> Optional[int]:
        values = x[self.binaries]
        frac = np.abs(values - np.round(values))
        if not np.any(frac > self.cfg.integrality_tolerance):
            return None
        # argmax returns the first maximum, i.e. the lowest column index on ties
        return int(self.binaries[int(np.argmax(frac))])

    def round_up(self, node: _Node, x: np.ndarray) -> None:
        """Root heuristic: round binaries up, re-solve the continuous part, drop idle binaries."""
        b = self.binaries
        feas_tol = self.cfg.feasibility_tolerance
        fixed = np.where(x[b] > self.cfg.integrality_tolerance, 1.0, 0.0)
        candidate = self._polish(node, fixed)
        if candidate is None:
            return

        order = b[np.lexsort((b, -self.problem.objective[b]))]
        changed = True
        passes = 0
        while changed and passes < 3:
            changed = False
            passes += 1
            for col in order:
                if candidate[col] < 0.5:
                    continue
                trial = candidate.copy()
                trial[col] = 0.0
                if float(self.problem.row_violations(trial).max(initial=0.0)) <= feas_tol:
                    candidate = trial
                    changed = True

        polished = self._polish(node, candidate[b])
        self.accept(polished if polished is not None else candidate, "rounding")

    def _polish(self, node: _Node, fixing: np.ndarray) -> Optional[np.ndarray]:
        lower = node.lower.copy()
        upper = node.upper.copy()
        lower[self.binaries] = fixing
        upper[self.binaries] = fixing
        result = solve_lp(
            LinearProgram.from_milp(self.problem, lower, upper),
            deadline=self.deadline,
            refactor_every=self.cfg.refactor_every,
        )
        self.lp_iterations += result.iterations
        return result.x if result.status == LpStatus.OPTIMAL else None


def solve_milp(problem: MilpProblem, cfg: Optional[SolverConfig] = None) -> MilpSolution:
    """
    Minimize a mixed-binary program by best-first branch-and-bound.

    Returns Optimal once the relative gap (incumbent - bound) / max(|incumbent|, 1)
    is within cfg.gap_tolerance or the tree is exhausted, FeasibleWithGap when the
    node limit stops a search that holds an incumbent, TimeLimit when the clock
    (or the node limit without an incumbent) stops it, Infeasible only after an
    exhausted tree without any incumbent.

    Raises:
        NumericalBreakdown: with the node sequence number and depth in its context
    """
    cfg = cfg or SolverConfig()
    search = _Search(problem, cfg)
    debug = logger.is_enabled_for(logging.DEBUG)

    if cfg.time_limit_seconds <= 0:
        logger.info("Zero time limit, returning without search")
        return MilpSolution(None, np.inf, SolveStatus.TIME_LIMIT, np.inf, 0)

    search.push(-np.inf, 0, problem.var_lower.copy(), problem.var_upper.copy())
    stop_reason = "exhausted"
    global_bound = -np.inf

    while search.queue:
        if search.timed_out():
            stop_reason = "time"
            break
        if cfg.node_limit is not None and search.nodes >= cfg.node_limit:
            stop_reason = "nodes"
            break

        node = search.queue[0]
        global_bound = max(global_bound, node.bound)
        if relative_gap(search.incumbent_value, global_bound) <= cfg.gap_tolerance:
            stop_reason = "gap"
            break
        heapq.heappop(search.queue)
        if node.bound >= search.incumbent_value:
            continue

        result = search.solve_node(node)
        if result.status == LpStatus.INTERRUPTED:
            search.push(node.bound, node.depth, node.lower, node.upper)
            stop_reason = "time"
            break
        search.nodes += 1
        search.bound_trace.append(global_bound)

        if result.status == LpStatus.INFEASIBLE:
            continue
        if result.status == LpStatus.UNBOUNDED:
            raise NumericalBreakdown(
                "relaxation reported unbounded on a box-bounded program",
                context={"node": node.seq, "depth": node.depth},
            )
        if result.objective >= search.incumbent_value:
            continue

        x = result.x
        branch_col = search.most_fractional(x)
        if debug:
            logger.debug(
                "Node solved",
                node=node.seq,
                depth=node.depth,
                objective=result.objective,
                bound=global_bound,
                incumbent=search.incumbent_value,
                queue=len(search.queue),
            )
        if branch_col is None:
            search.accept(x, "relaxation")
            continue

        if node.depth == 0 and cfg.rounding_heuristic:
            search.round_up(node, x)

        child_bound = max(result.objective, node.bound)
        down_upper = node.upper.copy()
        down_upper[branch_col] = 0.0
        search.push(child_bound, node.depth + 1, node.lower, down_upper)
        up_lower = node.lower.copy()
        up_lower[branch_col] = 1.0
        search.push(child_bound, node.depth + 1, up_lower, node.upper)

    if search.queue:
        bound = max(global_bound, min(n.bound for n in search.queue))
    else:
        bound = search.incumbent_value
    bound = min(bound, search.incumbent_value)
    gap = relative_gap(search.incumbent_value, bound) if search.incumbent is not None else np.inf

    if stop_reason in ("exhausted", "gap"):
        status = SolveStatus.OPTIMAL if search.incumbent is not None else SolveStatus.INFEASIBLE
        if stop_reason == "exhausted":
            gap = 0.0 if search.incumbent is not None else np.inf
    elif stop_reason == "nodes" and search.incumbent is not None:
        status = SolveStatus.FEASIBLE_WITH_GAP
    else:
        status = SolveStatus.TIME_LIMIT

    logger.info(
        "Branch-and-bound finished",
        status=status.value,
        stop_reason=stop_reason,
        objective=search.incumbent_value,
        bound=bound,
        gap=gap,
        nodes=search.nodes,
        lp_iterations=search.lp_iterations,
    )
    return MilpSolution(
        x=search.incumbent,
        objective=float(search.incumbent_value),
        status=status,
        gap=float(gap),
        nodes_explored=search.nodes,
        bound=float(bound),
        lp_iterations=search.lp_iterations,
        bound_trace=search.bound_trace,
        incumbent_trace=search.incumbent_trace,
    )
