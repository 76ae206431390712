"""
Stage-1 network design MILP.

Builds the sparse constraint system of the location/flow model from an
InstanceSpec, maps solver vectors back to a Stage1Solution, evaluates the
network cost symbolically, and exports the model in LP format.

Column order: P, Qij, Qjk, W, Y, Xij, Xjk (row-major inside each block).
Row order:
    plant_balance[i]       P_i - sum_j Q_ij = 0
    warehouse_balance[j]   sum_i Q_ij - sum_k Q_jk = -I_j
    demand[k]              sum_j Q_jk >= D_k
    open_ij[i,j]           X_ij - Y_j <= 0
    open_jk[j,k]           X_jk - Y_j <= 0
    capacity_ij[i,j]       Q_ij - Q^U_ij X_ij <= 0
    capacity_jk[j,k]       Q_jk - Q^U_jk X_jk <= 0
    warehouse_size[j]      W_j - a_j sum_i Q_ij >= a_j I_j
    warehouse_cap[j]       W_j - W^U_j Y_j <= 0
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp

from ..errors import SupplyChainError
from ..utils.logger import get_logger
from .instance import InstanceSpec

logger = get_logger(__name__)

INTEGRALITY_TOLERANCE = 1e-6
OBJECTIVE_MATCH_TOLERANCE = 1e-6


class NonIntegralBinary(SupplyChainError):
    """A binary column of a solution vector is not within tolerance of 0 or 1."""


class ObjectiveMismatch(SupplyChainError):
    """The symbolic total cost disagrees with objective @ x for a solver vector."""

    def __init__(self, tc: float, solver_objective: float):
        super().__init__(
            f"recomputed cost {tc!r} differs from solver objective {solver_objective!r}"
        )
        self.tc = tc
        self.solver_objective = solver_objective


class Relation(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    FEASIBLE_WITH_GAP = "FeasibleWithGap"
    INFEASIBLE = "Infeasible"
    TIME_LIMIT = "TimeLimit"


@dataclass(frozen=True)
class ConstraintRow:
    name: str
    coeffs: Tuple[Tuple[int, float], ...]
    relation: Relation
    rhs: float
    family: str


VARIABLE_KINDS = ("P", "Qij", "Qjk", "W", "Y", "Xij", "Xjk")


class VariableIndex:
    """Bidirectional map between symbolic variables and column indices."""

    def __init__(self, n_plants: int, n_warehouses: int, n_customers: int):
        self.n_plants = n_plants
        self.n_warehouses = n_warehouses
        self.n_customers = n_customers
        shapes = {
            "P": (n_plants,),
            "Qij": (n_plants, n_warehouses),
            "Qjk": (n_warehouses, n_customers),
            "W": (n_warehouses,),
            "Y": (n_warehouses,),
            "Xij": (n_plants, n_warehouses),
            "Xjk": (n_warehouses, n_customers),
        }
        self.shapes: Dict[str, Tuple[int, ...]] = shapes
        self.offsets: Dict[str, int] = {}
        offset = 0
        for kind in VARIABLE_KINDS:
            self.offsets[kind] = offset
            offset += int(np.prod(shapes[kind]))
        self.size = offset

        self._keys: List[Tuple[str, Tuple[int, ...]]] = []
        for kind in VARIABLE_KINDS:
            for idx in np.ndindex(*shapes[kind]):
                self._keys.append((kind, tuple(int(v) for v in idx)))
        self._columns = {key: col for col, key in enumerate(self._keys)}

    def column(self, kind: str, *idx: int) -> int:
        return self._columns[(kind, tuple(idx))]

    def key(self, col: int) -> Tuple[str, Tuple[int, ...]]:
        return self._keys[col]

    def label(self, col: int) -> str:
        kind, idx = self._keys[col]
        return f"{kind}({','.join(str(v) for v in idx)})"

    def block(self, kind: str) -> slice:
        start = self.offsets[kind]
        return slice(start, start + int(np.prod(self.shapes[kind])))

    def take(self, x: np.ndarray, kind: str) -> np.ndarray:
        """Slice one variable block out of a column vector, reshaped to its index shape."""
        return np.asarray(x[self.block(kind)]).reshape(self.shapes[kind])

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[Tuple[str, Tuple[int, ...]]]:
        return iter(self._keys)

    # Shorthands in the style of the model notation
    def p(self, i: int) -> int:
        return self.column("P", i)

    def qij(self, i: int, j: int) -> int:
        return self.column("Qij", i, j)

    def qjk(self, j: int, k: int) -> int:
        return self.column("Qjk", j, k)

    def w(self, j: int) -> int:
        return self.column("W", j)

    def y(self, j: int) -> int:
        return self.column("Y", j)

    def xij(self, i: int, j: int) -> int:
        return self.column("Xij", i, j)

    def xjk(self, j: int, k: int) -> int:
        return self.column("Xjk", j, k)


@dataclass(eq=False)
class MilpProblem:
    """Sparse mixed-binary program: minimize objective @ x over rows and bounds."""

    n_vars: int
    objective: np.ndarray
    rows: List[ConstraintRow]
    var_lower: np.ndarray
    var_upper: np.ndarray
    integrality: np.ndarray
    var_index: VariableIndex
    spec: Optional[InstanceSpec] = None
    demand_target: Optional[np.ndarray] = None

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_binaries(self) -> int:
        return int(np.count_nonzero(self.integrality))

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        data, indices, indptr = [], [], [0]
        for row in self.rows:
            for col, value in row.coeffs:
                indices.append(col)
                data.append(value)
            indptr.append(len(indices))
        return sp.csr_matrix(
            (np.array(data, dtype=float), np.array(indices, dtype=np.int64), indptr),
            shape=(self.n_rows, self.n_vars),
        )

    @cached_property
    def row_families(self) -> np.ndarray:
        return np.array([row.family for row in self.rows], dtype=str)

    @cached_property
    def row_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Rows as ranges lo <= A x <= hi (infinite sides for one-sided rows)."""
        lo = np.full(self.n_rows, -np.inf)
        hi = np.full(self.n_rows, np.inf)
        for r, row in enumerate(self.rows):
            if row.relation in (Relation.EQ, Relation.GE):
                lo[r] = row.rhs
            if row.relation in (Relation.EQ, Relation.LE):
                hi[r] = row.rhs
        return lo, hi

    def row_violations(self, x: np.ndarray, reference: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Scaled violation per row: max(0, breach) / (1 + |rhs| + sum |a_i| * m_i).

        m_i is |x_i|, or max(|x_i|, |reference_i|) when a reference magnitude
        (typically the finite variable upper bounds) is given, which measures a
        breach against the range the row can span. Non-finite activity counts
        as an infinite violation.
        """
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            activity = self.matrix @ x
            weight = np.abs(x)
            if reference is not None:
                weight = np.maximum(weight, np.abs(reference))
            magnitude = abs(self.matrix) @ weight
            lo, hi = self.row_bounds
            breach = np.maximum(np.maximum(lo - activity, activity - hi), 0.0)
            rhs = np.where(np.isfinite(lo), np.abs(lo), 0.0)
            rhs = np.maximum(rhs, np.where(np.isfinite(hi), np.abs(hi), 0.0))
            scaled = breach / (1.0 + rhs + magnitude)
        scaled[~np.isfinite(activity) | ~np.isfinite(scaled)] = np.inf
        return scaled

    def bound_violation(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        below = np.maximum(self.var_lower - x, 0.0)
        above = np.maximum(x - self.var_upper, 0.0)
        return float(np.max(np.concatenate([below, above, [0.0]])))


class _RowBuilder:
    """Accumulates rows, dropping zero coefficients and trivially satisfied empty rows."""

    def __init__(self) -> None:
        self.rows: List[ConstraintRow] = []
        self.dropped = 0

    def add(
        self,
        family: str,
        idx: Tuple[int, ...],
        terms: List[Tuple[int, float]],
        relation: Relation,
        rhs: float,
    ) -> None:
        coeffs = tuple((col, float(v)) for col, v in terms if v != 0.0)
        if not coeffs:
            satisfied = {
                Relation.LE: 0.0 <= rhs,
                Relation.EQ: rhs == 0.0,
                Relation.GE: 0.0 >= rhs,
            }[relation]
            if satisfied:
                self.dropped += 1
                return
        name = f"{family}[{','.join(str(v) for v in idx)}]"
        self.rows.append(ConstraintRow(name, coeffs, relation, float(rhs), family))


def build_stage1(spec: InstanceSpec, safety_factor: float = 0.0) -> MilpProblem:
    """
    Translate an instance into the stage-1 mixed-binary program.

    Demand rows use the deterministic equivalent mu_k + safety_factor * sigma_k.
    Big-M coefficients are the given arc capacities and W^U.
    """
    n_i, n_j, n_k = spec.n_plants, spec.n_warehouses, spec.n_customers
    vx = VariableIndex(n_i, n_j, n_k)
    costs = spec.costs
    target = spec.demand_target(safety_factor)

    objective = np.zeros(vx.size)
    objective[vx.block("P")] = costs.c_prod
    objective[vx.block("Qij")] = costs.c_var_ij.ravel()
    objective[vx.block("Qjk")] = costs.c_var_jk.ravel()
    objective[vx.block("Y")] = costs.c_install
    objective[vx.block("Xij")] = costs.c_fix_ij.ravel()
    objective[vx.block("Xjk")] = costs.c_fix_jk.ravel()

    lower = np.zeros(vx.size)
    upper = np.ones(vx.size)
    lower[vx.block("P")] = spec.p_lower
    upper[vx.block("P")] = spec.p_upper
    upper[vx.block("Qij")] = spec.q_upper_ij.ravel()
    upper[vx.block("Qjk")] = spec.q_upper_jk.ravel()
    upper[vx.block("W")] = spec.w_upper

    integrality = np.zeros(vx.size, dtype=bool)
    for kind in ("Y", "Xij", "Xjk"):
        integrality[vx.block(kind)] = True

    rb = _RowBuilder()
    I, J, K = range(n_i), range(n_j), range(n_k)

    for i in I:
        terms = [(vx.p(i), 1.0)] + [(vx.qij(i, j), -1.0) for j in J]
        rb.add("plant_balance", (i,), terms, Relation.EQ, 0.0)
    for j in J:
        terms = [(vx.qij(i, j), 1.0) for i in I] + [(vx.qjk(j, k), -1.0) for k in K]
        rb.add("warehouse_balance", (j,), terms, Relation.EQ, -spec.inventory[j])
    for k in K:
        rb.add("demand", (k,), [(vx.qjk(j, k), 1.0) for j in J], Relation.GE, target[k])
    for i in I:
        for j in J:
            rb.add("open_ij", (i, j), [(vx.xij(i, j), 1.0), (vx.y(j), -1.0)], Relation.LE, 0.0)
    for j in J:
        for k in K:
            rb.add("open_jk", (j, k), [(vx.xjk(j, k), 1.0), (vx.y(j), -1.0)], Relation.LE, 0.0)
    for i in I:
        for j in J:
            rb.add(
                "capacity_ij",
                (i, j),
                [(vx.qij(i, j), 1.0), (vx.xij(i, j), -spec.q_upper_ij[i, j])],
                Relation.LE,
                0.0,
            )
    for j in J:
        for k in K:
            rb.add(
                "capacity_jk",
                (j, k),
                [(vx.qjk(j, k), 1.0), (vx.xjk(j, k), -spec.q_upper_jk[j, k])],
                Relation.LE,
                0.0,
            )
    for j in J:
        terms = [(vx.w(j), 1.0)] + [(vx.qij(i, j), -spec.a[j]) for i in I]
        rb.add("warehouse_size", (j,), terms, Relation.GE, spec.a[j] * spec.inventory[j])
    for j in J:
        terms = [(vx.w(j), 1.0), (vx.y(j), -spec.w_upper[j])]
        rb.add("warehouse_cap", (j,), terms, Relation.LE, 0.0)

    problem = MilpProblem(
        n_vars=vx.size,
        objective=objective,
        rows=rb.rows,
        var_lower=lower,
        var_upper=upper,
        integrality=integrality,
        var_index=vx,
        spec=spec,
        demand_target=target,
    )
    logger.debug(
        "Stage-1 model built",
        n_vars=problem.n_vars,
        n_rows=problem.n_rows,
        binaries=problem.n_binaries,
        dropped_rows=rb.dropped,
    )
    return problem


# =============================================================================
# Solutions
# =============================================================================


def evaluate_total_cost(
    spec: InstanceSpec,
    p: np.ndarray,
    q_ij: np.ndarray,
    q_jk: np.ndarray,
    y: np.ndarray,
    x_ij: np.ndarray,
    x_jk: np.ndarray,
) -> float:
    """Network cost: production + variable and fixed transport + installation."""
    c = spec.costs
    return float(
        np.sum(c.c_prod * p)
        + np.sum(c.c_var_ij * q_ij)
        + np.sum(c.c_fix_ij * x_ij)
        + np.sum(c.c_var_jk * q_jk)
        + np.sum(c.c_fix_jk * x_jk)
        + np.sum(c.c_install * y)
    )


@dataclass
class Stage1Solution:
    """Decoded stage-1 decisions with the recomputed network cost."""

    p: np.ndarray
    q_ij: np.ndarray
    q_jk: np.ndarray
    w: np.ndarray
    y: np.ndarray
    x_ij: np.ndarray
    x_jk: np.ndarray
    tc: float
    status: SolveStatus
    gap: float
    nodes_explored: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_vector(self, vx: VariableIndex) -> np.ndarray:
        x = np.zeros(vx.size)
        x[vx.block("P")] = self.p
        x[vx.block("Qij")] = self.q_ij.ravel()
        x[vx.block("Qjk")] = self.q_jk.ravel()
        x[vx.block("W")] = self.w
        x[vx.block("Y")] = self.y
        x[vx.block("Xij")] = self.x_ij.ravel()
        x[vx.block("Xjk")] = self.x_jk.ravel()
        return x

    def delivered(self) -> np.ndarray:
        """Quantity delivered to each customer, sum_j q_jk[j][k]."""
        return self.q_jk.sum(axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "p": self.p.tolist(),
            "q_ij": self.q_ij.tolist(),
            "q_jk": self.q_jk.tolist(),
            "w": self.w.tolist(),
            "y": self.y.astype(bool).tolist(),
            "x_ij": self.x_ij.astype(bool).tolist(),
            "x_jk": self.x_jk.astype(bool).tolist(),
            "tc": self.tc,
            "status": self.status.value,
            "gap": self.gap,
            "nodes_explored": self.nodes_explored,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Stage1Solution":
        return cls(
            p=np.array(data["p"], dtype=float),
            q_ij=np.array(data["q_ij"], dtype=float),
            q_jk=np.array(data["q_jk"], dtype=float),
            w=np.array(data["w"], dtype=float),
            y=np.array(data["y"], dtype=bool),
            x_ij=np.array(data["x_ij"], dtype=bool),
            x_jk=np.array(data["x_jk"], dtype=bool),
            tc=float(data["tc"]),
            status=SolveStatus(data["status"]),
            gap=float(data["gap"]),
            nodes_explored=int(data.get("nodes_explored", 0)),
            metadata=dict(data.get("metadata", {})),
        )


def extract_stage1(
    problem: MilpProblem,
    x: np.ndarray,
    status: SolveStatus,
    gap: float,
    nodes_explored: int = 0,
) -> Stage1Solution:
    """
    Decode a solver vector into a Stage1Solution.

    Binaries are rounded; continuous columns are clipped into their bounds.
    The cost is recomputed symbolically and cross-checked against objective @ x.

    Raises:
        NonIntegralBinary: a binary column is not within tolerance of 0 or 1
        ObjectiveMismatch: the two costs differ by more than a relative 1e-6
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.n_vars,):
        raise ValueError(f"expected a vector of length {problem.n_vars}, got shape {x.shape}")
    if problem.spec is None:
        raise ValueError("problem carries no instance; build it with build_stage1")

    vx = problem.var_index
    binaries = np.flatnonzero(problem.integrality)
    deviation = np.abs(x[binaries] - np.round(x[binaries]))
    bad = binaries[deviation > INTEGRALITY_TOLERANCE]
    if bad.size:
        col = int(bad[0])
        raise NonIntegralBinary(f"{vx.label(col)} = {x[col]!r} is not binary")

    clean = np.clip(x, problem.var_lower, problem.var_upper)
    clean[binaries] = np.round(clean[binaries])

    p = vx.take(clean, "P").copy()
    q_ij = vx.take(clean, "Qij").copy()
    q_jk = vx.take(clean, "Qjk").copy()
    w = vx.take(clean, "W").copy()
    y = vx.take(clean, "Y").astype(bool)
    x_ij = vx.take(clean, "Xij").astype(bool)
    x_jk = vx.take(clean, "Xjk").astype(bool)

    tc = evaluate_total_cost(problem.spec, p, q_ij, q_jk, y, x_ij, x_jk)
    solver_objective = float(problem.objective @ x)
    if abs(tc - solver_objective) > OBJECTIVE_MATCH_TOLERANCE * max(1.0, abs(solver_objective)):
        logger.error("Recomputed cost differs from solver objective", tc=tc, obj=solver_objective)
        raise ObjectiveMismatch(tc, solver_objective)

    return Stage1Solution(
        p=p,
        q_ij=q_ij,
        q_jk=q_jk,
        w=w,
        y=y,
        x_ij=x_ij,
        x_jk=x_jk,
        tc=tc,
        status=status,
        gap=float(gap),
        nodes_explored=nodes_explored,
    )


# =============================================================================
# LP-format export
# =============================================================================


def _lp_var(vx: VariableIndex, col: int) -> str:
    kind, idx = vx.key(col)
    return "_".join([kind, *(str(v) for v in idx)])


def _lp_row(name: str) -> str:
    return name.replace("[", "_").replace("]", "").replace(",", "_")


def _lp_terms(vx: VariableIndex, terms: List[Tuple[int, float]]) -> str:
    parts = []
    for n, (col, coef) in enumerate(terms):
        text = f"{abs(coef):.17g} {_lp_var(vx, col)}"
        if n == 0:
            parts.append(f"- {text}" if coef < 0 else text)
        else:
            parts.append(f"{'-' if coef < 0 else '+'} {text}")
    return " ".join(parts) if parts else f"0 {_lp_var(vx, 0)}"


def write_lp(problem: MilpProblem, path: Union[str, Path], name: str = "stage1") -> Path:
    """Write the program in CPLEX LP text format (see docs/lp_format.md)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vx = problem.var_index
    lines = [f"\\ {name}", "Minimize"]
    obj_terms = [(c, float(v)) for c, v in enumerate(problem.objective) if v != 0.0]
    lines.append(f" obj: {_lp_terms(vx, obj_terms)}")
    lines.append("Subject To")
    for row in problem.rows:
        lines.append(
            f" {_lp_row(row.name)}: {_lp_terms(vx, list(row.coeffs))} "
            f"{row.relation.value} {row.rhs:.17g}"
        )
    lines.append("Bounds")
    for col in range(problem.n_vars):
        if problem.integrality[col]:
            continue
        lines.append(
            f" {problem.var_lower[col]:.17g} <= {_lp_var(vx, col)} <= "
            f"{problem.var_upper[col]:.17g}"
        )
    lines.append("Binaries")
    for col in np.flatnonzero(problem.integrality):
        lines.append(f" {_lp_var(vx, int(col))}")
    lines.append("End")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("LP file written", path=str(path), rows=problem.n_rows)
    return path
