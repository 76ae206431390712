"""
Bounded revised simplex.

Solves min c @ x subject to row_lower <= A x <= row_upper and lower <= x <= upper
on the system [A | -I] (x, s) = 0, where s holds the row activities.

The basis is held as a sparse LU factorization (SuperLU) followed by a
product-form eta file: every pivot appends one eta column, and the factor is
rebuilt from scratch after refactor_every pivots. Entering columns come from
ftran and the duals from btran through that factor.

The starting basis is a triangular crash. A row whose activity lies outside
its bounds hands its slack's place in the basis to a structural column that
puts the row on its bound, stays inside its own bounds and breaks at most one
more row than it repairs. Phase 1 then minimizes the sum of bound
infeasibilities of the basic variables that remain out of bounds (they get a
one-sided working bound), phase 2 the true objective. Pricing is Dantzig's
rule; after a run of degenerate pivots it switches to Bland's smallest-index
rule until a step makes progress again.
"""

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..errors import SupplyChainError
from ..network.milp import MilpProblem
from ..utils.logger import get_logger

logger = get_logger(__name__)

PRIMAL_TOLERANCE = 1e-9
DUAL_TOLERANCE = 1e-9
PIVOT_TOLERANCE = 1e-9
CRASH_PIVOT_TOLERANCE = 1e-7
MAX_CONDITION = 1e13
REFACTOR_EVERY = 100
STALL_LIMIT = 50

AT_LOWER, AT_UPPER, FREE, BASIC = 0, 1, 2, 3


class NumericalBreakdown(SupplyChainError):
    """The basis became singular or too ill-conditioned to trust."""

    def __init__(
        self,
        message: str,
        condition: Optional[float] = None,
        context: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.condition = condition
        self.context = dict(context or {})


class LpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    INTERRUPTED = "Interrupted"


@dataclass
class LinearProgram:
    """Continuous program in range form."""

    c: np.ndarray
    A: sp.csr_matrix
    row_lower: np.ndarray
    row_upper: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=float)
        self.A = sp.csr_matrix(self.A, dtype=float)
        n = self.c.shape[0]
        m = self.A.shape[0]
        if self.A.shape[1] != n:
            raise ValueError(f"A has {self.A.shape[1]} columns, objective has {n}")
        self.row_lower = np.broadcast_to(np.asarray(self.row_lower, dtype=float), (m,)).copy()
        self.row_upper = np.broadcast_to(np.asarray(self.row_upper, dtype=float), (m,)).copy()
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()

    @property
    def shape(self) -> Tuple[int, int]:
        return self.A.shape

    @classmethod
    def from_milp(
        cls,
        problem: MilpProblem,
        lower: Optional[np.ndarray] = None,
        upper: Optional[np.ndarray] = None,
    ) -> "LinearProgram":
        """Continuous relaxation of a MilpProblem, optionally with tightened bounds."""
        row_lower, row_upper = problem.row_bounds
        return cls(
            c=problem.objective,
            A=problem.matrix,
            row_lower=row_lower,
            row_upper=row_upper,
            lower=problem.var_lower if lower is None else lower,
            upper=problem.var_upper if upper is None else upper,
        )

    @classmethod
    def from_rows(
        cls,
        c: Sequence[float],
        rows: Sequence[Tuple[Sequence[float], str, float]],
        bounds: Sequence[Tuple[float, float]],
    ) -> "LinearProgram":
        """Small dense constructor: rows are (coefficients, relation, rhs)."""
        m, n = len(rows), len(c)
        A = np.zeros((m, n))
        lo = np.full(m, -np.inf)
        hi = np.full(m, np.inf)
        for r, (coeffs, relation, rhs) in enumerate(rows):
            A[r] = coeffs
            if relation in ("=", ">="):
                lo[r] = rhs
            if relation in ("=", "<="):
                hi[r] = rhs
        bounds_arr = np.array(bounds, dtype=float).reshape(n, 2)
        return cls(c, sp.csr_matrix(A), lo, hi, bounds_arr[:, 0], bounds_arr[:, 1])

    def primal_residual(self, x: np.ndarray) -> float:
        """Largest absolute row or bound violation of x."""
        activity = self.A @ x
        parts = [
            self.row_lower - activity,
            activity - self.row_upper,
            self.lower - x,
            x - self.upper,
            np.zeros(1),
        ]
        return float(np.max(np.concatenate(parts)))


@dataclass
class LpSolution:
    x: np.ndarray
    objective: float
    status: LpStatus
    iterations: int
    primal_residual: float = float("nan")
    metadata: Dict[str, Any] = field(default_factory=dict)


class BasisFactor:
    """
    LU factors of a basis matrix followed by a product-form eta file.

    After k updates the represented basis is B0 E1 ... Ek, where Ei is the
    identity with column r replaced by the ftran'd entering column.
    """

    def __init__(self, basis_matrix: sp.csc_matrix):
        self.m = basis_matrix.shape[0]
        self.etas: List[Tuple[int, np.ndarray, np.ndarray, float]] = []
        self.condition = 1.0
        self._lu = None
        if self.m == 0:
            return
        try:
            self._lu = splu(sp.csc_matrix(basis_matrix), permc_spec="COLAMD")
        except RuntimeError as e:
            raise NumericalBreakdown(f"singular basis: {e}") from e
        pivots = np.abs(self._lu.U.diagonal())
        smallest = float(pivots.min())
        # Ratio of extreme U pivots; L is unit lower triangular with |l_ij| <= 1
        self.condition = float(pivots.max()) / smallest if smallest > 0.0 else np.inf

    def __len__(self) -> int:
        return len(self.etas)

    def ftran(self, v: np.ndarray) -> np.ndarray:
        """Solve B x = v."""
        if self._lu is None:
            return np.zeros(0)
        x = self._lu.solve(np.asarray(v, dtype=float))
        for r, idx, vals, pivot in self.etas:
            xr = x[r] / pivot
            if xr != 0.0:
                x[idx] -= vals * xr
            x[r] = xr
        return x

    def btran(self, c: np.ndarray) -> np.ndarray:
        """Solve B^T y = c."""
        if self._lu is None:
            return np.zeros(0)
        y = np.array(c, dtype=float)
        for r, idx, vals, pivot in reversed(self.etas):
            y[r] = (y[r] - vals @ y[idx]) / pivot
        return self._lu.solve(y, trans="T")

    def update(self, r: int, alpha: np.ndarray) -> None:
        """Record the pivot of the ftran'd column alpha into basis position r."""
        idx = np.flatnonzero(alpha)
        idx = idx[idx != r]
        self.etas.append((r, idx, alpha[idx].copy(), float(alpha[r])))


class _BoundedSimplex:
    def __init__(
        self,
        lp: LinearProgram,
        max_iterations: int,
        deadline: Optional[float],
        refactor_every: int,
        crash: bool,
    ):
        m, n = lp.shape
        self.lp = lp
        self.m, self.n = m, n
        self.full = sp.hstack([lp.A, -sp.identity(m, format="csr")], format="csc")
        self.full_t = self.full.T.tocsr()
        self.cost = np.concatenate([lp.c, np.zeros(m)])
        self.lower = np.concatenate([lp.lower, lp.row_lower])
        self.upper = np.concatenate([lp.upper, lp.row_upper])
        self.max_iterations = max_iterations
        self.deadline = deadline
        self.refactor_every = refactor_every
        self.iterations = 0

        finite_lo = np.isfinite(self.lower)
        finite_hi = np.isfinite(self.upper)
        self.value = np.where(finite_lo, self.lower, np.where(finite_hi, self.upper, 0.0))
        self.state = np.where(finite_lo, AT_LOWER, np.where(finite_hi, AT_UPPER, FREE)).astype(
            np.int8
        )
        with np.errstate(invalid="ignore"):
            self.row_floor = lp.row_lower - PRIMAL_TOLERANCE * (1.0 + np.abs(lp.row_lower))
            self.row_ceil = lp.row_upper + PRIMAL_TOLERANCE * (1.0 + np.abs(lp.row_upper))

        self._slack_basis()
        self.crashed = 0
        if crash and m:
            start_value, start_state = self.value.copy(), self.state.copy()
            self.crashed = self._crash()
            if self.crashed:
                try:
                    self._refactor()
                    return
                except NumericalBreakdown:
                    logger.debug("Crash basis rejected, starting from slacks")
                    self.value, self.state = start_value, start_state
                    self._slack_basis()
                    self.crashed = 0
        self._refactor()

    def _slack_basis(self) -> None:
        self.basis = np.arange(self.n, self.n + self.m)
        self.state[self.basis] = BASIC

    # -------------------------------------------------------------------------
    # Crash
    # -------------------------------------------------------------------------

    def _breached(self, activity: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return (activity < self.row_floor[rows]) | (activity > self.row_ceil[rows])

    def _crash(self) -> int:
        """Triangular crash; returns the number of structural columns made basic."""
        A = self.lp.A
        A_csc = A.tocsc()
        activity = A @ self.value[: self.n]
        frozen = np.zeros(self.m, dtype=bool)
        used = self.upper[: self.n] <= self.lower[: self.n]
        crashed = 0

        progress = True
        while progress:
            progress = False
            for r in range(self.m):
                if frozen[r] or self.row_floor[r] <= activity[r] <= self.row_ceil[r]:
                    continue
                below = activity[r] < self.row_floor[r]
                target = self.lp.row_lower[r] if below else self.lp.row_upper[r]
                best: Optional[Tuple[Tuple[int, float, int], float]] = None
                start, end = A.indptr[r], A.indptr[r + 1]
                for q, a in zip(A.indices[start:end], A.data[start:end]):
                    if used[q] or abs(a) < CRASH_PIVOT_TOLERANCE:
                        continue
                    col_rows = A_csc.indices[A_csc.indptr[q] : A_csc.indptr[q + 1]]
                    if frozen[col_rows].any():
                        continue
                    step = (target - activity[r]) / a
                    moved = self.value[q] + step
                    if moved < self.lower[q] or moved > self.upper[q]:
                        continue
                    col_vals = A_csc.data[A_csc.indptr[q] : A_csc.indptr[q + 1]]
                    others = col_rows != r
                    rows = col_rows[others]
                    before = self._breached(activity[rows], rows)
                    after = self._breached(activity[rows] + col_vals[others] * step, rows)
                    score = int(after.sum()) - int(before.sum())
                    if score > 1:
                        continue
                    key = (score, -abs(a), int(q))
                    if best is None or key < best[0]:
                        best = (key, step)
                if best is None:
                    continue

                q, step = best[0][2], best[1]
                cs, ce = A_csc.indptr[q], A_csc.indptr[q + 1]
                activity[A_csc.indices[cs:ce]] += A_csc.data[cs:ce] * step
                self.value[q] += step
                self.state[q] = BASIC
                self.basis[r] = q
                slack = self.n + r
                self.value[slack] = target
                self.state[slack] = AT_LOWER if target == self.lower[slack] else AT_UPPER
                frozen[r] = True
                used[q] = True
                crashed += 1
                progress = True
        return crashed

    # -------------------------------------------------------------------------
    # Linear algebra
    # -------------------------------------------------------------------------

    def _recompute_basics(self) -> None:
        nonbasic = self.value.copy()
        nonbasic[self.basis] = 0.0
        self.value[self.basis] = self.factor.ftran(-(self.full @ nonbasic))

    def _refactor(self) -> None:
        try:
            factor = BasisFactor(self.full[:, self.basis])
        except NumericalBreakdown as e:
            raise NumericalBreakdown(
                f"{e} after {self.iterations} iterations",
                context={"iterations": self.iterations},
            ) from e
        if not np.isfinite(factor.condition) or factor.condition > MAX_CONDITION:
            raise NumericalBreakdown(
                f"basis pivot ratio {factor.condition:.3e} exceeds {MAX_CONDITION:.0e}",
                condition=factor.condition,
                context={"iterations": self.iterations},
            )
        self.factor = factor
        self._recompute_basics()

    def _column(self, q: int) -> np.ndarray:
        a = np.zeros(self.m)
        start, end = self.full.indptr[q], self.full.indptr[q + 1]
        a[self.full.indices[start:end]] = self.full.data[start:end]
        return self.factor.ftran(a)

    # -------------------------------------------------------------------------
    # Iteration pieces
    # -------------------------------------------------------------------------

    def _choose_entering(self, d: np.ndarray, bland: bool) -> Tuple[Optional[int], int]:
        movable = self.upper > self.lower
        up = ((self.state == AT_LOWER) | (self.state == FREE)) & (d < -DUAL_TOLERANCE)
        down = ((self.state == AT_UPPER) | (self.state == FREE)) & (d > DUAL_TOLERANCE)
        eligible = (up | down) & movable
        if not eligible.any():
            return None, 0
        if bland:
            q = int(np.flatnonzero(eligible)[0])
        else:
            q = int(np.argmax(np.where(eligible, np.abs(d), -1.0)))
        return q, (1 if up[q] else -1)

    def _ratio_test(
        self,
        delta: np.ndarray,
        alpha: np.ndarray,
        work_lo: np.ndarray,
        work_hi: np.ndarray,
        bland: bool,
    ) -> Tuple[float, Optional[int]]:
        if self.m == 0:
            return np.inf, None
        xb = self.value[self.basis]
        ratios = np.full(self.m, np.inf)
        dec = delta < -PIVOT_TOLERANCE
        inc = delta > PIVOT_TOLERANCE
        ratios[dec] = (xb[dec] - work_lo[dec]) / -delta[dec]
        ratios[inc] = (work_hi[inc] - xb[inc]) / delta[inc]
        ratios = np.maximum(ratios, 0.0)
        t = float(ratios.min())
        if not np.isfinite(t):
            return np.inf, None
        ties = np.flatnonzero(ratios <= t + 1e-12)
        if bland:
            r = int(ties[np.argmin(self.basis[ties])])
        else:
            r = int(ties[np.argmax(np.abs(alpha[ties]))])
        return t, r

    def _result(self, status: LpStatus) -> LpSolution:
        x = self.value[: self.n].copy()
        residual = self.lp.primal_residual(x) if x.size else 0.0
        return LpSolution(
            x=x,
            objective=float(self.lp.c @ x),
            status=status,
            iterations=self.iterations,
            primal_residual=residual,
            metadata={"crashed": self.crashed},
        )

    # -------------------------------------------------------------------------
    # Main loop
    # -------------------------------------------------------------------------

    def run(self) -> LpSolution:
        if np.any(self.lower > self.upper):
            return self._result(LpStatus.INFEASIBLE)

        stall = 0
        bland = False
        while True:
            if self.iterations >= self.max_iterations or (
                self.deadline is not None and time.perf_counter() > self.deadline
            ):
                return self._result(LpStatus.INTERRUPTED)

            xb = self.value[self.basis]
            lb = self.lower[self.basis]
            ub = self.upper[self.basis]
            with np.errstate(invalid="ignore"):
                below = xb < lb - PRIMAL_TOLERANCE * (1.0 + np.abs(lb))
                above = xb > ub + PRIMAL_TOLERANCE * (1.0 + np.abs(ub))
            phase_one = bool(below.any() or above.any())

            if phase_one:
                cost = np.zeros(self.n + self.m)
                cb = np.where(below, -1.0, np.where(above, 1.0, 0.0))
                work_lo = np.where(below, -np.inf, np.where(above, ub, lb))
                work_hi = np.where(below, lb, np.where(above, np.inf, ub))
            else:
                cost = self.cost
                cb = self.cost[self.basis]
                work_lo, work_hi = lb, ub

            y = self.factor.btran(cb)
            d = cost - self.full_t @ y
            d[self.basis] = 0.0

            q, direction = self._choose_entering(d, bland)
            if q is None:
                if len(self.factor):
                    # Confirm on a fresh factorization before declaring the outcome
                    self._refactor()
                    continue
                status = LpStatus.INFEASIBLE if phase_one else LpStatus.OPTIMAL
                return self._result(status)

            alpha = self._column(q)
            delta = -direction * alpha
            t, r = self._ratio_test(delta, alpha, work_lo, work_hi, bland)
            flip = self.upper[q] - self.lower[q]

            if r is None and not np.isfinite(flip):
                if phase_one:
                    raise NumericalBreakdown(
                        "phase-one direction without a blocking bound",
                        context={"iterations": self.iterations},
                    )
                return self._result(LpStatus.UNBOUNDED)

            if flip <= t:
                step = flip
                self.value[self.basis] += delta * step
                if direction > 0:
                    self.value[q], self.state[q] = self.upper[q], AT_UPPER
                else:
                    self.value[q], self.state[q] = self.lower[q], AT_LOWER
            else:
                step = t
                self.value[self.basis] += delta * step
                self.value[q] += direction * step
                leaving = int(self.basis[r])
                bound = work_lo[r] if delta[r] < 0 else work_hi[r]
                self.value[leaving] = bound
                self.state[leaving] = AT_LOWER if bound == self.lower[leaving] else AT_UPPER
                self.factor.update(r, alpha)
                self.basis[r] = q
                self.state[q] = BASIC
                if len(self.factor) >= self.refactor_every:
                    self._refactor()

            self.iterations += 1
            if step <= 1e-12:
                stall += 1
                if stall >= STALL_LIMIT and not bland:
                    bland = True
                    logger.debug("Degenerate stall, switching to Bland", iteration=self.iterations)
            else:
                stall = 0
                bland = False


def solve_lp(
    program: Union[LinearProgram, MilpProblem],
    max_iterations: Optional[int] = None,
    deadline: Optional[float] = None,
    refactor_every: int = REFACTOR_EVERY,
    crash: bool = True,
) -> LpSolution:
    """
    Solve a linear program (a MilpProblem is solved as its continuous relaxation).

    Args:
        program: The program to solve
        max_iterations: Pivot limit (default 50 * (rows + columns) + 1000)
        deadline: time.perf_counter() value after which the solve is interrupted
        refactor_every: Pivots between basis refactorizations
        crash: Start from the triangular crash basis instead of the slack basis

    Returns:
        LpSolution; status Interrupted when a limit stopped the solve
    """
    lp = LinearProgram.from_milp(program) if isinstance(program, MilpProblem) else program
    m, n = lp.shape
    if max_iterations is None:
        max_iterations = 50 * (m + n) + 1000
    solution = _BoundedSimplex(lp, max_iterations, deadline, refactor_every, crash).run()
    logger.debug(
        "LP solved",
        status=solution.status.value,
        iterations=solution.iterations,
        crashed=solution.metadata["crashed"],
        objective=solution.objective,
    )
    return solution
