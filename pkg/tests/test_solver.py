"""
Tests for the revised simplex and the branch-and-bound search, including the
brute-force equivalence check on small generated instances.
"""

import os
import time

import numpy as np
import pytest

from tests.helpers import TINY_OPTIMUM, solve_exact, tiny_spec


def _single_binary_problem():
    """min 2x + b  s.t.  x + b >= 1,  x in [0, 10],  b binary."""
    from src.network.milp import ConstraintRow, MilpProblem, Relation

    return MilpProblem(
        n_vars=2,
        objective=np.array([2.0, 1.0]),
        rows=[ConstraintRow("cover[0]", ((0, 1.0), (1, 1.0)), Relation.GE, 1.0, "cover")],
        var_lower=np.zeros(2),
        var_upper=np.array([10.0, 1.0]),
        integrality=np.array([False, True]),
        var_index=None,
    )


class TestSimplex:
    """Tests for solve_lp."""

    def test_single_bound(self):
        """min x s.t. x >= 3 on [0, 10] stops at 3."""
        from src.solver.simplex import LinearProgram, LpStatus, solve_lp

        lp = LinearProgram.from_rows([1.0], [([1.0], ">=", 3.0)], [(0.0, 10.0)])
        result = solve_lp(lp)

        assert result.status == LpStatus.OPTIMAL
        assert result.objective == pytest.approx(3.0)
        assert result.x[0] == pytest.approx(3.0)

    def test_face_of_optima(self):
        """min -x-y s.t. x+y <= 1 reaches -1 at some point of the face."""
        from src.solver.simplex import LinearProgram, LpStatus, solve_lp

        lp = LinearProgram.from_rows(
            [-1.0, -1.0], [([1.0, 1.0], "<=", 1.0)], [(0.0, 1.0), (0.0, 1.0)]
        )
        result = solve_lp(lp)

        assert result.status == LpStatus.OPTIMAL
        assert result.objective == pytest.approx(-1.0)
        assert result.x.sum() == pytest.approx(1.0)
        assert result.primal_residual <= 1e-9

    def test_infeasible(self):
        """x >= 2 and x <= 1 is empty."""
        from src.solver.simplex import LinearProgram, LpStatus, solve_lp

        lp = LinearProgram.from_rows(
            [1.0], [([1.0], ">=", 2.0), ([1.0], "<=", 1.0)], [(0.0, 10.0)]
        )
        assert solve_lp(lp).status == LpStatus.INFEASIBLE

    def test_unbounded(self):
        """min -x with x free above is unbounded."""
        from src.solver.simplex import LinearProgram, LpStatus, solve_lp

        lp = LinearProgram.from_rows([-1.0], [([1.0], ">=", 0.0)], [(0.0, np.inf)])
        assert solve_lp(lp).status == LpStatus.UNBOUNDED

    def test_equality_rows(self):
        """Equality rows are met to solver tolerance."""
        from src.solver.simplex import LinearProgram, LpStatus, solve_lp

        lp = LinearProgram.from_rows(
            [1.0, 2.0, 3.0],
            [([1.0, 1.0, 1.0], "=", 6.0), ([1.0, -1.0, 0.0], "=", 1.0)],
            [(0.0, 5.0)] * 3,
        )
        result = solve_lp(lp)

        assert result.status == LpStatus.OPTIMAL
        np.testing.assert_allclose(result.x, [3.5, 2.5, 0.0], atol=1e-9)
        assert result.objective == pytest.approx(8.5)

    def test_matches_scipy_on_relaxations(self):
        """Relaxation optima agree with HiGHS on generated instances."""
        from scipy.optimize import linprog

        from src.network.instance import generate_instance
        from src.network.milp import build_stage1
        from src.solver.simplex import LinearProgram, LpStatus, solve_lp

        for seed in range(5):
            problem = build_stage1(generate_instance(seed, 3, 3, 3))
            lp = LinearProgram.from_milp(problem)
            ours = solve_lp(lp)

            A = problem.matrix.toarray()
            lo, hi = problem.row_bounds
            eq = lo == hi
            ub = np.isfinite(hi) & ~eq
            lb = np.isfinite(lo) & ~eq
            ref = linprog(
                problem.objective,
                A_ub=np.vstack([A[ub], -A[lb]]),
                b_ub=np.concatenate([hi[ub], -lo[lb]]),
                A_eq=A[eq] if eq.any() else None,
                b_eq=lo[eq] if eq.any() else None,
                bounds=list(zip(problem.var_lower, problem.var_upper)),
                method="highs",
            )
            assert ours.status == LpStatus.OPTIMAL
            assert ours.objective == pytest.approx(ref.fun, rel=1e-7, abs=1e-7)

    def test_iteration_limit_interrupts(self):
        """A pivot limit of zero returns Interrupted."""
        from src.network.milp import build_stage1
        from src.solver.simplex import LpStatus, solve_lp

        result = solve_lp(build_stage1(tiny_spec()), max_iterations=0)
        assert result.status == LpStatus.INTERRUPTED

    def test_crash_does_not_change_optimum(self):
        """Crash and slack starts reach the same relaxation optimum."""
        from src.network.instance import generate_instance
        from src.network.milp import build_stage1
        from src.solver.simplex import LpStatus, solve_lp

        crashed = 0
        for seed in range(4):
            problem = build_stage1(generate_instance(seed, 4, 4, 4))
            warm = solve_lp(problem)
            cold = solve_lp(problem, crash=False)

            assert warm.status == cold.status == LpStatus.OPTIMAL
            assert warm.objective == pytest.approx(cold.objective, rel=1e-9, abs=1e-9)
            assert warm.primal_residual <= 1e-7
            assert cold.metadata["crashed"] == 0
            crashed += warm.metadata["crashed"]
        assert crashed > 0

    def test_frequent_refactors(self):
        """Refactoring every few pivots leaves the optimum unchanged."""
        from src.network.instance import generate_instance
        from src.network.milp import build_stage1
        from src.solver.simplex import solve_lp

        problem = build_stage1(generate_instance(3, 4, 4, 4))
        assert solve_lp(problem, refactor_every=2).objective == pytest.approx(
            solve_lp(problem).objective, rel=1e-9, abs=1e-9
        )


class TestBasisFactor:
    """Tests for the LU factors with an eta file."""

    @staticmethod
    def _updated(seed: int, updates: int):
        import scipy.sparse as sp

        from src.solver.simplex import BasisFactor

        rng = np.random.default_rng(seed)
        m = 8
        dense = rng.normal(size=(m, m)) + 4.0 * np.eye(m)
        factor = BasisFactor(sp.csc_matrix(dense))
        for _ in range(updates):
            column = rng.normal(size=m)
            alpha = factor.ftran(column)
            r = int(np.argmax(np.abs(alpha)))
            factor.update(r, alpha)
            dense[:, r] = column
        return factor, dense, rng

    def test_solves_match_dense(self):
        """ftran and btran agree with a dense solve after several updates."""
        factor, dense, rng = self._updated(5, 6)
        v = rng.normal(size=dense.shape[0])

        assert len(factor) == 6
        np.testing.assert_allclose(
            factor.ftran(v), np.linalg.solve(dense, v), rtol=1e-9, atol=1e-10
        )
        np.testing.assert_allclose(
            factor.btran(v), np.linalg.solve(dense.T, v), rtol=1e-9, atol=1e-10
        )

    def test_fresh_factor(self):
        """Without updates the solves are plain LU solves."""
        factor, dense, rng = self._updated(9, 0)
        v = rng.normal(size=dense.shape[0])

        assert len(factor) == 0
        assert factor.condition >= 1.0
        np.testing.assert_allclose(dense @ factor.ftran(v), v, atol=1e-10)

    def test_singular_basis(self):
        """A singular matrix is a numerical breakdown."""
        import scipy.sparse as sp

        from src.solver.simplex import BasisFactor, NumericalBreakdown

        with pytest.raises(NumericalBreakdown):
            BasisFactor(sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 4.0]])))

    def test_empty_basis(self):
        """A program without rows has an empty basis."""
        import scipy.sparse as sp

        from src.solver.simplex import BasisFactor

        factor = BasisFactor(sp.csc_matrix((0, 0)))
        assert factor.ftran(np.zeros(0)).shape == (0,)
        assert factor.btran(np.zeros(0)).shape == (0,)


class TestBranchAndBound:
    """Tests for solve_milp."""

    def test_tiny_optimum(self):
        """The hand-checked 2x2x2 fixture solves to 780."""
        from src.network.milp import SolveStatus

        _, result, sol = solve_exact(tiny_spec())

        assert result.status == SolveStatus.OPTIMAL
        assert result.objective == pytest.approx(TINY_OPTIMUM, rel=1e-9)
        assert sol.tc == pytest.approx(TINY_OPTIMUM, rel=1e-9)
        assert sol.y.tolist() == [True, False]

    def test_integral_root(self):
        """An integral relaxation needs a single node."""
        from src.network.milp import SolveStatus
        from src.solver.branch_and_bound import solve_milp

        result = solve_milp(_single_binary_problem())

        assert result.status == SolveStatus.OPTIMAL
        assert result.nodes_explored == 1
        assert result.objective == pytest.approx(1.0)
        assert result.gap == 0.0

    def test_zero_time_limit(self):
        """A zero time limit returns TimeLimit without an incumbent."""
        from src.network.milp import SolveStatus, build_stage1
        from src.solver.branch_and_bound import SolverConfig, solve_milp

        result = solve_milp(build_stage1(tiny_spec()), SolverConfig(time_limit_seconds=0))

        assert result.status == SolveStatus.TIME_LIMIT
        assert not result.has_incumbent
        assert result.nodes_explored == 0

    def test_infeasible_instance(self):
        """Outbound capacity below demand exhausts the tree without a solution."""
        from src.network.milp import SolveStatus, build_stage1
        from src.solver.branch_and_bound import solve_milp

        spec = tiny_spec(q_upper_jk=[[10.0, 10.0], [10.0, 10.0]])
        result = solve_milp(build_stage1(spec))

        assert result.status == SolveStatus.INFEASIBLE
        assert not result.has_incumbent

    def test_node_limit(self):
        """A node limit with an incumbent reports FeasibleWithGap or Optimal."""
        from src.network.instance import generate_instance
        from src.network.milp import SolveStatus, build_stage1
        from src.solver.branch_and_bound import SolverConfig, solve_milp

        problem = build_stage1(generate_instance(3, 4, 4, 4))
        result = solve_milp(problem, SolverConfig(node_limit=2, gap_tolerance=1e-9))

        assert result.nodes_explored <= 2
        if result.has_incumbent:
            assert result.status in (SolveStatus.FEASIBLE_WITH_GAP, SolveStatus.OPTIMAL)
        else:
            assert result.status == SolveStatus.TIME_LIMIT

    def test_traces_are_monotone(self):
        """The global bound never decreases and each new incumbent improves."""
        from src.network.instance import generate_instance
        from src.network.milp import build_stage1
        from src.solver.branch_and_bound import SolverConfig, solve_milp

        problem = build_stage1(generate_instance(5, 3, 3, 3))
        result = solve_milp(problem, SolverConfig(gap_tolerance=1e-9))

        bounds = [b for b in result.bound_trace if np.isfinite(b)]
        assert all(b2 >= b1 - 1e-9 for b1, b2 in zip(bounds, bounds[1:]))
        incumbents = result.incumbent_trace
        assert all(b < a for a, b in zip(incumbents, incumbents[1:]))
        assert result.bound <= result.objective + 1e-9

    def test_deterministic(self):
        """Two solves of the same program explore the same tree."""
        from src.network.instance import generate_instance
        from src.network.milp import build_stage1
        from src.solver.branch_and_bound import SolverConfig, solve_milp

        problem = build_stage1(generate_instance(8, 3, 3, 3))
        cfg = SolverConfig(gap_tolerance=1e-9)
        a = solve_milp(problem, cfg)
        b = solve_milp(problem, cfg)

        assert a.nodes_explored == b.nodes_explored
        np.testing.assert_array_equal(a.x, b.x)

    def test_incumbents_are_feasible(self):
        """Every returned incumbent meets all rows to 1e-6 (scaled)."""
        from src.network.instance import generate_instance
        from src.network.milp import build_stage1
        from src.solver.branch_and_bound import solve_milp

        for seed in range(100):
            sizes = (2, 2, 2) if seed % 2 else (3, 2, 3)
            problem = build_stage1(generate_instance(seed, *sizes))
            result = solve_milp(problem)
            assert result.has_incumbent, seed
            assert problem.row_violations(result.x).max() <= 1e-6, seed
            assert problem.bound_violation(result.x) <= 1e-9, seed


class TestBruteForceEquivalence:
    """solve_milp against exhaustive enumeration of the binary patterns."""

    def test_pattern_count(self):
        """2x2x2 has 289 patterns that respect X <= Y."""
        from src.network.milp import build_stage1
        from tests.oracles import binary_patterns

        assert sum(1 for _ in binary_patterns(build_stage1(tiny_spec()))) == 289

    def test_tiny_fixture(self):
        """Enumeration confirms the hand-computed optimum."""
        from src.network.milp import build_stage1
        from tests.oracles import brute_force_optimum

        best, tried = brute_force_optimum(build_stage1(tiny_spec()))
        assert best == pytest.approx(TINY_OPTIMUM, rel=1e-9)
        assert tried == 289

    def test_generated_instances(self):
        """20 seeded 2x2x2 instances match the enumeration to 1e-6 relative."""
        from src.network.instance import generate_instance
        from src.network.milp import build_stage1
        from src.solver.branch_and_bound import SolverConfig, solve_milp
        from tests.oracles import brute_force_optimum

        cfg = SolverConfig(gap_tolerance=1e-9)
        for seed in range(20):
            problem = build_stage1(generate_instance(seed, 2, 2, 2))
            expected, _ = brute_force_optimum(problem)
            result = solve_milp(problem, cfg)
            assert result.objective == pytest.approx(expected, rel=1e-6), seed


@pytest.mark.skipif(os.environ.get("SCN_RUN_SLOW") != "1", reason="set SCN_RUN_SLOW=1")
class TestFullScale:
    """20x20x20 stage-1 solve."""

    def test_reaches_incumbent(self):
        """Default settings reach a feasible incumbent within the time limit."""
        from src.network.instance import generate_instance
        from src.network.milp import SolveStatus, build_stage1
        from src.solver.branch_and_bound import SolverConfig, solve_milp

        problem = build_stage1(generate_instance(42, 20, 20, 20))
        start = time.perf_counter()
        result = solve_milp(problem, SolverConfig(time_limit_seconds=60))

        assert time.perf_counter() - start < 90
        assert result.has_incumbent
        assert result.status in (
            SolveStatus.OPTIMAL,
            SolveStatus.FEASIBLE_WITH_GAP,
            SolveStatus.TIME_LIMIT,
        )
        assert problem.row_violations(result.x).max() <= 1e-6
