"""
Tests for difference matrices, the deviation table, CSV export and the run manifest.
"""

import json
import math

import numpy as np
import pytest

from tests.helpers import solve_exact, tiny_spec


@pytest.fixture(scope="module")
def tiny_solution():
    _, _, sol = solve_exact(tiny_spec())
    return sol


def _line_solution(q_ij):
    """Stage-1 solution with one plant and the given 1 x J shipments."""
    from src.network.milp import SolveStatus, Stage1Solution

    q_ij = np.array(q_ij, dtype=float).reshape(1, -1)
    n_j = q_ij.shape[1]
    return Stage1Solution(
        p=q_ij.sum(axis=1),
        q_ij=q_ij,
        q_jk=np.zeros((n_j, 1)),
        w=np.zeros(n_j),
        y=np.ones(n_j, dtype=bool),
        x_ij=np.ones((1, n_j), dtype=bool),
        x_jk=np.zeros((n_j, 1), dtype=bool),
        tc=0.0,
        status=SolveStatus.OPTIMAL,
        gap=0.0,
    )


def _fixed_ensemble(det, q_ij_mean, label="fixed"):
    """One-replicate ensemble whose mean shipments are q_ij_mean."""
    from src.stochastic.ensemble import NoiseEnsemble
    from src.stochastic.noise import NoiseFamily, NoiseSpec

    q_ij_mean = np.array(q_ij_mean, dtype=float).reshape(det.q_ij.shape)
    return NoiseEnsemble(
        noise=NoiseSpec(family=NoiseFamily.GAUSSIAN, label=label),
        n=1,
        seed=0,
        means={"P": det.p[None], "Qij": q_ij_mean[None], "Qjk": det.q_jk[None]},
        feasible=np.array([True]),
        max_violation=np.zeros(1),
        tc=np.zeros(1),
        tc1=None,
    )


class TestDiffMatrix:
    """Tests for diff_matrix and deviation_table."""

    def test_noiseless_is_zero(self, tiny_solution):
        """Scale 0 gives an all-zero difference for every group."""
        from src.report import diff_matrix
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NOISE_GROUPS, NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.LOGNORMAL, scale=0.0)
        ens = run_ensemble(tiny_spec(), tiny_solution, noise, EnsembleConfig(n=3))

        for group in NOISE_GROUPS:
            matrix = diff_matrix(tiny_solution, ens, group)
            assert not matrix.values.any()
        assert diff_matrix(tiny_solution, ens, "P").values.shape == (2, 1)
        assert diff_matrix(tiny_solution, ens).values.shape == (2, 2)

    def test_unsigned_pareto_is_nonpositive(self, tiny_solution):
        """Strictly positive noise only raises flows, so det - mean < 0."""
        from src.report import diff_matrix
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.PARETO, signed=False, scale=0.1, pareto_xmax=10.0)
        cfg = EnsembleConfig(n=4, include_infeasible=True)
        ens = run_ensemble(tiny_spec(), tiny_solution, noise, cfg)

        assert np.all(diff_matrix(tiny_solution, ens, "Qij").values < 0)
        assert np.all(diff_matrix(tiny_solution, ens, "Qjk").values < 0)

    def test_unknown_group(self, tiny_solution):
        """Only P, Qij and Qjk have difference matrices."""
        from src.report import diff_matrix

        ens = _fixed_ensemble(tiny_solution, tiny_solution.q_ij)
        with pytest.raises(ValueError):
            diff_matrix(tiny_solution, ens, "W")

    def test_deviation_of_two_cells(self):
        """Differences [0, 2] give a sample deviation of sqrt(2)."""
        from src.report import deviation_table

        det = _line_solution([5.0, 5.0])
        table = deviation_table(det, [_fixed_ensemble(det, [5.0, 3.0], "a")])

        assert table.labels == ["a"]
        assert table.sigma[0] == pytest.approx(math.sqrt(2.0), rel=1e-15)
        assert table.as_dict() == {"a": table.sigma[0]}

    def test_single_cell(self):
        """A 1 x 1 matrix has no sample deviation."""
        from src.report import SingleCell, deviation_table

        det = _line_solution([5.0])
        with pytest.raises(SingleCell):
            deviation_table(det, [_fixed_ensemble(det, [4.0])])


class TestExport:
    """Tests for export_csv and the readers."""

    def test_matrix_layout(self, tmp_path):
        """A 2 x 2 matrix is a header plus two rows."""
        from src.report import DiffMatrix, export_csv

        matrix = DiffMatrix(group="Qij", values=np.array([[0.1, -2.0], [3.5, 0.0]]))
        text = export_csv(matrix, tmp_path / "m.csv").read_text()
        lines = text.splitlines()

        assert len(lines) == 3
        assert lines[0] == "row,0,1"
        assert lines[1] == "0,0.10000000000000001,-2"
        assert "\r" not in text

    def test_round_trip(self, tmp_path):
        """17 significant digits parse back to the same doubles."""
        from src.report import DiffMatrix, export_csv, read_matrix_csv

        values = np.random.default_rng(0).normal(0.0, 100.0, (4, 5))
        path = export_csv(DiffMatrix("Qjk", values), tmp_path / "m.csv")
        np.testing.assert_array_equal(read_matrix_csv(path), values)

    def test_deviation_csv(self, tmp_path):
        """The deviation table has label and sigma columns."""
        from src.report import DeviationTable, export_csv, read_table_csv

        table = DeviationTable(labels=["gaussian", "lognormal"], sigma=np.array([1.5, 2.25]))
        frame = read_table_csv(export_csv(table, tmp_path / "d.csv"))

        assert list(frame.columns) == ["label", "sigma"]
        assert frame["sigma"].tolist() == [1.5, 2.25]

    def test_unwritable_destination(self, tmp_path):
        """Writing below a regular file raises IoFailure."""
        from src.report import DiffMatrix, IoFailure, export_csv

        blocker = tmp_path / "file.txt"
        blocker.write_text("x")
        with pytest.raises(IoFailure):
            export_csv(DiffMatrix("Qij", np.zeros((2, 2))), blocker / "m.csv")

    def test_missing_file(self, tmp_path):
        """Reading a missing CSV raises IoFailure."""
        from src.report import IoFailure, read_matrix_csv

        with pytest.raises(IoFailure):
            read_matrix_csv(tmp_path / "absent.csv")


class TestManifest:
    """Tests for write_manifest and write_report."""

    def test_deterministic(self, tmp_path):
        """Two manifests over the same files are byte-identical."""
        from src.report import sha256_file, write_manifest

        (tmp_path / "sub").mkdir()
        a = tmp_path / "a.txt"
        b = tmp_path / "sub" / "b.txt"
        a.write_text("alpha")
        b.write_text("beta")

        first = write_manifest(tmp_path, "abc", {"noise": 7, "instance": 42}, [b, a]).read_bytes()
        second = write_manifest(tmp_path, "abc", {"instance": 42, "noise": 7}, [a, b]).read_bytes()

        assert first == second
        data = json.loads(first)
        assert list(data["files"]) == ["a.txt", "sub/b.txt"]
        assert data["files"]["a.txt"] == sha256_file(a)
        assert data["seeds"] == {"instance": 42, "noise": 7}

    def test_write_report(self, tiny_solution, tmp_path):
        """Every CSV and the plot script land in the report directory."""
        from src.report import read_matrix_csv, write_report
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        cfg = EnsembleConfig(n=3, include_infeasible=True)
        ensembles = [
            run_ensemble(tiny_spec(), tiny_solution, NoiseSpec(family=f, scale=0.2), cfg)
            for f in (NoiseFamily.GAUSSIAN, NoiseFamily.LOGNORMAL)
        ]
        written = write_report(tmp_path, tiny_solution, ensembles, det_tc1=800.0)
        names = {p.name for p in written}

        for label in ("gaussian", "lognormal"):
            for group in ("P", "Qij", "Qjk"):
                assert f"diff_{group}_{label}.csv" in names
        for name in ("deviation.csv", "ensembles.csv", "production.csv", "costs.csv"):
            assert name in names
        assert "plot_report.py" in names
        assert read_matrix_csv(tmp_path / "diff_Qij_gaussian.csv").shape == (2, 2)
        costs = (tmp_path / "costs.csv").read_text().splitlines()
        assert costs[0] == "label,tc,tc1"
        assert costs[1].startswith("deterministic,")
