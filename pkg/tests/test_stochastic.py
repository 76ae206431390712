"""
Tests for the noise lab: samplers, perturbation, the feasibility check,
ensemble aggregates, parallel determinism and tensor dumps.
"""

import math

import numpy as np
import pytest

from tests.helpers import solve_exact, tiny_spec


@pytest.fixture(scope="module")
def tiny_solution():
    _, _, sol = solve_exact(tiny_spec())
    return sol


class _FixedStream:
    """Stand-in Generator whose uniform draws are all one value."""

    def __init__(self, value: float):
        self.value = value

    def random(self, size=None):
        return np.full(() if size is None else size, self.value)


class TestSampling:
    """Tests for sample_noise and the Pareto quantile."""

    def test_pareto_hand_value(self):
        """alpha 0.5, x_m 1, U 0.25 gives 0.25^-2 = 16."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, pareto_inverse, sample_noise

        assert pareto_inverse(0.25, alpha=0.5, xm=1.0) == 16.0
        spec = NoiseSpec(family=NoiseFamily.PARETO, pareto_alpha=0.5, signed=False)
        # stream.random() == 0.75 maps to U = 1 - 0.75
        assert sample_noise(spec, _FixedStream(0.75)) == 16.0

    def test_pareto_matches_numerical_inversion(self):
        """The closed-form quantile agrees with root-finding on the CDF."""
        from scipy.optimize import brentq

        from src.stochastic.noise import pareto_inverse

        alpha, xm = 1.7, 2.0
        for u in (0.9, 0.5, 0.1, 0.01):
            root = brentq(lambda x: (xm / x) ** alpha - u, xm, 1e9, xtol=1e-14, rtol=1e-14)
            assert pareto_inverse(u, alpha, xm) == pytest.approx(root, rel=1e-10)

    def test_truncated_pareto_range(self):
        """Truncation keeps every draw within [x_m, x_max]."""
        from src.stochastic.noise import pareto_inverse

        u = np.linspace(1e-12, 1.0, 1001)
        x = pareto_inverse(u, alpha=0.01, xm=1.0, xmax=10.0)

        assert x.min() == pytest.approx(1.0)
        assert x.max() <= 10.0 + 1e-9
        assert np.all(np.diff(x) <= 0)

    def test_zero_scale(self):
        """Scale 0 gives exact zeros for every family."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, noise_stream, sample_noise

        for family in NoiseFamily:
            spec = NoiseSpec(family=family, scale=0.0)
            eta = sample_noise(spec, noise_stream(1, 0, 0, "P"), size=(3, 4))
            assert not eta.any()
            assert sample_noise(spec, noise_stream(1, 0, 0, "P")) == 0.0

    def test_gaussian_mean(self):
        """10^5 Gaussian draws average within 4 / sqrt(10^5) of zero."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, noise_stream, sample_noise

        spec = NoiseSpec(family=NoiseFamily.GAUSSIAN)
        draws = sample_noise(spec, noise_stream(123, 0, 0, "P"), size=100_000)
        assert abs(draws.mean()) <= 4.0 / math.sqrt(100_000)

    def test_signed_lognormal_is_two_sided(self):
        """The sign flip gives both signs; unsigned Lognormal draws are positive."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, noise_stream, sample_noise

        signed = sample_noise(
            NoiseSpec(family=NoiseFamily.LOGNORMAL), noise_stream(5, 0, 0, "Qij"), size=1000
        )
        unsigned = sample_noise(
            NoiseSpec(family=NoiseFamily.LOGNORMAL, signed=False),
            noise_stream(5, 0, 0, "Qij"),
            size=1000,
        )
        assert (signed < 0).any() and (signed > 0).any()
        assert np.all(unsigned > 0)
        np.testing.assert_array_equal(np.abs(signed), unsigned)

    def test_streams_are_distinct(self):
        """Group, replicate and repetition each change the stream."""
        from src.stochastic.noise import noise_stream

        ref = noise_stream(7, 1, 2, "P").random(4)
        assert not np.array_equal(ref, noise_stream(7, 1, 2, "Qij").random(4))
        assert not np.array_equal(ref, noise_stream(7, 2, 1, "P").random(4))
        assert not np.array_equal(ref, noise_stream(8, 1, 2, "P").random(4))
        np.testing.assert_array_equal(ref, noise_stream(7, 1, 2, "P").random(4))

    def test_noise_spec_validation(self):
        """x_max must exceed x_m; default Pareto labels carry alpha."""
        from pydantic import ValidationError

        from src.stochastic.noise import NoiseFamily, NoiseSpec

        with pytest.raises(ValidationError):
            NoiseSpec(family=NoiseFamily.PARETO, pareto_xm=2.0, pareto_xmax=1.0)
        assert NoiseSpec(family=NoiseFamily.PARETO, pareto_alpha=0.05).name == "pareto_a0.05"


class TestPerturb:
    """Tests for perturb and check_feasibility."""

    def test_zero_scale_is_identity(self, tiny_solution):
        """Scale 0 leaves every value untouched."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, perturb

        pert = perturb(tiny_solution, NoiseSpec(family=NoiseFamily.GAUSSIAN, scale=0.0), 1, 0, 0)

        np.testing.assert_array_equal(pert.p, tiny_solution.p)
        np.testing.assert_array_equal(pert.q_ij, tiny_solution.q_ij)
        np.testing.assert_array_equal(pert.q_jk, tiny_solution.q_jk)

    def test_deterministic(self, tiny_solution):
        """The same (seed, e, e') twice gives bit-identical values."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, perturb

        noise = NoiseSpec(family=NoiseFamily.LOGNORMAL)
        a = perturb(tiny_solution, noise, 9, 3, 4)
        b = perturb(tiny_solution, noise, 9, 3, 4)
        for group, values in a.groups().items():
            np.testing.assert_array_equal(values, b.groups()[group])

    def test_one_draw_per_cell(self, tiny_solution):
        """2x2x2 gets 2 + 4 + 4 draws, one per continuous cell; binaries stay."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, noise_stream, perturb

        noise = NoiseSpec(family=NoiseFamily.GAUSSIAN)
        pert = perturb(tiny_solution, noise, 2, 0, 1)
        base = {"P": tiny_solution.p, "Qij": tiny_solution.q_ij, "Qjk": tiny_solution.q_jk}

        changed = 0
        for group, values in pert.groups().items():
            stream = noise_stream(2, 0, 1, group)
            eta = stream.normal(0.0, 1.0, size=values.shape)
            sign = np.where(stream.random(size=values.shape) < 0.5, -1.0, 1.0)
            np.testing.assert_array_equal(values, base[group] + eta * sign)
            changed += int(np.count_nonzero(values != base[group]))
        assert changed == 10
        np.testing.assert_array_equal(pert.y, tiny_solution.y)
        np.testing.assert_array_equal(pert.x_ij, tiny_solution.x_ij)

    def test_unsigned_pareto_raises_flows(self, tiny_solution):
        """Unsigned Pareto noise pushes every flow above its deterministic value."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, perturb

        noise = NoiseSpec(family=NoiseFamily.PARETO, signed=False, pareto_alpha=2.0, scale=0.5)
        pert = perturb(tiny_solution, noise, 4, 0, 0)

        assert np.all(pert.q_ij >= tiny_solution.q_ij + 0.5)
        assert np.all(pert.q_jk >= tiny_solution.q_jk + 0.5)

    def test_unperturbed_is_feasible(self, tiny_solution):
        """The stage-1 optimum passes the check with no violations."""
        from src.stochastic.noise import PerturbedSolution, base_groups, check_feasibility

        pert = PerturbedSolution.from_groups(tiny_solution, base_groups(tiny_solution))
        feasible, violations = check_feasibility(pert, tiny_spec())

        assert feasible
        assert violations == []

    def test_production_bound_breach(self, tiny_solution):
        """Pushing P0 above its capacity names the plant-0 bound."""
        from src.stochastic.noise import PerturbedSolution, base_groups, check_feasibility

        groups = dict(base_groups(tiny_solution))
        groups["P"] = tiny_solution.p + np.array([150.0, 0.0])
        feasible, violations = check_feasibility(
            PerturbedSolution.from_groups(tiny_solution, groups), tiny_spec()
        )
        names = [name for name, _ in violations]

        assert not feasible
        assert "production_upper[0]" in names
        assert "production_upper[1]" not in names
        assert all(residual > 1e-6 for _, residual in violations)

    def test_one_percent_overrun(self, tiny_solution):
        """p = 1.01 * p_upper fails at the ensemble default tolerance."""
        from src.stochastic.ensemble import EnsembleConfig
        from src.stochastic.noise import PerturbedSolution, base_groups, check_feasibility

        spec = tiny_spec()
        groups = dict(base_groups(tiny_solution))
        groups["P"] = np.array([1.01 * spec.p_upper[0], tiny_solution.p[1]])
        feasible, violations = check_feasibility(
            PerturbedSolution.from_groups(tiny_solution, groups),
            spec,
            tol=EnsembleConfig().tolerance,
        )
        residuals = dict(violations)

        assert not feasible
        assert residuals["production_upper[0]"] == pytest.approx(1.0 / 101.0)
        assert "production_upper[1]" not in residuals

    def test_perturb_keeps_draws(self, tiny_solution):
        """perturb exposes eta and X_ee' = X + eta cell by cell."""
        from src.stochastic.noise import NoiseFamily, NoiseSpec, perturb

        noise = NoiseSpec(family=NoiseFamily.LOGNORMAL, scale=0.3)
        pert = perturb(tiny_solution, noise, 5, 1, 2)

        np.testing.assert_array_equal(pert.p, tiny_solution.p + pert.eta["P"])
        np.testing.assert_array_equal(pert.q_jk, tiny_solution.q_jk + pert.eta["Qjk"])

        hooked = perturb(
            tiny_solution, noise, 5, 1, 2, draw_fn=lambda group, e, e_inner, shape: np.ones(shape)
        )
        np.testing.assert_array_equal(hooked.q_ij, tiny_solution.q_ij + 1.0)


class TestAggregates:
    """Tests for ensemble_mean, ensemble_rms and cell_rms."""

    def test_mean_hand_values(self):
        """A singleton and a short row."""
        from src.stochastic.ensemble import ensemble_mean

        assert ensemble_mean([4.0]) == 4.0
        assert ensemble_mean([1.0, 2.0, 3.0]) == 2.0
        with pytest.raises(ValueError):
            ensemble_mean([])

    def test_mean_against_two_pass(self):
        """Random rows agree with a compensated two-pass mean to 1e-12."""
        from src.stochastic.ensemble import ensemble_mean
        from tests.oracles import two_pass_mean

        rng = np.random.default_rng(21)
        for _ in range(20):
            row = rng.normal(100.0, 50.0, 10)
            assert ensemble_mean(row) == pytest.approx(two_pass_mean(row), abs=1e-12)

    def test_mean_keeps_non_finite_cells(self):
        """A cell with an infinite draw keeps its first-pass mean; the others are refined."""
        from src.stochastic.ensemble import ensemble_mean

        out = ensemble_mean(np.array([[np.inf, 1.0], [2.0, 3.0]]))

        assert out[0] == np.inf
        assert out[1] == 2.0

    def test_rms_hand_values(self):
        """[2, 8] gives 4 and [1, 2, 3] gives sqrt(11/3)."""
        from src.stochastic.ensemble import ensemble_rms

        assert ensemble_rms([2.0, 8.0]) == 4.0
        assert ensemble_rms([1.0, 2.0, 3.0]) == pytest.approx(math.sqrt(11.0 / 3.0), rel=1e-15)

    def test_rms_constant_vector(self):
        """A constant vector returns its absolute value."""
        from src.stochastic.ensemble import ensemble_rms

        assert ensemble_rms([-3.0] * 6) == 3.0

    def test_rms_against_oracle(self):
        """Random positive means agree with explicit pair enumeration."""
        from src.stochastic.ensemble import ensemble_rms
        from tests.oracles import pairwise_rms

        rng = np.random.default_rng(4)
        values = rng.uniform(1.0, 50.0, 12)
        assert ensemble_rms(values) == pytest.approx(pairwise_rms(values), rel=1e-12)

    def test_negative_radicand(self):
        """[1, -2] reports the raw radicand -2."""
        from src.stochastic.ensemble import NegativeRadicand, ensemble_rms

        with pytest.raises(NegativeRadicand) as info:
            ensemble_rms([1.0, -2.0])
        assert info.value.radicand == -2.0

    def test_rms_needs_two(self):
        """A single mean has no pairs."""
        from src.stochastic.ensemble import ensemble_rms

        with pytest.raises(ValueError):
            ensemble_rms([1.0])

    def test_cell_rms(self):
        """Per-cell RMS matches the scalar form; negative cells become NaN."""
        from src.stochastic.ensemble import cell_rms

        means = np.array([[2.0, 1.0], [8.0, -2.0]])
        out, negative = cell_rms(means)

        assert out[0] == pytest.approx(4.0)
        assert math.isnan(out[1])
        assert negative == 1


class TestEnsemble:
    """Tests for run_ensemble and its persistence."""

    def test_noiseless(self, tiny_solution):
        """Scale 0 keeps every replicate feasible and the means exact."""
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.GAUSSIAN, scale=0.0)
        ens = run_ensemble(tiny_spec(), tiny_solution, noise, EnsembleConfig(n=5))

        assert ens.feasible_count == 5
        np.testing.assert_array_equal(ens.mean_of("P"), tiny_solution.p)
        np.testing.assert_array_equal(ens.mean_of("Qjk"), tiny_solution.q_jk)
        assert ens.statuses == ["feasible"] * 5

    def test_feasibility_per_injection(self, tiny_solution):
        """Injections of +-200 on P average to X but every one breaches capacity."""
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        def draw(group, e, e_inner, shape):
            if group != "P":
                return np.zeros(shape)
            return np.full(shape, 200.0 if e_inner % 2 == 0 else -200.0)

        cfg = EnsembleConfig(n=4, include_infeasible=True)
        ens = run_ensemble(
            tiny_spec(), tiny_solution, NoiseSpec(family=NoiseFamily.GAUSSIAN), cfg, draw_fn=draw
        )

        np.testing.assert_array_equal(ens.mean_of("P"), tiny_solution.p)
        assert ens.feasible_count == 0
        np.testing.assert_array_equal(ens.passed, np.zeros(4, dtype=int))
        assert ens.summary()["injections_passed"] == 0
        assert np.all(ens.max_violation > cfg.tolerance)

    def test_noiseless_injections_pass(self, tiny_solution):
        """Scale 0 passes all n * n injections."""
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.PARETO, pareto_alpha=0.5, scale=0.0)
        ens = run_ensemble(tiny_spec(), tiny_solution, noise, EnsembleConfig(n=3))

        np.testing.assert_array_equal(ens.passed, [3, 3, 3])
        assert ens.summary()["injections_passed"] == 9

    def test_draw_hook_means(self, tiny_solution):
        """A hand-written 3x3 table averages to its row means."""
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        table = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]

        def draw(group, e, e_inner, shape):
            return np.full(shape, table[e][e_inner])

        cfg = EnsembleConfig(n=3, include_infeasible=True)
        ens = run_ensemble(
            tiny_spec(), tiny_solution, NoiseSpec(family=NoiseFamily.GAUSSIAN), cfg, draw_fn=draw
        )

        for e, row_mean in enumerate([2.0, 5.0, 8.0]):
            np.testing.assert_allclose(ens.means["P"][e], tiny_solution.p + row_mean)
            np.testing.assert_allclose(ens.means["Qij"][e], tiny_solution.q_ij + row_mean)
        np.testing.assert_allclose(ens.replicates["Qjk"][1, 2], tiny_solution.q_jk + 6.0)
        np.testing.assert_allclose(ens.mean_of("P"), tiny_solution.p + 5.0)

    def test_deterministic(self, tiny_solution):
        """Two runs with the same inputs agree exactly."""
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.GAUSSIAN, scale=0.5)
        cfg = EnsembleConfig(n=4, include_infeasible=True)
        a = run_ensemble(tiny_spec(), tiny_solution, noise, cfg)
        b = run_ensemble(tiny_spec(), tiny_solution, noise, cfg)

        for group in a.means:
            np.testing.assert_array_equal(a.means[group], b.means[group])
        np.testing.assert_array_equal(a.feasible, b.feasible)

    def test_worker_count_does_not_matter(self, tiny_solution):
        """One and two worker processes give identical ensembles."""
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.LOGNORMAL, scale=0.5)
        serial = run_ensemble(
            tiny_spec(), tiny_solution, noise, EnsembleConfig(n=4, include_infeasible=True)
        )
        parallel = run_ensemble(
            tiny_spec(),
            tiny_solution,
            noise,
            EnsembleConfig(n=4, include_infeasible=True, workers=2),
        )

        for group in serial.means:
            np.testing.assert_array_equal(serial.means[group], parallel.means[group])
            np.testing.assert_array_equal(serial.replicates[group], parallel.replicates[group])
        np.testing.assert_array_equal(serial.tc, parallel.tc)

    def test_replay_matches_tensor(self, tiny_solution):
        """Any stored replicate can be regenerated on its own."""
        from src.stochastic.ensemble import EnsembleConfig, replay_cell, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.GAUSSIAN)
        cfg = EnsembleConfig(n=3, seed=17, include_infeasible=True)
        ens = run_ensemble(tiny_spec(), tiny_solution, noise, cfg)

        value = replay_cell(noise, 17, 2, 1, "Qjk", (0, 1), tiny_solution.q_jk)
        assert value == ens.replicates["Qjk"][2, 1, 0, 1]

    def test_too_few(self, tiny_solution):
        """n = 1 cannot form a pair."""
        from src.stochastic.ensemble import EnsembleConfig, TooFewFeasible, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        with pytest.raises(TooFewFeasible):
            run_ensemble(
                tiny_spec(),
                tiny_solution,
                NoiseSpec(family=NoiseFamily.GAUSSIAN),
                EnsembleConfig(n=1),
            )

    def test_heavy_pareto_breaks_feasibility(self):
        """alpha = 0.01 at scale 1 leaves some of 100 replicates infeasible on 5x5x5."""
        from src.network.instance import generate_instance
        from src.network.milp import build_stage1, extract_stage1
        from src.solver.branch_and_bound import solve_milp
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        spec = generate_instance(42, 5, 5, 5)
        problem = build_stage1(spec)
        result = solve_milp(problem)
        sol = extract_stage1(problem, result.x, result.status, result.gap)
        noise = NoiseSpec(family=NoiseFamily.PARETO, pareto_alpha=0.01)
        cfg = EnsembleConfig(n=100, include_infeasible=True, store_replicates=False)

        ens = run_ensemble(spec, sol, noise, cfg)
        assert ens.feasible_count < 100
        assert ens.replicates == {}

    def test_stage2_per_replicate(self, tiny_solution):
        """With stage-2 options every replicate carries a TC1 at least its TC."""
        from src.analytics.stage2 import Stage2Options
        from src.stochastic.ensemble import EnsembleConfig, run_ensemble
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.GAUSSIAN, scale=0.1)
        ens = run_ensemble(
            tiny_spec(),
            tiny_solution,
            noise,
            EnsembleConfig(n=3, include_infeasible=True),
            stage2=Stage2Options(),
            realized_demand=np.array([40.0, 90.0]),
        )

        assert ens.tc1 is not None
        assert np.all(ens.tc1 >= ens.tc)


class TestTensorFiles:
    """Tests for the binary dump and ensemble persistence."""

    def test_tensor_layout(self, tmp_path):
        """Header is magic, version, ndim, dims; data is little-endian row-major."""
        import struct

        from src.stochastic.ensemble import TENSOR_MAGIC, dump_tensor, load_tensor

        arr = np.arange(24, dtype=float).reshape(2, 3, 4)
        path = dump_tensor(arr, tmp_path / "t.bin")
        raw = path.read_bytes()

        assert raw[:4] == TENSOR_MAGIC
        assert struct.unpack_from("<II", raw, 4) == (1, 3)
        assert struct.unpack_from("<3Q", raw, 12) == (2, 3, 4)
        assert len(raw) == 12 + 8 * 3 + 8 * 24
        assert struct.unpack_from("<d", raw, 36 + 8 * 5)[0] == 5.0
        np.testing.assert_array_equal(load_tensor(path), arr)

    def test_rejects_other_files(self, tmp_path):
        """A file without the magic bytes is refused."""
        from src.stochastic.ensemble import load_tensor

        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a tensor")
        with pytest.raises(ValueError):
            load_tensor(path)

    def test_save_and_load_ensemble(self, tiny_solution, tmp_path):
        """Saved ensembles load back with the same means, flags and RMS."""
        from src.stochastic.ensemble import (
            EnsembleConfig,
            load_ensemble,
            run_ensemble,
            save_ensemble,
        )
        from src.stochastic.noise import NoiseFamily, NoiseSpec

        noise = NoiseSpec(family=NoiseFamily.GAUSSIAN, label="g", scale=0.5)
        ens = run_ensemble(
            tiny_spec(), tiny_solution, noise, EnsembleConfig(n=3, include_infeasible=True)
        )
        written = save_ensemble(ens, tmp_path, dump_replicates=True)
        back = load_ensemble(tmp_path, "g")

        assert (tmp_path / "g.json") in written
        assert (tmp_path / "g_replicates_Qij.bin").exists()
        for group in ens.means:
            np.testing.assert_array_equal(back.means[group], ens.means[group])
        np.testing.assert_array_equal(back.feasible, ens.feasible)
        np.testing.assert_array_equal(back.passed, ens.passed)
        assert back.rms == ens.rms
        assert back.noise == noise
