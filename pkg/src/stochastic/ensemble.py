"""
Noise ensembles over a solved network.

For outer replicate e = 0..n-1 and inner repetition e' = 0..n-1 every
production/flow cell receives an independent draw. The inner repetitions of a
replicate are averaged into X_bar_e. Feasibility is judged per injection:
each X_ee' is checked against the stage-1 rows and bounds, and replicate e
counts as feasible only when all n of its injections pass. The feasible
replicates feed the pairwise-product RMS.
"""

import itertools
import json
import math
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..analytics.stage2 import NoWarehouseOpen, Stage2Options, run_stage2
from ..errors import SupplyChainError
from ..network.instance import InstanceSpec
from ..network.milp import Stage1Solution, build_stage1, evaluate_total_cost
from ..utils.logger import get_logger
from .noise import (
    NOISE_GROUPS,
    DrawFn,
    NoiseSpec,
    PerturbedSolution,
    base_groups,
    check_feasibility,
    noise_stream,
    perturb,
    sample_noise,
)

logger = get_logger(__name__)

TENSOR_MAGIC = b"SCNT"
TENSOR_VERSION = 1


class TooFewFeasible(SupplyChainError):
    """Fewer than two replicates are usable, so the RMS is undefined."""

    def __init__(self, message: str, ensemble: Optional["NoiseEnsemble"] = None):
        super().__init__(message)
        self.ensemble = ensemble


class NegativeRadicand(SupplyChainError):
    """The mean pairwise product is negative; the RMS has no real value."""

    def __init__(self, radicand: float):
        super().__init__(f"pairwise-product mean is negative: {radicand!r}")
        self.radicand = radicand


class EnsembleConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(default=50, ge=1, description="Outer replicates (and inner repetitions)")
    seed: int = Field(default=7, ge=0, description="Noise seed")
    tolerance: float = Field(
        default=0.005, gt=0, description="Scaled feasibility tolerance per injection"
    )
    include_infeasible: bool = Field(
        default=False, description="Use infeasible replicates in means and RMS"
    )
    store_replicates: bool = Field(default=True, description="Keep the full X_ee' tensors")
    workers: int = Field(default=1, ge=1)


@dataclass
class NoiseEnsemble:
    noise: NoiseSpec
    n: int
    seed: int
    means: Dict[str, np.ndarray]
    feasible: np.ndarray
    max_violation: np.ndarray
    tc: np.ndarray
    tc1: Optional[np.ndarray]
    include_infeasible: bool = False
    replicates: Dict[str, np.ndarray] = field(default_factory=dict)
    rms: Dict[str, float] = field(default_factory=dict)
    cell_rms: Dict[str, np.ndarray] = field(default_factory=dict)
    negative_radicands: Dict[str, int] = field(default_factory=dict)
    # injections (out of n) that passed the check, per replicate
    passed: Optional[np.ndarray] = None

    @property
    def feasible_count(self) -> int:
        return int(np.count_nonzero(self.feasible))

    @property
    def statuses(self) -> List[str]:
        return ["feasible" if f else "infeasible" for f in self.feasible]

    @property
    def selected(self) -> np.ndarray:
        """Replicates that enter means and RMS."""
        return np.ones(self.n, dtype=bool) if self.include_infeasible else self.feasible

    def mean_of(self, group: str) -> np.ndarray:
        """Cell means over the selected X_bar_e."""
        chosen = self.means[group][self.selected]
        if chosen.shape[0] == 0:
            return np.full(self.means[group].shape[1:], np.nan)
        return ensemble_mean(chosen)

    def summary(self) -> Dict[str, Any]:
        sel = self.selected
        return {
            "label": self.noise.name,
            "noise": self.noise.model_dump(mode="json"),
            "n": self.n,
            "seed": self.seed,
            "feasible_count": self.feasible_count,
            "injections_passed": None if self.passed is None else int(self.passed.sum()),
            "statuses": self.statuses,
            "rms": {g: _json_float(v) for g, v in self.rms.items()},
            "negative_radicands": dict(self.negative_radicands),
            "mean_tc": _json_float(float(np.mean(self.tc[sel]))) if sel.any() else None,
            "mean_tc1": (
                _json_float(float(np.nanmean(self.tc1[sel])))
                if self.tc1 is not None and sel.any() and not np.all(np.isnan(self.tc1[sel]))
                else None
            ),
        }


def _json_float(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


# =============================================================================
# Aggregates
# =============================================================================


def ensemble_mean(values: Union[Sequence[float], np.ndarray]) -> Union[float, np.ndarray]:
    """
    (1/N) * sum over the first axis (the stored repetitions), two-pass.

    The first pass gives m = sum / N; the second adds the mean residual
    sum(x - m) / N, which removes most of the rounding of the first sum.
    Cells whose first-pass mean is not finite keep it.
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0 or arr.shape[0] == 0:
        raise ValueError("ensemble_mean needs at least one replicate")
    n = arr.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        first = arr.sum(axis=0) / n
        out = np.where(np.isfinite(first), first + (arr - first).sum(axis=0) / n, first)
    return float(out) if np.ndim(out) == 0 else out


def ensemble_rms(means: Union[Sequence[float], np.ndarray]) -> float:
    """
    sqrt of the mean product over all unordered pairs of replicate means.

    Raises:
        ValueError: fewer than two means
        NegativeRadicand: the mean pairwise product is negative
    """
    values = [float(v) for v in np.asarray(means, dtype=float).ravel()]
    if len(values) < 2:
        raise ValueError("ensemble_rms needs at least two replicate means")
    pairs = math.comb(len(values), 2)
    total = sum(a * b for a, b in itertools.combinations(values, 2))
    radicand = total / pairs
    if radicand < 0:
        raise NegativeRadicand(radicand)
    return math.sqrt(radicand)


def cell_rms(means: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    Per-cell pairwise-product RMS over the first axis.

    Uses sum_{a<b} x_a x_b = ((sum x)^2 - sum x^2) / 2. Cells with a negative
    radicand come back as NaN and are counted.
    """
    n = means.shape[0]
    if n < 2:
        return np.full(means.shape[1:], np.nan), 0
    with np.errstate(invalid="ignore", over="ignore"):
        total = means.sum(axis=0)
        pair_sum = 0.5 * (total * total - (means * means).sum(axis=0))
        radicand = pair_sum / math.comb(n, 2)
    negative = radicand < 0
    out = np.where(negative, np.nan, np.sqrt(np.where(negative, 0.0, radicand)))
    return out, int(np.count_nonzero(negative))


# =============================================================================
# Replicates
# =============================================================================


@dataclass
class _Task:
    spec: InstanceSpec
    sol: Stage1Solution
    noise: NoiseSpec
    cfg: EnsembleConfig
    replicates: List[int]
    stage2: Optional[Stage2Options]
    realized_demand: Optional[np.ndarray]
    safety_factor: float


def _run_replicates(task: _Task, draw_fn: Optional[DrawFn] = None) -> List[Dict[str, Any]]:
    problem = build_stage1(task.spec, task.safety_factor)
    base = base_groups(task.sol)
    n = task.cfg.n
    out = []
    for e in task.replicates:
        record: Dict[str, Any] = {"e": e, "means": {}, "replicates": {}}
        etas = {group: np.empty((n,) + base[group].shape) for group in NOISE_GROUPS}
        passed = 0
        worst = 0.0
        for e_inner in range(n):
            injection = perturb(task.sol, task.noise, task.cfg.seed, e, e_inner, draw_fn)
            ok, violations = check_feasibility(
                injection, task.spec, tol=task.cfg.tolerance, problem=problem
            )
            passed += int(ok)
            worst = max(worst, max((v for _, v in violations), default=0.0))
            for group in NOISE_GROUPS:
                etas[group][e_inner] = injection.eta[group]

        with np.errstate(over="ignore", invalid="ignore"):
            for group in NOISE_GROUPS:
                record["means"][group] = base[group] + ensemble_mean(etas[group])
                if task.cfg.store_replicates:
                    record["replicates"][group] = base[group] + etas[group]
        record["passed"] = passed
        record["feasible"] = passed == n
        record["max_violation"] = worst

        pert = PerturbedSolution.from_groups(task.sol, record["means"])

        with np.errstate(over="ignore", invalid="ignore"):
            tc = evaluate_total_cost(
                task.spec, pert.p, pert.q_ij, pert.q_jk, pert.y, pert.x_ij, pert.x_jk
            )
        record["tc"] = tc
        record["tc1"] = np.nan
        if task.stage2 is not None and np.isfinite(tc):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    report = run_stage2(
                        task.spec, pert.to_stage1(tc), task.stage2, task.realized_demand
                    )
                    record["tc1"] = report.tc1
                except NoWarehouseOpen:
                    pass
        out.append(record)
    return out


def _chunks(n: int, parts: int) -> List[List[int]]:
    parts = max(1, min(parts, n))
    return [list(range(n))[p::parts] for p in range(parts)]


def run_ensemble(
    spec: InstanceSpec,
    sol: Stage1Solution,
    noise: NoiseSpec,
    cfg: Optional[EnsembleConfig] = None,
    stage2: Optional[Stage2Options] = None,
    realized_demand: Optional[np.ndarray] = None,
    draw_fn: Optional[DrawFn] = None,
) -> NoiseEnsemble:
    """
    Run the n x n double loop for one noise spec.

    The result is a pure function of (spec, sol, noise, cfg.n, cfg.seed) whatever
    cfg.workers is. When stage2 options are given each replicate mean is also
    re-evaluated in the second stage (realized_demand is reused as given).

    Raises:
        TooFewFeasible: n < 2, or fewer than two usable replicates; the partial
            ensemble is attached when one was computed
    """
    cfg = cfg or EnsembleConfig()
    n = cfg.n
    if n < 2:
        raise TooFewFeasible(f"n={n} leaves fewer than two replicates for the RMS")
    safety = stage2.safety_factor if stage2 is not None else 0.0

    log = logger.bind(noise=noise.name)
    log.info("Ensemble started", n=n, seed=cfg.seed, workers=cfg.workers)

    if cfg.workers > 1 and draw_fn is None:
        tasks = [
            _Task(spec, sol, noise, cfg, chunk, stage2, realized_demand, safety)
            for chunk in _chunks(n, cfg.workers)
        ]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = [r for batch in pool.map(_run_replicates, tasks) for r in batch]
    else:
        task = _Task(spec, sol, noise, cfg, list(range(n)), stage2, realized_demand, safety)
        records = _run_replicates(task, draw_fn)
    records.sort(key=lambda r: r["e"])

    means = {g: np.stack([r["means"][g] for r in records]) for g in NOISE_GROUPS}
    replicates = (
        {g: np.stack([r["replicates"][g] for r in records]) for g in NOISE_GROUPS}
        if cfg.store_replicates
        else {}
    )
    ensemble = NoiseEnsemble(
        noise=noise,
        n=n,
        seed=cfg.seed,
        means=means,
        feasible=np.array([r["feasible"] for r in records], dtype=bool),
        max_violation=np.array([r["max_violation"] for r in records], dtype=float),
        tc=np.array([r["tc"] for r in records], dtype=float),
        tc1=np.array([r["tc1"] for r in records], dtype=float) if stage2 is not None else None,
        include_infeasible=cfg.include_infeasible,
        replicates=replicates,
        passed=np.array([r["passed"] for r in records], dtype=int),
    )

    usable = int(np.count_nonzero(ensemble.selected))
    log.info("Ensemble finished", feasible=ensemble.feasible_count, usable=usable)
    if usable < 2:
        raise TooFewFeasible(
            f"{noise.name}: only {ensemble.feasible_count} of {n} replicates feasible",
            ensemble=ensemble,
        )

    for group in NOISE_GROUPS:
        chosen = means[group][ensemble.selected]
        totals = chosen.reshape(chosen.shape[0], -1).sum(axis=1)
        try:
            ensemble.rms[group] = ensemble_rms(totals)
        except NegativeRadicand as e:
            log.warning("Negative RMS radicand", group=group, radicand=e.radicand)
            ensemble.rms[group] = float("nan")
        ensemble.cell_rms[group], ensemble.negative_radicands[group] = cell_rms(chosen)
    return ensemble


def replay_cell(
    noise: NoiseSpec,
    seed: int,
    e: int,
    e_inner: int,
    group: str,
    index: Tuple[int, ...],
    base: np.ndarray,
) -> float:
    """Regenerate a single stored replicate value X_ee' without the rest of the ensemble."""
    eta = sample_noise(noise, noise_stream(seed, e, e_inner, group), size=base.shape)
    return float(base[index] + eta[index])


# =============================================================================
# Binary tensor dump (layout in docs/tensor_format.md)
# =============================================================================


def dump_tensor(array: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes(order="C"))
    return path


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor dump")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", data, 12)
    offset = 12 + 8 * ndim
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(shape).astype(float)


# =============================================================================
# Persistence
# =============================================================================


def _float_list(values: np.ndarray) -> List[Optional[float]]:
    return [_json_float(float(v)) for v in values]


def _from_float_list(values: Sequence[Optional[float]]) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=float)


def save_ensemble(
    ens: NoiseEnsemble,
    directory: Union[str, Path],
    dump_replicates: bool = False,
) -> List[Path]:
    """
    Write <label>.json plus one tensor per group of replicate means
    (<label>_means_<group>.bin); with dump_replicates also the full X_ee'
    tensors (<label>_replicates_<group>.bin).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    label = ens.noise.name
    record = {
        **ens.summary(),
        "include_infeasible": ens.include_infeasible,
        "feasible": ens.feasible.tolist(),
        "passed": None if ens.passed is None else ens.passed.tolist(),
        "max_violation": _float_list(ens.max_violation),
        "tc": _float_list(ens.tc),
        "tc1": None if ens.tc1 is None else _float_list(ens.tc1),
    }
    summary_path = directory / f"{label}.json"
    summary_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written = [summary_path]
    for group in NOISE_GROUPS:
        written.append(dump_tensor(ens.means[group], directory / f"{label}_means_{group}.bin"))
        if dump_replicates and group in ens.replicates:
            written.append(
                dump_tensor(ens.replicates[group], directory / f"{label}_replicates_{group}.bin")
            )
    return written


def load_ensemble(directory: Union[str, Path], label: str) -> NoiseEnsemble:
    """Rebuild an ensemble (without replicate tensors) from save_ensemble output."""
    directory = Path(directory)
    record = json.loads((directory / f"{label}.json").read_text(encoding="utf-8"))
    means = {g: load_tensor(directory / f"{label}_means_{g}.bin") for g in NOISE_GROUPS}
    ensemble = NoiseEnsemble(
        noise=NoiseSpec.model_validate(record["noise"]),
        n=int(record["n"]),
        seed=int(record["seed"]),
        means=means,
        feasible=np.array(record["feasible"], dtype=bool),
        max_violation=_from_float_list(record["max_violation"]),
        tc=_from_float_list(record["tc"]),
        tc1=None if record["tc1"] is None else _from_float_list(record["tc1"]),
        include_infeasible=bool(record["include_infeasible"]),
        passed=None if record.get("passed") is None else np.array(record["passed"], dtype=int),
    )
    for group in NOISE_GROUPS:
        stored = record["rms"].get(group)
        ensemble.rms[group] = float("nan") if stored is None else float(stored)
        chosen = means[group][ensemble.selected]
        ensemble.cell_rms[group], ensemble.negative_radicands[group] = cell_rms(chosen)
    return ensemble
