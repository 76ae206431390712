"""
Additive noise on stage-1 production and flow variables.

Every draw comes from a Generator derived from (seed, e, e_inner, group name),
so any replicate of any variable group can be regenerated on its own, in any
order and in any worker process.
"""

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..network.instance import InstanceSpec
from ..network.milp import MilpProblem, SolveStatus, Stage1Solution, build_stage1
from ..utils.logger import get_logger

logger = get_logger(__name__)

NOISE_GROUPS = ("P", "Qij", "Qjk")

# Rows about connection binaries only; noise never touches binaries
_BINARY_ONLY_ROWS = ("open_ij", "open_jk")

# (group, e, e_inner, shape) -> eta; replaces the seeded sampler in tests
DrawFn = Callable[[str, int, int, Tuple[int, ...]], np.ndarray]


class NoiseFamily(str, Enum):
    GAUSSIAN = "gaussian"
    LOGNORMAL = "lognormal"
    PARETO = "pareto"


class NoiseSpec(BaseModel):
    """Distribution of the additive noise eta."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: NoiseFamily
    label: Optional[str] = Field(default=None, description="Row label in reports")
    scale: float = Field(default=1.0, ge=0, description="Multiplies every draw")
    gaussian_sigma: float = Field(default=1.0, ge=0)
    lognormal_mu: float = Field(default=0.0)
    lognormal_sigma: float = Field(default=1.0, ge=0)
    pareto_alpha: float = Field(default=1.0, gt=0)
    pareto_xm: float = Field(default=1.0, gt=0)
    pareto_xmax: Optional[float] = Field(
        default=None, description="Truncation point of the Pareto law (None: untruncated)"
    )
    signed: bool = Field(default=True, description="Multiply each draw by a random sign")

    @model_validator(mode="after")
    def check_truncation(self) -> "NoiseSpec":
        if self.pareto_xmax is not None and self.pareto_xmax <= self.pareto_xm:
            raise ValueError("pareto_xmax must exceed pareto_xm")
        return self

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.family == NoiseFamily.PARETO:
            return f"pareto_a{self.pareto_alpha:g}"
        return self.family.value


def noise_stream(seed: int, e: int, e_inner: int, group: str) -> np.random.Generator:
    """Generator for one (replicate, repetition, variable group) cell."""
    group_key = int.from_bytes(hashlib.sha256(group.encode("utf-8")).digest()[:4], "little")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(e, e_inner, group_key))
    return np.random.default_rng(seq)


def pareto_inverse(
    u: Union[float, np.ndarray],
    alpha: float,
    xm: float,
    xmax: Optional[float] = None,
) -> Union[float, np.ndarray]:
    """
    Pareto quantile at survival level u in (0, 1]: xm * u^(-1/alpha).

    With xmax the law is truncated to [xm, xmax]; u = 1 maps to xm and u -> 0
    to xmax.
    """
    u = np.asarray(u, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):
        if xmax is None:
            out = xm * u ** (-1.0 / alpha)
        else:
            mass = 1.0 - (xm / xmax) ** alpha
            out = xm * (1.0 - mass * (1.0 - u)) ** (-1.0 / alpha)
    return float(out) if out.ndim == 0 else out


def sample_noise(
    spec: NoiseSpec,
    stream: np.random.Generator,
    size: Optional[Union[int, Tuple[int, ...]]] = None,
) -> Union[float, np.ndarray]:
    """
    Draw eta (a scalar, or an array of the given size).

    Base draws come first, then the Rademacher signs, so an unsigned and a
    signed spec share their magnitudes on the same stream.
    """
    shape = () if size is None else size
    if spec.scale == 0.0:
        out = np.zeros(shape)
        return float(out) if size is None else out

    if spec.family == NoiseFamily.GAUSSIAN:
        base = stream.normal(0.0, spec.gaussian_sigma, size=shape)
    elif spec.family == NoiseFamily.LOGNORMAL:
        base = stream.lognormal(spec.lognormal_mu, spec.lognormal_sigma, size=shape)
    else:
        u = 1.0 - stream.random(size=shape)
        base = pareto_inverse(u, spec.pareto_alpha, spec.pareto_xm, spec.pareto_xmax)

    if spec.signed:
        base = base * np.where(stream.random(size=shape) < 0.5, -1.0, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        out = spec.scale * np.asarray(base, dtype=float)
    return float(out) if size is None else out


@dataclass
class PerturbedSolution:
    """
    Stage-1 solution with noisy production and flows; binaries and W unchanged.

    eta keeps the additive draws per group when the values came from perturb.
    """

    p: np.ndarray
    q_ij: np.ndarray
    q_jk: np.ndarray
    w: np.ndarray
    y: np.ndarray
    x_ij: np.ndarray
    x_jk: np.ndarray
    eta: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_groups(
        cls,
        sol: Stage1Solution,
        values: Dict[str, np.ndarray],
        eta: Optional[Dict[str, np.ndarray]] = None,
    ) -> "PerturbedSolution":
        return cls(
            p=values["P"],
            q_ij=values["Qij"],
            q_jk=values["Qjk"],
            w=sol.w.copy(),
            y=sol.y.copy(),
            x_ij=sol.x_ij.copy(),
            x_jk=sol.x_jk.copy(),
            eta=dict(eta or {}),
        )

    def groups(self) -> Dict[str, np.ndarray]:
        return {"P": self.p, "Qij": self.q_ij, "Qjk": self.q_jk}

    def to_stage1(self, tc: float) -> Stage1Solution:
        return Stage1Solution(
            p=self.p,
            q_ij=self.q_ij,
            q_jk=self.q_jk,
            w=self.w,
            y=self.y,
            x_ij=self.x_ij,
            x_jk=self.x_jk,
            tc=tc,
            status=SolveStatus.FEASIBLE_WITH_GAP,
            gap=float("nan"),
        )

    def to_vector(self, problem: MilpProblem) -> np.ndarray:
        return self.to_stage1(0.0).to_vector(problem.var_index)


def base_groups(sol: Stage1Solution) -> Dict[str, np.ndarray]:
    return {"P": sol.p, "Qij": sol.q_ij, "Qjk": sol.q_jk}


def perturb(
    sol: Stage1Solution,
    noise: NoiseSpec,
    seed: int,
    e: int,
    e_inner: int,
    draw_fn: Optional[DrawFn] = None,
) -> PerturbedSolution:
    """
    One independent draw per continuous production/flow cell: X_ee' = X + eta.

    draw_fn, when given, supplies eta instead of the seeded streams.
    """
    values, etas = {}, {}
    for group, base in base_groups(sol).items():
        if draw_fn is not None:
            eta = np.asarray(draw_fn(group, e, e_inner, base.shape), dtype=float)
        else:
            eta = sample_noise(noise, noise_stream(seed, e, e_inner, group), size=base.shape)
        etas[group] = eta
        with np.errstate(over="ignore", invalid="ignore"):
            values[group] = base + eta
    return PerturbedSolution.from_groups(sol, values, etas)


def _bound_residual(breach: np.ndarray, span: np.ndarray) -> np.ndarray:
    """max(0, breach) / (1 + span); non-finite values count as infinite."""
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.maximum(breach, 0.0) / (1.0 + span)
    out[~np.isfinite(out)] = np.inf
    return out


def check_feasibility(
    pert: PerturbedSolution,
    spec: InstanceSpec,
    tol: float = 1e-6,
    problem: Optional[MilpProblem] = None,
    safety_factor: float = 0.0,
) -> Tuple[bool, List[Tuple[str, float]]]:
    """
    Evaluate the production bounds and every stage-1 row that involves a
    continuous variable on the perturbed values, with the original binaries.

    A production bound breach is measured against the plant's range,
    breach / (1 + |p_upper - p_lower|), so a 1% overrun of a plant with range
    [0, 100] has residual 1/101. Rows are scaled as
    violation / (1 + |rhs| + sum |a_i| * max(|x_i|, u_i)) with u_i the finite
    upper bound of column i, so a flow on a closed arc is measured against the
    capacity that arc would have. Returns (feasible, [(name, residual), ...])
    listing every check above tol, production bounds first.
    """
    problem = problem or build_stage1(spec, safety_factor)
    violations: List[Tuple[str, float]] = []

    span = np.abs(spec.p_upper - spec.p_lower)
    upper = _bound_residual(pert.p - spec.p_upper, span)
    lower = _bound_residual(spec.p_lower - pert.p, span)
    for i in np.flatnonzero((upper > tol) | (lower > tol)):
        if upper[i] > tol:
            violations.append((f"production_upper[{i}]", float(upper[i])))
        if lower[i] > tol:
            violations.append((f"production_lower[{i}]", float(lower[i])))

    reference = np.where(np.isfinite(problem.var_upper), problem.var_upper, 0.0)
    residuals = problem.row_violations(pert.to_vector(problem), reference)
    breached = (residuals > tol) & ~np.isin(problem.row_families, _BINARY_ONLY_ROWS)
    for r in np.flatnonzero(breached):
        violations.append((problem.rows[r].name, float(residuals[r])))

    return not violations, violations
