"""
Instance data model.

Holds every parameter of the three-echelon network (plants i, warehouses j,
customers k) in one immutable record, validates instances against their
invariants, reads/writes the JSON instance file, and generates seeded synthetic
instances that are feasible by construction.
"""

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import SupplyChainError
from ..utils.logger import get_logger

logger = get_logger(__name__)

Range = Tuple[float, float]


class InfeasibleRanges(SupplyChainError):
    """Generation ranges cannot guarantee a feasible stage-1 network."""


class InstanceFormatError(SupplyChainError):
    """Instance document is missing fields or is not numerically well-formed."""


def _frozen_array(value: Any) -> np.ndarray:
    arr = np.array(value, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class DemandSpec:
    """Normally distributed customer demand D_k ~ N(mu, sigma^2)."""

    mu: float
    sigma: float

    def to_dict(self) -> Dict[str, float]:
        return {"mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DemandSpec":
        return cls(mu=float(data["mu"]), sigma=float(data["sigma"]))


@dataclass(frozen=True, eq=False)
class CostParams:
    """Cost coefficients of the stage-1 objective and the stage-2 recovery terms."""

    c_prod: np.ndarray  # (I,)
    c_var_ij: np.ndarray  # (I, J)
    c_fix_ij: np.ndarray  # (I, J)
    c_var_jk: np.ndarray  # (J, K)
    c_fix_jk: np.ndarray  # (J, K)
    c_install: np.ndarray  # (J,)
    c_po: np.ndarray  # (J, K) large-deficit recovery production
    c_pu: np.ndarray  # (J, K) small-deficit recovery production

    def __post_init__(self) -> None:
        for f in fields(self):
            object.__setattr__(self, f.name, _frozen_array(getattr(self, f.name)))

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CostParams":
        return cls(**{f.name: data[f.name] for f in fields(cls)})


ARRAY_FIELDS = (
    "p_upper",
    "p_lower",
    "q_upper_ij",
    "q_upper_jk",
    "w_upper",
    "inventory",
    "a",
    "beta",
    "gamma",
    "h",
    "q_lower_ij",
    "q_lower_jk",
)


@dataclass(frozen=True, eq=False)
class InstanceSpec:
    """
    Complete parameter set of one supply chain design instance.

    Arrays are stored read-only; the record is safe to share across workers.
    The lower arc capacities q_lower_* are part of the nomenclature but no
    constraint uses them.
    """

    n_plants: int
    n_warehouses: int
    n_customers: int
    p_upper: np.ndarray
    p_lower: np.ndarray
    q_upper_ij: np.ndarray
    q_upper_jk: np.ndarray
    w_upper: np.ndarray
    inventory: np.ndarray
    demand: Tuple[DemandSpec, ...]
    a: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    h: np.ndarray
    t_upper: float
    t_lower: float
    costs: CostParams
    q_lower_ij: Optional[np.ndarray] = None
    q_lower_jk: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.q_lower_ij is None:
            object.__setattr__(self, "q_lower_ij", np.zeros((self.n_plants, self.n_warehouses)))
        if self.q_lower_jk is None:
            object.__setattr__(
                self, "q_lower_jk", np.zeros((self.n_warehouses, self.n_customers))
            )
        for name in ARRAY_FIELDS:
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        object.__setattr__(self, "demand", tuple(self.demand))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InstanceSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = object.__hash__

    @property
    def mu(self) -> np.ndarray:
        return np.array([d.mu for d in self.demand], dtype=float)

    @property
    def sigma(self) -> np.ndarray:
        return np.array([d.sigma for d in self.demand], dtype=float)

    def demand_target(self, safety_factor: float = 0.0) -> np.ndarray:
        """Deterministic-equivalent stage-1 demand mu_k + z * sigma_k."""
        return self.mu + safety_factor * self.sigma

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "n_plants": self.n_plants,
            "n_warehouses": self.n_warehouses,
            "n_customers": self.n_customers,
        }
        for name in ARRAY_FIELDS:
            data[name] = getattr(self, name).tolist()
        data["demand"] = [d.to_dict() for d in self.demand]
        data["t_upper"] = self.t_upper
        data["t_lower"] = self.t_lower
        data["costs"] = self.costs.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InstanceSpec":
        try:
            kwargs: Dict[str, Any] = {
                "n_plants": int(data["n_plants"]),
                "n_warehouses": int(data["n_warehouses"]),
                "n_customers": int(data["n_customers"]),
                "demand": tuple(DemandSpec.from_dict(d) for d in data["demand"]),
                "t_upper": float(data["t_upper"]),
                "t_lower": float(data["t_lower"]),
                "costs": CostParams.from_dict(data["costs"]),
            }
            for name in ARRAY_FIELDS:
                if name in data:
                    kwargs[name] = data[name]
                elif not name.startswith("q_lower"):
                    raise KeyError(name)
            return cls(**kwargs)
        except KeyError as e:
            raise InstanceFormatError(f"Missing instance field: {e.args[0]}") from e
        except (TypeError, ValueError) as e:
            raise InstanceFormatError(f"Malformed instance field: {e}") from e


@dataclass
class ValidationReport:
    """Every invariant violation of an instance, plus non-fatal warnings."""

    violations: List[Tuple[str, str]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ok": self.ok,
            "violations": [{"field": p, "message": m} for p, m in self.violations],
            "warnings": list(self.warnings),
        }


def _path(name: str, idx: Tuple[int, ...]) -> str:
    return name + "".join(f"[{i}]" for i in idx)


def validate_instance(spec: InstanceSpec) -> ValidationReport:
    """
    Check an instance against all of its invariants.

    Returns every violation, not just the first. The aggregate condition
    sum(p_upper) >= sum(mu) only produces a warning, because warehouses also
    produce in stage 2.
    """
    report = ValidationReport()
    add = report.violations.append
    n_i, n_j, n_k = spec.n_plants, spec.n_warehouses, spec.n_customers

    for name, value in (("n_plants", n_i), ("n_warehouses", n_j), ("n_customers", n_k)):
        if value < 1:
            add((name, f"must be a positive integer, got {value}"))
    if not report.ok:
        return report

    shapes = {
        "p_upper": (n_i,),
        "p_lower": (n_i,),
        "q_upper_ij": (n_i, n_j),
        "q_upper_jk": (n_j, n_k),
        "q_lower_ij": (n_i, n_j),
        "q_lower_jk": (n_j, n_k),
        "w_upper": (n_j,),
        "inventory": (n_j,),
        "a": (n_j,),
        "beta": (n_j, n_k),
        "gamma": (n_j, n_k),
        "h": (n_j, n_k),
    }
    cost_shapes = {
        "c_prod": (n_i,),
        "c_var_ij": (n_i, n_j),
        "c_fix_ij": (n_i, n_j),
        "c_var_jk": (n_j, n_k),
        "c_fix_jk": (n_j, n_k),
        "c_install": (n_j,),
        "c_po": (n_j, n_k),
        "c_pu": (n_j, n_k),
    }

    checked: Dict[str, np.ndarray] = {}
    for prefix, owner, table in (("", spec, shapes), ("costs.", spec.costs, cost_shapes)):
        for name, shape in table.items():
            arr = getattr(owner, name)
            if arr.shape != shape:
                add((prefix + name, f"expected shape {shape}, got {arr.shape}"))
                continue
            checked[prefix + name] = arr

    # Every checked array must be finite and nonnegative
    for name, arr in checked.items():
        for idx in zip(*np.nonzero(~np.isfinite(arr))):
            add((_path(name, tuple(int(i) for i in idx)), "must be finite"))
        for idx in zip(*np.nonzero(np.isfinite(arr) & (arr < 0))):
            idx = tuple(int(i) for i in idx)
            add((_path(name, idx), f"must be nonnegative, got {arr[idx]}"))

    if "p_lower" in checked and "p_upper" in checked:
        for i in np.nonzero(spec.p_lower > spec.p_upper)[0]:
            add(
                (
                    f"p_lower[{i}]",
                    f"lower bound {spec.p_lower[i]} exceeds upper bound {spec.p_upper[i]}",
                )
            )

    for name in ("beta", "gamma"):
        if name in checked:
            for idx in zip(*np.nonzero(checked[name] > 1)):
                idx = tuple(int(i) for i in idx)
                add((_path(name, idx), f"must lie in [0, 1], got {checked[name][idx]}"))

    if len(spec.demand) != n_k:
        add(("demand", f"expected {n_k} entries, got {len(spec.demand)}"))
    for k, d in enumerate(spec.demand):
        for attr in ("mu", "sigma"):
            value = getattr(d, attr)
            if not np.isfinite(value):
                add((f"demand[{k}].{attr}", "must be finite"))
            elif value < 0:
                add((f"demand[{k}].{attr}", f"must be nonnegative, got {value}"))

    for name in ("t_lower", "t_upper"):
        value = getattr(spec, name)
        if not np.isfinite(value) or value < 0:
            add((name, f"must be finite and nonnegative, got {value}"))
    if spec.t_lower > spec.t_upper:
        add(("t_lower", f"minimum delivery time {spec.t_lower} exceeds maximum {spec.t_upper}"))

    if report.ok:
        supply = float(np.sum(spec.p_upper))
        demand = float(np.sum(spec.mu))
        if supply < demand:
            message = (
                f"total plant capacity {supply:.6g} is below total mean demand {demand:.6g}; "
                "stage 1 relies on warehouse inventory"
            )
            report.warnings.append(message)
            logger.warning("Aggregate capacity below demand", supply=supply, demand=demand)

    return report


# =============================================================================
# Instance file I/O
# =============================================================================


def save_instance(spec: InstanceSpec, path: Union[str, Path]) -> Path:
    """Write an instance document (JSON, field names as in InstanceSpec)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2)
        f.write("\n")
    logger.info("Instance saved", path=str(path))
    return path


def load_instance(path: Union[str, Path]) -> InstanceSpec:
    """Read an instance document; structural problems raise InstanceFormatError."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise InstanceFormatError(f"Instance file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise InstanceFormatError(f"Instance file is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise InstanceFormatError("Instance document must be a single object")
    return InstanceSpec.from_dict(data)


# =============================================================================
# Seeded generation
# =============================================================================


class GenerationRanges(BaseModel):
    """
    Uniform sampling ranges for synthetic instances.

    Capacities are expressed as coverage multipliers of the stage-1 demand
    target, which keeps the feasibility-by-construction rule independent of the
    instance size:
    - p_upper[i]       = coverage * total_demand / |I|
    - q_upper_ij[i][j] = coverage * total_demand / (|I| * |J|)
    - q_upper_jk[j][k] = coverage * demand_target[k]
    - inventory[j]     = share * total_demand / |J| (only for stocked warehouses)
    - w_upper[j]       = headroom * a[j] * (sum_i q_upper_ij[i][j] + inventory[j])
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    demand_mu: Range = Field(default=(100.0, 500.0), description="Mean demand per customer")
    demand_sigma_ratio: float = Field(default=0.1, ge=0, description="sigma_k = ratio * mu_k")
    safety_factor: float = Field(default=0.0, ge=0, description="z in mu + z * sigma")

    plant_coverage: Range = Field(default=(1.0, 2.0))
    arc_ij_coverage: Range = Field(default=(1.0, 3.0))
    arc_jk_coverage: Range = Field(default=(1.0, 2.0))
    warehouse_headroom: Range = Field(default=(1.0, 1.5))
    stock_probability: float = Field(default=0.5, ge=0, le=1)
    inventory_share: Range = Field(default=(0.0, 0.3))

    capacity_coef: Range = Field(default=(0.5, 1.0), description="a_j")
    beta: Range = Field(default=(0.05, 0.3))
    gamma: Range = Field(default=(0.1, 0.5))
    h: Range = Field(default=(10.0, 100.0))
    t_lower: Range = Field(default=(1.0, 3.0))
    t_upper: Range = Field(default=(5.0, 10.0))

    c_prod: Range = Field(default=(1.0, 10.0))
    c_var_ij: Range = Field(default=(1.0, 10.0))
    c_fix_ij: Range = Field(default=(50.0, 200.0))
    c_var_jk: Range = Field(default=(1.0, 10.0))
    c_fix_jk: Range = Field(default=(50.0, 200.0))
    c_install: Range = Field(default=(500.0, 2000.0))
    c_po: Range = Field(default=(1.0, 5.0))
    c_pu: Range = Field(default=(1.0, 5.0))

    @model_validator(mode="after")
    def check_ranges(self) -> "GenerationRanges":
        for name, value in self:
            if isinstance(value, tuple):
                lo, hi = value
                if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0 or lo > hi:
                    raise ValueError(f"{name}: expected finite 0 <= lo <= hi, got {value}")
        for name in ("beta", "gamma"):
            if getattr(self, name)[1] > 1:
                raise ValueError(f"{name}: coefficients must not exceed 1")
        if self.t_lower[1] > self.t_upper[0]:
            raise ValueError("t_lower range must lie below the t_upper range")
        return self


def _check_coverage(ranges: GenerationRanges, n_warehouses: int) -> None:
    problems = []
    if ranges.plant_coverage[0] < 1.0:
        problems.append(
            f"plant_coverage lower end {ranges.plant_coverage[0]} leaves total plant "
            "capacity below total demand"
        )
    if ranges.arc_ij_coverage[0] < 1.0:
        problems.append(f"arc_ij_coverage lower end {ranges.arc_ij_coverage[0]} is below 1")
    if ranges.arc_jk_coverage[0] * n_warehouses < 1.0:
        problems.append(
            f"arc_jk_coverage lower end {ranges.arc_jk_coverage[0]} times {n_warehouses} "
            "warehouses cannot cover a customer's demand"
        )
    if ranges.stock_probability > 0 and (
        ranges.arc_jk_coverage[0] * n_warehouses < ranges.inventory_share[1]
    ):
        problems.append("warehouse outbound capacity cannot absorb the largest inventory")
    if ranges.warehouse_headroom[0] < 1.0:
        problems.append(f"warehouse_headroom lower end {ranges.warehouse_headroom[0]} is below 1")
    if problems:
        raise InfeasibleRanges("; ".join(problems))


def generate_instance(
    seed: int,
    n_plants: int,
    n_warehouses: int,
    n_customers: int,
    ranges: Optional[GenerationRanges] = None,
) -> InstanceSpec:
    """
    Draw a synthetic instance, deterministically from (seed, sizes, ranges).

    Every parameter is drawn uniformly from its range with one numpy Generator
    in a fixed order. Capacity coverage >= 1 guarantees that opening every
    warehouse and splitting each customer's demand evenly is feasible.
    """
    if min(n_plants, n_warehouses, n_customers) < 1:
        raise ValueError(
            f"instance sizes must be >= 1, got ({n_plants}, {n_warehouses}, {n_customers})"
        )
    ranges = ranges or GenerationRanges()
    _check_coverage(ranges, n_warehouses)

    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))
    n_i, n_j, n_k = n_plants, n_warehouses, n_customers

    def draw(bounds: Range, shape: Union[int, Tuple[int, ...]]) -> np.ndarray:
        return rng.uniform(bounds[0], bounds[1], size=shape)

    mu = draw(ranges.demand_mu, n_k)
    sigma = ranges.demand_sigma_ratio * mu
    target = mu + ranges.safety_factor * sigma
    total = float(target.sum())

    p_upper = draw(ranges.plant_coverage, n_i) * total / n_i
    q_upper_ij = draw(ranges.arc_ij_coverage, (n_i, n_j)) * total / (n_i * n_j)
    q_upper_jk = draw(ranges.arc_jk_coverage, (n_j, n_k)) * target[np.newaxis, :]

    stocked = rng.random(n_j) < ranges.stock_probability
    share = draw(ranges.inventory_share, n_j)
    inventory = np.where(stocked, share * total / n_j, 0.0)

    a = draw(ranges.capacity_coef, n_j)
    w_upper = draw(ranges.warehouse_headroom, n_j) * a * (q_upper_ij.sum(axis=0) + inventory)

    beta = draw(ranges.beta, (n_j, n_k))
    gamma = draw(ranges.gamma, (n_j, n_k))
    h = draw(ranges.h, (n_j, n_k))
    t_lower = float(draw(ranges.t_lower, 1)[0])
    t_upper = float(draw(ranges.t_upper, 1)[0])

    costs = CostParams(
        c_prod=draw(ranges.c_prod, n_i),
        c_var_ij=draw(ranges.c_var_ij, (n_i, n_j)),
        c_fix_ij=draw(ranges.c_fix_ij, (n_i, n_j)),
        c_var_jk=draw(ranges.c_var_jk, (n_j, n_k)),
        c_fix_jk=draw(ranges.c_fix_jk, (n_j, n_k)),
        c_install=draw(ranges.c_install, n_j),
        c_po=draw(ranges.c_po, (n_j, n_k)),
        c_pu=draw(ranges.c_pu, (n_j, n_k)),
    )

    spec = InstanceSpec(
        n_plants=n_i,
        n_warehouses=n_j,
        n_customers=n_k,
        p_upper=p_upper,
        p_lower=np.zeros(n_i),
        q_upper_ij=q_upper_ij,
        q_upper_jk=q_upper_jk,
        w_upper=w_upper,
        inventory=inventory,
        demand=tuple(DemandSpec(mu=float(m), sigma=float(s)) for m, s in zip(mu, sigma)),
        a=a,
        beta=beta,
        gamma=gamma,
        h=h,
        t_upper=t_upper,
        t_lower=t_lower,
        costs=costs,
    )

    report = validate_instance(spec)
    if not report.ok:
        raise InfeasibleRanges(f"generated instance is invalid: {report.violations[:3]}")

    logger.info(
        "Instance generated",
        seed=seed,
        sizes=(n_i, n_j, n_k),
        total_demand=round(total, 3),
        stocked_warehouses=int(stocked.sum()),
    )
    return spec
