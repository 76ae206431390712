"""
Second-stage analytics of a solved network.

Given the stage-1 deliveries and a demand realization, computes per-customer
deficits, splits customers into a low and a high insufficiency regime, plans
recovery production at open warehouses, and derives stockout probabilities,
expected lead times and the augmented cost TC1.
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from ..errors import SupplyChainError
from ..network.instance import CostParams, InstanceSpec
from ..network.milp import Stage1Solution
from ..utils.logger import get_logger
from .erf import erf

logger = get_logger(__name__)

# Spawn key of the realized-demand stream; noise streams use other keys
DEMAND_STREAM = 0x44454D


class DegenerateProfile(UserWarning):
    """All customers have the same deficit; every customer is put in the low regime."""


class ZeroSigma(UserWarning):
    """A customer has zero demand spread; its probabilities are a step function."""


class NoWarehouseOpen(SupplyChainError):
    """A deficit needs recovery but the network has no open warehouse."""


class ThresholdRule(str, Enum):
    MIDPOINT = "midpoint"
    MEAN = "mean"


class DemandMode(str, Enum):
    SAMPLED = "sampled"
    MEAN = "mean"


class Stage2Options(BaseModel):
    """Second-stage knobs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    threshold_rule: ThresholdRule = Field(
        default=ThresholdRule.MIDPOINT,
        description="Low regime iff delta <= midpoint of [min, max], or <= mean deficit",
    )
    safety_factor: float = Field(default=0.0, ge=0, description="z in mu + z * sigma")
    demand_mode: DemandMode = Field(
        default=DemandMode.SAMPLED, description="Draw realized demand or use the mean"
    )
    seed: int = Field(default=11, ge=0, description="Seed of the realized-demand stream")


@dataclass
class DeficitProfile:
    delta: np.ndarray
    delta_lo: float
    delta_mid: float
    delta_hi: float
    lam: np.ndarray
    zeta: np.ndarray
    delta_bar: float
    sigma_delta: float
    sign: List[str]
    delta_mean: np.ndarray
    rule: ThresholdRule = ThresholdRule.MIDPOINT
    degenerate: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "delta": self.delta.tolist(),
            "delta_lo": self.delta_lo,
            "delta_mid": self.delta_mid,
            "delta_hi": self.delta_hi,
            "lambda": self.lam.astype(bool).tolist(),
            "zeta": self.zeta.astype(bool).tolist(),
            "delta_bar": self.delta_bar,
            "sigma_delta": self.sigma_delta,
            "sign": list(self.sign),
            "delta_mean": self.delta_mean.tolist(),
            "rule": self.rule.value,
            "degenerate": self.degenerate,
        }


@dataclass
class RecoveryPlan:
    kq: np.ndarray
    omega: np.ndarray
    r: np.ndarray
    e: np.ndarray
    qu: np.ndarray
    qo: np.ndarray
    warehouse: np.ndarray
    clamp_count: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kq": self.kq.astype(bool).tolist(),
            "omega": self.omega.astype(bool).tolist(),
            "r": self.r.tolist(),
            "e": self.e.tolist(),
            "qu": self.qu.tolist(),
            "qo": self.qo.tolist(),
            "warehouse": self.warehouse.tolist(),
            "clamp_count": self.clamp_count,
        }


@dataclass
class Stage2Report:
    profile: DeficitProfile
    plan: RecoveryPlan
    p_under: np.ndarray
    p_over: np.ndarray
    eld: np.ndarray
    tc: float
    tc1: float
    realized_demand: np.ndarray
    zero_sigma: np.ndarray
    cost_terms: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "profile": self.profile.to_dict(),
            "plan": self.plan.to_dict(),
            "p_under": self.p_under.tolist(),
            "p_over": self.p_over.tolist(),
            "eld": self.eld.tolist(),
            "tc": self.tc,
            "tc1": self.tc1,
            "cost_terms": dict(self.cost_terms),
            "realized_demand": self.realized_demand.tolist(),
            "zero_sigma": self.zero_sigma.astype(bool).tolist(),
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per customer, for plotting."""
        return pd.DataFrame(
            {
                "k": np.arange(self.eld.size),
                "delta": self.profile.delta,
                "lambda": self.profile.lam.astype(int),
                "p_under": self.p_under,
                "p_over": self.p_over,
                "eld": self.eld,
            }
        )


# =============================================================================
# Deficits
# =============================================================================


def realize_demand(spec: InstanceSpec, options: Stage2Options) -> np.ndarray:
    """Demand realization: mu, or one N(mu, sigma^2) draw per customer clipped at 0."""
    if options.demand_mode == DemandMode.MEAN:
        return spec.mu.copy()
    seq = np.random.SeedSequence(entropy=options.seed, spawn_key=(DEMAND_STREAM,))
    rng = np.random.default_rng(seq)
    return np.maximum(rng.normal(spec.mu, spec.sigma), 0.0)


def profile_from_deltas(
    delta: np.ndarray,
    rule: ThresholdRule = ThresholdRule.MIDPOINT,
    sign: Optional[List[str]] = None,
    delta_mean: Optional[np.ndarray] = None,
) -> DeficitProfile:
    """
    Thresholds and regimes for a deficit vector.

    When every deficit is equal the thresholds collapse; all customers are then
    placed in the low regime and a DegenerateProfile warning is issued.
    """
    delta = np.asarray(delta, dtype=float)
    n = delta.size
    lo, hi = float(delta.min()), float(delta.max())
    mid = 0.5 * (lo + hi)
    delta_bar = float(delta.mean())
    sigma_delta = float(np.std(delta, ddof=1)) if n > 1 else 0.0

    degenerate = lo == hi
    if degenerate:
        warnings.warn(
            f"all {n} customer deficits equal {lo}; every customer is in the low regime",
            DegenerateProfile,
            stacklevel=2,
        )
        logger.warning("Degenerate deficit profile", delta=lo, customers=n)
        lam = np.ones(n, dtype=bool)
    elif rule == ThresholdRule.MIDPOINT:
        lam = delta <= mid
    else:
        lam = delta <= delta_bar

    return DeficitProfile(
        delta=delta,
        delta_lo=lo,
        delta_mid=mid,
        delta_hi=hi,
        lam=lam,
        zeta=~lam,
        delta_bar=delta_bar,
        sigma_delta=sigma_delta,
        sign=list(sign) if sign is not None else ["shortage"] * n,
        delta_mean=np.zeros(n) if delta_mean is None else np.asarray(delta_mean, dtype=float),
        rule=rule,
        degenerate=degenerate,
    )


def compute_deficits(
    spec: InstanceSpec,
    sol: Stage1Solution,
    realized_demand: np.ndarray,
    rule: ThresholdRule = ThresholdRule.MIDPOINT,
) -> DeficitProfile:
    """Deficit |D_k - delivered_k| per customer, with regimes and summary statistics."""
    delivered = sol.delivered()
    diff = np.asarray(realized_demand, dtype=float) - delivered
    sign = ["shortage" if d > 0 else "surplus" for d in diff]
    return profile_from_deltas(
        np.abs(diff),
        rule=rule,
        sign=sign,
        delta_mean=np.abs(spec.mu - delivered),
    )


# =============================================================================
# Recovery
# =============================================================================


def plan_recovery(spec: InstanceSpec, sol: Stage1Solution, profile: DeficitProfile) -> RecoveryPlan:
    """
    Assign each customer with a positive deficit to the cheapest open warehouse.

    Low-regime customers get R = gamma * H at cost c_pu * R, high-regime customers
    E = beta * (I + delta) at cost c_po * E; ties go to the lowest warehouse index.
    qu/qo hold the deficit clamped into its regime interval.

    Raises:
        NoWarehouseOpen: some deficit is positive and no warehouse is open
    """
    n_j, n_k = spec.n_warehouses, spec.n_customers
    kq = np.zeros((n_j, n_k), dtype=bool)
    omega = np.zeros((n_j, n_k), dtype=bool)
    r = np.zeros((n_j, n_k))
    e = np.zeros((n_j, n_k))
    qu = np.zeros(n_k)
    qo = np.zeros(n_k)
    chosen = np.full(n_k, -1, dtype=int)
    clamps = 0

    open_j = np.flatnonzero(sol.y)
    for k in range(n_k):
        d = profile.delta[k]
        if d <= 0.0:
            continue
        if open_j.size == 0:
            raise NoWarehouseOpen(f"customer {k} has deficit {d} but no warehouse is open")

        if profile.lam[k]:
            amount = spec.gamma[open_j, k] * spec.h[open_j, k]
            cost = spec.costs.c_pu[open_j, k] * amount
            pick = int(np.argmin(cost))
            j = int(open_j[pick])
            kq[j, k] = True
            r[j, k] = amount[pick]
            qu[k] = min(max(d, profile.delta_lo), profile.delta_mid)
            clamps += int(qu[k] != d)
        else:
            amount = spec.beta[open_j, k] * (spec.inventory[open_j] + d)
            cost = spec.costs.c_po[open_j, k] * amount
            pick = int(np.argmin(cost))
            j = int(open_j[pick])
            omega[j, k] = True
            e[j, k] = amount[pick]
            qo[k] = min(max(d, profile.delta_mid), profile.delta_hi)
            clamps += int(qo[k] != d)
        chosen[k] = j

    if clamps:
        logger.info("Recovery quantities clamped into regime intervals", clamps=clamps)
    return RecoveryPlan(kq, omega, r, e, qu, qo, chosen, clamps)


# =============================================================================
# Probabilities, lead time and cost
# =============================================================================


def stockout_probabilities(
    qu: np.ndarray, delta_mean: np.ndarray, sigma: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Normal-CDF stockout probability at qu and its complement.

    Returns (p_under, p_over, zero_sigma). Customers with sigma == 0 get the step
    0 / 0.5 / 1 and a ZeroSigma warning.
    """
    qu = np.asarray(qu, dtype=float)
    delta_mean = np.asarray(delta_mean, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    zero = sigma == 0.0

    p_under = np.empty_like(qu)
    spread = ~zero
    if spread.any():
        z = (qu[spread] - delta_mean[spread]) / (sigma[spread] * np.sqrt(2.0))
        p_under[spread] = 0.5 * (1.0 + erf(z))
    if zero.any():
        p_under[zero] = np.where(
            qu[zero] > delta_mean[zero], 1.0, np.where(qu[zero] == delta_mean[zero], 0.5, 0.0)
        )
        warnings.warn(
            f"{int(zero.sum())} customer(s) have zero demand spread; using the step limit",
            ZeroSigma,
            stacklevel=2,
        )
    p_under = np.clip(p_under, 0.0, 1.0)
    # For p in [0, 1], p + fl(1 - p) == 1 in binary floating point
    p_over = 1.0 - p_under
    return p_under, p_over, zero


def expected_lead_time(
    profile: DeficitProfile,
    p_under: np.ndarray,
    p_over: np.ndarray,
    t_lower: float,
    t_upper: float,
) -> np.ndarray:
    return t_upper * p_over * profile.zeta + t_lower * p_under * profile.lam


def stage2_cost_terms(
    plan: RecoveryPlan, profile: DeficitProfile, eld: np.ndarray, costs: CostParams
) -> Dict[str, float]:
    return {
        "recovery_large": float(np.sum(costs.c_po * plan.e)),
        "recovery_small": float(np.sum(costs.c_pu * plan.r)),
        "lead_time": float(np.sum(profile.sigma_delta * np.sqrt(eld))),
    }


def total_cost_stage2(
    sol: Stage1Solution,
    plan: RecoveryPlan,
    profile: DeficitProfile,
    eld: np.ndarray,
    costs: CostParams,
) -> float:
    """TC1 = TC + sum c_po * E + sum c_pu * R + sum_k sigma_delta * sqrt(ELD_k)."""
    terms = stage2_cost_terms(plan, profile, eld, costs)
    return sol.tc + terms["recovery_large"] + terms["recovery_small"] + terms["lead_time"]


def run_stage2(
    spec: InstanceSpec,
    sol: Stage1Solution,
    options: Optional[Stage2Options] = None,
    realized_demand: Optional[np.ndarray] = None,
) -> Stage2Report:
    """Full second stage on one stage-1 solution."""
    options = options or Stage2Options()
    demand = realize_demand(spec, options) if realized_demand is None else realized_demand
    profile = compute_deficits(spec, sol, demand, options.threshold_rule)
    plan = plan_recovery(spec, sol, profile)
    p_under, p_over, zero = stockout_probabilities(plan.qu, profile.delta_mean, spec.sigma)
    eld = expected_lead_time(profile, p_under, p_over, spec.t_lower, spec.t_upper)
    terms = stage2_cost_terms(plan, profile, eld, spec.costs)
    tc1 = total_cost_stage2(sol, plan, profile, eld, spec.costs)

    logger.info(
        "Stage 2 evaluated",
        tc=sol.tc,
        tc1=tc1,
        low_regime=int(profile.lam.sum()),
        high_regime=int(profile.zeta.sum()),
        sigma_delta=profile.sigma_delta,
    )
    return Stage2Report(
        profile=profile,
        plan=plan,
        p_under=p_under,
        p_over=p_over,
        eld=eld,
        tc=sol.tc,
        tc1=tc1,
        realized_demand=np.asarray(demand, dtype=float),
        zero_sigma=zero,
        cost_terms=terms,
    )
