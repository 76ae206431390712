"""
Run configuration: one JSON document describing the instance source, solver,
second stage, noise suite, ensemble and output directory of a pipeline run.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .analytics.stage2 import Stage2Options
from .errors import SupplyChainError
from .network.instance import GenerationRanges, InstanceSpec, generate_instance, load_instance
from .solver.branch_and_bound import SolverConfig
from .stochastic.ensemble import EnsembleConfig
from .stochastic.noise import NoiseFamily, NoiseSpec
from .utils.config import settings

PARETO_ALPHAS = (0.01, 0.05, 0.5, 0.99)

# Cap on Pareto draws in the default suite; at alpha 0.01 the untruncated
# quantile overflows float64 for every U below about 8.3e-4
DEFAULT_PARETO_XMAX = 1e4


class ConfigError(SupplyChainError):
    """The run configuration is missing or invalid."""


def default_noise_suite() -> List[NoiseSpec]:
    """
    Gaussian and Lognormal at scale 0.1, then four Pareto levels at scale 1
    capped at DEFAULT_PARETO_XMAX.

    Averaged over n * n = 2500 draws the Qij differences have a spread of
    about 0.002 (Gaussian), 0.005 (Lognormal) and 2 to 46 across the Pareto
    levels, so the heaviest level reaches differences of order 100.
    """
    suite = [
        NoiseSpec(family=NoiseFamily.GAUSSIAN, label="gaussian", scale=0.1),
        NoiseSpec(family=NoiseFamily.LOGNORMAL, label="lognormal", scale=0.1),
    ]
    suite += [
        NoiseSpec(
            family=NoiseFamily.PARETO,
            label=f"pareto_a{alpha:g}",
            scale=1.0,
            pareto_alpha=alpha,
            pareto_xmax=DEFAULT_PARETO_XMAX,
        )
        for alpha in PARETO_ALPHAS
    ]
    return suite


class InstanceSource(BaseModel):
    """Either a saved instance file or generator arguments."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    path: Optional[Path] = Field(default=None, description="Instance JSON; overrides the generator")
    seed: int = Field(default=42, ge=0)
    n_plants: int = Field(default=5, ge=1)
    n_warehouses: int = Field(default=5, ge=1)
    n_customers: int = Field(default=5, ge=1)
    ranges: GenerationRanges = Field(default_factory=GenerationRanges)

    def resolve(self) -> InstanceSpec:
        if self.path is not None:
            return load_instance(self.path)
        return generate_instance(
            self.seed, self.n_plants, self.n_warehouses, self.n_customers, self.ranges
        )


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    instance: InstanceSource = Field(default_factory=InstanceSource)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    stage2: Stage2Options = Field(default_factory=Stage2Options)
    noise: List[NoiseSpec] = Field(default_factory=default_noise_suite)
    # infeasible replicates stay in the aggregates so every noise level reports
    ensemble: EnsembleConfig = Field(
        default_factory=lambda: EnsembleConfig(include_infeasible=True)
    )
    output_dir: Path = Field(default_factory=lambda: settings.output_dir)

    @model_validator(mode="after")
    def check_noise_suite(self) -> "RunConfig":
        if not self.noise:
            raise ValueError("the noise suite needs at least one noise spec")
        names = [spec.name for spec in self.noise]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate noise labels: {duplicates}")
        return self

    def with_overrides(self, **updates: Any) -> "RunConfig":
        """
        Copy with nested fields replaced, e.g. with_overrides(solver={"time_limit_seconds": 5}).

        The result is validated again.
        """
        data = self.model_dump(mode="json")
        for section, values in updates.items():
            if isinstance(values, dict) and isinstance(data.get(section), dict):
                data[section].update(values)
            else:
                data[section] = values
        return load_run_config_dict(data)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form, without the worker count and output directory."""
        data = self.model_dump(mode="json")
        data["ensemble"].pop("workers", None)
        data.pop("output_dir", None)
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def seeds(self) -> Dict[str, int]:
        return {
            "instance": self.instance.seed,
            "stage2": self.stage2.seed,
            "noise": self.ensemble.seed,
        }


def load_run_config_dict(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Read a run config JSON file; None gives the defaults.

    Raises:
        ConfigError: the file is missing, not JSON, or fails validation
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return load_run_config_dict(data)
