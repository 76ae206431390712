# Noise laboratory
from .ensemble import (
    EnsembleConfig,
    NegativeRadicand,
    NoiseEnsemble,
    TooFewFeasible,
    ensemble_mean,
    ensemble_rms,
    run_ensemble,
)
from .noise import (
    NoiseFamily,
    NoiseSpec,
    PerturbedSolution,
    check_feasibility,
    perturb,
    sample_noise,
)

__all__ = [
    "EnsembleConfig",
    "NegativeRadicand",
    "NoiseEnsemble",
    "TooFewFeasible",
    "ensemble_mean",
    "ensemble_rms",
    "run_ensemble",
    "NoiseFamily",
    "NoiseSpec",
    "PerturbedSolution",
    "check_feasibility",
    "perturb",
    "sample_noise",
]
