# Second-stage analytics
from .erf import erf
from .stage2 import (
    DegenerateProfile,
    NoWarehouseOpen,
    Stage2Options,
    Stage2Report,
    ZeroSigma,
    run_stage2,
)

__all__ = [
    "erf",
    "DegenerateProfile",
    "NoWarehouseOpen",
    "Stage2Options",
    "Stage2Report",
    "ZeroSigma",
    "run_stage2",
]
