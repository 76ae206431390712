# Network package
from .instance import (
    GenerationRanges,
    InfeasibleRanges,
    InstanceFormatError,
    InstanceSpec,
    ValidationReport,
    generate_instance,
    load_instance,
    save_instance,
    validate_instance,
)
from .milp import (
    MilpProblem,
    NonIntegralBinary,
    ObjectiveMismatch,
    SolveStatus,
    Stage1Solution,
    VariableIndex,
    build_stage1,
    evaluate_total_cost,
    extract_stage1,
    write_lp,
)

__all__ = [
    "GenerationRanges",
    "InfeasibleRanges",
    "InstanceFormatError",
    "InstanceSpec",
    "ValidationReport",
    "generate_instance",
    "load_instance",
    "save_instance",
    "validate_instance",
    "MilpProblem",
    "NonIntegralBinary",
    "ObjectiveMismatch",
    "SolveStatus",
    "Stage1Solution",
    "VariableIndex",
    "build_stage1",
    "evaluate_total_cost",
    "extract_stage1",
    "write_lp",
]
