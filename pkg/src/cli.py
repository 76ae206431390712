"""
Command-line entry point.

    python -m src.cli generate --seed 42 --size 20 --out runs/demo/instance.json
    python -m src.cli validate runs/demo/instance.json
    python -m src.cli solve --instance runs/demo/instance.json --out runs/demo
    python -m src.cli perturb --out runs/demo
    python -m src.cli report --out runs/demo
    python -m src.cli pipeline --config configs/default.json

Exit codes: 0 ok, 1 unexpected error, 2 config or validation error, 3 stage 1
infeasible, 4 time limit without incumbent, 5 degenerate noise ensemble.
"""

import argparse
import json
import sys
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .analytics.stage2 import NoWarehouseOpen, Stage2Report, run_stage2
from .errors import SupplyChainError
from .network.instance import (
    InfeasibleRanges,
    InstanceFormatError,
    InstanceSpec,
    load_instance,
    save_instance,
    validate_instance,
)
from .network.milp import SolveStatus, Stage1Solution, build_stage1, extract_stage1, write_lp
from .report import IoFailure, SingleCell, write_manifest, write_report
from .run_config import ConfigError, RunConfig, load_run_config
from .solver.branch_and_bound import solve_milp
from .stochastic.ensemble import (
    NoiseEnsemble,
    TooFewFeasible,
    load_ensemble,
    run_ensemble,
    save_ensemble,
)
from .utils.config import settings
from .utils.logger import get_logger, setup_logging
from .utils.metrics import metrics

logger = get_logger(__name__)

INSTANCE_FILE = "instance.json"
STAGE1_FILE = "stage1.json"
STAGE2_FILE = "stage2.json"
STAGE2_TABLE = "stage2.csv"
SUMMARY_FILE = "summary.txt"
LP_FILE = "stage1.lp"
ENSEMBLE_DIR = "ensembles"
REPORT_DIR = "report"


class ExitCode(IntEnum):
    OK = 0
    ERROR = 1
    INVALID = 2
    INFEASIBLE = 3
    TIMEOUT = 4
    DEGENERATE = 5


class CommandFailed(SupplyChainError):
    """A command stopped with a non-zero exit code."""

    def __init__(self, message: str, code: ExitCode):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, data: Dict[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(path, e) from e
    return path


def _read_json(path: Path, what: str) -> Dict[str, Any]:
    if not path.exists():
        raise CommandFailed(f"{what} not found: {path}", ExitCode.INVALID)
    return json.loads(path.read_text(encoding="utf-8"))


def format_summary(sol: Stage1Solution, report: Optional[Stage2Report]) -> str:
    lines = [
        f"status: {sol.status.value}",
        f"gap: {sol.gap:.6g}",
        f"nodes: {sol.nodes_explored}",
        f"TC: {sol.tc:.6f}",
        f"open warehouses: {[int(j) for j in np.flatnonzero(sol.y)]}",
    ]
    if report is None:
        lines.append("TC1: n/a (no second stage)")
    else:
        lines.append(f"TC1: {report.tc1:.6f}")
        lines.append("ELD per customer:")
        lines += [f"  k={k}: {eld:.6f}" for k, eld in enumerate(report.eld)]
    return "\n".join(lines) + "\n"


class Pipeline:
    """
    Runs the stages of one configured experiment against an output directory.

    Each stage reads what the previous one wrote, so stages can also be run as
    separate commands.
    """

    def __init__(
        self, cfg: RunConfig, out_dir: Optional[Path] = None, dump_tensors: bool = False
    ):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.output_dir)
        self.dump_tensors = dump_tensors
        self.written: List[Path] = []

    # -------------------------------------------------------------------------
    # Stages
    # -------------------------------------------------------------------------

    def generate(self, instance_path: Optional[Path] = None) -> InstanceSpec:
        with metrics.track_stage("generate"):
            spec = self.cfg.instance.resolve()
        report = validate_instance(spec)
        if not report.ok:
            raise CommandFailed(_format_violations(report.violations), ExitCode.INVALID)
        path = instance_path or self.out_dir / INSTANCE_FILE
        self.written.append(save_instance(spec, path))
        return spec

    def solve(
        self, spec: InstanceSpec, write_lp_file: bool = False
    ) -> Tuple[Stage1Solution, Optional[Stage2Report]]:
        report = validate_instance(spec)
        if not report.ok:
            raise CommandFailed(_format_violations(report.violations), ExitCode.INVALID)
        instance_path = self.out_dir / INSTANCE_FILE
        if not instance_path.exists() or load_instance(instance_path) != spec:
            self.written.append(save_instance(spec, instance_path))

        problem = build_stage1(spec, self.cfg.stage2.safety_factor)
        if write_lp_file:
            self.written.append(write_lp(problem, self.out_dir / LP_FILE))

        with metrics.track_stage("solve", variables=problem.n_vars, rows=problem.n_rows):
            result = solve_milp(problem, self.cfg.solver)
        metrics.increment("bnb_nodes", result.nodes_explored)
        metrics.increment("lp_iterations", result.lp_iterations)

        if not result.has_incumbent:
            code = (
                ExitCode.INFEASIBLE
                if result.status == SolveStatus.INFEASIBLE
                else ExitCode.TIMEOUT
            )
            self.written.append(
                _write_json(
                    self.out_dir / STAGE1_FILE,
                    {"status": result.status.value, "nodes_explored": result.nodes_explored},
                )
            )
            raise CommandFailed(f"stage 1 ended {result.status.value} without a solution", code)

        sol = extract_stage1(problem, result.x, result.status, result.gap, result.nodes_explored)
        sol.metadata.update(
            {
                "bound": float(result.bound),
                "lp_iterations": result.lp_iterations,
                "variables": problem.n_vars,
                "rows": problem.n_rows,
                "binaries": problem.n_binaries,
            }
        )
        self.written.append(_write_json(self.out_dir / STAGE1_FILE, sol.to_dict()))
        logger.info("Stage 1 solved", tc=sol.tc, gap=sol.gap, status=sol.status.value)

        stage2: Optional[Stage2Report] = None
        with metrics.track_stage("stage2"):
            try:
                stage2 = run_stage2(spec, sol, self.cfg.stage2)
            except NoWarehouseOpen as e:
                logger.warning("Second stage skipped", reason=str(e))
        if stage2 is not None:
            self.written.append(_write_json(self.out_dir / STAGE2_FILE, stage2.to_dict()))
            table_path = self.out_dir / STAGE2_TABLE
            stage2.to_frame().to_csv(
                table_path, index=False, float_format="%.17g", lineterminator="\n"
            )
            self.written.append(table_path)

        summary_path = self.out_dir / SUMMARY_FILE
        summary_path.write_text(format_summary(sol, stage2), encoding="utf-8")
        self.written.append(summary_path)
        return sol, stage2

    def perturb(
        self,
        spec: Optional[InstanceSpec] = None,
        sol: Optional[Stage1Solution] = None,
    ) -> Tuple[List[NoiseEnsemble], List[str]]:
        """Run every noise spec; returns the usable ensembles and the labels that degenerated."""
        spec = spec or load_instance(self._require(INSTANCE_FILE))
        if sol is None:
            sol = self._load_solution()
        realized = None
        stage2_path = self.out_dir / STAGE2_FILE
        if stage2_path.exists():
            realized = np.array(_read_json(stage2_path, "stage-2 report")["realized_demand"])

        ensemble_dir = self.out_dir / ENSEMBLE_DIR
        usable: List[NoiseEnsemble] = []
        degenerate: List[str] = []
        for noise in self.cfg.noise:
            log = logger.bind(noise=noise.name)
            with metrics.track_stage("ensemble", noise=noise.name, n=self.cfg.ensemble.n):
                try:
                    ens: Optional[NoiseEnsemble] = run_ensemble(
                        spec, sol, noise, self.cfg.ensemble, self.cfg.stage2, realized
                    )
                except TooFewFeasible as e:
                    log.warning("Ensemble degenerate", reason=str(e))
                    degenerate.append(noise.name)
                    ens = e.ensemble
            if ens is None:
                continue
            metrics.increment("feasible_replicates", ens.feasible_count)
            self.written += save_ensemble(ens, ensemble_dir, self.dump_tensors)
            if ens.selected.any():
                usable.append(ens)
        return usable, degenerate

    def report(
        self,
        ensembles: Optional[List[NoiseEnsemble]] = None,
        sol: Optional[Stage1Solution] = None,
    ) -> List[Path]:
        if sol is None:
            sol = self._load_solution()
        if ensembles is None:
            ensembles = self._load_ensembles()
        if not ensembles:
            raise CommandFailed("no usable noise ensemble to report on", ExitCode.DEGENERATE)
        det_tc1 = None
        stage2_path = self.out_dir / STAGE2_FILE
        if stage2_path.exists():
            det_tc1 = float(_read_json(stage2_path, "stage-2 report")["tc1"])
        with metrics.track_stage("report", ensembles=len(ensembles)):
            files = write_report(self.out_dir / REPORT_DIR, sol, ensembles, det_tc1)
        self.written += files
        return files

    def finalize(self, exclude: Sequence[Path] = ()) -> Path:
        """Manifest over every artifact currently in the output directory."""
        skip = {Path(p).resolve() for p in exclude}
        files = [
            p
            for p in sorted(self.out_dir.rglob("*"))
            if p.is_file() and p.name != "manifest.json" and p.resolve() not in skip
        ]
        return write_manifest(
            self.out_dir,
            self.cfg.config_hash(),
            self.cfg.seeds(),
            files,
            extra={"noise": [spec.name for spec in self.cfg.noise]},
        )

    # -------------------------------------------------------------------------
    # Helpers
    # -------------------------------------------------------------------------

    def _load_solution(self) -> Stage1Solution:
        data = _read_json(self.out_dir / STAGE1_FILE, "stage-1 solution")
        if "p" not in data:
            raise CommandFailed(
                f"stage 1 ended {data.get('status')} without a solution", ExitCode.INVALID
            )
        return Stage1Solution.from_dict(data)

    def _require(self, name: str) -> Path:
        path = self.out_dir / name
        if not path.exists():
            raise CommandFailed(f"missing {path}; run solve first", ExitCode.INVALID)
        return path

    def _load_ensembles(self) -> List[NoiseEnsemble]:
        ensemble_dir = self.out_dir / ENSEMBLE_DIR
        loaded = []
        for noise in self.cfg.noise:
            if not (ensemble_dir / f"{noise.name}.json").exists():
                logger.warning("No stored ensemble", noise=noise.name)
                continue
            ens = load_ensemble(ensemble_dir, noise.name)
            if ens.selected.any():
                loaded.append(ens)
        return loaded


def _format_violations(violations: List[Tuple[str, str]]) -> str:
    return "; ".join(f"{path}: {msg}" for path, msg in violations)


# =============================================================================
# Commands
# =============================================================================


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    updates: Dict[str, Any] = {}

    instance: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        instance["seed"] = args.seed
    if getattr(args, "size", None) is not None:
        instance.update(n_plants=args.size, n_warehouses=args.size, n_customers=args.size)
    if getattr(args, "sizes", None) is not None:
        n_i, n_j, n_k = args.sizes
        instance.update(n_plants=n_i, n_warehouses=n_j, n_customers=n_k)
    if getattr(args, "instance", None) is not None:
        instance["path"] = str(args.instance)
    if instance:
        updates["instance"] = instance

    if getattr(args, "time_limit", None) is not None:
        updates["solver"] = {"time_limit_seconds": args.time_limit}

    ensemble: Dict[str, Any] = {}
    if getattr(args, "n", None) is not None:
        ensemble["n"] = args.n
    if getattr(args, "noise_seed", None) is not None:
        ensemble["seed"] = args.noise_seed
    workers = getattr(args, "workers", None) or (settings.workers if settings.workers > 1 else None)
    if workers is not None:
        ensemble["workers"] = workers
    if ensemble:
        updates["ensemble"] = ensemble

    if getattr(args, "scale", None) is not None:
        updates["noise"] = [
            {**spec.model_dump(mode="json"), "scale": args.scale} for spec in cfg.noise
        ]
    if getattr(args, "out", None) is not None and args.command != "generate":
        updates["output_dir"] = str(args.out)

    return cfg.with_overrides(**updates) if updates else cfg


def cmd_generate(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    pipeline = Pipeline(cfg)
    target = Path(args.out) if args.out else pipeline.out_dir / INSTANCE_FILE
    pipeline.generate(target)
    print(target)
    return ExitCode.OK


def cmd_validate(args: argparse.Namespace) -> ExitCode:
    spec = load_instance(args.path)
    report = validate_instance(spec)
    for path, msg in report.violations:
        print(f"ERROR {path}: {msg}")
    for msg in report.warnings:
        print(f"WARNING {msg}")
    if report.ok:
        print(f"{args.path}: ok ({spec.n_plants}x{spec.n_warehouses}x{spec.n_customers})")
        return ExitCode.OK
    return ExitCode.INVALID


def cmd_solve(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    pipeline = Pipeline(cfg)
    spec = cfg.instance.resolve()
    sol, stage2 = pipeline.solve(spec, write_lp_file=args.lp)
    print(format_summary(sol, stage2), end="")
    pipeline.finalize(exclude=[args.metrics] if args.metrics else ())
    return ExitCode.OK


def cmd_perturb(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    pipeline = Pipeline(cfg, dump_tensors=args.dump_tensors)
    ensembles, degenerate = pipeline.perturb()
    if ensembles:
        pipeline.report(ensembles)
    pipeline.finalize(exclude=[args.metrics] if args.metrics else ())
    _print_ensembles(ensembles, degenerate)
    return ExitCode.DEGENERATE if degenerate else ExitCode.OK


def cmd_report(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    pipeline = Pipeline(cfg)
    files = pipeline.report()
    pipeline.finalize(exclude=[args.metrics] if args.metrics else ())
    for path in files:
        print(path)
    return ExitCode.OK


def cmd_pipeline(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    pipeline = Pipeline(cfg, dump_tensors=args.dump_tensors)
    spec = pipeline.generate()
    sol, _ = pipeline.solve(spec, write_lp_file=args.lp)
    ensembles, degenerate = pipeline.perturb(spec, sol)
    if ensembles:
        pipeline.report(ensembles, sol)
    manifest = pipeline.finalize(exclude=[args.metrics] if args.metrics else ())
    _print_ensembles(ensembles, degenerate)
    print(manifest)
    return ExitCode.DEGENERATE if degenerate else ExitCode.OK


def _print_ensembles(ensembles: List[NoiseEnsemble], degenerate: List[str]) -> None:
    for ens in ensembles:
        rms = ", ".join(f"{g}={v:.6g}" for g, v in ens.rms.items())
        print(f"{ens.noise.name}: feasible {ens.feasible_count}/{ens.n}; rms {rms}")
    for label in degenerate:
        print(f"{label}: fewer than two usable replicates")


# =============================================================================
# Parser
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scnd",
        description="Two-stage supply chain network design with noise ensembles",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    parser.add_argument(
        "--metrics", type=Path, help="Export run metrics (timings) to this JSON file"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="Run config JSON (defaults when omitted)")
        p.add_argument("--out", type=Path, help="Output directory (file for generate)")

    def instance_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, help="Instance generator seed")
        p.add_argument("--size", type=int, help="Plants = warehouses = customers = SIZE")
        p.add_argument("--sizes", type=int, nargs=3, metavar=("I", "J", "K"), help="Set sizes")

    def noise_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scale", type=float, help="Override the scale of every noise spec")
        p.add_argument("--n", type=int, help="Replicates per ensemble")
        p.add_argument("--noise-seed", type=int, help="Noise seed")
        p.add_argument("--workers", type=int, help="Worker processes per ensemble")
        p.add_argument("--dump-tensors", action="store_true", help="Also write X_ee' tensors")

    p = sub.add_parser("generate", help="Draw a synthetic instance")
    common(p)
    instance_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="Check an instance file")
    p.add_argument("path", type=Path)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="Solve stage 1 and evaluate stage 2")
    common(p)
    instance_flags(p)
    p.add_argument("--instance", type=Path, help="Instance JSON (instead of generating)")
    p.add_argument("--time-limit", type=float, help="Branch-and-bound wall-clock limit (s)")
    p.add_argument("--lp", action="store_true", help="Also write the program in LP format")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("perturb", help="Run the noise suite on a solved network")
    common(p)
    noise_flags(p)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("report", help="Rebuild report CSVs from stored ensembles")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="generate, solve, perturb and report in one go")
    common(p)
    instance_flags(p)
    noise_flags(p)
    p.add_argument("--instance", type=Path, help="Instance JSON (instead of generating)")
    p.add_argument("--time-limit", type=float, help="Branch-and-bound wall-clock limit (s)")
    p.add_argument("--lp", action="store_true", help="Also write the program in LP format")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(
        log_level="DEBUG" if args.verbose else settings.log_level,
        log_file=settings.log_file,
        json_format=settings.json_logs,
    )

    metrics.start_run(run_id=args.command)
    code = ExitCode.ERROR
    try:
        code = args.func(args)
    except CommandFailed as e:
        code = e.code
        logger.error("Command failed", command=args.command, reason=str(e), exit_code=int(code))
        print(f"error: {e}", file=sys.stderr)
    except (
        ConfigError,
        InstanceFormatError,
        InfeasibleRanges,
        IoFailure,
        SingleCell,
        ValueError,
        OSError,
    ) as e:
        code = ExitCode.INVALID
        metrics.record_error(type(e).__name__, str(e))
        logger.error("Invalid input", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
    except Exception as e:
        metrics.record_error(type(e).__name__, str(e))
        logger.exception("Command failed", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
    finally:
        metrics.end_run(success=code == ExitCode.OK)
        if args.metrics:
            metrics.export_metrics(args.metrics)
    return int(code)


if __name__ == "__main__":
    sys.exit(main())
