"""
Run reports: deterministic-minus-ensemble difference matrices, the per-noise
deviation table, cost and production comparisons, CSV export and the run
manifest.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import SupplyChainError
from .network.milp import Stage1Solution
from .stochastic.ensemble import NoiseEnsemble
from .stochastic.noise import NOISE_GROUPS
from .utils.logger import get_logger

logger = get_logger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"


class SingleCell(SupplyChainError):
    """A sample standard deviation needs at least two cells."""


class IoFailure(SupplyChainError):
    """An artifact could not be written or read."""

    def __init__(self, path: Union[str, Path], cause: BaseException):
        super().__init__(f"{path}: {cause}")
        self.path = Path(path)
        self.cause = cause


@dataclass
class DiffMatrix:
    """Deterministic value minus ensemble mean, one cell per variable of the group."""

    group: str
    values: np.ndarray

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=[str(c) for c in range(self.cols)])
        frame.index.name = "row"
        return frame


@dataclass
class DeviationTable:
    labels: List[str]
    sigma: np.ndarray
    group: str = "Qij"

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.labels, self.sigma.tolist()))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"label": self.labels, "sigma": self.sigma})


def _deterministic(det: Stage1Solution, group: str) -> np.ndarray:
    values = {"P": det.p, "Qij": det.q_ij, "Qjk": det.q_jk}[group]
    return np.asarray(values, dtype=float)


def _as_matrix(values: np.ndarray) -> np.ndarray:
    return values.reshape(-1, 1) if values.ndim == 1 else values


def diff_matrix(det: Stage1Solution, ens: NoiseEnsemble, group: str = "Qij") -> DiffMatrix:
    """
    Cellwise deterministic value minus the ensemble mean over the replicates that
    enter the aggregates. Production comes back as a single-column matrix.
    """
    if group not in NOISE_GROUPS:
        raise ValueError(f"unknown variable group {group!r}")
    if not ens.selected.any():
        raise ValueError(f"{ens.noise.name}: no replicate available for the ensemble mean")
    with np.errstate(invalid="ignore", over="ignore"):
        values = _deterministic(det, group) - ens.mean_of(group)
    return DiffMatrix(group=group, values=_as_matrix(values))


def deviation_table(
    det: Stage1Solution,
    ensembles: Sequence[NoiseEnsemble],
    group: str = "Qij",
) -> DeviationTable:
    """Sample standard deviation (divisor n-1) of each flattened difference matrix."""
    labels: List[str] = []
    sigma: List[float] = []
    for ens in ensembles:
        flat = diff_matrix(det, ens, group).values.ravel()
        if flat.size < 2:
            raise SingleCell(f"{group} has {flat.size} cell(s); the sample deviation needs two")
        labels.append(ens.noise.name)
        with np.errstate(invalid="ignore", over="ignore"):
            sigma.append(float(np.std(flat, ddof=1)))
    return DeviationTable(labels=labels, sigma=np.array(sigma, dtype=float), group=group)


def production_series(det: Stage1Solution, ensembles: Sequence[NoiseEnsemble]) -> pd.DataFrame:
    """Per-plant production: deterministic next to each noise family's ensemble mean."""
    frame = pd.DataFrame({"deterministic": det.p})
    for ens in ensembles:
        frame[ens.noise.name] = ens.mean_of("P") if ens.selected.any() else np.nan
    frame.index.name = "plant"
    return frame


def cost_comparison(
    det: Stage1Solution,
    ensembles: Sequence[NoiseEnsemble],
    det_tc1: Optional[float] = None,
) -> pd.DataFrame:
    """Deterministic TC/TC1 against the mean TC/TC1 of each ensemble's replicates."""
    rows = [{"label": "deterministic", "tc": det.tc, "tc1": np.nan if det_tc1 is None else det_tc1}]
    for ens in ensembles:
        sel = ens.selected
        tc1 = np.nan
        if ens.tc1 is not None and sel.any() and not np.all(np.isnan(ens.tc1[sel])):
            tc1 = float(np.nanmean(ens.tc1[sel]))
        rows.append(
            {
                "label": ens.noise.name,
                "tc": float(np.mean(ens.tc[sel])) if sel.any() else np.nan,
                "tc1": tc1,
            }
        )
    return pd.DataFrame(rows, columns=["label", "tc", "tc1"])


def ensemble_summary(ensembles: Sequence[NoiseEnsemble]) -> pd.DataFrame:
    """Feasibility counters and per-group RMS, one row per noise spec."""
    rows = []
    for ens in ensembles:
        row: Dict[str, Any] = {
            "label": ens.noise.name,
            "n": ens.n,
            "feasible_count": ens.feasible_count,
            "injections_passed": np.nan if ens.passed is None else int(ens.passed.sum()),
        }
        for group in NOISE_GROUPS:
            row[f"rms_{group}"] = ens.rms.get(group, np.nan)
            row[f"negative_radicands_{group}"] = ens.negative_radicands.get(group, 0)
        rows.append(row)
    return pd.DataFrame(rows)


# =============================================================================
# Export
# =============================================================================


def export_csv(
    data: Union[DiffMatrix, DeviationTable, pd.DataFrame],
    path: Union[str, Path],
) -> Path:
    """
    Write comma-separated text with a header row and 17 significant digits.

    Line endings are always "\\n", so identical inputs give identical bytes on
    every platform.

    Raises:
        IoFailure: the destination cannot be written
    """
    path = Path(path)
    if isinstance(data, DiffMatrix):
        frame, index = data.to_frame(), True
    elif isinstance(data, DeviationTable):
        frame, index = data.to_frame(), False
    else:
        frame, index = data, data.index.name is not None

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(
            path,
            index=index,
            float_format=FLOAT_FORMAT,
            lineterminator="\n",
            na_rep="nan",
        )
    except OSError as e:
        raise IoFailure(path, e) from e

    logger.debug("CSV written", path=str(path), rows=len(frame))
    return path


def read_matrix_csv(path: Union[str, Path]) -> np.ndarray:
    """Parse a matrix written by export_csv back to floats."""
    try:
        frame = pd.read_csv(path, index_col=0, float_precision="round_trip")
    except OSError as e:
        raise IoFailure(path, e) from e
    return frame.to_numpy(dtype=float)


def read_table_csv(path: Union[str, Path]) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip")
    except OSError as e:
        raise IoFailure(path, e) from e


# =============================================================================
# Manifest & plot stub
# =============================================================================


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    out_dir: Union[str, Path],
    config_hash: str,
    seeds: Mapping[str, int],
    files: Iterable[Union[str, Path]],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Record the config hash, the seeds and a checksum of every emitted file.

    Contains nothing wall-clock dependent, so replaying a config reproduces the
    manifest byte for byte.
    """
    out_dir = Path(out_dir)
    entries = {}
    for f in sorted({Path(p) for p in files}):
        try:
            rel = f.relative_to(out_dir).as_posix()
        except ValueError:
            rel = f.name
        entries[rel] = sha256_file(f)
    manifest = {
        "config_hash": config_hash,
        "seeds": dict(sorted(seeds.items())),
        "files": entries,
        **(extra or {}),
    }
    path = out_dir / MANIFEST_NAME
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(path, e) from e
    logger.info("Manifest written", path=str(path), files=len(entries))
    return path


PLOT_SCRIPT = '''"""Plot the difference matrices and the production comparison of this run."""

import sys
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

here = Path(__file__).resolve().parent
labels = {labels!r}

fig, axes = plt.subplots(1, len(labels), figsize=(4 * len(labels), 4), squeeze=False)
for ax, label in zip(axes[0], labels):
    matrix = pd.read_csv(here / f"diff_Qij_{{label}}.csv", index_col=0)
    image = ax.imshow(matrix.to_numpy(), cmap="RdBu", vmin=-100, vmax=100)
    ax.set_title(label)
    ax.set_xlabel("warehouse j")
    ax.set_ylabel("plant i")
fig.colorbar(image, ax=axes.ravel().tolist())
fig.savefig(here / "diff_Qij.png", dpi=150)

production = pd.read_csv(here / "production.csv", index_col=0)
production.plot(marker="o").figure.savefig(here / "production.png", dpi=150)

if "--show" in sys.argv:
    plt.show()
'''


def write_plot_script(out_dir: Union[str, Path], labels: Sequence[str]) -> Path:
    path = Path(out_dir) / "plot_report.py"
    try:
        path.write_text(PLOT_SCRIPT.format(labels=list(labels)), encoding="utf-8")
    except OSError as e:
        raise IoFailure(path, e) from e
    return path


def write_report(
    out_dir: Union[str, Path],
    det: Stage1Solution,
    ensembles: Sequence[NoiseEnsemble],
    det_tc1: Optional[float] = None,
) -> List[Path]:
    """All per-run CSVs: diff matrices per noise and group, deviation table, summaries."""
    out_dir = Path(out_dir)
    written: List[Path] = []
    for ens in ensembles:
        for group in NOISE_GROUPS:
            matrix = diff_matrix(det, ens, group)
            written.append(export_csv(matrix, out_dir / f"diff_{group}_{ens.noise.name}.csv"))
    table = deviation_table(det, ensembles)
    written.append(export_csv(table, out_dir / "deviation.csv"))
    written.append(export_csv(ensemble_summary(ensembles), out_dir / "ensembles.csv"))
    written.append(export_csv(production_series(det, ensembles), out_dir / "production.csv"))
    written.append(export_csv(cost_comparison(det, ensembles, det_tc1), out_dir / "costs.csv"))
    written.append(write_plot_script(out_dir, [e.noise.name for e in ensembles]))

    logger.info("Report written", files=len(written), deviation=table.as_dict())
    return written

