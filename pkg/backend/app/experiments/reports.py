"""
Experiment reports and their CSV + JSON files.

Every report is written as ``<out>/<experiment>.csv`` (one row per table entry, fixed column
order, 17 significant digits) and ``<out>/<experiment>.json`` (the full report). The JSON
side file is a tagged union so it can be loaded back without knowing its kind.
"""

import csv
import io
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import msgspec
import numpy as np

from backend.app.experiments.statistics import Aggregate, aggregate
from backend.app.utils.errors import ParseError, ReportIOError

logger = logging.getLogger(__name__)

MC_METRICS = ("pred_err_n", "l2_err", "hminus1_err", "residual_n", "lam")
AGGREGATE_TOLERANCE = 1e-12


class TableReport(msgspec.Struct, tag="table", kw_only=True):
    experiment: str
    columns: List[str]
    rows: List[List[Any]]
    summary: Dict[str, Any] = msgspec.field(default_factory=dict)

    def table(self) -> Tuple[List[str], List[List[Any]]]:
        return self.columns, self.rows


class McRecord(msgspec.Struct, forbid_unknown_fields=True):
    replication: int
    seed: int
    lam: float
    pred_err_n: float
    l2_err: float
    hminus1_err: float
    residual_n: float


class McReport(msgspec.Struct, tag="mc", kw_only=True):
    """
    Monte Carlo study: one record per replication plus distribution summaries.

    ``qq_sample`` and ``qq_normal`` are the standardized ordered prediction errors and the
    matching standard normal quantiles. rho0 = ||f*|| + sigma n^{-1/2}.
    """

    experiment: str = "mc_study"
    records: List[McRecord]
    aggregates: Dict[str, Aggregate]
    qq_sample: List[float]
    qq_normal: List[float]
    qq_correlation: Optional[float]
    tail_fraction: float
    histogram_edges: List[float]
    histogram_counts: List[int]
    rho0: float
    summary: Dict[str, Any] = msgspec.field(default_factory=dict)

    def table(self) -> Tuple[List[str], List[List[Any]]]:
        columns = ["replication", "seed", *MC_METRICS]
        rows = [[r.replication, r.seed, *(getattr(r, name) for name in MC_METRICS)] for r in self.records]
        return columns, rows


class SpectralReport(msgspec.Struct, tag="spectral", kw_only=True):
    """Generalized eigenvalues rho_k of M v = rho G v, ascending, with the fitted decay slope."""

    experiment: str = "eig_study"
    k: List[int]
    eigenvalues: List[float]
    slope: Optional[float]
    reference_slope: float
    summary: Dict[str, Any] = msgspec.field(default_factory=dict)

    def table(self) -> Tuple[List[str], List[List[Any]]]:
        return ["k", "rho"], [[k, rho] for k, rho in zip(self.k, self.eigenvalues)]


Report = Union[TableReport, McReport, SpectralReport]


def mc_aggregates(records: List[McRecord]) -> Dict[str, Aggregate]:
    if not records:
        return {}
    return {name: aggregate([getattr(r, name) for r in records]) for name in MC_METRICS}


def _enc_hook(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise NotImplementedError(f"cannot encode objects of type {type(obj)}")


_encoder = msgspec.json.Encoder(enc_hook=_enc_hook)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def render_csv(report: Report) -> str:
    """CSV text of the report table; header only when there are no rows."""
    columns, rows = report.table()
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(value) for value in row])
    return buffer.getvalue()


def render_json(report: Report) -> bytes:
    return msgspec.json.format(_encoder.encode(report), indent=2)


def emit_report(report: Report, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Write ``<out_dir>/<experiment>.csv`` and ``<out_dir>/<experiment>.json``.

    Raises:
        ReportIOError: the directory or a file cannot be written
    """
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{report.experiment}.csv"
    json_path = out_dir / f"{report.experiment}.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(render_csv(report), encoding="utf-8")
        json_path.write_bytes(render_json(report))
    except OSError as exc:
        raise ReportIOError(f"cannot write report to {out_dir}: {exc}") from exc
    logger.info(f"Report written to {csv_path} and {json_path}")
    return csv_path, json_path


def _check_aggregates(report: McReport, path: Path) -> None:
    recomputed = mc_aggregates(report.records)
    if set(recomputed) != set(report.aggregates):
        raise ParseError(f"{path}: aggregate keys {sorted(report.aggregates)} do not match the records")
    for name, expected in recomputed.items():
        stored = report.aggregates[name]
        for field in ("mean", "std"):
            a, b = getattr(stored, field), getattr(expected, field)
            if not math.isclose(a, b, rel_tol=AGGREGATE_TOLERANCE, abs_tol=AGGREGATE_TOLERANCE):
                raise ParseError(f"{path}: stored {name}.{field}={a!r} differs from the records ({b!r})")


def load_report(path: Union[str, Path]) -> Report:
    """
    Load a JSON side file; Monte Carlo aggregates are checked against their records.

    Raises:
        ReportIOError: the file cannot be read
        ParseError: malformed JSON, unknown report kind or inconsistent aggregates
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ReportIOError(f"cannot read report {path}: {exc}") from exc
    try:
        report = msgspec.json.decode(raw, type=Report)
    except (msgspec.ValidationError, msgspec.DecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if isinstance(report, McReport):
        if len(report.records) != len(report.qq_sample):
            raise ParseError(f"{path}: {len(report.records)} records but {len(report.qq_sample)} QQ pairs")
        _check_aggregates(report, path)
    return report
