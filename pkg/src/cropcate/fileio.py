"""Readers and writers for every file the pipeline exchanges.

All writers are deterministic: fixed column orders, repr-formatted floats
(shortest round-trip representation), LF line endings, and sorted JSON
keys. Rerunning a command with identical inputs reproduces every output
byte for byte, independent of thread count.

Readers enforce the pinned schemas strictly and report violations with the
file, line, and column so a bad cell is locatable at a glance.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erfc

from .causal import (
    AteSummary,
    FirstStageDiagnostic,
    LinearCateModel,
    Z95,
)
from .core import CANONICAL_COLUMNS, FeatureMatrix, LabeledDataset, Scaler
from .errors import GeometryError, SchemaError
from .geo import EnvTable, JoinReport, OutcomeTable, ParcelRecord, parse_wkt_polygon
from .interpret import EffectCurve, InterpreterTree, render_tree, to_nested
from .synth import McReport, theta_label

PARCELS_HEADER = ("parcel_id", "year", "crop_code", "wkt")
ENV_HEADER = ("cell_id", "year") + CANONICAL_COLUMNS
OUTCOME_HEADER = ("cell_id", "year", "npp")
DATASET_HEADER = (("cell_id", "x_center", "y_center") + CANONICAL_COLUMNS
                  + ("treatment", "outcome"))
CATE_REPORT_HEADER = ("cell_id", "x_center", "y_center", "theta", "std_error",
                      "ci_low", "ci_high", "p_value", "treated", "propensity")
CURVE_HEADER = ("feature", "bin_center", "mean_effect", "ci_low", "ci_high", "n")
PROPENSITY_HEADER = ("cell_id", "propensity", "kept")
COVERAGE_HEADER = ("cell_id", "mean_coverage")
REPS_HEADER = ("rep", "ok", "error", "ate_hat", "ate_se", "ci_low", "ci_high",
               "covered", "naive_ate", "slope_x1", "slope_x1_se", "n_kept",
               "ortho_gap")

SCALER_FORMAT = "cropcate-scaler"
CATE_MODEL_FORMAT = "cropcate-cate-model"
MANIFEST_FORMAT = "cropcate-manifest"
FORMAT_VERSION = 1


def _fmt(x) -> str:
    """Shortest decimal string that round-trips to the same float."""
    return repr(float(x))


def write_text(path, text: str) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as handle:
        handle.write(text)


def read_text(path) -> str:
    with open(path, "r", encoding="utf-8") as handle:
        return handle.read()


def _write_json(path, doc: dict) -> None:
    write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _read_json(path, expected_format: str) -> dict:
    try:
        doc = json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}", file=str(path)) from None
    if not isinstance(doc, dict) or doc.get("format") != expected_format:
        raise SchemaError(
            f"{path}: expected a '{expected_format}' document",
            file=str(path), found=doc.get("format") if isinstance(doc, dict) else None)
    if doc.get("version") != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported version {doc.get('version')!r}",
                          file=str(path))
    return doc


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# CSV plumbing
# ---------------------------------------------------------------------------


def _check_header(path, actual: Sequence[str], expected: Sequence[str]) -> None:
    if tuple(actual) == tuple(expected):
        return
    missing = [c for c in expected if c not in actual]
    extra = [c for c in actual if c not in expected]
    parts = [f"{path}: header mismatch; expected {','.join(expected)}"]
    if missing:
        parts.append(f"missing column(s): {', '.join(missing)}")
    if extra:
        parts.append(f"unexpected column(s): {', '.join(extra)}")
    if not missing and not extra:
        parts.append("columns are out of order")
    raise SchemaError("; ".join(parts), file=str(path),
                      missing=missing, unexpected=extra)


def _read_csv_rows(path, expected_header: Sequence[str]):
    """Yield (line_number, row) for each data row after validating the header."""
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: file is empty", file=str(path)) from None
        _check_header(path, header, expected_header)
        for row in reader:
            if not row:
                continue  # ignore blank lines
            line = reader.line_num
            if len(row) != len(expected_header):
                raise SchemaError(
                    f"{path}:{line}: expected {len(expected_header)} fields, "
                    f"found {len(row)}", file=str(path), line=line)
            yield line, row


def _parse_int(value: str, path, line: int, column: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise SchemaError(
            f"{path}:{line}: column '{column}': cannot parse integer from "
            f"{value!r}", file=str(path), line=line, column=column) from None


def _parse_float(value: str, path, line: int, column: str) -> float:
    try:
        parsed = float(value)
    except ValueError:
        raise SchemaError(
            f"{path}:{line}: column '{column}': cannot parse number from "
            f"{value!r}", file=str(path), line=line, column=column) from None
    if not math.isfinite(parsed):
        raise SchemaError(
            f"{path}:{line}: column '{column}': non-finite value {value!r}",
            file=str(path), line=line, column=column)
    return parsed


def _parse_flag(value: str, path, line: int, column: str) -> int:
    flag = _parse_int(value, path, line, column)
    if flag not in (0, 1):
        raise SchemaError(
            f"{path}:{line}: column '{column}': expected 0 or 1, found "
            f"{value!r}", file=str(path), line=line, column=column)
    return flag


def _csv_writer(handle):
    return csv.writer(handle, lineterminator="\n")


# ---------------------------------------------------------------------------
# ingest inputs: parcels, environmental covariates, outcome
# ---------------------------------------------------------------------------


def read_parcels_csv(path) -> List[ParcelRecord]:
    """Parcel-year crop declarations with WKT polygon footprints."""
    records: List[ParcelRecord] = []
    seen: Dict[Tuple[str, int], int] = {}
    for line, row in _read_csv_rows(path, PARCELS_HEADER):
        parcel_id, year_text, crop_code, wkt = row
        if not parcel_id:
            raise SchemaError(f"{path}:{line}: column 'parcel_id': empty id",
                              file=str(path), line=line, column="parcel_id")
        if not crop_code:
            raise SchemaError(f"{path}:{line}: column 'crop_code': empty code",
                              file=str(path), line=line, column="crop_code")
        year = _parse_int(year_text, path, line, "year")
        key = (parcel_id, year)
        if key in seen:
            raise SchemaError(
                f"{path}:{line}: duplicate parcel-year ({parcel_id}, {year}); "
                f"first seen on line {seen[key]}",
                file=str(path), line=line, column="parcel_id")
        seen[key] = line
        try:
            ring = parse_wkt_polygon(wkt)
            records.append(ParcelRecord(parcel_id=parcel_id, year=year,
                                        crop_code=crop_code, polygon=ring))
        except GeometryError as exc:
            raise GeometryError(f"{path}:{line}: {exc}", file=str(path),
                                line=line, **exc.context) from None
    return records


def write_parcels_csv(path, records: Sequence[ParcelRecord]) -> int:
    from .geo import format_wkt_polygon

    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(PARCELS_HEADER)
        for rec in records:
            writer.writerow([rec.parcel_id, rec.year, rec.crop_code,
                             format_wkt_polygon(rec.polygon)])
    return len(records)


def read_env_csv(path) -> EnvTable:
    """Per-cell, per-year environmental covariates in canonical column order."""
    cell_ids: List[int] = []
    years: List[int] = []
    values: List[List[float]] = []
    seen: Dict[Tuple[int, int], int] = {}
    for line, row in _read_csv_rows(path, ENV_HEADER):
        cid = _parse_int(row[0], path, line, "cell_id")
        year = _parse_int(row[1], path, line, "year")
        key = (cid, year)
        if key in seen:
            raise SchemaError(
                f"{path}:{line}: duplicate cell-year ({cid}, {year}); first "
                f"seen on line {seen[key]}",
                file=str(path), line=line, column="cell_id")
        seen[key] = line
        cell_ids.append(cid)
        years.append(year)
        values.append([_parse_float(row[2 + j], path, line, name)
                       for j, name in enumerate(CANONICAL_COLUMNS)])
    matrix = (np.array(values, dtype=np.float64) if values
              else np.empty((0, len(CANONICAL_COLUMNS))))
    return EnvTable(cell_ids=tuple(cell_ids), years=tuple(years), values=matrix)


def write_env_csv(path, table: EnvTable) -> int:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(ENV_HEADER)
        for i, (cid, year) in enumerate(zip(table.cell_ids, table.years)):
            writer.writerow([cid, year] + [_fmt(v) for v in table.values[i]])
    return len(table.cell_ids)


def read_outcome_csv(path) -> OutcomeTable:
    """Per-cell, per-year outcome (net primary productivity)."""
    cell_ids: List[int] = []
    years: List[int] = []
    npp: List[float] = []
    seen: Dict[Tuple[int, int], int] = {}
    for line, row in _read_csv_rows(path, OUTCOME_HEADER):
        cid = _parse_int(row[0], path, line, "cell_id")
        year = _parse_int(row[1], path, line, "year")
        key = (cid, year)
        if key in seen:
            raise SchemaError(
                f"{path}:{line}: duplicate cell-year ({cid}, {year}); first "
                f"seen on line {seen[key]}",
                file=str(path), line=line, column="cell_id")
        seen[key] = line
        cell_ids.append(cid)
        years.append(year)
        npp.append(_parse_float(row[2], path, line, "npp"))
    return OutcomeTable(cell_ids=tuple(cell_ids), years=tuple(years),
                        npp=np.array(npp, dtype=np.float64))


def write_outcome_csv(path, table: OutcomeTable) -> int:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(OUTCOME_HEADER)
        for cid, year, value in zip(table.cell_ids, table.years, table.npp):
            writer.writerow([cid, year, _fmt(value)])
    return len(table.cell_ids)


# ---------------------------------------------------------------------------
# assembled analysis dataset (standardized covariates) + scaler sidecar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetFile:
    """In-memory form of the assembled per-cell dataset file."""

    cell_ids: tuple
    centers: np.ndarray  # (n, 2) cell-center coordinates
    dataset: LabeledDataset


def write_dataset_csv(path, cell_ids: Sequence[int], centers: np.ndarray,
                      X: FeatureMatrix, treatment: np.ndarray,
                      outcome: np.ndarray) -> int:
    centers = np.asarray(centers, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(DATASET_HEADER)
        for i, cid in enumerate(cell_ids):
            row = [int(cid), _fmt(centers[i, 0]), _fmt(centers[i, 1])]
            row.extend(_fmt(v) for v in X.values[i])
            row.append(int(treatment[i]))
            row.append(_fmt(outcome[i]))
            writer.writerow(row)
    return len(cell_ids)


def read_dataset_csv(path) -> DatasetFile:
    cell_ids: List[int] = []
    centers: List[Tuple[float, float]] = []
    values: List[List[float]] = []
    treatment: List[int] = []
    outcome: List[float] = []
    p = len(CANONICAL_COLUMNS)
    for line, row in _read_csv_rows(path, DATASET_HEADER):
        cell_ids.append(_parse_int(row[0], path, line, "cell_id"))
        centers.append((_parse_float(row[1], path, line, "x_center"),
                        _parse_float(row[2], path, line, "y_center")))
        values.append([_parse_float(row[3 + j], path, line, name)
                       for j, name in enumerate(CANONICAL_COLUMNS)])
        treatment.append(_parse_flag(row[3 + p], path, line, "treatment"))
        outcome.append(_parse_float(row[4 + p], path, line, "outcome"))
    if not cell_ids:
        raise SchemaError(f"{path}: dataset has no rows", file=str(path))
    X = FeatureMatrix(column_names=CANONICAL_COLUMNS,
                      values=np.array(values, dtype=np.float64),
                      row_ids=tuple(cell_ids))
    dataset = LabeledDataset(X=X, y=np.array(outcome, dtype=np.float64),
                             t=np.array(treatment, dtype=np.int64))
    return DatasetFile(cell_ids=tuple(cell_ids),
                       centers=np.array(centers, dtype=np.float64),
                       dataset=dataset)


def scaler_sidecar_path(dataset_path) -> str:
    return str(dataset_path) + ".scaler.json"


def write_scaler_json(path, scaler: Scaler) -> None:
    doc = {"format": SCALER_FORMAT, "version": FORMAT_VERSION}
    doc.update(scaler.to_dict())
    _write_json(path, doc)


def read_scaler_json(path) -> Scaler:
    doc = _read_json(path, SCALER_FORMAT)
    return Scaler.from_dict(doc)


# ---------------------------------------------------------------------------
# ingest extras: agricultural coverage table and join report
# ---------------------------------------------------------------------------


def write_coverage_csv(path, cell_ids: Sequence[int],
                       coverage: Sequence[float]) -> int:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(COVERAGE_HEADER)
        for cid, cov in zip(cell_ids, coverage):
            writer.writerow([int(cid), _fmt(cov)])
    return len(cell_ids)


def read_coverage_csv(path) -> Dict[int, float]:
    table: Dict[int, float] = {}
    for line, row in _read_csv_rows(path, COVERAGE_HEADER):
        cid = _parse_int(row[0], path, line, "cell_id")
        if cid in table:
            raise SchemaError(f"{path}:{line}: duplicate cell_id {cid}",
                              file=str(path), line=line, column="cell_id")
        table[cid] = _parse_float(row[1], path, line, "mean_coverage")
    return table


def format_join_report(report: JoinReport, n_treated: int,
                       n_control: int) -> str:
    lines = [
        f"rows_out: {report.n_rows}",
        f"dropped_missing_parcels: {report.dropped_missing_parcels}",
        f"dropped_missing_env: {report.dropped_missing_env}",
        f"dropped_missing_outcome: {report.dropped_missing_outcome}",
        f"dropped_non_agricultural: {report.dropped_non_agricultural}",
        f"study_years: {','.join(str(y) for y in report.study_years)}",
        f"treatment_threshold: {_fmt(report.treatment_threshold)}",
        f"n_treated: {n_treated}",
        f"n_control: {n_control}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fitted model, per-row propensity, first-stage diagnostic block
# ---------------------------------------------------------------------------


def write_cate_model(path, model: LinearCateModel) -> None:
    doc = {
        "format": CATE_MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "intercept": float(model.intercept),
        "beta": [float(b) for b in model.beta],
        "covariance": [[float(v) for v in row] for row in model.covariance],
        "feature_names": list(model.feature_names),
        "n_rows": int(model.n_rows),
        "scaler": model.scaler.to_dict() if model.scaler is not None else None,
    }
    _write_json(path, doc)


def read_cate_model(path) -> LinearCateModel:
    doc = _read_json(path, CATE_MODEL_FORMAT)
    try:
        scaler = (Scaler.from_dict(doc["scaler"])
                  if doc["scaler"] is not None else None)
        return LinearCateModel(
            intercept=float(doc["intercept"]),
            beta=np.array(doc["beta"], dtype=np.float64),
            covariance=np.array(doc["covariance"], dtype=np.float64),
            feature_names=tuple(doc["feature_names"]),
            n_rows=int(doc["n_rows"]),
            scaler=scaler,
        )
    except KeyError as exc:
        raise SchemaError(f"{path}: missing model field {exc}",
                          file=str(path)) from None


def write_propensity_csv(path, cell_ids: Sequence[int], scores: np.ndarray,
                         kept: np.ndarray) -> int:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(PROPENSITY_HEADER)
        for cid, score, keep in zip(cell_ids, scores, kept):
            writer.writerow([int(cid), _fmt(score), int(keep)])
    return len(cell_ids)


def read_propensity_csv(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids: List[int] = []
    scores: List[float] = []
    kept: List[int] = []
    for line, row in _read_csv_rows(path, PROPENSITY_HEADER):
        ids.append(_parse_int(row[0], path, line, "cell_id"))
        scores.append(_parse_float(row[1], path, line, "propensity"))
        kept.append(_parse_flag(row[2], path, line, "kept"))
    return (np.array(ids, dtype=np.int64),
            np.array(scores, dtype=np.float64),
            np.array(kept, dtype=bool))


def format_first_stage(diag: FirstStageDiagnostic) -> str:
    lines = [
        f"first-stage diagnostic (80/20 split, {diag.k}-fold CV)",
        f"n_train: {diag.n_train}",
        f"n_test: {diag.n_test}",
        "model metric train test",
    ]
    for row in diag.rows:
        lines.append(f"{row.name} {row.metric} {_fmt(row.train_score)} "
                     f"{_fmt(row.test_score)}")
    return "\n".join(lines) + "\n"


def parse_first_stage(text: str) -> Dict[str, Tuple[float, float]]:
    """Map model name -> (train, test) scores from a diagnostic block."""
    scores: Dict[str, Tuple[float, float]] = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0] in ("outcome", "treatment"):
            scores[parts[0]] = (float(parts[2]), float(parts[3]))
    return scores


# ---------------------------------------------------------------------------
# effect report: per-cell CATE rows and the aggregate summary block
# ---------------------------------------------------------------------------


def normal_p_values(points: np.ndarray, ses: np.ndarray) -> np.ndarray:
    p = np.ones_like(points)
    nonzero = ses > 0
    p[nonzero] = erfc(np.abs(points[nonzero] / ses[nonzero]) / math.sqrt(2.0))
    p[~nonzero & (points != 0)] = 0.0
    return p


def write_cate_report(path, cell_ids: Sequence[int], centers: np.ndarray,
                      points: np.ndarray, ses: np.ndarray,
                      treated: np.ndarray, propensity: np.ndarray) -> int:
    centers = np.asarray(centers, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    ses = np.asarray(ses, dtype=np.float64)
    p_values = normal_p_values(points, ses)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(CATE_REPORT_HEADER)
        for i, cid in enumerate(cell_ids):
            writer.writerow([
                int(cid), _fmt(centers[i, 0]), _fmt(centers[i, 1]),
                _fmt(points[i]), _fmt(ses[i]),
                _fmt(points[i] - Z95 * ses[i]),
                _fmt(points[i] + Z95 * ses[i]),
                _fmt(p_values[i]), int(treated[i]), _fmt(propensity[i]),
            ])
    return len(cell_ids)


def read_cate_report(path) -> Dict[str, np.ndarray]:
    columns: Dict[str, list] = {name: [] for name in CATE_REPORT_HEADER}
    for line, row in _read_csv_rows(path, CATE_REPORT_HEADER):
        columns["cell_id"].append(_parse_int(row[0], path, line, "cell_id"))
        for j, name in enumerate(CATE_REPORT_HEADER[1:8], start=1):
            columns[name].append(_parse_float(row[j], path, line, name))
        columns["treated"].append(_parse_flag(row[8], path, line, "treated"))
        columns["propensity"].append(
            _parse_float(row[9], path, line, "propensity"))
    return {name: np.array(vals) for name, vals in columns.items()}


def format_ate_summary(summary: AteSummary, *, n_total: int, n_kept: int,
                       n_removed: int, share_significant: float) -> str:
    est = summary.estimate
    pct = ("na" if summary.pct_of_mean_outcome is None
           else _fmt(summary.pct_of_mean_outcome))
    lines = [
        f"ate: {_fmt(est.point)}",
        f"std_error: {_fmt(est.std_error)}",
        f"ci_low: {_fmt(est.ci_low)}",
        f"ci_high: {_fmt(est.ci_high)}",
        f"p_value: {_fmt(est.p_value)}",
        f"pct_of_mean_outcome: {pct}",
        f"n_rows: {summary.n_rows}",
        f"n_total: {n_total}",
        f"n_kept: {n_kept}",
        f"n_removed: {n_removed}",
        f"share_significant: {_fmt(share_significant)}",
    ]
    return "\n".join(lines) + "\n"


def parse_key_value_block(text: str) -> Dict[str, str]:
    """Parse ``key: value`` lines (join reports, ATE summaries, MC reports)."""
    parsed: Dict[str, str] = {}
    for line in text.splitlines():
        if ": " in line:
            key, value = line.split(": ", 1)
            parsed[key.strip()] = value.strip()
    return parsed


# ---------------------------------------------------------------------------
# interpreter outputs: tree text/JSON and one curve file per covariate
# ---------------------------------------------------------------------------


def write_tree_text(path, tree: InterpreterTree) -> None:
    write_text(path, render_tree(tree))


def write_tree_json(path, tree: InterpreterTree) -> None:
    _write_json(path, to_nested(tree))


def write_curve_csv(path, curve: EffectCurve) -> int:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(CURVE_HEADER)
        for i in range(curve.centers.shape[0]):
            count = int(curve.counts[i])
            if count == 0:
                stats = ["", "", ""]
            else:
                stats = [_fmt(curve.mean_effect[i]), _fmt(curve.ci_low[i]),
                         _fmt(curve.ci_high[i])]
            writer.writerow([curve.feature, _fmt(curve.centers[i])]
                            + stats + [count])
    return int(curve.centers.shape[0])


def read_curve_csv(path) -> Dict[str, np.ndarray]:
    centers: List[float] = []
    means: List[float] = []
    los: List[float] = []
    his: List[float] = []
    counts: List[int] = []
    feature = None
    for line, row in _read_csv_rows(path, CURVE_HEADER):
        feature = row[0]
        centers.append(_parse_float(row[1], path, line, "bin_center"))
        count = _parse_int(row[5], path, line, "n")
        counts.append(count)
        if count == 0:
            means.append(math.nan)
            los.append(math.nan)
            his.append(math.nan)
        else:
            means.append(_parse_float(row[2], path, line, "mean_effect"))
            los.append(_parse_float(row[3], path, line, "ci_low"))
            his.append(_parse_float(row[4], path, line, "ci_high"))
    return {
        "feature": feature,
        "centers": np.array(centers),
        "mean_effect": np.array(means),
        "ci_low": np.array(los),
        "ci_high": np.array(his),
        "counts": np.array(counts, dtype=np.int64),
    }


# ---------------------------------------------------------------------------
# Monte Carlo report files
# ---------------------------------------------------------------------------


def format_mc_report(report: McReport, seed: int) -> str:
    spec = report.spec
    lines = [
        "monte carlo report",
        f"n: {spec.n}",
        f"p: {spec.p}",
        f"theta: {theta_label(spec.theta)}",
        f"g_form: {spec.g_form}",
        f"f_form: {spec.f_form}",
        f"noise_sd: {_fmt(spec.noise_sd)}",
        f"seed: {seed}",
        f"reps: {report.reps}",
        f"n_failed: {report.n_failed}",
        f"true_ate: {_fmt(report.true_ate)}",
        f"bias: {_fmt(report.bias)}",
        f"rmse: {_fmt(report.rmse)}",
        f"coverage: {_fmt(report.coverage)}",
        f"mean_ci_width: {_fmt(report.mean_ci_width)}",
        f"naive_bias: {_fmt(report.naive_bias)}",
        f"max_ortho_gap: {_fmt(report.max_ortho_gap)}",
    ]
    return "\n".join(lines) + "\n"


def write_mc_reps_csv(path, report: McReport) -> int:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv_writer(handle)
        writer.writerow(REPS_HEADER)
        for res in report.results:
            writer.writerow([
                res.rep, int(res.ok), res.error, _fmt(res.ate_hat),
                _fmt(res.ate_se), _fmt(res.ci_low), _fmt(res.ci_high),
                int(res.covered), _fmt(res.naive_ate), _fmt(res.slope_x1),
                _fmt(res.slope_x1_se), res.n_kept, _fmt(res.ortho_gap),
            ])
    return len(report.results)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def config_digest(config_dict: dict) -> str:
    canonical = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()


def write_manifest(path, *, command: str, config_dict: dict, seed: int,
                   inputs: Dict[str, str], outputs: Dict[str, int],
                   counts: Optional[Dict[str, int]] = None) -> None:
    """Record everything needed to reproduce a command's outputs.

    Thread count is deliberately absent: outputs do not depend on it, and
    the manifest itself must be byte-identical across thread settings.
    """
    doc = {
        "format": MANIFEST_FORMAT,
        "version": FORMAT_VERSION,
        "command": command,
        "seed": int(seed),
        "config_hash": config_digest(config_dict),
        "config": config_dict,
        "inputs": dict(sorted(inputs.items())),
        "outputs": dict(sorted(outputs.items())),
        "counts": dict(sorted((counts or {}).items())),
    }
    _write_json(path, doc)


def read_manifest(path) -> dict:
    return _read_json(path, MANIFEST_FORMAT)
