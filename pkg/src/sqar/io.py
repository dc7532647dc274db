"""Dataset loading, result serialization, and deterministic CSV output."""

from __future__ import annotations

import csv
import io as _io
import json
import os
import sys
import tempfile

import numpy as np

from .estimator import CoefficientSheet, FitResult, TuningTrace
from .exceptions import DimensionMismatch, ParseError
from .simulate import MedseTable
from .spatial import SpatialWeights, SqarDataset, row_normalize

RESULT_SCHEMA = "sqar-result/1"


def _fmt(x) -> str:
    return repr(float(x))


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_float(text: str, path: str, row: int, col: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{path}: row {row}, column {col}: {text!r} is not a number") from None


def _read_rows(path: str):
    try:
        with open(path, newline="") as handle:
            return list(csv.reader(handle))
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_dataset(csv_path: str, weights_path: str, weights_format: str,
                 normalize: bool = True) -> SqarDataset:
    """Read a dataset CSV (header ``y,<predictors...>``) plus a weight matrix.

    ``weights_format`` is ``dense_csv`` (an n x n numeric grid, no header) or
    ``triplet_csv`` (rows ``i,j,w`` with 0-based indices; unlisted entries are
    zero).  Weights are row-normalized on load unless ``normalize=False``; a
    warning goes to stderr whenever normalization changes a row.
    """
    rows = _read_rows(csv_path)
    if not rows:
        raise ParseError(f"{csv_path}: file is empty")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "y":
        raise ParseError(f"{csv_path}: first column must be named 'y', found {header[:1]!r}")
    if len(header) < 2:
        raise ParseError(f"{csv_path}: no predictor columns after 'y'")
    body = rows[1:]
    if not body:
        raise ParseError(f"{csv_path}: no data rows")
    table = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ParseError(f"{csv_path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            table[i, j] = _parse_float(cell, csv_path, i + 2, j + 1)
    n = table.shape[0]

    if weights_format == "dense_csv":
        values = _read_dense_weights(weights_path)
    elif weights_format == "triplet_csv":
        values = _read_triplet_weights(weights_path, n)
    else:
        raise ParseError(f"unknown weights format {weights_format!r}")
    if values.shape[0] != n:
        raise DimensionMismatch(
            f"weights are {values.shape[0]}x{values.shape[1]} but {csv_path} has {n} rows")

    try:
        weights = SpatialWeights(n=n, values=values, row_normalized=False)
    except ValueError as exc:
        raise ParseError(f"{weights_path}: {exc}") from exc

    zero_rows = np.flatnonzero(weights.values.sum(axis=1) == 0.0)
    if zero_rows.size:
        print(f"warning: {zero_rows.size} weight row(s) are all zero "
              f"(first: row {zero_rows[0]})", file=sys.stderr)
    if normalize:
        normalized = row_normalize(weights)
        if not np.array_equal(normalized.values, weights.values):
            print(f"warning: row-normalized weights from {weights_path}", file=sys.stderr)
        weights = normalized
    else:
        sums = weights.values.sum(axis=1)
        if np.all((sums == 0.0) | (np.abs(sums - 1.0) <= 1e-12)):
            weights = SpatialWeights(n=n, values=weights.values, row_normalized=True)

    try:
        return SqarDataset(y=table[:, 0], x=table[:, 1:], weights=weights)
    except ValueError as exc:
        raise ParseError(f"{csv_path}: {exc}") from exc


def _read_dense_weights(path: str) -> np.ndarray:
    rows = _read_rows(path)
    if not rows:
        raise ParseError(f"{path}: file is empty")
    width = len(rows[0])
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{path}: row {i + 1} has {len(row)} fields, expected {width}")
        for j, cell in enumerate(row):
            values[i, j] = _parse_float(cell, path, i + 1, j + 1)
    if values.shape[0] != values.shape[1]:
        raise ParseError(f"{path}: dense weights must be square, got {values.shape}")
    return values


def _read_triplet_weights(path: str, n: int) -> np.ndarray:
    rows = _read_rows(path)
    values = np.zeros((n, n))
    start = 0
    if rows and rows[0] and not rows[0][0].strip().lstrip("-").replace(".", "").isdigit():
        start = 1  # optional header row
    for r, row in enumerate(rows[start:], start=start + 1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected i,j,w")
        i = int(_parse_float(row[0], path, r, 1))
        j = int(_parse_float(row[1], path, r, 2))
        w = _parse_float(row[2], path, r, 3)
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(f"{path}: row {r}: index ({i},{j}) outside 0..{n - 1}")
        values[i, j] = w
    return values


def write_dataset_csv(path: str, data: SqarDataset) -> None:
    buf = _io.StringIO()
    header = ["y"] + [f"x_{j + 1}" for j in range(data.p)]
    buf.write(",".join(header) + "\n")
    for i in range(data.n):
        cells = [_fmt(data.y[i])] + [_fmt(v) for v in data.x[i]]
        buf.write(",".join(cells) + "\n")
    atomic_write_text(path, buf.getvalue())


def write_dense_weights_csv(path: str, weights: SpatialWeights) -> None:
    buf = _io.StringIO()
    for row in weights.values:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# fit outputs


def coefficients_csv_text(result: FitResult, taus) -> str:
    sheet = result.sheet
    buf = _io.StringIO()
    cols = ["tau", "alpha", "lambda"] + [f"beta_{j + 1}" for j in range(sheet.p)] + ["sigma2"]
    buf.write(",".join(cols) + "\n")
    for k in range(sheet.k):
        tau = _fmt(taus[k]) if taus is not None and k < len(taus) else ""
        sigma = _fmt(sheet.sigma2[k]) if sheet.sigma2 is not None else ""
        cells = [tau, _fmt(sheet.alpha[k]), _fmt(sheet.lam[k])]
        cells += [_fmt(v) for v in sheet.beta[k]]
        cells.append(sigma)
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def fused_mask_csv_text(result: FitResult, taus) -> str:
    buf = _io.StringIO()
    p_plus = result.fused_mask.shape[1] if result.fused_mask.size else result.sheet.p + 1
    cols = ["tau_low", "tau_high", "lambda"] + [f"beta_{j + 1}" for j in range(p_plus - 1)]
    buf.write(",".join(cols) + "\n")
    for k in range(result.fused_mask.shape[0]):
        cells = [_fmt(taus[k]), _fmt(taus[k + 1])]
        cells += ["true" if v else "false" for v in result.fused_mask[k]]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def tuning_trace_csv_text(trace: TuningTrace | None) -> str:
    buf = _io.StringIO()
    buf.write("t,loss,edf,aic,bic\n")
    if trace is not None:
        for i in range(len(trace.grid)):
            buf.write(",".join([_fmt(trace.grid[i]), _fmt(trace.loss[i]), str(int(trace.edf[i])),
                                _fmt(trace.aic[i]), _fmt(trace.bic[i])]) + "\n")
    return buf.getvalue()


def medse_csv_text(table: MedseTable) -> str:
    buf = _io.StringIO()
    buf.write("method,tau,medse,reps_used\n")
    for method, tau, medse, used in table.rows():
        buf.write(f"{method},{_fmt(tau)},{_fmt(medse)},{used}\n")
    return buf.getvalue()


def coef_paths_csv_text(table: MedseTable) -> str:
    """Long-format median coefficient paths, one row per (method, tau, coefficient)."""
    buf = _io.StringIO()
    buf.write("method,tau,coefficient,value\n")
    for method, path in table.coef_paths.items():
        names = ["alpha", "lambda"] + [f"beta_{j + 1}" for j in range(path.shape[1] - 2)]
        for k, tau in enumerate(table.taus):
            for name, value in zip(names, path[k]):
                buf.write(f"{method},{_fmt(tau)},{name},{_fmt(value)}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# result.json


def result_to_dict(result: FitResult, taus) -> dict:
    sheet = result.sheet
    doc = {
        "schema": RESULT_SCHEMA,
        "method": result.method,
        "taus": None if taus is None else [float(t) for t in taus],
        "chosen_t": None if result.chosen_t is None else float(result.chosen_t),
        "sheet": {
            "alpha": sheet.alpha.tolist(),
            "lambda": sheet.lam.tolist(),
            "beta": sheet.beta.tolist(),
            "sigma2": None if sheet.sigma2 is None else sheet.sigma2.tolist(),
        },
        "fused_mask": result.fused_mask.astype(bool).tolist(),
        "trace": None,
    }
    if result.trace is not None:
        doc["trace"] = {
            "grid": result.trace.grid.tolist(),
            "loss": result.trace.loss.tolist(),
            "edf": [int(v) for v in result.trace.edf],
            "aic": result.trace.aic.tolist(),
            "bic": result.trace.bic.tolist(),
        }
    return doc


def result_from_dict(doc: dict):
    """Inverse of :func:`result_to_dict`; returns (FitResult, taus)."""
    if doc.get("schema") != RESULT_SCHEMA:
        raise ParseError(f"unsupported result schema {doc.get('schema')!r}")
    sheet_doc = doc["sheet"]
    sheet = CoefficientSheet(alpha=sheet_doc["alpha"], lam=sheet_doc["lambda"],
                             beta=np.asarray(sheet_doc["beta"]),
                             sigma2=sheet_doc.get("sigma2"))
    trace = None
    if doc.get("trace") is not None:
        t = doc["trace"]
        trace = TuningTrace(grid=np.asarray(t["grid"]), loss=np.asarray(t["loss"]),
                            edf=np.asarray(t["edf"], dtype=int),
                            aic=np.asarray(t["aic"]), bic=np.asarray(t["bic"]))
    mask = np.asarray(doc["fused_mask"], dtype=bool)
    if mask.size == 0:
        mask = mask.reshape(0, sheet.p + 1)
    result = FitResult(sheet=sheet, method=doc["method"], fused_mask=mask,
                       chosen_t=doc.get("chosen_t"), trace=trace)
    taus = doc.get("taus")
    return result, (None if taus is None else np.asarray(taus))


def write_result_json(path: str, result: FitResult, taus) -> None:
    atomic_write_text(path, json.dumps(result_to_dict(result, taus), indent=2) + "\n")


def read_result_json(path: str):
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return result_from_dict(doc)
