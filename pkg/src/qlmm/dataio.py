"""Dataset ingestion and report serialization.

Long-format CSV in (one row per observation, grouped by a cluster-id
column); CSV/JSON reports out.  Floats are written with 17 significant
digits so every report round-trips losslessly, and key order is fixed so
identical runs produce identical bytes.  Wall-clock timing never enters a
serialized report.

For genotype-scale designs the fixed-effect block may live in a separate
wide matrix file (``.npy`` or headerless CSV) aligned row-by-row with the
long file, instead of thousands of named columns.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qlmm.debias import InferenceRecord, InferenceResult
from qlmm.lasso import FixedEffectsFit
from qlmm.model_core import Cluster, ClusteredDataset, validate_dataset
from qlmm.simulate import McReport
from qlmm.varcomp import VarCompFit

__all__ = [
    "LongFormatSchema",
    "load_csv",
    "write_csv",
    "write_report",
    "read_inference_csv",
]

INFERENCE_COLUMNS = ("j", "beta_db", "V_hat", "ci_lo", "ci_hi", "z", "p_value")


@dataclass(frozen=True)
class LongFormatSchema:
    """Column names of a long-format dataset file."""

    cluster_col: str
    response_col: str
    fixed_cols: tuple = ()
    random_cols: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed_cols", tuple(self.fixed_cols))
        object.__setattr__(self, "random_cols", tuple(self.random_cols))
        names = [self.cluster_col, self.response_col, *self.fixed_cols,
                 *self.random_cols]
        if len(set(names)) != len(names):
            raise ValueError("schema column names must be disjoint")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _parse_cell(text, column, line_no) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(
            f"non-numeric value {text!r} in column {column!r} at line {line_no}"
        ) from None


def load_csv(path, schema: LongFormatSchema,
             x_matrix_path=None) -> ClusteredDataset:
    """Read a long-format CSV into a clustered dataset.

    Rows are grouped by the cluster-id column, preserving first-appearance
    order of clusters and file order within each cluster.  When
    ``x_matrix_path`` is given the fixed-effect block is taken from that
    wide matrix (rows aligned with the long file) and ``schema.fixed_cols``
    may be empty.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")

    use_matrix = x_matrix_path is not None
    if not use_matrix and not schema.fixed_cols:
        raise ValueError("schema needs at least one fixed-effect column")

    col_index = {name: i for i, name in enumerate(header)}
    needed = [schema.cluster_col, schema.response_col, *schema.random_cols]
    if not use_matrix:
        needed += list(schema.fixed_cols)
    for name in needed:
        if name not in col_index:
            raise ValueError(f"{path}: missing column {name!r}")

    if use_matrix:
        mpath = Path(x_matrix_path)
        if mpath.suffix == ".npy":
            X_all = np.load(mpath)
        else:
            X_all = np.loadtxt(mpath, delimiter=",", ndmin=2)
        if X_all.shape[0] != len(rows):
            raise ValueError(
                f"{mpath}: {X_all.shape[0]} matrix rows but {len(rows)} data rows"
            )

    groups: dict[str, dict] = {}
    for ridx, row in enumerate(rows):
        line_no = ridx + 2  # header is line 1
        if len(row) != len(header):
            raise ValueError(f"{path}: wrong field count at line {line_no}")
        cid = row[col_index[schema.cluster_col]]
        g = groups.setdefault(cid, {"y": [], "X": [], "Z": [], "rows": []})
        g["y"].append(
            _parse_cell(row[col_index[schema.response_col]],
                        schema.response_col, line_no)
        )
        g["Z"].append(
            [_parse_cell(row[col_index[c]], c, line_no)
             for c in schema.random_cols]
        )
        if use_matrix:
            g["rows"].append(ridx)
        else:
            g["X"].append(
                [_parse_cell(row[col_index[c]], c, line_no)
                 for c in schema.fixed_cols]
            )

    clusters = []
    for cid, g in groups.items():
        m = len(g["y"])
        if use_matrix:
            X = X_all[g["rows"]]
        else:
            X = np.asarray(g["X"], dtype=np.float64)
        Z = np.asarray(g["Z"], dtype=np.float64).reshape(
            m, len(schema.random_cols)
        )
        clusters.append(Cluster(id=cid, y=np.asarray(g["y"]), X=X, Z=Z))
    dataset = ClusteredDataset(clusters)
    violations = validate_dataset(dataset)
    if violations:
        raise ValueError(f"{path}: invalid dataset: " + "; ".join(violations))
    return dataset


def write_csv(dataset: ClusteredDataset, path, schema: LongFormatSchema):
    """Inverse of :func:`load_csv` for datasets with named fixed columns."""
    if len(schema.fixed_cols) != dataset.p:
        raise ValueError("schema fixed_cols must match the dataset width")
    if len(schema.random_cols) != dataset.q:
        raise ValueError("schema random_cols must match the dataset width")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [schema.cluster_col, schema.response_col, *schema.fixed_cols,
             *schema.random_cols]
        )
        for c in dataset.clusters:
            for k in range(c.m):
                writer.writerow(
                    [c.id, _fmt(float(c.y[k]))]
                    + [_fmt(float(v)) for v in c.X[k]]
                    + [_fmt(float(v)) for v in c.Z[k]]
                )


def _jsonable(obj):
    if isinstance(obj, McReport):
        d = {
            f.name: _jsonable(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if f.name != "wall_time_s"  # timing would break reproducibility
        }
        return d
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: _jsonable(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
        }
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _inference_rows(result):
    records = result.records if isinstance(result, InferenceResult) else result
    for rec in records:
        yield [rec.j] + [
            _fmt(float(v))
            for v in (rec.beta_db, rec.v_hat, rec.ci_lo, rec.ci_hi, rec.z,
                      rec.p_value)
        ]


def _write_inference_csv(result, fh):
    writer = csv.writer(fh)
    writer.writerow(INFERENCE_COLUMNS)
    for row in _inference_rows(result):
        writer.writerow(row)


def _write_mcreport_csv(report: McReport, fh):
    writer = csv.writer(fh)
    cols = ["reps", "n_failed", "t_a_mean", "a_mean", "sse_mean",
            "sse_median", "l2_median", "kkt_max"]
    vals = [report.reps, report.n_failed, report.t_a_mean, report.a_mean,
            report.sse_mean, report.sse_median, report.l2_median,
            report.kkt_max]
    for lab, v in sorted(report.coverage.items()):
        cols.append(f"cov({lab})")
        vals.append(v)
    for lab, v in sorted(report.sd.items()):
        cols.append(f"sd({lab})")
        vals.append(v)
    for lab, v in sorted(report.rejection.items()):
        cols.append(f"rej({lab})")
        vals.append(v)
    if report.mae_sigma2 is not None:
        cols.append("mae_sigma2")
        vals.append(report.mae_sigma2)
        for k, v in enumerate(report.mae_eta or []):
            cols.append(f"mae_eta{k + 1}")
            vals.append(v)
    writer.writerow(cols)
    writer.writerow([_fmt(v) if isinstance(v, float) else v for v in vals])


def _write_sweep_csv(sweep: dict, fh):
    rows = sweep["rows"]
    cols = list(rows[0].keys())
    writer = csv.writer(fh)
    writer.writerow(cols)
    for row in rows:
        writer.writerow(
            [_fmt(row[c]) if isinstance(row[c], float) else row[c]
             for c in cols]
        )


def _write_fit_csv(fit: FixedEffectsFit, fh):
    writer = csv.writer(fh)
    writer.writerow(["j", "beta"])
    for j, b in enumerate(fit.beta):
        writer.writerow([j, _fmt(float(b))])


def _write_varcomp_csv(fit: VarCompFit, fh):
    writer = csv.writer(fh)
    cols = ["sigma2_e"] + [f"eta{k + 1}" for k in range(len(fit.eta))]
    writer.writerow(cols)
    writer.writerow(
        [_fmt(float(fit.sigma2_e))] + [_fmt(float(v)) for v in fit.eta]
    )


def write_report(results, path, fmt: str = "json", provenance: dict | None = None):
    """Serialize a result object to ``path`` as CSV or JSON.

    JSON reports carry the full tuning provenance; CSV reports are flat,
    plot-ready tables with a fixed column order.
    """
    if fmt not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    payload = _jsonable(results) if not isinstance(results, dict) else _jsonable(results)
    if fmt == "json":
        doc = {"report": payload}
        if provenance:
            doc["provenance"] = _jsonable(provenance)
        text = json.dumps(doc, indent=2)
        Path(path).write_text(text + "\n", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if isinstance(results, (InferenceResult, list)):
            _write_inference_csv(results, fh)
        elif isinstance(results, McReport):
            _write_mcreport_csv(results, fh)
        elif isinstance(results, dict) and "rows" in results:
            _write_sweep_csv(results, fh)
        elif isinstance(results, FixedEffectsFit):
            _write_fit_csv(results, fh)
        elif isinstance(results, VarCompFit):
            _write_varcomp_csv(results, fh)
        else:
            raise TypeError(f"no CSV writer for {type(results).__name__}")


def read_inference_csv(path) -> list:
    """Parse an inference CSV back into records (round-trip of write)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != INFERENCE_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        out = []
        for row in reader:
            j = int(row[0])
            vals = [float(v) for v in row[1:]]
            out.append(
                InferenceRecord(
                    j=j, beta_db=vals[0], v_hat=vals[1], ci_lo=vals[2],
                    ci_hi=vals[3], z=vals[4], p_value=vals[5],
                    alpha=np.nan, lam_j=np.nan,
                )
            )
    return out
