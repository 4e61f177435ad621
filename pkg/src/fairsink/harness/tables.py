"""Aggregate run records into summary tables (CSV, JSON, Markdown).

Metric cells are ``mean ± std`` over successful repeats, in percentage
points with two decimals; std is the sample standard deviation and is
``0.00`` for a single repeat. The trailing ``Sinkhorn`` column is the
median over groups of the per-group test-split distance, so distance
reduction and ES-AUC are read from the same runs.
"""

import csv
import io
import json

import numpy as np

from ..errors import DataError

FIXED_COLUMNS = ["Attribute", "Model", "DPD", "DEOdds", "AUC", "ES-AUC"]
DISTANCE_COLUMN = "Sinkhorn"


def _stats(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def aggregate(results):
    """One row per (attribute, model) in schema and model order."""
    if not results:
        raise DataError("no run records to aggregate")
    schema = results[0]["attributes"]
    attributes = [(a["name"], a["groups"]) for a in schema["attributes"]]
    models = []
    for r in results:
        if r["model"] not in models:
            models.append(r["model"])
    rows = []
    for attr, groups in attributes:
        for model in models:
            runs = [r for r in results if r["model"] == model]
            ok = [r for r in runs if r["status"] == "ok"]
            per = [r["test_metrics"]["per_attribute"][attr] for r in ok]
            rows.append({
                "attribute": attr,
                "model": model,
                "runs": len(runs),
                "failed": len(runs) - len(ok),
                "dpd": _stats([p["dpd"] for p in per]),
                "deodds": _stats([p["deodds"] for p in per]),
                "auc": _stats([r["test_metrics"]["auc"] for r in ok]),
                "es_auc": _stats([p["es_auc"] for p in per]),
                "group_auc": {g: _stats([p["group_auc"].get(g) for p in per]) for g in groups},
                "sinkhorn": _stats([r["median_distance"].get(attr) for r in ok]),
            })
    return {"groups": {a: list(g) for a, g in attributes}, "rows": rows}


def percent_cell(stat):
    if stat is None:
        return ""
    return f"{100.0 * stat['mean']:.2f} ± {100.0 * stat['std']:.2f}"


def distance_cell(stat):
    if stat is None:
        return ""
    return f"{stat['mean']:.4e} ± {stat['std']:.4e}"


def _header(table):
    group_cols = []
    for groups in table["groups"].values():
        for g in groups:
            if f"AUC[{g}]" not in group_cols:
                group_cols.append(f"AUC[{g}]")
    return FIXED_COLUMNS + group_cols + [DISTANCE_COLUMN]


def _cells(table):
    header = _header(table)
    out = []
    for row in table["rows"]:
        cells = {
            "Attribute": row["attribute"],
            "Model": row["model"] if not row["failed"] else f"{row['model']} ({row['failed']} failed)",
            "DPD": percent_cell(row["dpd"]),
            "DEOdds": percent_cell(row["deodds"]),
            "AUC": percent_cell(row["auc"]),
            "ES-AUC": percent_cell(row["es_auc"]),
            DISTANCE_COLUMN: distance_cell(row["sinkhorn"]),
        }
        for g, stat in row["group_auc"].items():
            cells[f"AUC[{g}]"] = percent_cell(stat)
        out.append([cells.get(col, "") for col in header])
    return header, out


def emit_tables(table, fmt="csv"):
    """Render an aggregated table as ``csv``, ``json`` or ``markdown`` text."""
    if not table["rows"]:
        raise DataError("nothing to emit")
    header, rows = _cells(table)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "json":
        return json.dumps([dict(zip(header, r)) for r in rows], indent=1, ensure_ascii=False) + "\n"
    raise DataError(f"unknown table format {fmt!r}; use csv, json or markdown")
