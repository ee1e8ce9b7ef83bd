"""Aggregate per-seed ``report.json`` files into method-level tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..metrics import MetricsReport

# metric -> True when larger is better
METRICS = {"accuracy": True, "ece": False, "nll": False}


def collect_reports(out: Path) -> list[MetricsReport]:
    paths = sorted(Path(out).rglob("report.json"))
    return [MetricsReport.from_dict(json.loads(p.read_text())) for p in paths]


def _marks(values: dict[str, float], higher_better: bool) -> dict[str, str]:
    """``best``/``second`` for the top two distinct values of a column; ties share a mark."""
    finite = sorted({v for v in values.values() if np.isfinite(v)}, reverse=higher_better)
    out = {}
    for name, v in values.items():
        if finite and v == finite[0]:
            out[name] = "best"
        elif len(finite) > 1 and v == finite[1]:
            out[name] = "second"
        else:
            out[name] = ""
    return out


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean and population std over seeds for every (method, metric, domain)."""
    if not reports:
        raise ValueError("no metrics reports to aggregate")
    by_method: dict[str, list[MetricsReport]] = {}
    for r in reports:
        by_method.setdefault(str(r.metadata.get("method", "unknown")), []).append(r)
    domains = reports[0].domains
    table: dict = {}
    for method in sorted(by_method):
        reps = by_method[method]
        entry = {"n": len(reps), "kind": reps[0].metadata.get("kind", "")}
        for metric in METRICS:
            vals = np.array([getattr(r, metric) for r in reps], dtype=np.float64)
            entry[metric] = {
                d: {"mean": float(vals[:, i].mean()), "std": float(vals[:, i].std())} for i, d in enumerate(domains)
            }
        gaps = np.array([r.energy_gap for r in reps])
        entry["energy_gap"] = {"mean": float(gaps.mean()), "std": float(gaps.std())}
        shift = np.array([r.shift_accuracy for r in reps])
        entry["shift_accuracy_mean"] = {"mean": float(shift.mean()), "std": float(shift.std())}
        table[method] = entry
    for metric, higher in METRICS.items():
        for d in domains:
            marks = _marks({m: table[m][metric][d]["mean"] for m in table}, higher)
            for m, mark in marks.items():
                table[m][metric][d]["mark"] = mark
    return {"domains": domains, "methods": table}


def write_report(out: str | Path) -> dict:
    """Write ``summary.json``, ``summary.csv`` and ``tables/methods.csv`` under ``out``."""
    out = Path(out)
    reports = collect_reports(out)
    if not reports:
        raise ValueError(f"no report.json files found under {out}")
    agg = aggregate_reports(reports)
    (out / "summary.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    domains = agg["domains"]
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "domain", "mean", "std", "n", "mark"])
        for method, entry in agg["methods"].items():
            for metric in METRICS:
                for d in domains:
                    c = entry[metric][d]
                    w.writerow([method, metric, d, repr(c["mean"]), repr(c["std"]), entry["n"], c["mark"]])
    tables = out / "tables"
    tables.mkdir(exist_ok=True)
    with (tables / "methods.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "kind", "n_seeds", *[f"{d}_{s}" for d in domains for s in ("mean", "std", "mark")],
                    "shift_mean", "energy_gap"])
        for method, entry in agg["methods"].items():
            cells = []
            for d in domains:
                c = entry["accuracy"][d]
                cells += [repr(c["mean"]), repr(c["std"]), c["mark"]]
            w.writerow([method, entry["kind"], entry["n"], *cells,
                        repr(entry["shift_accuracy_mean"]["mean"]), repr(entry["energy_gap"]["mean"])])
    return agg
