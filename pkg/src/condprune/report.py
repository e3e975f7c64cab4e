"""Compression artifacts on disk and the rate-grouped comparison table."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from .driver import CompressionReport
from .exceptions import IoFailure, MalformedManifest
from .graph import ModelGraph, save_model
from .pruner import save_plan

METHOD_ORDER = ("uniform", "oracle", "cacp")
HEADER = ("Compression Rate", "Method", "Acc. (%)", "#FLOPs↓ (%)", "#Params↓ (%)")
CSV_HEADER = ("compression_rate", "method", "acc_pct", "flops_drop_pct", "params_drop_pct")
REPORT_SUFFIX = ".report.json"


def artifact_stem(method: str, beta: float) -> str:
    return f"{method}_beta{beta:.2f}"


def write_artifacts(out_dir, model: ModelGraph, report: CompressionReport) -> Path:
    """Write model manifest+blob, plan and report for one (method, beta); return the report path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc
    stem = artifact_stem(report.method, report.beta)
    save_model(model, out_dir / f"{stem}.json")
    save_plan(report.plan, out_dir / f"{stem}.plan.json")
    record = report.to_dict()
    record["model_file"] = f"{stem}.json"
    record["plan_file"] = f"{stem}.plan.json"
    path = out_dir / f"{stem}{REPORT_SUFFIX}"
    try:
        path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def find_reports(paths: Iterable) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.glob(f"*{REPORT_SUFFIX}")))
        elif p.is_file():
            found.append(p)
    return found


def load_report(path) -> dict:
    try:
        record = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedManifest(f"cannot read report {path}: {exc}") from exc
    missing = [k for k in ("beta", "method", "accuracy", "flops_drop_pct", "params_drop_pct") if k not in record]
    if missing:
        raise MalformedManifest(f"{path}: missing fields {missing}")
    return record


def _sort_key(record: dict):
    method = record["method"]
    rank = METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER)
    return (float(record["beta"]), rank, method)


def table_rows(records: Sequence[dict]) -> list[tuple[str, ...]]:
    rows = []
    for r in sorted(records, key=_sort_key):
        rows.append((
            f"{float(r['beta']):.1f}",
            str(r["method"]),
            f"{100.0 * float(r['accuracy']):.2f}",
            f"{float(r['flops_drop_pct']):.1f}",
            f"{float(r['params_drop_pct']):.1f}",
        ))
    return rows


def render_table(records: Sequence[dict]) -> str:
    rows = table_rows(records)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(HEADER)]

    def line(cells):
        out = []
        for i, (cell, w) in enumerate(zip(cells, widths)):
            out.append(cell.ljust(w) if i < 2 else cell.rjust(w))
        return " | ".join(out).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    lines = [line(HEADER), rule]
    prev = None
    for row in rows:
        if prev is not None and row[0] != prev:
            lines.append(rule)
        lines.append(line((row[0] if row[0] != prev else "",) + row[1:]))
        prev = row[0]
    return "\n".join(lines) + "\n"


def render_csv(records: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(table_rows(records))
    return buf.getvalue()
