"""Metric computation and report emission from step records and round logs.

Reports are built from the same structures whether computed inline during a
run or recomputed from persisted logs, so the two paths agree bit-exactly.
Rounds that ended in a transport failure are excluded from step statistics
and success ratios and reported separately; infrastructure failures must not
deflate scores.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Sequence

from .runner import (
    ROUND_LOG_SCHEMA,
    SINGLE_LOG_SCHEMA,
    TERMINAL_TRANSPORT,
    RoundResult,
    StepRecord,
    read_round_log,
    read_single_log,
)

REPORT_SCHEMA = "assocbench.report/1"

RATIO_ASSOCIATION = "association"
RATIO_DEDUCTION = "deduction"

_CSV_COLUMNS: tuple[tuple[str, type], ...] = (
    ("kind", str),
    ("concepts", str),
    ("strategy", str),
    ("backend", str),
    ("rounds", int),
    ("transport_rounds", int),
    ("max_step", int),
    ("mean_step", float),
    ("association_trials", int),
    ("association_successes", int),
    ("association_ratio", float),
    ("deduction_trials", int),
    ("deduction_successes", int),
    ("deduction_ratio", float),
)


class MetricsError(Exception):
    pass


def success_ratio(
    records: Sequence[StepRecord], concept: str, which: str = RATIO_ASSOCIATION
) -> float | None:
    """T+/T over the concept's records; None when there are no trials.

    Association counts every record for the concept; deduction counts only
    records where a deduction actually ran.
    """
    scoped = [r for r in records if r.concept == concept]
    if which == RATIO_ASSOCIATION:
        trials = len(scoped)
        successes = sum(1 for r in scoped if r.association_correct)
    elif which == RATIO_DEDUCTION:
        attempted = [r for r in scoped if r.deduction_correct is not None]
        trials = len(attempted)
        successes = sum(1 for r in attempted if r.deduction_correct)
    else:
        raise MetricsError(f"unknown ratio type {which!r}")
    if trials == 0:
        return None
    return successes / trials


def step_stats(rounds: Sequence[RoundResult]) -> tuple[int, float]:
    """(max, arithmetic mean) of the rounds' final step counts."""
    if not rounds:
        raise MetricsError("step_stats needs at least one round")
    counts = [r.final_step_count for r in rounds]
    return max(counts), fmean(counts)


def _ratio_fields(records: Sequence[StepRecord]) -> dict:
    assoc_trials = len(records)
    assoc_successes = sum(1 for r in records if r.association_correct)
    attempted = [r for r in records if r.deduction_correct is not None]
    ded_trials = len(attempted)
    ded_successes = sum(1 for r in attempted if r.deduction_correct)
    return {
        "association_trials": assoc_trials,
        "association_successes": assoc_successes,
        "association_ratio": assoc_successes / assoc_trials if assoc_trials else None,
        "deduction_trials": ded_trials,
        "deduction_successes": ded_successes,
        "deduction_ratio": ded_successes / ded_trials if ded_trials else None,
    }


@dataclass(frozen=True)
class _CellKey:
    kind: str
    concepts: str
    strategy: str
    backend: str


def build_report(
    rounds: Sequence[tuple[RoundResult, dict]],
    singles: Sequence[tuple[list[StepRecord], str, dict]] = (),
    meta: dict | None = None,
) -> dict:
    """Aggregate runs into a report dict keyed by (kind, concepts, strategy).

    Per-cell step statistics exclude transport-terminated rounds; the
    averages block weights each concept cell equally within a
    (kind, strategy, backend) group.
    """
    grouped: dict[_CellKey, dict] = {}

    def bucket(key: _CellKey) -> dict:
        return grouped.setdefault(key, {"rounds": [], "transports": 0, "records": []})

    for result, run_meta in rounds:
        key = _CellKey(
            kind=result.plan.kind,
            concepts="-".join(result.plan.concepts),
            strategy=run_meta.get("strategy", ""),
            backend=run_meta.get("backend", ""),
        )
        slot = bucket(key)
        if result.terminal == TERMINAL_TRANSPORT:
            slot["transports"] += 1
        else:
            slot["rounds"].append(result)
            slot["records"].extend(result.steps)

    for records, concept, run_meta in singles:
        key = _CellKey(
            kind="single_step",
            concepts=concept,
            strategy=run_meta.get("strategy", ""),
            backend=run_meta.get("backend", ""),
        )
        slot = bucket(key)
        slot["records"].extend(records)

    cells: list[dict] = []
    for key in sorted(grouped, key=lambda k: (k.kind, k.concepts, k.strategy, k.backend)):
        slot = grouped[key]
        cell = {
            "kind": key.kind,
            "concepts": key.concepts,
            "strategy": key.strategy,
            "backend": key.backend,
            "rounds": len(slot["rounds"]),
            "transport_rounds": slot["transports"],
        }
        if slot["rounds"]:
            max_step, mean_step = step_stats(slot["rounds"])
            cell["max_step"] = max_step
            cell["mean_step"] = mean_step
        else:
            cell["max_step"] = None
            cell["mean_step"] = None
        cell.update(_ratio_fields(slot["records"]))
        cells.append(cell)

    averages = _equal_weight_averages(cells)
    return {
        "schema": REPORT_SCHEMA,
        "meta": dict(meta or {}),
        "cells": cells,
        "averages": averages,
    }


def _equal_weight_averages(cells: list[dict]) -> list[dict]:
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for cell in cells:
        groups.setdefault((cell["kind"], cell["strategy"], cell["backend"]), []).append(cell)

    def mean_of(values: list) -> float | None:
        values = [v for v in values if v is not None]
        return fmean(values) if values else None

    averages = []
    for (kind, strategy, backend), members in sorted(groups.items()):
        averages.append(
            {
                "kind": kind,
                "strategy": strategy,
                "backend": backend,
                "weighting": "equal_per_concept",
                "concept_cells": len(members),
                "max_step": mean_of([c["max_step"] for c in members]),
                "mean_step": mean_of([c["mean_step"] for c in members]),
                "association_ratio": mean_of([c["association_ratio"] for c in members]),
                "deduction_ratio": mean_of([c["deduction_ratio"] for c in members]),
            }
        )
    return averages


def load_logs(
    log_dir: str | Path,
) -> tuple[list[tuple[RoundResult, dict]], list[tuple[list[StepRecord], str, dict]]]:
    """Read every round/single-step log under a directory, sorted by name."""
    log_dir = Path(log_dir)
    if not log_dir.is_dir():
        raise MetricsError(f"log directory not found: {log_dir}")
    rounds: list[tuple[RoundResult, dict]] = []
    singles: list[tuple[list[StepRecord], str, dict]] = []
    for path in sorted(log_dir.rglob("*.json")):
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            continue
        schema = payload.get("schema")
        if schema == ROUND_LOG_SCHEMA:
            rounds.append(read_round_log(path))
        elif schema == SINGLE_LOG_SCHEMA:
            records, concept, run_meta = read_single_log(path)
            singles.append((records, concept, run_meta))
    return rounds, singles


def _fmt_step_cell(max_step, mean_step) -> str:
    if max_step is None or mean_step is None:
        return "-"
    return f"{max_step} | {mean_step:.2f}"


def _fmt_ratio(value) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_markdown(report: dict) -> str:
    lines = ["# Association run report", ""]
    for key, value in sorted(report.get("meta", {}).items()):
        lines.append(f"- {key}: {value}")
    if report.get("meta"):
        lines.append("")
    lines.append(
        "| Kind | Concepts | Strategy | Backend | Rounds | Transport | "
        "Max | Mean Step | Association r+ | Deduction r+ |"
    )
    lines.append("|---|---|---|---|---|---|---|---|---|")
    for cell in report["cells"]:
        lines.append(
            "| {kind} | {concepts} | {strategy} | {backend} | {rounds} | "
            "{transport_rounds} | {steps} | {assoc} | {ded} |".format(
                steps=_fmt_step_cell(cell["max_step"], cell["mean_step"]),
                assoc=_fmt_ratio(cell["association_ratio"]),
                ded=_fmt_ratio(cell["deduction_ratio"]),
                **{
                    k: cell[k]
                    for k in (
                        "kind",
                        "concepts",
                        "strategy",
                        "backend",
                        "rounds",
                        "transport_rounds",
                    )
                },
            )
        )
    if report.get("averages"):
        lines.append("")
        lines.append("## Averages (equal weight per concept)")
        lines.append("| Kind | Strategy | Backend | Cells | Max | Mean Step | Association r+ | Deduction r+ |")
        lines.append("|---|---|---|---|---|---|---|---|")
        for row in report["averages"]:
            max_step = row["max_step"]
            mean_step = row["mean_step"]
            steps = (
                "-"
                if max_step is None or mean_step is None
                else f"{max_step:.1f} | {mean_step:.2f}"
            )
            lines.append(
                "| {kind} | {strategy} | {backend} | {concept_cells} | {steps} | {assoc} | {ded} |".format(
                    steps=steps,
                    assoc=_fmt_ratio(row["association_ratio"]),
                    ded=_fmt_ratio(row["deduction_ratio"]),
                    **{k: row[k] for k in ("kind", "strategy", "backend", "concept_cells")},
                )
            )
    return "\n".join(lines) + "\n"


def emit_report(report: dict, fmt: str, path: str | Path) -> Path:
    """Write the report as json, csv, or a markdown table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    elif fmt == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([name for name, _ in _CSV_COLUMNS])
            for cell in report["cells"]:
                row = []
                for name, typ in _CSV_COLUMNS:
                    value = cell[name]
                    if value is None:
                        row.append("")
                    elif typ is float:
                        row.append(repr(float(value)))
                    else:
                        row.append(value)
                writer.writerow(row)
    elif fmt == "markdown":
        path.write_text(render_markdown(report), encoding="utf-8")
    else:
        raise MetricsError(f"unknown report format {fmt!r}")
    return path


def report_from_csv(path: str | Path) -> dict:
    """Rebuild a report's cells from a csv emitted by :func:`emit_report`."""
    types = dict(_CSV_COLUMNS)
    cells: list[dict] = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            cell: dict = {}
            for name, raw in row.items():
                typ = types[name]
                if raw == "" and typ is not str:
                    cell[name] = None
                elif typ is int:
                    cell[name] = int(raw)
                elif typ is float:
                    cell[name] = float(raw)
                else:
                    cell[name] = raw
            cells.append(cell)
    return {"schema": REPORT_SCHEMA, "meta": {}, "cells": cells, "averages": []}


def compare_reports(a: dict, b: dict) -> str:
    """Per-cell diff of two reports, keyed by (kind, concepts, strategy, backend)."""

    def index(report: dict) -> dict[tuple, dict]:
        return {
            (c["kind"], c["concepts"], c["strategy"], c["backend"]): c
            for c in report["cells"]
        }

    left, right = index(a), index(b)
    lines = []
    for key in sorted(set(left) | set(right)):
        if key not in left:
            lines.append(f"{'/'.join(key)}: only in second report")
            continue
        if key not in right:
            lines.append(f"{'/'.join(key)}: only in first report")
            continue
        diffs = []
        for field in ("max_step", "mean_step", "association_ratio", "deduction_ratio"):
            va, vb = left[key][field], right[key][field]
            if va != vb:
                diffs.append(f"{field}: {va} -> {vb}")
        if diffs:
            lines.append(f"{'/'.join(key)}: " + "; ".join(diffs))
    if not lines:
        lines.append("reports identical on all compared fields")
    return "\n".join(lines) + "\n"
