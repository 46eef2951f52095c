"""Plain-text and CSV summaries of finished runs, including student/teacher retention."""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass
from typing import Optional, Sequence

from medistill.accounting import count_flops, count_params, cost_report
from medistill.checkpoint import atomic_write_text
from medistill.config import ModelConfig

RETENTION_METRICS = ("tr@1", "ir@1", "tr@1_itm", "caption_exact", "caption_f1")


@dataclass
class RunSummary:
    name: str
    config: ModelConfig
    metrics: dict[str, float]

    @property
    def params(self) -> int:
        return count_params(self.config)

    @property
    def flops(self) -> int:
        return count_flops(self.config, text_len=self.config.text.max_len)


def load_run(run_dir: str) -> RunSummary:
    with open(os.path.join(run_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    metrics_path = os.path.join(run_dir, "metrics.json")
    metrics = {}
    if os.path.exists(metrics_path):
        with open(metrics_path, encoding="utf-8") as fh:
            metrics = json.load(fh)
    name = os.path.basename(os.path.normpath(run_dir))
    return RunSummary(name, ModelConfig.model_validate(manifest["model"]), metrics)


def format_percent(ratio: Optional[float]) -> str:
    if ratio is None:
        return "n/a"
    return f"{100.0 * ratio:.1f}%"


def ratio(student: Optional[float], teacher: Optional[float]) -> Optional[float]:
    if student is None or teacher is None or teacher == 0:
        return None
    return student / teacher


def retention_rows(teacher: RunSummary, student: RunSummary) -> list[tuple[str, str, str, str]]:
    """(quantity, teacher value, student value, student/teacher) for params, FLOPs and shared metrics."""
    rows = [
        ("params", f"{teacher.params:,}", f"{student.params:,}", format_percent(ratio(student.params, teacher.params))),
        ("flops", f"{teacher.flops:,}", f"{student.flops:,}", format_percent(ratio(student.flops, teacher.flops))),
    ]
    for key in RETENTION_METRICS:
        t, s = teacher.metrics.get(key), student.metrics.get(key)
        if t is None or s is None:
            continue
        rows.append((key, f"{t:.4f}", f"{s:.4f}", format_percent(ratio(s, t))))
    return rows


def _align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def render_summary(runs: Sequence[RunSummary]) -> str:
    """One run: its size and metrics.  Two or more: each later run against the first as reference."""
    if not runs:
        return "no runs\n"
    ref = runs[0]
    parts = []
    if len(runs) == 1:
        rows = [("quantity", ref.name), ("params", f"{ref.params:,}"), ("flops", f"{ref.flops:,}")]
        rows += [(k, f"{v:.4f}") for k, v in sorted(ref.metrics.items()) if isinstance(v, (int, float))]
        parts.append(_align(rows))
    for other in runs[1:]:
        rows = [("quantity", ref.name, other.name, "ratio")] + retention_rows(ref, other)
        parts.append(_align(rows))
        headline = _headline(ref, other)
        if headline:
            parts.append(headline)
    return "\n\n".join(parts) + "\n"


def _headline(teacher: RunSummary, student: RunSummary) -> str:
    kept = [(k, ratio(student.metrics.get(k), teacher.metrics.get(k))) for k in RETENTION_METRICS]
    kept = [(k, r) for k, r in kept if r is not None]
    if not kept:
        return ""
    worst = min(r for _, r in kept)
    return (f"{student.name} retains at least {format_percent(worst)} of {teacher.name}'s metrics "
            f"({', '.join(f'{k} {format_percent(r)}' for k, r in kept)}) "
            f"with {format_percent(ratio(student.params, teacher.params))} of its parameters.")


def emit_report(run_dirs: Sequence[str], out_dir: str, grid_csv: Optional[str] = None) -> list[str]:
    """Write cost tables, the retention summary and (optionally) a copy of an ablation CSV."""
    os.makedirs(out_dir, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]
    written = []
    costs = []
    for run in runs:
        rep = cost_report(run.config, text_len=run.config.text.max_len)
        costs.append(f"# {run.name}\n{rep.table()}")
        path = os.path.join(out_dir, f"cost_{run.name}.json")
        atomic_write_text(path, rep.to_json())
        written.append(path)
    path = os.path.join(out_dir, "cost_table.txt")
    atomic_write_text(path, "\n\n".join(costs) + "\n")
    written.append(path)
    path = os.path.join(out_dir, "summary.txt")
    atomic_write_text(path, render_summary(runs))
    written.append(path)
    if grid_csv:
        path = os.path.join(out_dir, "ablation.csv")
        shutil.copyfile(grid_csv, path)
        written.append(path)
    return written
