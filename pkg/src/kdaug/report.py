"""Render experiment grids as CSV / Markdown tables and accuracy curves as SVG.

Output is byte-stable for identical inputs.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import aggregate

REPORT_SCHEMA_VERSION = 1
MISSING = "\u2014"  # rendered for cells without runs


@dataclass
class ReportTable:
    name: str
    title: str
    rows: list[str]
    cols: list[str]
    cells: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    row_header: str = "Method"
    # Optional per-column reference value (e.g. teacher accuracy), shown in brackets.
    col_notes: dict[str, float] = field(default_factory=dict)
    # label -> list of per-run accuracy trails, averaged epoch-wise when plotted
    curves: dict[str, list[list[float]]] = field(default_factory=dict)
    # "agg" renders mean±std; "p" renders a single p-value
    cell_format: str = "agg"


def format_cell(values, cell_format: str = "agg") -> str:
    if not values:
        return MISSING
    if cell_format == "p":
        return f"{values[0]:.4f}"
    agg = aggregate(values)
    return f"{agg.mean:.2f}±{agg.std:.2f}"


def render_markdown(table: ReportTable) -> str:
    lines = [f"### {table.title}", ""]
    lines.append("| " + " | ".join([table.row_header, *table.cols]) + " |")
    lines.append("|" + "---|" * (len(table.cols) + 1))
    if table.col_notes:
        notes = [f"({table.col_notes[c]:.2f})" if c in table.col_notes else "" for c in table.cols]
        lines.append("| " + " | ".join(["", *notes]) + " |")
    for r in table.rows:
        lines.append("| " + " | ".join([r, *(format_cell(table.cells.get((r, c)), table.cell_format) for c in table.cols)]) + " |")
    return "\n".join(lines) + "\n"


def render_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "column", "mean", "std", "n", "values", "column_note"])
    for r in table.rows:
        for c in table.cols:
            vals = table.cells.get((r, c))
            note = f"{table.col_notes[c]:.4f}" if c in table.col_notes else ""
            if not vals:
                w.writerow([r, c, "", "", 0, "", note])
                continue
            agg = aggregate(vals)
            w.writerow([r, c, f"{agg.mean:.6f}", f"{agg.std:.6f}", agg.n,
                        ";".join(f"{v:.6f}" for v in vals), note])
    return buf.getvalue()


def render_curves_svg(curves: dict[str, list[list[float]]], title: str) -> str:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "kdaug", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label in sorted(curves):
            trails = curves[label]
            n = min(len(t) for t in trails)
            mean = np.mean([t[:n] for t in trails], axis=0)
            ax.plot(np.arange(1, n + 1), mean, label=label, linewidth=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy (%)")
        ax.set_title(title)
        if curves:
            ax.legend(fontsize=8)
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()


def emit_report(tables: list[ReportTable], out_dir, extra: dict | None = None) -> list[Path]:
    """Write ``<name>.md``, ``<name>.csv`` and (when curves exist) ``<name>_curves.svg``
    per table, plus ``report.json`` and a combined ``report.md``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    combined = []
    summary = {"schema_version": REPORT_SCHEMA_VERSION, "tables": []}
    for t in tables:
        md = render_markdown(t)
        combined.append(md)
        (out / f"{t.name}.md").write_text(md, encoding="utf-8")
        (out / f"{t.name}.csv").write_text(render_csv(t), encoding="utf-8")
        written += [out / f"{t.name}.md", out / f"{t.name}.csv"]
        if t.curves:
            (out / f"{t.name}_curves.svg").write_text(render_curves_svg(t.curves, t.title), encoding="utf-8")
            written.append(out / f"{t.name}_curves.svg")
        summary["tables"].append({
            "name": t.name,
            "title": t.title,
            "rows": t.rows,
            "cols": t.cols,
            "cells": [{"row": r, "col": c, "values": t.cells[(r, c)]} for r in t.rows for c in t.cols
                      if t.cells.get((r, c))],
            "col_notes": t.col_notes,
        })
    if extra:
        summary.update(extra)
    (out / "report.md").write_text("\n".join(combined), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return written + [out / "report.md", out / "report.json"]
