"""Render training histories to figures and comparison summaries.

Plots are SVG with a pinned hash salt and no timestamp metadata, so the same
history bytes always render to the same figure bytes.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .errors import FormatError  # noqa: E402
from .rl import HISTORY_CSV_FIELDS, RoundRecord  # noqa: E402

_RC = {"svg.hashsalt": "insitu", "figure.figsize": (6.4, 4.2)}


def read_history_csv(path) -> list[RoundRecord]:
    """Parse a metrics.csv back into records. Raises FormatError with the
    offending line number on anything unexpected."""
    path = Path(path)
    records = []
    with open(path, newline="") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if lineno == 1:
                if line != ",".join(HISTORY_CSV_FIELDS):
                    raise FormatError(f"{path}:1: bad header {line!r}")
                continue
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(HISTORY_CSV_FIELDS):
                raise FormatError(f"{path}:{lineno}: expected "
                                  f"{len(HISTORY_CSV_FIELDS)} fields, got {len(parts)}")
            try:
                records.append(RoundRecord(int(parts[0]), int(parts[1]),
                                           *map(float, parts[2:])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return records


def _series(records, x_field, y_field):
    xs, ys = [], []
    for rec in records:
        y = getattr(rec, y_field)
        if not math.isnan(y):
            xs.append(getattr(rec, x_field))
            ys.append(y)
    return xs, ys


def _plot(histories, x_field, y_field, x_label, y_label, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, records in histories.items():
            xs, ys = _series(records, x_field, y_field)
            if xs:
                ax.plot(xs, ys, label=label, linewidth=1.4)
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.grid(alpha=0.3)
        if len(histories) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_plots(out_dir, histories) -> list[Path]:
    """Write the standard figure set for one or more labelled histories:
    metric and mean reward, each against measurements and instrument seconds.
    Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = (
        ("metric", "measurements", "instrument measurements"),
        ("metric", "seconds", "instrument time [s]"),
        ("mean_reward", "measurements", "instrument measurements"),
        ("mean_reward", "seconds", "instrument time [s]"),
    )
    written = []
    for y_field, x_field, x_label in specs:
        path = out_dir / f"{y_field}_vs_{x_field}.svg"
        _plot(histories, x_field, y_field, x_label, y_field.replace("_", " "), path)
        written.append(path)
    return written


def median_measurements(values) -> float:
    """Median measurements-to-threshold over seeds; unreached seeds count as
    infinity, so an unreached median stays infinite."""
    vals = [math.inf if v is None else float(v) for v in values]
    if not vals:
        return math.inf
    return float(np.median(vals))


def _fmt_count(value: float) -> str:
    return "not reached" if math.isinf(value) else f"{value:.10g}"


def speedup_summary(threshold: float, per_algo: dict) -> str:
    """Text block comparing measurements-to-threshold across algorithms.

    per_algo maps an algorithm label to its per-seed counts (None when a seed
    never reached the threshold). Ends with the ppo/pg measurement ratio when
    both labels are present and reached.
    """
    lines = [f"metric_threshold = {threshold:.10g}"]
    medians = {}
    for algo, vals in per_algo.items():
        shown = ", ".join("not reached" if v is None else str(v) for v in vals)
        med = median_measurements(vals)
        medians[algo] = med
        lines.append(f"{algo}_measurements_to_threshold = [{shown}]")
        lines.append(f"{algo}_median = {_fmt_count(med)}")
    if "ppo" in medians and "pg" in medians:
        if math.isinf(medians["ppo"]) or math.isinf(medians["pg"]):
            lines.append("ppo_vs_pg_ratio = not comparable")
        else:
            lines.append(f"ppo_vs_pg_ratio = {medians['ppo'] / medians['pg']:.10g}")
    return "\n".join(lines) + "\n"
