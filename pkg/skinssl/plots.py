"""
Budget-curve plots from sweep CSVs.

One SVG per task: metric against labelled-data budget, one series per training
mode, whiskers at one std over seeds. SVG output is byte-stable for identical
input (fixed hash salt, no date metadata).
"""

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from skinssl.downstream import SWEEP_COLUMNS, summarize_sweep  # noqa: E402
from skinssl.errors import InsufficientDataError, SchemaError  # noqa: E402

logger = logging.getLogger(__name__)

# (metric, dim, y-axis label) plotted per task
TASK_PLOTS = {
    "force": ("rmse", "z", "Normal force RMSE (N)"),
    "pose": ("pose_accuracy", "all", "Pose accuracy (2 cm / 5°)"),
    "joystick": ("rmse", "all", "Mean RMSE (normalized)"),
}
MODE_LABELS = {
    "frozen": "Frozen (distill)",
    "finetuned": "Finetuned",
    "end_to_end": "End-to-end",
    "frozen_mae": "Frozen (MAE)",
}


def read_metrics(metrics_dir):
    """Concatenate every sweep-format CSV under ``metrics_dir``."""
    metrics_dir = Path(metrics_dir)
    files = sorted(f for f in metrics_dir.rglob("*.csv") if not f.stem.endswith("_summary"))
    if not files:
        raise InsufficientDataError(f"No metrics CSVs found in {metrics_dir}\n"
                                    "Run `python -m skinssl train-task` or `python -m skinssl sweep` first.")
    tables = []
    for file in files:
        table = pd.read_csv(file)
        missing = [c for c in SWEEP_COLUMNS if c not in table.columns]
        if missing:
            raise SchemaError(f"{file} is missing columns: {', '.join(missing)}")
        tables.append(table[SWEEP_COLUMNS])
    return pd.concat(tables, ignore_index=True)


def plot_task(summary, task, path):
    metric, dim, ylabel = TASK_PLOTS[task]
    rows = summary[(summary["task"] == task) & (summary["metric"] == metric)
                   & (summary["dim"].astype(str) == dim)]
    if rows.empty:
        return None

    plt.rcParams["svg.hashsalt"] = "skinssl"
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in sorted(rows["mode"].unique()):
        series = rows[rows["mode"] == mode].sort_values("budget")
        ax.errorbar(series["budget"] * 100, series["mean"], yerr=series["std"], marker="o",
                    capsize=3, label=MODE_LABELS.get(mode, mode))
    ax.set_xscale("log")
    ax.set_xlabel("Labelled data (%)")
    ax.set_ylabel(ylabel)
    ax.set_title(task.capitalize())
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def export_plots(metrics_dir, out_dir=None):
    """Write <task>.svg for every task present plus a pooled summary CSV; returns the paths."""
    table = read_metrics(metrics_dir)
    out_dir = Path(out_dir or metrics_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize_sweep(table)
    summary_path = out_dir / "budget_curves_summary.csv"
    summary.to_csv(summary_path, index=False)

    written = [summary_path]
    for task in TASK_PLOTS:
        path = plot_task(summary, task, out_dir / f"{task}.svg")
        if path is not None:
            logger.info(f"  ✓ {path.name}")
            written.append(path)
    if len(written) == 1:
        raise SchemaError("Metrics CSVs hold no plottable task metric")
    return written
