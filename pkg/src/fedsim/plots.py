"""Figure rendering for experiment and bound-report outputs.

Figures are regenerated purely from the CSV artifacts (manifest plus per-cell
files), so a finished output directory is self-contained.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        return {}
    return {
        name: np.array([float(row[name]) for row in rows])
        for name in reader.fieldnames
    }


def _groups(out_dir: Path):
    """Cell files grouped by sweep value, in manifest order."""
    manifest = out_dir / "manifest.csv"
    grouped: dict[str, list[Path]] = defaultdict(list)
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            label = f"{row['param']}={row['value']}" if row["param"] else "run"
            grouped[label].append(out_dir / row["file"])
    return grouped


def _mean_curves(files: list[Path], column: str):
    curves = []
    for path in files:
        table = _read_csv(path)
        if table:
            curves.append(table[column])
    if not curves:
        return None, None
    stacked = np.stack(curves)
    return np.arange(stacked.shape[1]), stacked.mean(axis=0)


def render_run_figures(out_dir: str | Path) -> list[Path]:
    """Render loss/accuracy/distance curves next to the experiment CSVs."""
    out_dir = Path(out_dir)
    grouped = _groups(out_dir)
    written: list[Path] = []

    panels = [
        ("train_loss", "training loss", "loss_vs_round.png", {}),
        ("test_acc", "test accuracy", "accuracy_vs_round.png", {}),
        ("dist_sq_to_opt", "squared distance to optimum", "dist_vs_round.png", {"log": True}),
    ]
    for column, ylabel, filename, opts in panels:
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        plotted = False
        for label, files in sorted(grouped.items()):
            rounds, mean = _mean_curves(files, column)
            if mean is None or not np.isfinite(mean).any():
                continue
            ax.plot(rounds, mean, label=label, linewidth=1.4)
            plotted = True
        if not plotted:
            plt.close(fig)
            continue
        if opts.get("log"):
            ax.set_yscale("log")
        ax.set_xlabel("round")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / filename
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    plotted = False
    for label, files in sorted(grouped.items()):
        table = _read_csv(files[0])
        if not table:
            continue
        _, mean_loss = _mean_curves(files, "train_loss")
        ax.plot(table["bits_cum"], mean_loss, label=label, linewidth=1.4)
        plotted = True
    if plotted:
        ax.set_xlabel("cumulative uplink bits")
        ax.set_ylabel("training loss")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / "loss_vs_bits.png"
        fig.savefig(path, dpi=130)
        written.append(path)
    plt.close(fig)
    return written


def render_bound_figure(out_dir: str | Path) -> list[Path]:
    """Render the bound-vs-local-steps curve from a bound_report.csv."""
    out_dir = Path(out_dir)
    table = _read_csv(out_dir / "bound_report.csv")
    if not table:
        return []
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    feasible = table["feasible"] > 0
    ax.plot(table["E"], table["bound_total"], color="C0", linewidth=1.4)
    if feasible.any():
        ax.plot(
            table["E"][feasible], table["bound_total"][feasible],
            "o", color="C0", markersize=3, label="feasible",
        )
    if (~feasible).any():
        ax.plot(
            table["E"][~feasible], table["bound_total"][~feasible],
            "x", color="C3", markersize=4, label="over budget",
        )
    ax.set_yscale("log")
    ax.set_xlabel("local steps per round")
    ax.set_ylabel("distance bound")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / "bound_vs_local_steps.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return [path]
