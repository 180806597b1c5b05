"""Report figures rendered with the Agg backend."""

from __future__ import annotations

import io
import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fileio import atomic_write_bytes  # noqa: E402
from .models import PredictionHistograms, ScanReport, SweepResult, TraceEntry  # noqa: E402

_LOGGER = logging.getLogger(__name__)

_PNG_METADATA = {"Software": None}


def _save(fig: plt.Figure, path: Path) -> None:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    _LOGGER.debug(f"Wrote figure {path}")


def plot_lambda_sweep(path: Path, trace: Sequence[TraceEntry], pixel_budget: float) -> None:
    """Prediction and pixel change against lambda."""
    fig, (ax_pred, ax_change) = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True)
    lambdas = [e.lambda_ for e in trace]
    ax_pred.plot(lambdas, [e.prediction for e in trace], marker="o")
    over = [e for e in trace if e.over_budget]
    if over:
        ax_pred.plot([e.lambda_ for e in over], [e.prediction for e in over], "rx", label="over budget")
        ax_pred.legend(loc="best", fontsize=8)
    ax_pred.set_xlabel("lambda")
    ax_pred.set_ylabel("prediction")
    ax_change.plot(lambdas, [e.pixel_change for e in trace], marker="o")
    ax_change.axhline(pixel_budget, color="red", linestyle="--", linewidth=1)
    ax_change.set_xlabel("lambda")
    ax_change.set_ylabel("pixel change fraction")
    for ax in (ax_pred, ax_change):
        ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_scan_profile(path: Path, report: ScanReport) -> None:
    """Prediction reduction per scan window."""
    fig, ax = plt.subplots(figsize=(7, 3.5), constrained_layout=True)
    starts = [e.start for e in report.entries]
    widths = [e.end - e.start for e in report.entries]
    colors = ["tab:red" if i == report.best_index else "tab:blue" for i in range(len(starts))]
    ax.bar(starts, [e.reduction for e in report.entries], width=widths, align="edge",
           color=colors, edgecolor="black", linewidth=0.5)
    ax.set_xlabel("slice")
    ax.set_ylabel("prediction reduction")
    ax.set_title(f"chunk size {report.chunk_size}, stride {report.stride}")
    _save(fig, path)


def plot_chunk_sweep(path: Path, sweep: SweepResult) -> None:
    """Mean reduction with standard error per chunk size."""
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    ax.errorbar(
        [p.chunk_size for p in sweep.points],
        [p.mean_reduction for p in sweep.points],
        yerr=[p.stderr for p in sweep.points],
        marker="o",
        capsize=3,
    )
    ax.set_xlabel("chunk size")
    ax.set_ylabel("mean prediction reduction")
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_histograms(path: Path, histograms: PredictionHistograms) -> None:
    """Overlaid normalised prediction histograms."""
    fig, ax = plt.subplots(figsize=(6, 3.5), constrained_layout=True)
    edges = histograms.edges
    for name, mass in histograms.groups.items():
        ax.stairs(mass, edges, label=name)
    ax.set_xlabel("prediction")
    ax.set_ylabel("fraction of volumes")
    ax.legend(loc="best", fontsize=8)
    _save(fig, path)
