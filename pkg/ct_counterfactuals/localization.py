"""Chunk scans, difference heatmaps and the input-gradient baseline."""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np

from .exceptions import InvalidValueError, ShapeMismatchError
from .latent_shift import generate_cf
from .models import CFResult, CFStatus, ChunkSpec, ScanEntry, ScanReport, SearchConfig
from .networks import SliceAutoencoder, VolumeScorer
from .rng import make_rng
from .tensor import Tape, backward

_LOGGER = logging.getLogger(__name__)


def scan_windows(depth: int, chunk_size: int, stride: int | None = None) -> list[ChunkSpec]:
    """Windows starting every `stride` slices; the last one is clipped to the volume end."""
    stride = chunk_size if stride is None else stride
    if not 1 <= chunk_size <= depth:
        raise InvalidValueError(f"Chunk size must be in [1, {depth}], got {chunk_size}")
    if stride < 1:
        raise InvalidValueError(f"Stride must be >= 1, got {stride}")
    windows = []
    for start in range(0, depth, stride):
        end = min(start + chunk_size, depth)
        windows.append(ChunkSpec(start, end - start))
        if end == depth:
            break
    return windows


def report_from_results(
    chunk_size: int, stride: int, results: Sequence[CFResult]
) -> ScanReport:
    """Assemble a scan report from per-window results, ordered by start."""
    ordered = sorted(results, key=lambda r: r.chunk.start)
    entries = [
        ScanEntry(
            start=r.chunk.start,
            end=r.chunk.end,
            baseline_prediction=r.baseline_prediction,
            min_prediction=r.min_prediction,
            status=r.status,
        )
        for r in ordered
    ]
    report = ScanReport(chunk_size, stride, entries, list(ordered))
    if all(e.status is CFStatus.NO_REDUCTION for e in entries):
        _LOGGER.warning("No scan window reduced the prediction")
    return report


def scan_chunks(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    volume: np.ndarray,
    chunk_size: int,
    stride: int | None = None,
    cfg: SearchConfig | None = None,
) -> ScanReport:
    """Run the counterfactual search once per window."""
    cfg = cfg or SearchConfig()
    stride = chunk_size if stride is None else stride
    windows = scan_windows(volume.shape[0], chunk_size, stride)
    results = [generate_cf(ae, f, volume, window, cfg) for window in windows]
    report = report_from_results(chunk_size, stride, results)
    best = report.best_chunk
    _LOGGER.debug(
        f"Scanned {len(windows)} windows of {chunk_size}; best [{best.start}, {best.end}) "
        f"reduces by {best.reduction:.6g}"
    )
    return report


def diff_heatmap(reference: np.ndarray, cf: np.ndarray) -> np.ndarray:
    """Per-voxel absolute difference."""
    if reference.shape != cf.shape:
        raise ShapeMismatchError("Heatmap volumes differ", reference.shape, cf.shape)
    return np.abs(reference - cf)


def input_gradient(f: VolumeScorer, volume: np.ndarray) -> np.ndarray:
    """d score / d voxel, with no autoencoder involved."""
    tape = Tape()
    x = tape.watch(volume)
    return backward(tape, f.forward(x)).wrt(x)


def localization_score(
    attribution: np.ndarray, truth_mask: np.ndarray, seed: int = 0
) -> float:
    """Share of the top-|truth| voxels by absolute attribution that lie in the mask.

    Ties in attribution are broken by a seeded random order.
    """
    if attribution.shape != truth_mask.shape:
        raise ShapeMismatchError("Attribution and mask differ", truth_mask.shape, attribution.shape)
    truth = truth_mask.reshape(-1) > 0
    k = int(truth.sum())
    if k == 0:
        raise InvalidValueError("Truth mask is empty")
    magnitude = np.abs(attribution.reshape(-1))
    shuffled = make_rng(seed).permutation(magnitude.size)
    top = shuffled[np.argsort(-magnitude[shuffled], kind="stable")[:k]]
    return float(truth[top].sum() / k)


def uniform_expectation(truth_mask: np.ndarray) -> float:
    """Expected localization score of a uniform attribution."""
    truth = truth_mask > 0
    if not truth.any():
        raise InvalidValueError("Truth mask is empty")
    return float(truth.sum() / truth.size)
