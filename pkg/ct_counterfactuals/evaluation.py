"""Dataset-level evaluation of chunked counterfactuals."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np
from scipy.stats import permutation_test as _scipy_permutation_test
from sklearn.metrics import roc_auc_score

from .exceptions import InvalidValueError
from .localization import (
    diff_heatmap,
    input_gradient,
    localization_score,
    scan_chunks,
    uniform_expectation,
)
from .models import (
    Label,
    LabeledVolume,
    LocalizationRecord,
    PredictionHistograms,
    ReductionRow,
    ReductionTable,
    SearchConfig,
    SweepPoint,
    SweepResult,
    VolumeRecord,
)
from .networks import SliceAutoencoder, VolumeScorer, encode_volume, reconstruct, score
from .rng import make_rng

_LOGGER = logging.getLogger(__name__)

GROUP_POSITIVES = "positives"
GROUP_NEGATIVES = "negatives"
GROUP_CF_POSITIVES = "cf_positives"
GROUP_CF_NEGATIVES = "cf_negatives"


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation / sqrt(N); stderr is 0 for one value."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return math.nan, math.nan
    if data.size == 1:
        return float(data[0]), 0.0
    return float(data.mean()), float(data.std(ddof=1) / math.sqrt(data.size))


def volume_record(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    index: int,
    item: LabeledVolume,
    chunk_size: int,
    cfg: SearchConfig,
    with_cf: bool,
) -> VolumeRecord:
    """Predictions for one volume; the CF prediction is the minimum over windows."""
    input_prediction = score(f, item.volume)
    if not with_cf:
        baseline = score(f, reconstruct(ae, encode_volume(ae, item.volume)))
        return VolumeRecord(index, item.label, input_prediction, baseline, None, None)
    report = scan_chunks(ae, f, item.volume, chunk_size, cfg=cfg)
    return VolumeRecord(
        index=index,
        label=item.label,
        input_prediction=input_prediction,
        baseline_prediction=report.entries[0].baseline_prediction,
        cf_prediction=report.min_prediction,
        best_start=report.best_chunk.start,
    )


def collect_predictions(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    dataset: Sequence[LabeledVolume],
    chunk_size: int,
    cfg: SearchConfig,
    include_negative_cfs: bool = False,
) -> list[VolumeRecord]:
    """Per-volume records in dataset order; negatives get CFs only on request."""
    return [
        volume_record(
            ae, f, i, item, chunk_size, cfg, item.is_positive or include_negative_cfs
        )
        for i, item in enumerate(dataset)
    ]


def reduction_table(
    records: Sequence[VolumeRecord], chunk_size: int, include_negative_cfs: bool = False
) -> ReductionTable:
    """Aggregate records into mean +- standard error rows."""
    positives = [r for r in records if r.label is Label.POSITIVE]
    negatives = [r for r in records if r.label is Label.NEGATIVE]
    groups = [
        (GROUP_POSITIVES, [r.baseline_prediction for r in positives]),
        (GROUP_NEGATIVES, [r.baseline_prediction for r in negatives]),
        (GROUP_CF_POSITIVES, [r.cf_prediction for r in positives]),
    ]
    if include_negative_cfs:
        groups.append((GROUP_CF_NEGATIVES, [r.cf_prediction for r in negatives]))
    rows = []
    for name, values in groups:
        mean, stderr = mean_stderr([v for v in values if v is not None])
        rows.append(ReductionRow(name, mean, stderr, len(values)))
    return ReductionTable(chunk_size, rows, list(records))


def check_both_classes(dataset: Sequence[LabeledVolume]) -> None:
    """Raise unless the dataset holds positives and negatives."""
    labels = {item.label for item in dataset}
    if labels != {Label.POSITIVE, Label.NEGATIVE}:
        raise InvalidValueError("Evaluation needs positive and negative volumes")


def evaluate_reduction(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    dataset: Sequence[LabeledVolume],
    chunk_size: int,
    cfg: SearchConfig,
    include_negative_cfs: bool = False,
) -> ReductionTable:
    """Predictions of positives, negatives and CFs of positives."""
    check_both_classes(dataset)
    records = collect_predictions(ae, f, dataset, chunk_size, cfg, include_negative_cfs)
    table = reduction_table(records, chunk_size, include_negative_cfs)
    summary = ", ".join(f"{r.group}={r.mean:.4g}+-{r.stderr:.2g}" for r in table.rows)
    _LOGGER.info(f"Reduction table (chunk {chunk_size}): {summary}")
    return table


def chunk_size_sweep(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    dataset_positives: Sequence[LabeledVolume],
    sizes: Sequence[int],
    cfg: SearchConfig,
) -> SweepResult:
    """Mean reduction over positives for each chunk size."""
    positives = [item for item in dataset_positives if item.is_positive]
    if not positives:
        raise InvalidValueError("Chunk-size sweep needs positive volumes")
    sizes = check_sweep_sizes(positives, sizes)
    return sweep_from_records(
        {size: collect_predictions(ae, f, positives, size, cfg) for size in sizes}
    )


def check_sweep_sizes(dataset: Sequence[LabeledVolume], sizes: Sequence[int]) -> list[int]:
    """Sorted unique sizes, each within [1, D]."""
    depth = min(item.volume.shape[0] for item in dataset)
    unique = sorted(set(sizes))
    for size in unique:
        if not 1 <= size <= depth:
            raise InvalidValueError(f"Chunk size {size} outside [1, {depth}]")
    return unique


def sweep_from_records(records_by_size: dict[int, list[VolumeRecord]]) -> SweepResult:
    """Mean reduction +- standard error per chunk size."""
    points = []
    for size in sorted(records_by_size):
        records = records_by_size[size]
        mean, stderr = mean_stderr([r.reduction for r in records])
        points.append(SweepPoint(size, mean, stderr, len(records)))
        _LOGGER.debug(f"Chunk size {size}: mean reduction {mean:.6g} +- {stderr:.2g}")
    return SweepResult(points)


def histograms_from_records(
    records: Sequence[VolumeRecord], bins: int
) -> PredictionHistograms:
    """Normalised histograms of positives, negatives and CFs of positives."""
    if bins < 2:
        raise InvalidValueError(f"Need at least two bins, got {bins}")
    groups = {
        GROUP_POSITIVES: [r.baseline_prediction for r in records if r.label is Label.POSITIVE],
        GROUP_NEGATIVES: [r.baseline_prediction for r in records if r.label is Label.NEGATIVE],
        GROUP_CF_POSITIVES: [
            r.cf_prediction
            for r in records
            if r.label is Label.POSITIVE and r.cf_prediction is not None
        ],
    }
    values = [v for group in groups.values() for v in group]
    # probabilities share [0, 1]; unbounded scores (seg_sum) widen it
    low = min([0.0, *values])
    high = max([1.0, *values])
    edges = np.histogram_bin_edges([], bins=bins, range=(low, high))
    normalised = {}
    for name, group in groups.items():
        counts, _ = np.histogram(group, bins=edges)
        normalised[name] = counts / len(group) if group else counts.astype(np.float64)
    return PredictionHistograms(edges, normalised)


def prediction_histograms(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    dataset: Sequence[LabeledVolume],
    chunk_size: int,
    bins: int,
    cfg: SearchConfig | None = None,
) -> PredictionHistograms:
    """Distribution of predictions before and after counterfactual generation."""
    records = collect_predictions(ae, f, dataset, chunk_size, cfg or SearchConfig())
    return histograms_from_records(records, bins)


def holdout_split(
    dataset: Sequence[LabeledVolume], fraction: float, seed: int
) -> tuple[list[LabeledVolume], list[LabeledVolume]]:
    """Stratified (train, held-out) split; each class contributes round(fraction * n)."""
    if not 0 <= fraction < 1:
        raise InvalidValueError(f"Holdout fraction must be in [0, 1), got {fraction}")
    rng = make_rng(seed)
    train, held = [], []
    for label in (Label.POSITIVE, Label.NEGATIVE):
        members = [i for i, item in enumerate(dataset) if item.label is label]
        order = rng.permutation(len(members))
        n_held = round(fraction * len(members))
        held_idx = {members[j] for j in order[:n_held]}
        train.extend(i for i in members if i not in held_idx)
        held.extend(sorted(held_idx))
    return [dataset[i] for i in sorted(train)], [dataset[i] for i in sorted(held)]


def classification_metrics(f: VolumeScorer, dataset: Sequence[LabeledVolume]) -> dict[str, float]:
    """AUC (NaN with a single class) and accuracy at 0.5."""
    if not dataset:
        return {"auc": math.nan, "accuracy": math.nan, "n": 0}
    labels = np.array([item.is_positive for item in dataset])
    predictions = np.array([score(f, item.volume) for item in dataset])
    auc = (
        float(roc_auc_score(labels, predictions))
        if labels.any() and not labels.all()
        else math.nan
    )
    return {
        "auc": auc,
        "accuracy": float(np.mean((predictions >= 0.5) == labels)),
        "n": len(dataset),
    }


def _mean_difference(x: np.ndarray, y: np.ndarray, axis: int) -> np.ndarray:
    return np.mean(x, axis=axis) - np.mean(y, axis=axis)


def permutation_test(
    group_a: Sequence[float], group_b: Sequence[float], iterations: int, seed: int
) -> float:
    """Two-sided permutation p-value for a difference of means."""
    if len(group_a) == 0 or len(group_b) == 0:
        raise InvalidValueError("Permutation test needs two nonempty groups")
    result = _scipy_permutation_test(
        (np.asarray(group_a, dtype=np.float64), np.asarray(group_b, dtype=np.float64)),
        _mean_difference,
        permutation_type="independent",
        vectorized=True,
        n_resamples=iterations,
        alternative="two-sided",
        rng=make_rng(seed),
    )
    return float(result.pvalue)


def timing_model(n_slices: int, chunk_size: int, per_chunk_seconds: float) -> float:
    """Seconds to scan a volume one chunk at a time."""
    if n_slices <= 0 or chunk_size <= 0 or per_chunk_seconds <= 0:
        raise InvalidValueError("Timing model inputs must be positive")
    return math.ceil(n_slices / chunk_size) * float(per_chunk_seconds)


def compare_localization(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    dataset: Sequence[LabeledVolume],
    chunk_size: int,
    cfg: SearchConfig,
    seed: int = 0,
) -> list[LocalizationRecord]:
    """Latent-shift heatmap vs input gradient against each positive's planted mask."""
    records = []
    for index, item in enumerate(dataset):
        if not item.is_positive:
            continue
        report = scan_chunks(ae, f, item.volume, chunk_size, cfg=cfg)
        best = report.results[report.best_index]
        recon = reconstruct(ae, encode_volume(ae, item.volume))
        heatmap = diff_heatmap(recon, best.cf_volume)
        records.append(
            LocalizationRecord(
                index=index,
                best_start=best.chunk.start,
                latent_shift_score=localization_score(heatmap, item.truth_mask, seed),
                input_gradient_score=localization_score(
                    input_gradient(f, item.volume), item.truth_mask, seed
                ),
                uniform_expectation=uniform_expectation(item.truth_mask),
            )
        )
    return records
