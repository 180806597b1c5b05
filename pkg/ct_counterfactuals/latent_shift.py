"""Latent Shift counterfactual generation over a chunk of slice latents.

The volume is encoded slice by slice, every slice is decoded, and only the
latents inside the chunk are differentiated. The classifier gradient taken at
the original latents gives one direction; the search walks along it with a
geometric lambda schedule until the prediction reaches the target, starts
rising, or the decoded volume drifts past the pixel-change budget.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np

from .const import DYNAMIC_RANGE
from .exceptions import InvalidValueError, NonFiniteError, ShapeMismatchError
from .models import CFResult, CFStatus, ChunkSpec, SearchConfig, TraceEntry
from .networks import (
    ChunkedDecode,
    SliceAutoencoder,
    VolumeScorer,
    decode_chunked,
    decode_unblocked,
    encode_volume,
    reconstruct,
    score,
)
from .tensor import backward, constant

_LOGGER = logging.getLogger(__name__)


def _latent_gradient(f: VolumeScorer, decoded: ChunkedDecode, z: np.ndarray) -> np.ndarray:
    grads = backward(decoded.tape, f.forward(decoded.volume))
    g = np.zeros_like(z)
    for index, leaf in decoded.latents.items():
        g[index] = grads.wrt(leaf)[0]
    return g


def shift_direction(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    volume: np.ndarray,
    chunk: ChunkSpec,
    latents: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the score w.r.t. the slice latents; exactly zero outside the chunk."""
    f.check_volume_shape(volume.shape)
    z = encode_volume(ae, volume) if latents is None else latents
    return _latent_gradient(f, decode_chunked(ae, z, chunk), z)


def apply_shift(
    z: np.ndarray, g: np.ndarray, lambda_: float, chunk: ChunkSpec
) -> np.ndarray:
    """z - lambda * g inside the chunk, z elsewhere."""
    if z.shape != g.shape:
        raise ShapeMismatchError("Latents and gradient differ", z.shape, g.shape)
    chunk.validate_for(z.shape[0])
    shifted = z.copy()
    if lambda_ != 0:
        shifted[chunk.start : chunk.end] = (
            z[chunk.start : chunk.end] - lambda_ * g[chunk.start : chunk.end]
        )
    return shifted


def pixel_change_fraction(reference: np.ndarray, candidate: np.ndarray) -> float:
    """Mean absolute voxel change relative to the dynamic range."""
    if reference.shape != candidate.shape:
        raise ShapeMismatchError("Volumes differ", reference.shape, candidate.shape)
    return float(np.abs(candidate - reference).mean() / DYNAMIC_RANGE)


def _decode_chunk_into(
    base: np.ndarray, ae: SliceAutoencoder, z: np.ndarray, chunk: ChunkSpec
) -> np.ndarray:
    """Copy of base with the chunk's slices re-decoded from z."""
    volume = base.copy()
    for i in range(chunk.start, chunk.end):
        volume[i] = ae.decode_slice(constant(z[i : i + 1])).value
    return volume


def _checked(prediction: float, lambda_: float) -> float:
    if not math.isfinite(prediction):
        raise NonFiniteError(f"Prediction at lambda {lambda_} is {prediction}")
    return prediction


def _search(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    z: np.ndarray,
    g: np.ndarray,
    chunk: ChunkSpec,
    cfg: SearchConfig,
    decode_full: bool,
) -> CFResult:
    recon = reconstruct(ae, z)
    baseline = _checked(score(f, recon), 0.0)
    trace = [TraceEntry(0.0, baseline, 0.0)]

    if not np.any(g):
        _LOGGER.debug(f"Zero gradient for chunk [{chunk.start}, {chunk.end})")
        return CFResult(recon, 0.0, trace, CFStatus.NO_REDUCTION, baseline, chunk)

    target = cfg.target_fraction * baseline
    best_volume, best_lambda, best_prediction = recon, 0.0, baseline
    status = CFStatus.PLATEAUED

    for lambda_ in cfg.lambdas():
        shifted = apply_shift(z, g, lambda_, chunk)
        if decode_full:
            candidate = reconstruct(ae, shifted)
        else:
            candidate = _decode_chunk_into(recon, ae, shifted, chunk)
        prediction = _checked(score(f, candidate), lambda_)
        change = pixel_change_fraction(recon, candidate)
        _LOGGER.debug(
            f"lambda={lambda_:.6g} prediction={prediction:.6g} change={change:.4g}"
        )

        if change > cfg.pixel_budget:
            trace.append(TraceEntry(lambda_, prediction, change, over_budget=True))
            status = CFStatus.BUDGET_EXCEEDED
            break

        trace.append(TraceEntry(lambda_, prediction, change))
        if prediction < best_prediction:
            best_volume, best_lambda, best_prediction = candidate, lambda_, prediction
        if prediction > trace[-2].prediction:
            status = CFStatus.PLATEAUED
            break
        if prediction <= target:
            status = CFStatus.CONVERGED
            break

    return CFResult(best_volume, best_lambda, trace, status, baseline, chunk)


def generate_cf(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    volume: np.ndarray,
    chunk: ChunkSpec,
    cfg: SearchConfig,
) -> CFResult:
    """Counterfactual whose changes are confined to the chunk's slices."""
    f.check_volume_shape(volume.shape)
    chunk.validate_for(volume.shape[0])
    z = encode_volume(ae, volume)
    g = shift_direction(ae, f, volume, chunk, latents=z)
    result = _search(ae, f, z, g, chunk, cfg, decode_full=False)
    _LOGGER.debug(
        f"Chunk [{chunk.start}, {chunk.end}): {result.status.value}, "
        f"{result.baseline_prediction:.6g} -> {result.min_prediction:.6g}"
    )
    return result


def generate_cf_unblocked(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    volume: np.ndarray,
    cfg: SearchConfig,
) -> CFResult:
    """Whole-volume counterfactual computed without any gradient blocking."""
    f.check_volume_shape(volume.shape)
    z = encode_volume(ae, volume)
    g = _latent_gradient(f, decode_unblocked(ae, z), z)
    return _search(ae, f, z, g, ChunkSpec.full(volume.shape[0]), cfg, decode_full=True)


def lambda_sweep(
    ae: SliceAutoencoder,
    f: VolumeScorer,
    volume: np.ndarray,
    chunk: ChunkSpec,
    lambdas: Sequence[float],
) -> list[TraceEntry]:
    """Prediction and pixel change along one fixed gradient direction."""
    if not all(math.isfinite(lam) for lam in lambdas):
        raise InvalidValueError(f"Lambdas must be finite: {list(lambdas)}")
    f.check_volume_shape(volume.shape)
    z = encode_volume(ae, volume)
    g = shift_direction(ae, f, volume, chunk, latents=z)
    recon = reconstruct(ae, z)
    entries = []
    for lambda_ in lambdas:
        candidate = _decode_chunk_into(recon, ae, apply_shift(z, g, lambda_, chunk), chunk)
        entries.append(
            TraceEntry(
                float(lambda_),
                _checked(score(f, candidate), lambda_),
                pixel_change_fraction(recon, candidate),
            )
        )
    return entries
