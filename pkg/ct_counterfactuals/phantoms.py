"""Seeded phantom volumes: a dark ellipsoid "lung" and an optional bright rim."""

from __future__ import annotations

import logging
import math
from dataclasses import replace

import numpy as np

from .const import (
    DEFAULT_RIM_EXTENT_DEG,
    DEFAULT_RIM_INTENSITY,
    DEFAULT_RIM_SLICES,
    DEFAULT_RIM_THICKNESS,
)
from .exceptions import InvalidValueError
from .models import Label, LabeledVolume, PhantomSpec, RimSpec
from .rng import child_seed, make_rng

_LOGGER = logging.getLogger(__name__)


def _grid(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(
        np.arange(spec.depth, dtype=np.float64),
        np.arange(spec.height, dtype=np.float64),
        np.arange(spec.width, dtype=np.float64),
        indexing="ij",
    )


def ellipsoid_mask(spec: PhantomSpec) -> np.ndarray:
    """Voxels inside the lung ellipsoid."""
    d, y, x = _grid(spec)
    (cd, cy, cx), (ad, ay, ax) = spec.center, spec.semi_axes
    return ((d - cd) / ad) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2 <= 1.0


def rim_mask(spec: PhantomSpec) -> np.ndarray:
    """Voxels of the rim: in-plane shell of the ellipsoid, in the arc and slice range."""
    if spec.rim is None:
        return np.zeros(spec.shape, dtype=bool)
    rim = spec.rim
    d, y, x = _grid(spec)
    (cd, cy, cx), (ad, ay, ax) = spec.center, spec.semi_axes
    grown = (
        ((d - cd) / ad) ** 2
        + ((y - cy) / (ay + rim.thickness)) ** 2
        + ((x - cx) / (ax + rim.thickness)) ** 2
        <= 1.0
    )
    angle = np.degrees(np.arctan2(y - cy, x - cx)) % 360.0
    in_arc = (angle - rim.angle_start_deg) % 360.0 < rim.angle_extent_deg
    in_slices = (d >= rim.slice_start) & (d < rim.slice_stop)
    return grown & ~ellipsoid_mask(spec) & in_arc & in_slices


def make_phantom(spec: PhantomSpec) -> LabeledVolume:
    """Render a phantom; fully determined by the PhantomSpec and its seed."""
    volume = np.where(ellipsoid_mask(spec), spec.interior, spec.background)
    truth = rim_mask(spec)
    if spec.rim is not None:
        if not truth.any():
            raise InvalidValueError("Rim does not cover any voxel of the volume")
        volume[truth] = spec.rim.intensity
    if spec.noise > 0:
        rng = make_rng(spec.seed)
        volume = volume + rng.uniform(-spec.noise, spec.noise, size=spec.shape)
    volume = np.clip(volume, 0.0, 1.0)
    label = Label.POSITIVE if spec.rim is not None else Label.NEGATIVE
    return LabeledVolume(volume, label, truth.astype(np.float64), spec)


def default_rim(spec: PhantomSpec) -> RimSpec:
    """Rim template used when the base PhantomSpec carries none."""
    length = min(DEFAULT_RIM_SLICES, spec.depth)
    return RimSpec(
        slice_start=0,
        slice_stop=length,
        angle_start_deg=0.0,
        angle_extent_deg=DEFAULT_RIM_EXTENT_DEG,
        thickness=DEFAULT_RIM_THICKNESS,
        intensity=DEFAULT_RIM_INTENSITY,
    )


def demo_phantom(base_spec: PhantomSpec) -> LabeledVolume:
    """Positive phantom at the base geometry with the rim centred in depth."""
    template = base_spec.rim or default_rim(base_spec)
    length = min(template.slice_stop - template.slice_start, base_spec.depth)
    start = (base_spec.depth - length) // 2
    rim = replace(template, slice_start=start, slice_stop=start + length)
    return make_phantom(replace(base_spec, rim=rim))


def _jittered(
    base: PhantomSpec, template: RimSpec, rng: np.random.Generator, positive: bool
) -> PhantomSpec:
    (cd, cy, cx), axes = base.center, base.semi_axes
    center = (
        cd + rng.uniform(-2.0, 2.0),
        cy + rng.uniform(-1.0, 1.0),
        cx + rng.uniform(-1.0, 1.0),
    )
    semi_axes = tuple(max(1.0, a * rng.uniform(0.95, 1.05)) for a in axes)
    length = min(template.slice_stop - template.slice_start, base.depth)
    low = min(base.depth - length, max(0, math.ceil(center[0] - 0.6 * semi_axes[0])))
    high = min(base.depth - length, math.floor(center[0] + 0.6 * semi_axes[0]) - length)
    start = int(rng.integers(low, max(low, high) + 1))
    angle = float(rng.uniform(0.0, 360.0))
    seed = child_seed(rng)
    rim = (
        replace(template, slice_start=start, slice_stop=start + length, angle_start_deg=angle)
        if positive
        else None
    )
    return replace(base, center=center, semi_axes=semi_axes, rim=rim, seed=seed)


def make_dataset(
    n_pos: int, n_neg: int, base_spec: PhantomSpec, seed: int
) -> list[LabeledVolume]:
    """Positives first, then negatives, each with randomised geometry."""
    if n_pos < 0 or n_neg < 0 or n_pos + n_neg < 1:
        raise InvalidValueError(f"Need at least one phantom, got {n_pos} + {n_neg}")
    template = base_spec.rim or default_rim(base_spec)
    rng = make_rng(seed)
    dataset = [
        make_phantom(_jittered(base_spec, template, rng, positive=i < n_pos))
        for i in range(n_pos + n_neg)
    ]
    _LOGGER.debug(f"Generated {n_pos} positive and {n_neg} negative phantoms")
    return dataset
