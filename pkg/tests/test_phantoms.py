"""Tests for the synthetic phantom generator."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from ct_counterfactuals.exceptions import InvalidValueError
from ct_counterfactuals.models import Label, LabeledVolume, PhantomSpec, RimSpec
from ct_counterfactuals.phantoms import (
    default_rim,
    demo_phantom,
    ellipsoid_mask,
    make_dataset,
    make_phantom,
    rim_mask,
)

from conftest import TINY_DEPTH, tiny_rim, tiny_spec


class TestMakePhantom:
    """Single volumes."""

    def test_negative(self, tiny_negative) -> None:
        assert tiny_negative.label is Label.NEGATIVE
        assert not tiny_negative.truth_mask.any()
        assert tiny_negative.volume.shape == (TINY_DEPTH, 8, 8)

    def test_positive_mask_in_slice_range(self, tiny_positive) -> None:
        assert tiny_positive.is_positive
        occupied = np.flatnonzero(tiny_positive.truth_mask.any(axis=(1, 2)))
        assert occupied.min() >= 4
        assert occupied.max() < 8

    def test_rim_is_bright(self, tiny_positive) -> None:
        rim = tiny_positive.volume[tiny_positive.truth_mask > 0]
        assert rim.min() >= 0.9 - 0.01

    def test_intensities(self, tiny_negative) -> None:
        inside = ellipsoid_mask(tiny_negative.spec)
        assert tiny_negative.volume[inside].max() <= 0.2 + 0.01
        assert tiny_negative.volume[~inside].min() >= 0.5 - 0.01

    def test_rim_outside_ellipsoid(self, tiny_positive) -> None:
        spec = tiny_positive.spec
        assert not np.any(rim_mask(spec) & ellipsoid_mask(spec))

    def test_values_clipped(self) -> None:
        spec = replace(tiny_spec(), interior=0.0, background=1.0, noise=0.3)
        volume = make_phantom(spec).volume
        assert volume.min() >= 0.0
        assert volume.max() <= 1.0

    def test_deterministic(self) -> None:
        a = make_phantom(tiny_spec(tiny_rim(), seed=8))
        b = make_phantom(tiny_spec(tiny_rim(), seed=8))
        np.testing.assert_array_equal(a.volume, b.volume)
        c = make_phantom(tiny_spec(tiny_rim(), seed=9))
        assert not np.array_equal(a.volume, c.volume)

    def test_noise_free(self) -> None:
        volume = make_phantom(replace(tiny_spec(), noise=0.0)).volume
        assert set(np.unique(volume)) == {0.2, 0.5}

    def test_rim_missing_the_volume(self) -> None:
        rim = RimSpec(0, 1, 0.0, 10.0, 0.5, 0.9)
        with pytest.raises(InvalidValueError):
            make_phantom(tiny_spec(rim))

    def test_rim_count_matches_voxel_by_voxel_recount(self) -> None:
        for item in make_dataset(3, 0, PhantomSpec(), seed=12):
            spec, rim = item.spec, item.spec.rim
            (cd, cy, cx), (ad, ay, ax) = spec.center, spec.semi_axes
            count = 0
            for d in range(spec.depth):
                for y in range(spec.height):
                    for x in range(spec.width):
                        lung = ((d - cd) / ad) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2
                        grown = (
                            ((d - cd) / ad) ** 2
                            + ((y - cy) / (ay + rim.thickness)) ** 2
                            + ((x - cx) / (ax + rim.thickness)) ** 2
                        )
                        angle = math.degrees(math.atan2(y - cy, x - cx)) % 360.0
                        count += (
                            grown <= 1.0
                            and lung > 1.0
                            and (angle - rim.angle_start_deg) % 360.0 < rim.angle_extent_deg
                            and rim.slice_start <= d < rim.slice_stop
                        )
            assert count > 0
            assert int(item.truth_mask.sum()) == count


class TestSpecValidation:
    """Dataclass validation."""

    @pytest.mark.parametrize(
        "changes",
        [
            {"depth": 0},
            {"semi_axes": (0.5, 2.0, 2.0)},
            {"interior": 1.5},
            {"noise": -0.1},
            {"rim": RimSpec(10, 14, 0.0, 90.0, 1.0, 0.9)},
        ],
    )
    def test_invalid_phantom_spec(self, changes) -> None:
        with pytest.raises(InvalidValueError):
            replace(tiny_spec(), **changes)

    @pytest.mark.parametrize(
        "args",
        [
            (3, 3, 0.0, 90.0, 1.0, 0.9),
            (0, 2, 0.0, 0.0, 1.0, 0.9),
            (0, 2, 0.0, 90.0, 0.0, 0.9),
            (0, 2, 0.0, 90.0, 1.0, 1.2),
        ],
    )
    def test_invalid_rim(self, args) -> None:
        with pytest.raises(InvalidValueError):
            RimSpec(*args)

    def test_label_must_match_mask(self) -> None:
        with pytest.raises(InvalidValueError):
            LabeledVolume(np.zeros((2, 2, 2)), Label.POSITIVE, np.zeros((2, 2, 2)))


class TestDataset:
    """Randomised datasets."""

    def test_counts_and_order(self, tiny_dataset) -> None:
        labels = [item.label for item in tiny_dataset]
        assert labels == [Label.POSITIVE] * 4 + [Label.NEGATIVE] * 4

    def test_every_positive_has_a_rim(self, tiny_dataset) -> None:
        for item in tiny_dataset[:4]:
            assert item.truth_mask.any()
            slices = np.flatnonzero(item.truth_mask.any(axis=(1, 2)))
            assert slices.max() - slices.min() < 3

    def test_seeded(self) -> None:
        base = tiny_spec(tiny_rim(0, 3))
        a = make_dataset(2, 2, base, seed=13)
        b = make_dataset(2, 2, base, seed=13)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.volume, y.volume)
            np.testing.assert_array_equal(x.truth_mask, y.truth_mask)

    def test_geometry_varies(self, tiny_dataset) -> None:
        centers = {item.spec.center for item in tiny_dataset}
        assert len(centers) == len(tiny_dataset)

    def test_empty_dataset_rejected(self) -> None:
        with pytest.raises(InvalidValueError):
            make_dataset(0, 0, tiny_spec(), seed=0)


class TestDemoPhantom:
    """The centred demo positive."""

    def test_rim_centred(self) -> None:
        demo = demo_phantom(tiny_spec(tiny_rim(0, 4)))
        assert demo.spec.rim.slice_start == 4
        assert demo.spec.rim.slice_stop == 8
        assert demo.is_positive

    def test_default_rim_template(self) -> None:
        spec = PhantomSpec()
        rim = default_rim(spec)
        assert rim.slice_stop - rim.slice_start == 7
        demo = demo_phantom(spec)
        assert demo.spec.rim.slice_start == (32 - 7) // 2
