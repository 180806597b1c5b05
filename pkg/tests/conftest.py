"""Shared fixtures: small phantoms, autoencoders and scorers."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from ct_counterfactuals import cli
from ct_counterfactuals.models import PhantomSpec, RimSpec, SearchConfig, TrainConfig
from ct_counterfactuals.networks import (
    SliceAutoencoder,
    VolumeScorer,
    train_scorer,
)
from ct_counterfactuals.phantoms import make_dataset, make_phantom

TINY_DEPTH = 12
TINY_SIDE = 8


def tiny_rim(start: int = 4, stop: int = 8) -> RimSpec:
    """A rim that fits the tiny geometry."""
    return RimSpec(
        slice_start=start,
        slice_stop=stop,
        angle_start_deg=30.0,
        angle_extent_deg=120.0,
        thickness=1.5,
        intensity=0.9,
    )


def tiny_spec(rim: RimSpec | None = None, seed: int = 3) -> PhantomSpec:
    """12 x 8 x 8 phantom geometry."""
    return PhantomSpec(
        depth=TINY_DEPTH,
        height=TINY_SIDE,
        width=TINY_SIDE,
        center=(6.0, 4.0, 4.0),
        semi_axes=(4.2, 2.4, 2.4),
        noise=0.01,
        rim=rim,
        seed=seed,
    )


@pytest.fixture
def tiny_negative():
    """A phantom without a rim."""
    return make_phantom(tiny_spec())


@pytest.fixture
def tiny_positive():
    """A phantom with a rim on slices 4-7."""
    return make_phantom(tiny_spec(tiny_rim()))


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four positives followed by four negatives."""
    return make_dataset(4, 4, tiny_spec(tiny_rim(0, 3)), seed=5)


@pytest.fixture(scope="session")
def identity_ae():
    """Identity autoencoder on 8 x 8 slices."""
    return SliceAutoencoder.identity(TINY_SIDE, TINY_SIDE)


@pytest.fixture(scope="session")
def random_ae():
    """Small randomly initialised autoencoder on 8 x 8 slices."""
    return SliceAutoencoder.create(TINY_SIDE, TINY_SIDE, latent_dim=6, hidden_dim=10, seed=1)


@pytest.fixture
def bright_weights():
    """Positive rim-detector weights on every pixel."""
    return np.ones((TINY_SIDE, TINY_SIDE))


@pytest.fixture
def gated_detector(bright_weights):
    """Rim detector that only sees voxels brighter than 0.6."""
    return VolumeScorer.rim_detector(
        TINY_SIDE, TINY_SIDE, bright_weights * 8.0, bias=-2.0, bright_threshold=0.6
    )


@pytest.fixture
def linear_detector():
    """Linear rim detector with seeded random weights."""
    weights = np.random.Generator(np.random.Philox(key=11)).normal(size=(TINY_SIDE, TINY_SIDE))
    return VolumeScorer.rim_detector(TINY_SIDE, TINY_SIDE, weights, bias=0.3)


@pytest.fixture
def constant_scorer():
    """Scorer that ignores its input."""
    return VolumeScorer.constant(TINY_SIDE, TINY_SIDE, 0.5)


@pytest.fixture(scope="session")
def trained_tiny_detector(tiny_dataset):
    """Rim detector fitted on the tiny dataset."""
    initial = VolumeScorer.rim_detector(TINY_SIDE, TINY_SIDE, bright_threshold=0.6)
    return train_scorer(initial, tiny_dataset, TrainConfig(60, 4, 0.1, seed=2)).scorer


@pytest.fixture
def search_cfg():
    """Default lambda search."""
    return SearchConfig()


@pytest.fixture
def cli_log_handlers(monkeypatch):
    """Remove the root handlers installed by cli.main once the test ends."""
    root = logging.getLogger()
    level = root.level
    installed = []
    configure = cli.configure_logging

    def tracking_configure(verbose, quiet):
        configure(verbose, quiet)
        installed.extend(root.handlers)

    monkeypatch.setattr(cli, "configure_logging", tracking_configure)
    yield
    for handler in installed:
        root.removeHandler(handler)
        handler.close()
    root.setLevel(level)
