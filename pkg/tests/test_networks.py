"""Tests for the slice autoencoder and volume scorers."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from ct_counterfactuals.exceptions import (
    InvalidChunkError,
    InvalidValueError,
    ShapeMismatchError,
    TrainingError,
)
from ct_counterfactuals.evaluation import classification_metrics
from ct_counterfactuals.models import (
    ChunkSpec,
    LabeledVolume,
    PhantomSpec,
    ScorerKind,
    TrainConfig,
)
from ct_counterfactuals.networks import (
    AE_PARAM_NAMES,
    SliceAutoencoder,
    VolumeScorer,
    decode_chunked,
    decode_unblocked,
    encode_volume,
    predict,
    reconstruct,
    reconstruction_mse,
    rim_features,
    score,
    seg_mask,
    train_autoencoder,
    train_scorer,
)
from ct_counterfactuals.phantoms import make_dataset, make_phantom

from conftest import TINY_DEPTH, TINY_SIDE, tiny_rim, tiny_spec


class TestSliceAutoencoder:
    """Construction and encode/decode."""

    def test_create_shapes(self, random_ae) -> None:
        assert set(random_ae.params) == set(AE_PARAM_NAMES)
        assert random_ae.params["encoder.w1"].shape == (64, 10)
        assert random_ae.params["decoder.b2"].shape == (1, 64)

    def test_create_is_seeded(self) -> None:
        a = SliceAutoencoder.create(4, 4, latent_dim=3, hidden_dim=5, seed=9)
        b = SliceAutoencoder.create(4, 4, latent_dim=3, hidden_dim=5, seed=9)
        for name in AE_PARAM_NAMES:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_latent_larger_than_slice_rejected(self) -> None:
        with pytest.raises(InvalidValueError):
            SliceAutoencoder.create(2, 2, latent_dim=5, hidden_dim=3)

    def test_latent_equal_to_slice_rejected(self) -> None:
        with pytest.raises(InvalidValueError, match="must be below"):
            SliceAutoencoder.create(2, 2, latent_dim=4, hidden_dim=4)

    def test_identity_is_the_only_full_size_latent(self) -> None:
        ae = SliceAutoencoder.identity(2, 2)
        assert ae.is_identity
        rebuilt = SliceAutoencoder(2, 2, 4, 4, dict(ae.params))
        assert rebuilt.is_identity
        params = dict(ae.params)
        params["decoder.b2"] = np.full((1, 4), 0.1)
        with pytest.raises(InvalidValueError):
            SliceAutoencoder(2, 2, 4, 4, params)

    def test_compressing_autoencoder_is_not_identity(self, random_ae) -> None:
        assert not random_ae.is_identity

    def test_wrong_param_shape_rejected(self, random_ae) -> None:
        params = dict(random_ae.params)
        params["decoder.w2"] = np.zeros((3, 3))
        with pytest.raises(ShapeMismatchError):
            SliceAutoencoder(TINY_SIDE, TINY_SIDE, 6, 10, params)

    def test_identity_reconstructs_exactly(self, identity_ae, tiny_positive) -> None:
        z = encode_volume(identity_ae, tiny_positive.volume)
        assert z.shape == (TINY_DEPTH, TINY_SIDE * TINY_SIDE)
        np.testing.assert_array_equal(reconstruct(identity_ae, z), tiny_positive.volume)
        assert reconstruction_mse(identity_ae, [tiny_positive.volume]) == 0.0

    def test_encode_rejects_wrong_slices(self, random_ae) -> None:
        with pytest.raises(ShapeMismatchError):
            encode_volume(random_ae, np.zeros((4, 5, 5)))


class TestChunkedDecode:
    """Gradient blocking outside the chunk."""

    def test_only_chunk_latents_are_leaves(self, random_ae, tiny_positive) -> None:
        z = encode_volume(random_ae, tiny_positive.volume)
        decoded = decode_chunked(random_ae, z, ChunkSpec(3, 4))
        assert sorted(decoded.latents) == [3, 4, 5, 6]
        assert decoded.volume.shape == (TINY_DEPTH, TINY_SIDE, TINY_SIDE)

    @pytest.mark.parametrize("length", [1, 2, 5])
    def test_node_count_depends_on_chunk_only(self, random_ae, tiny_positive, length) -> None:
        z = encode_volume(random_ae, tiny_positive.volume)
        decoded = decode_chunked(random_ae, z, ChunkSpec(0, length))
        assert len(decoded.tape) == 7 * length + 1

    def test_matches_unblocked_values(self, random_ae, tiny_positive) -> None:
        z = encode_volume(random_ae, tiny_positive.volume)
        blocked = decode_chunked(random_ae, z, ChunkSpec(2, 3)).volume.value
        unblocked = decode_unblocked(random_ae, z).volume.value
        np.testing.assert_array_equal(blocked, unblocked)
        np.testing.assert_array_equal(blocked, reconstruct(random_ae, z))

    def test_chunk_past_end_rejected(self, random_ae) -> None:
        z = np.zeros((TINY_DEPTH, 6))
        with pytest.raises(InvalidChunkError):
            decode_chunked(random_ae, z, ChunkSpec(10, 5))

    def test_latent_width_checked(self, random_ae) -> None:
        with pytest.raises(ShapeMismatchError):
            decode_chunked(random_ae, np.zeros((TINY_DEPTH, 7)), ChunkSpec(0, 1))


class TestScorers:
    """Forward values of each scorer kind."""

    def test_seg_sum(self, tiny_negative) -> None:
        f = VolumeScorer.seg_sum(TINY_SIDE, TINY_SIDE, -30.0, 9.0)
        expected = expit(-30.0 * tiny_negative.volume + 9.0).sum()
        assert score(f, tiny_negative.volume) == pytest.approx(expected, rel=1e-12)

    def test_seg_mask_counts_dark_voxels(self, tiny_negative) -> None:
        f = VolumeScorer.seg_sum(TINY_SIDE, TINY_SIDE, -30.0, 9.0)
        mask = seg_mask(f, tiny_negative.volume, 0.5)
        np.testing.assert_array_equal(mask, (tiny_negative.volume <= 0.3).astype(float))

    @pytest.mark.parametrize("threshold", [0.0, 1.0, -0.2])
    def test_seg_mask_threshold_range(self, tiny_negative, threshold) -> None:
        f = VolumeScorer.seg_sum(TINY_SIDE, TINY_SIDE, -30.0, 9.0)
        with pytest.raises(InvalidValueError):
            seg_mask(f, tiny_negative.volume, threshold)

    def test_voxel_logits_only_for_seg_sum(self, constant_scorer, tiny_negative) -> None:
        with pytest.raises(InvalidValueError):
            constant_scorer.voxel_logits(tiny_negative.volume)

    def test_rim_detector(self, linear_detector, tiny_positive) -> None:
        v = tiny_positive.volume
        weights = linear_detector.params["weights"]
        expected = expit((v * weights).sum() / TINY_DEPTH + 0.3)
        assert score(linear_detector, v) == pytest.approx(expected, rel=1e-12)

    def test_gated_detector_ignores_background(self, gated_detector, tiny_negative) -> None:
        assert score(gated_detector, tiny_negative.volume) == pytest.approx(expit(-2.0))

    def test_gated_detector_sees_rim(self, gated_detector, tiny_positive) -> None:
        assert score(gated_detector, tiny_positive.volume) > expit(-2.0)

    def test_constant(self, constant_scorer, tiny_positive) -> None:
        assert score(constant_scorer, tiny_positive.volume) == 0.5

    def test_linear_probe(self, tiny_positive) -> None:
        weights = np.full(tiny_positive.volume.shape, 0.25)
        f = VolumeScorer.linear_probe(weights, bias=-1.0)
        assert f.kind is ScorerKind.LINEAR_PROBE
        expected = 0.25 * tiny_positive.volume.sum() - 1.0
        assert score(f, tiny_positive.volume) == pytest.approx(expected, rel=1e-12)

    def test_linear_probe_depth_checked(self) -> None:
        f = VolumeScorer.linear_probe(np.ones((3, 2, 2)))
        with pytest.raises(ShapeMismatchError):
            score(f, np.ones((4, 2, 2)))

    def test_scorer_slice_shape_checked(self, gated_detector) -> None:
        with pytest.raises(ShapeMismatchError):
            score(gated_detector, np.zeros((TINY_DEPTH, 4, 4)))

    def test_rim_detector_weight_shape(self) -> None:
        with pytest.raises(ShapeMismatchError):
            VolumeScorer.rim_detector(4, 4, np.ones((3, 4)))

    def test_predict(self, constant_scorer, tiny_dataset) -> None:
        predictions = predict(constant_scorer, [item.volume for item in tiny_dataset])
        np.testing.assert_array_equal(predictions, np.full(len(tiny_dataset), 0.5))

    def test_seg_mask_at_zero_logit_is_inclusive(self) -> None:
        f = VolumeScorer.seg_sum(TINY_SIDE, TINY_SIDE, -10.0, 5.0)
        volume = np.full((TINY_DEPTH, TINY_SIDE, TINY_SIDE), 0.5)
        assert not np.any(f.voxel_logits(volume))
        np.testing.assert_array_equal(seg_mask(f, volume, 0.5), np.ones_like(volume))

    def test_larger_lung_scores_higher(self) -> None:
        spec = PhantomSpec(noise=0.0)
        grown = replace(spec, semi_axes=tuple(a * 1.2 for a in spec.semi_axes))
        f = VolumeScorer.seg_sum(spec.height, spec.width, -30.0, 9.0)
        assert score(f, make_phantom(grown).volume) > score(f, make_phantom(spec).volume)


class TestTraining:
    """SGD loops."""

    def test_autoencoder_loss_decreases(self, random_ae, tiny_dataset) -> None:
        trained, history = train_autoencoder(random_ae, tiny_dataset, TrainConfig(15, 16, 0.01))
        assert len(history) == 16
        assert history[-1] < history[0]
        assert reconstruction_mse(trained, [tiny_dataset[0].volume]) < reconstruction_mse(
            random_ae, [tiny_dataset[0].volume]
        )

    def test_autoencoder_zero_epochs_keeps_params(self, random_ae, tiny_dataset) -> None:
        trained, history = train_autoencoder(random_ae, tiny_dataset, TrainConfig(0, 4, 0.01))
        assert len(history) == 1
        np.testing.assert_array_equal(trained.params["encoder.w1"], random_ae.params["encoder.w1"])

    def test_autoencoder_empty_dataset(self, random_ae) -> None:
        with pytest.raises(TrainingError):
            train_autoencoder(random_ae, [], TrainConfig(1, 1, 0.01))

    def test_autoencoder_diverging_raises(self, random_ae, tiny_dataset) -> None:
        with pytest.raises(TrainingError):
            train_autoencoder(random_ae, tiny_dataset, TrainConfig(200, 96, 1e6))

    def test_autoencoder_fits_identical_slices(self) -> None:
        ae = SliceAutoencoder.create(4, 4, latent_dim=3, hidden_dim=6, seed=4)
        pattern = np.linspace(0.2, 0.9, 16).reshape(4, 4)
        volume = np.tile(pattern, (16, 1, 1))
        trained, history = train_autoencoder(ae, [volume], TrainConfig(200, 1, 0.01, seed=4))
        assert history[-1] <= 1e-4
        assert reconstruction_mse(trained, [volume]) <= 1e-4

    def test_shuffled_labels_give_chance_auc(self) -> None:
        items = make_dataset(120, 120, tiny_spec(tiny_rim(0, 3)), seed=21)
        order = np.random.Generator(np.random.Philox(key=21)).permutation(len(items))
        relabelled = [
            LabeledVolume(
                item.volume,
                items[j].label,
                np.ones_like(item.volume) if items[j].is_positive else np.zeros_like(item.volume),
            )
            for item, j in zip(items, order)
        ]
        train, held = relabelled[::6], [item for i, item in enumerate(relabelled) if i % 6]
        initial = VolumeScorer.rim_detector(TINY_SIDE, TINY_SIDE)
        scorer = train_scorer(initial, train, TrainConfig(30, 4, 0.1, seed=3)).scorer
        assert classification_metrics(scorer, held)["auc"] == pytest.approx(0.5, abs=0.2)

    def test_default_detector_trains_ungated(self, tiny_dataset) -> None:
        initial = VolumeScorer.rim_detector(TINY_SIDE, TINY_SIDE)
        result = train_scorer(initial, tiny_dataset, TrainConfig(60, 4, 0.1, seed=2))
        assert result.scorer.bright_threshold is None
        assert result.train_auc >= 0.9

    def test_scorer_separates_classes(self, trained_tiny_detector, tiny_dataset) -> None:
        predictions = predict(trained_tiny_detector, [item.volume for item in tiny_dataset])
        positives = predictions[:4]
        negatives = predictions[4:]
        assert positives.min() > negatives.max()
        assert trained_tiny_detector.bright_threshold == 0.6

    def test_scorer_training_metrics(self, tiny_dataset) -> None:
        initial = VolumeScorer.rim_detector(TINY_SIDE, TINY_SIDE, bright_threshold=0.6)
        result = train_scorer(initial, tiny_dataset, TrainConfig(30, 4, 0.1, seed=1))
        assert len(result.loss_history) == 30
        assert result.loss_history[-1] < result.loss_history[0]
        assert result.train_auc >= 0.9

    def test_only_rim_detectors_train(self, constant_scorer, tiny_dataset) -> None:
        with pytest.raises(InvalidValueError):
            train_scorer(constant_scorer, tiny_dataset, TrainConfig(1, 1, 0.1))

    def test_scorer_needs_both_classes(self, tiny_dataset) -> None:
        initial = VolumeScorer.rim_detector(TINY_SIDE, TINY_SIDE)
        with pytest.raises(TrainingError):
            train_scorer(initial, tiny_dataset[:4], TrainConfig(1, 1, 0.1))

    def test_rim_features_are_slice_means(self, gated_detector, tiny_positive) -> None:
        features = rim_features(gated_detector, [tiny_positive.volume])
        gated = np.maximum(tiny_positive.volume - 0.6, 0.0)
        assert features.shape == (1, TINY_SIDE * TINY_SIDE)
        np.testing.assert_allclose(features[0], gated.mean(axis=0).reshape(-1), rtol=1e-12)
