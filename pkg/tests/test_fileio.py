"""Tests for volume/model files and report writers."""

from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from ct_counterfactuals.const import MODEL_MAGIC
from ct_counterfactuals.exceptions import MissingFileError, ModelFormatError, VolumeFormatError
from ct_counterfactuals.fileio import (
    export_slices,
    load_autoencoder,
    load_model,
    load_scorer,
    read_csv,
    read_dataset,
    read_volume,
    save_model,
    write_cf_result,
    write_csv,
    write_dataset,
    write_json,
    write_loss_csv,
    write_scan_csv,
    write_volume,
)
from ct_counterfactuals.latent_shift import generate_cf
from ct_counterfactuals.localization import scan_chunks
from ct_counterfactuals.models import ChunkSpec, Label
from ct_counterfactuals.networks import SliceAutoencoder, VolumeScorer, score


class TestVolumeFiles:
    """CTVF volumes."""

    def test_bit_exact(self, tmp_path, tiny_positive) -> None:
        path = tmp_path / "v.ctvf"
        write_volume(path, tiny_positive.volume)
        loaded = read_volume(path)
        assert loaded.tobytes() == tiny_positive.volume.tobytes()
        assert loaded.shape == tiny_positive.volume.shape

    def test_header_layout(self, tmp_path) -> None:
        path = tmp_path / "v.ctvf"
        write_volume(path, np.zeros((2, 3, 4)))
        raw = path.read_bytes()
        assert raw[:4] == b"CTVF"
        assert struct.unpack_from("<H3I", raw, 4) == (1, 2, 3, 4)
        assert len(raw) == 18 + 8 * 24

    def test_no_temporary_left_behind(self, tmp_path) -> None:
        write_volume(tmp_path / "v.ctvf", np.zeros((1, 1, 1)))
        assert [p.name for p in tmp_path.iterdir()] == ["v.ctvf"]

    def test_missing(self, tmp_path) -> None:
        with pytest.raises(MissingFileError):
            read_volume(tmp_path / "absent.ctvf")

    @pytest.mark.parametrize(
        "raw",
        [
            b"CTV",
            b"XXXX" + struct.pack("<H3I", 1, 1, 1, 1) + bytes(8),
            b"CTVF" + struct.pack("<H3I", 2, 1, 1, 1) + bytes(8),
            b"CTVF" + struct.pack("<H3I", 1, 1, 1, 2) + bytes(8),
        ],
        ids=["short", "magic", "version", "truncated"],
    )
    def test_malformed(self, tmp_path, raw) -> None:
        path = tmp_path / "bad.ctvf"
        path.write_bytes(raw)
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_rejects_non_3d(self, tmp_path) -> None:
        with pytest.raises(VolumeFormatError):
            write_volume(tmp_path / "v.ctvf", np.zeros((2, 2)))


class TestModelFiles:
    """Checkpoints."""

    def test_autoencoder(self, tmp_path, random_ae) -> None:
        path = tmp_path / "ae.ckpt"
        save_model(path, random_ae)
        loaded = load_autoencoder(path)
        assert (loaded.height, loaded.width, loaded.latent_dim, loaded.hidden_dim) == (8, 8, 6, 10)
        for name, value in random_ae.params.items():
            assert loaded.params[name].tobytes() == value.tobytes()

    def test_identity_autoencoder(self, tmp_path) -> None:
        path = tmp_path / "ae.ckpt"
        save_model(path, SliceAutoencoder.identity(2, 2))
        assert load_autoencoder(path).is_identity

        raw = bytearray(path.read_bytes())
        # first value of the zero decoder output bias
        offset = raw.index(b"decoder.b2") + len("decoder.b2") + struct.calcsize("<B2I")
        raw[offset : offset + 8] = struct.pack("<d", 0.1)
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError, match="must be below"):
            load_model(path)

    @pytest.mark.parametrize(
        "scorer",
        [
            VolumeScorer.seg_sum(8, 8, -30.0, 9.0),
            VolumeScorer.rim_detector(8, 8, np.eye(8), 0.2, bright_threshold=0.6),
            VolumeScorer.constant(8, 8, 0.25),
        ],
        ids=["seg_sum", "rim_detector", "constant"],
    )
    def test_scorers_keep_their_scores(self, tmp_path, tiny_positive, scorer) -> None:
        path = tmp_path / "f.ckpt"
        save_model(path, scorer)
        loaded = load_scorer(path)
        assert loaded.kind is scorer.kind
        assert score(loaded, tiny_positive.volume) == score(scorer, tiny_positive.volume)

    def test_wrong_kind(self, tmp_path, random_ae, constant_scorer) -> None:
        save_model(tmp_path / "ae.ckpt", random_ae)
        save_model(tmp_path / "f.ckpt", constant_scorer)
        with pytest.raises(ModelFormatError):
            load_scorer(tmp_path / "ae.ckpt")
        with pytest.raises(ModelFormatError):
            load_autoencoder(tmp_path / "f.ckpt")

    def test_bad_magic(self, tmp_path) -> None:
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"not a model")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_truncated(self, tmp_path, random_ae) -> None:
        path = tmp_path / "ae.ckpt"
        save_model(path, random_ae)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_trailing_bytes(self, tmp_path, constant_scorer) -> None:
        path = tmp_path / "f.ckpt"
        save_model(path, constant_scorer)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_unknown_kind(self, tmp_path) -> None:
        path = tmp_path / "m.ckpt"
        kind = b"mystery"
        path.write_bytes(
            MODEL_MAGIC
            + struct.pack("<H", 1)
            + struct.pack("<H", len(kind))
            + kind
            + struct.pack("<H2I", 2, 8, 8)
            + struct.pack("<H", 0)
        )
        with pytest.raises(ModelFormatError, match="mystery"):
            load_model(path)

    def test_inconsistent_shapes(self, tmp_path) -> None:
        path = tmp_path / "ae.ckpt"
        save_model(path, SliceAutoencoder.create(8, 8, latent_dim=6, hidden_dim=10))
        raw = bytearray(path.read_bytes())
        # hidden_dim in the shape header
        offset = len(MODEL_MAGIC) + 2 + 2 + len("slice_autoencoder") + 2 + 12
        raw[offset : offset + 4] = struct.pack("<I", 11)
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_missing(self, tmp_path) -> None:
        with pytest.raises(MissingFileError):
            load_model(tmp_path / "absent.ckpt")


class TestReports:
    """CSV, JSON and image writers."""

    def test_csv_floats_round_trip(self, tmp_path) -> None:
        path = tmp_path / "t.csv"
        write_csv(path, ["a", "b", "c"], [[0.1 + 0.2, None, 3], [1e-300, "x", True]])
        rows = read_csv(path)
        assert float(rows[0]["a"]) == 0.1 + 0.2
        assert rows[0]["b"] == ""
        assert rows[1]["a"] == "1e-300"
        assert path.read_text().startswith("a,b,c\n")

    def test_json_sorted(self, tmp_path) -> None:
        path = tmp_path / "d.json"
        write_json(path, {"b": 1, "a": [1.5]})
        text = path.read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [1.5], "b": 1}

    def test_loss_csv(self, tmp_path) -> None:
        path = tmp_path / "loss.csv"
        write_loss_csv(path, [0.5, 0.25])
        assert read_csv(path) == [{"epoch": "0", "loss": "0.5"}, {"epoch": "1", "loss": "0.25"}]

    def test_export_slices(self, tmp_path) -> None:
        volume = np.stack([np.zeros((2, 3)), np.full((2, 3), 2.0)])
        scale = export_slices(tmp_path, volume, "vol")
        assert scale == {"min": 0.0, "max": 2.0, "slices": 2}
        first = (tmp_path / "vol_000.pgm").read_bytes()
        second = (tmp_path / "vol_001.pgm").read_bytes()
        assert first == b"P5\n3 2\n255\n" + bytes(6)
        assert second.endswith(bytes([255]) * 6)
        assert json.loads((tmp_path / "vol_scale.json").read_text())["max"] == 2.0

    def test_export_flat_volume(self, tmp_path) -> None:
        export_slices(tmp_path, np.full((1, 2, 2), 0.7), "flat")
        assert (tmp_path / "flat_000.pgm").read_bytes().endswith(bytes(4))

    def test_cf_result(self, tmp_path, identity_ae, gated_detector, tiny_positive, search_cfg) -> None:
        result = generate_cf(identity_ae, gated_detector, tiny_positive.volume, ChunkSpec(4, 4), search_cfg)
        write_cf_result(tmp_path, result, {"input_prediction": 0.9})
        np.testing.assert_array_equal(read_volume(tmp_path / "cf_volume.ctvf"), result.cf_volume)
        document = json.loads((tmp_path / "cf_result.json").read_text())
        assert document["status"] == result.status.value
        assert document["input_prediction"] == 0.9
        trace = read_csv(tmp_path / "trace.csv")
        assert len(trace) == len(result.trace)
        assert trace[0]["over_budget"] == "0"

    def test_scan_csv(self, tmp_path, random_ae, constant_scorer, tiny_positive) -> None:
        report = scan_chunks(random_ae, constant_scorer, tiny_positive.volume, 5)
        write_scan_csv(tmp_path / "scan.csv", report)
        rows = read_csv(tmp_path / "scan.csv")
        assert [(r["start"], r["end"]) for r in rows] == [("0", "5"), ("5", "10"), ("10", "12")]
        assert {r["status"] for r in rows} == {"NoReduction"}


class TestDatasetFiles:
    """Dataset directories."""

    def test_write_and_read(self, tmp_path, tiny_dataset) -> None:
        write_dataset(tmp_path, tiny_dataset)
        loaded = read_dataset(tmp_path)
        assert [item.label for item in loaded] == [item.label for item in tiny_dataset]
        for a, b in zip(loaded, tiny_dataset):
            np.testing.assert_array_equal(a.volume, b.volume)
            np.testing.assert_array_equal(a.truth_mask, b.truth_mask)
        rows = read_csv(tmp_path / "labels.csv")
        assert rows[0]["rim_start"] != ""
        assert rows[-1]["rim_start"] == ""
        assert rows[-1]["label"] == Label.NEGATIVE.value

    def test_bad_label(self, tmp_path, tiny_negative) -> None:
        write_dataset(tmp_path, [tiny_negative])
        text = (tmp_path / "labels.csv").read_text().replace("negative", "maybe")
        (tmp_path / "labels.csv").write_text(text)
        with pytest.raises(VolumeFormatError):
            read_dataset(tmp_path)

    def test_missing_labels(self, tmp_path) -> None:
        with pytest.raises(MissingFileError):
            read_dataset(tmp_path)
