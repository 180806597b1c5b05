"""Volume and model files, CSV/JSON reports and PGM image export.

Every writer goes through `atomic_write_bytes`: the payload lands in a
temporary sibling file which is then renamed over the target.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .const import MODEL_MAGIC, MODEL_VERSION, VOLUME_MAGIC, VOLUME_VERSION
from .exceptions import MissingFileError, ModelFormatError, VolumeFormatError
from .models import (
    CFResult,
    Label,
    LabeledVolume,
    LocalizationRecord,
    PredictionHistograms,
    ReductionTable,
    ScanReport,
    ScorerKind,
    SweepResult,
    TraceEntry,
    VolumeRecord,
)
from .networks import SliceAutoencoder, VolumeScorer

_LOGGER = logging.getLogger(__name__)

_VOLUME_HEADER = struct.Struct("<4sH3I")
_AUTOENCODER_KIND = "slice_autoencoder"
_FLOAT = np.dtype("<f8")
_SCORER_PARAMS = {
    ScorerKind.SEG_SUM.value: {"gain", "bias"},
    ScorerKind.RIM_DETECTOR.value: {"weights", "bias"},
    ScorerKind.CONSTANT.value: {"value"},
    ScorerKind.LINEAR_PROBE.value: {"weights", "bias"},
}


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read(path: Path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"File not found: {path}")
    return path.read_bytes()


def write_volume(path: Path, volume: np.ndarray) -> None:
    """Write a D x H x W volume in the CTVF format."""
    if volume.ndim != 3:
        raise VolumeFormatError(f"CTVF stores 3D volumes, got shape {volume.shape}")
    header = _VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *volume.shape)
    payload = np.ascontiguousarray(volume, dtype=_FLOAT).tobytes()
    atomic_write_bytes(path, header + payload)


def read_volume(path: Path) -> np.ndarray:
    """Read a CTVF volume bit-exactly."""
    raw = _read(path)
    if len(raw) < _VOLUME_HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, depth, height, width = _VOLUME_HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    expected = 8 * depth * height * width
    payload = raw[_VOLUME_HEADER.size :]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=_FLOAT).astype(np.float64).reshape(depth, height, width)


class _Reader:
    """Cursor over a checkpoint buffer that reports truncation."""

    def __init__(self, raw: bytes, path: Path) -> None:
        """Initialise."""
        self.raw = raw
        self.path = path
        self.offset = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.raw):
            raise ModelFormatError(f"{self.path}: truncated checkpoint")
        values = struct.unpack_from(fmt, self.raw, self.offset)
        self.offset += size
        return values

    def text(self) -> str:
        (length,) = self.take("<H")
        (value,) = self.take(f"<{length}s")
        return value.decode("ascii")


def save_model(path: Path, model: SliceAutoencoder | VolumeScorer) -> None:
    """Write a checkpoint: magic, version, kind tag, shape header, float64 parameters."""
    if isinstance(model, SliceAutoencoder):
        kind = _AUTOENCODER_KIND
        dims = [model.height, model.width, model.latent_dim, model.hidden_dim]
    else:
        kind = model.kind.value
        dims = [model.height, model.width]
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<H", MODEL_VERSION))
    out.write(struct.pack("<H", len(kind)) + kind.encode("ascii"))
    out.write(struct.pack(f"<H{len(dims)}I", len(dims), *dims))
    out.write(struct.pack("<H", len(model.params)))
    for name in sorted(model.params):
        value = np.asarray(model.params[name], dtype=_FLOAT)
        out.write(struct.pack("<H", len(name)) + name.encode("ascii"))
        out.write(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        out.write(value.tobytes())
    atomic_write_bytes(path, out.getvalue())


def load_model(path: Path) -> SliceAutoencoder | VolumeScorer:
    """Read a checkpoint written by save_model."""
    raw = _read(path)
    if not raw.startswith(MODEL_MAGIC):
        raise ModelFormatError(f"{path}: bad magic")
    reader = _Reader(raw, Path(path))
    reader.offset = len(MODEL_MAGIC)
    (version,) = reader.take("<H")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    kind = reader.text()
    (n_dims,) = reader.take("<H")
    dims = reader.take(f"<{n_dims}I")
    (n_params,) = reader.take("<H")
    params = {}
    for _ in range(n_params):
        name = reader.text()
        (ndim,) = reader.take("<B")
        shape = reader.take(f"<{ndim}I")
        count = int(np.prod(shape)) if shape else 1
        values = reader.take(f"<{count}d")
        params[name] = np.array(values, dtype=np.float64).reshape(shape)
    if reader.offset != len(raw):
        raise ModelFormatError(f"{path}: trailing bytes after parameters")

    if kind != _AUTOENCODER_KIND:
        required = _SCORER_PARAMS.get(kind)
        if required is None:
            raise ModelFormatError(f"{path}: unknown model kind {kind!r}")
        if not required <= params.keys():
            raise ModelFormatError(f"{path}: {kind} needs parameters {sorted(required)}")
    try:
        if kind == _AUTOENCODER_KIND:
            height, width, latent_dim, hidden_dim = dims
            return SliceAutoencoder(height, width, latent_dim, hidden_dim, params)
        height, width = dims
        return VolumeScorer(ScorerKind(kind), height, width, params)
    except (ValueError, KeyError) as err:
        raise ModelFormatError(f"{path}: inconsistent checkpoint: {err}") from err


def load_autoencoder(path: Path) -> SliceAutoencoder:
    """Load a checkpoint that must hold a slice autoencoder."""
    model = load_model(path)
    if not isinstance(model, SliceAutoencoder):
        raise ModelFormatError(f"{path}: expected an autoencoder, found {model.kind.value}")
    return model


def load_scorer(path: Path) -> VolumeScorer:
    """Load a checkpoint that must hold a volume scorer."""
    model = load_model(path)
    if not isinstance(model, VolumeScorer):
        raise ModelFormatError(f"{path}: expected a scorer, found an autoencoder")
    return model


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write a CSV with shortest round-trip float formatting."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def read_csv(path: Path) -> list[dict[str, str]]:
    """Read a CSV into dictionaries keyed by the header."""
    text = _read(path).decode("utf-8")
    return list(csv.DictReader(io.StringIO(text)))


def write_json(path: Path, document: Any) -> None:
    """Write sorted, indented JSON."""
    text = json.dumps(document, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Write an 8-bit binary PGM (P5)."""
    pixels = np.ascontiguousarray(image, dtype=np.uint8)
    height, width = pixels.shape
    atomic_write_bytes(path, f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())


def export_slices(directory: Path, volume: np.ndarray, prefix: str) -> dict[str, float]:
    """Write each slice as a PGM, min-max normalised over the whole volume.

    The scale goes to `<prefix>_scale.json` next to the images.
    """
    low, high = float(volume.min()), float(volume.max())
    if high > low:
        scaled = np.rint((volume - low) / (high - low) * 255.0)
    else:
        scaled = np.zeros_like(volume)
    for i, image in enumerate(scaled):
        write_pgm(Path(directory) / f"{prefix}_{i:03d}.pgm", image)
    scale = {"min": low, "max": high, "slices": int(volume.shape[0])}
    write_json(Path(directory) / f"{prefix}_scale.json", scale)
    return scale


def write_trace_csv(path: Path, trace: Sequence[TraceEntry]) -> None:
    """lambda, prediction, pixel_change_fraction, over_budget."""
    write_csv(
        path,
        ["lambda", "prediction", "pixel_change_fraction", "over_budget"],
        ([e.lambda_, e.prediction, e.pixel_change, int(e.over_budget)] for e in trace),
    )


def write_cf_result(directory: Path, result: CFResult, extra: dict | None = None) -> None:
    """CF volume, result JSON and trace CSV."""
    directory = Path(directory)
    write_volume(directory / "cf_volume.ctvf", result.cf_volume)
    write_json(directory / "cf_result.json", {**result.as_dict(), **(extra or {})})
    write_trace_csv(directory / "trace.csv", result.trace)


def write_scan_csv(path: Path, report: ScanReport) -> None:
    """start, end, baseline, min_prediction, reduction, status."""
    write_csv(
        path,
        ["start", "end", "baseline", "min_prediction", "reduction", "status"],
        (
            [e.start, e.end, e.baseline_prediction, e.min_prediction, e.reduction, e.status.value]
            for e in report.entries
        ),
    )


def write_reduction_csv(path: Path, table: ReductionTable) -> None:
    """group, mean, stderr, n, chunk_size."""
    write_csv(
        path,
        ["group", "mean", "stderr", "n", "chunk_size"],
        ([r.group, r.mean, r.stderr, r.n, table.chunk_size] for r in table.rows),
    )


def write_records_csv(path: Path, records: Sequence[VolumeRecord]) -> None:
    """Raw per-volume predictions."""
    write_csv(
        path,
        ["index", "label", "input_prediction", "baseline", "cf_prediction", "reduction", "best_start"],
        (
            [
                r.index,
                r.label.value,
                r.input_prediction,
                r.baseline_prediction,
                r.cf_prediction,
                r.reduction if r.cf_prediction is not None else None,
                r.best_start,
            ]
            for r in records
        ),
    )


def write_sweep_csv(path: Path, sweep: SweepResult) -> None:
    """chunk_size, mean_reduction, stderr, n."""
    write_csv(
        path,
        ["chunk_size", "mean_reduction", "stderr", "n"],
        ([p.chunk_size, p.mean_reduction, p.stderr, p.n] for p in sweep.points),
    )


def write_histograms_csv(path: Path, histograms: PredictionHistograms) -> None:
    """One row per bin with the normalised mass of every group."""
    names = list(histograms.groups)
    edges = histograms.edges
    write_csv(
        path,
        ["bin_low", "bin_high", *names],
        (
            [edges[i], edges[i + 1], *(histograms.groups[n][i] for n in names)]
            for i in range(len(edges) - 1)
        ),
    )


def write_localization_csv(path: Path, records: Sequence[LocalizationRecord]) -> None:
    """Latent-shift vs input-gradient localization scores."""
    write_csv(
        path,
        ["index", "best_start", "latent_shift", "input_gradient", "uniform_expectation"],
        (
            [r.index, r.best_start, r.latent_shift_score, r.input_gradient_score, r.uniform_expectation]
            for r in records
        ),
    )


def write_loss_csv(path: Path, history: Sequence[float]) -> None:
    """epoch, loss; epoch 0 is the untrained model where recorded."""
    write_csv(path, ["epoch", "loss"], enumerate(history))


def write_dataset(directory: Path, dataset: Sequence[LabeledVolume]) -> None:
    """Volumes, truth masks and labels.csv."""
    directory = Path(directory)
    rows = []
    for i, item in enumerate(dataset):
        volume_name = f"volume_{i:04d}.ctvf"
        truth_name = f"truth_{i:04d}.ctvf"
        write_volume(directory / volume_name, item.volume)
        write_volume(directory / truth_name, item.truth_mask)
        rim = item.spec.rim if item.spec is not None else None
        rows.append(
            [
                i,
                volume_name,
                item.label.value,
                truth_name,
                rim.slice_start if rim else None,
                rim.slice_stop if rim else None,
            ]
        )
    write_csv(
        directory / "labels.csv",
        ["index", "volume", "label", "truth", "rim_start", "rim_stop"],
        rows,
    )
    _LOGGER.info(f"Wrote {len(dataset)} volumes to {directory}")


def read_dataset(directory: Path) -> list[LabeledVolume]:
    """Load a dataset written by write_dataset."""
    directory = Path(directory)
    dataset = []
    for row in read_csv(directory / "labels.csv"):
        try:
            label = Label(row["label"])
            volume_name, truth_name = row["volume"], row["truth"]
        except (KeyError, ValueError) as err:
            raise VolumeFormatError(f"{directory / 'labels.csv'}: bad row {row}") from err
        dataset.append(
            LabeledVolume(
                read_volume(directory / volume_name),
                label,
                read_volume(directory / truth_name),
            )
        )
    return dataset
