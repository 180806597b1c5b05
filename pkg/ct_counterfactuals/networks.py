"""Slice autoencoder, volume scorers and their toy training loops."""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit
from sklearn.metrics import roc_auc_score

from .const import DEFAULT_HIDDEN_DIM, DEFAULT_LATENT_DIM
from .exceptions import (
    InvalidValueError,
    NonFiniteError,
    ShapeMismatchError,
    TrainingError,
)
from .models import ChunkSpec, LabeledVolume, ScorerKind, TrainConfig
from .rng import make_rng
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    block_gradient,
    concat_slices,
    constant,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    sub,
    sum_all,
)

_LOGGER = logging.getLogger(__name__)

AE_PARAM_NAMES = (
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "decoder.w1",
    "decoder.b1",
    "decoder.w2",
    "decoder.b2",
)


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for a batch of rows; the bias row is repeated without broadcasting."""
    out = matmul(x, w)
    if x.shape[0] == 1:
        return add(out, b)
    ones = constant(np.ones((x.shape[0], 1)))
    return add(out, matmul(ones, b))


def _check_volume(volume: np.ndarray, height: int, width: int) -> None:
    if volume.ndim != 3 or volume.shape[1:] != (height, width):
        raise ShapeMismatchError(
            "Volume slices do not match the model", (height, width), volume.shape[1:]
        )


@dataclass(frozen=True, eq=False)
class SliceAutoencoder:
    """Two-layer dense encoder/decoder pair applied to one H x W slice at a time."""

    height: int
    width: int
    latent_dim: int
    hidden_dim: int
    params: dict[str, np.ndarray]

    def __post_init__(self):
        """Post-initialisation to validate dimensions and parameter shapes."""
        if min(self.height, self.width, self.latent_dim, self.hidden_dim) < 1:
            raise InvalidValueError("Autoencoder dimensions must be positive")
        for name, expected in self.param_shapes().items():
            actual = self.params[name].shape
            if actual != expected:
                raise ShapeMismatchError(f"Parameter {name}", expected, actual)
        # only the identity construction may keep every pixel as a latent
        if self.latent_dim > self.pixels or (
            self.latent_dim == self.pixels and not self.is_identity
        ):
            raise InvalidValueError(
                f"Latent size {self.latent_dim} must be below slice size {self.pixels}"
            )

    @property
    def pixels(self) -> int:
        """Voxels per slice."""
        return self.height * self.width

    @property
    def is_identity(self) -> bool:
        """Whether the parameters are exactly those of `identity`."""
        n = self.pixels
        if self.latent_dim != n or self.hidden_dim != n:
            return False
        return all(
            np.array_equal(value, np.eye(n) if name.endswith(("w1", "w2")) else np.zeros((1, n)))
            for name, value in self.params.items()
        )

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        """Expected shape of every parameter."""
        return _param_shapes(self.pixels, self.hidden_dim, self.latent_dim)

    @classmethod
    def create(
        cls,
        height: int,
        width: int,
        latent_dim: int = DEFAULT_LATENT_DIM,
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        seed: int = 0,
    ) -> "SliceAutoencoder":
        """Randomly initialise weights and biases uniform in +-1/sqrt(fan_in)."""
        rng = make_rng(seed)
        shapes = _param_shapes(height * width, hidden_dim, latent_dim)
        params = {}
        for name in AE_PARAM_NAMES:
            # a bias shares the fan-in of its layer's weight
            fan_in = shapes[name.replace(".b", ".w")][0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shapes[name])
        return cls(height, width, latent_dim, hidden_dim, params)

    @classmethod
    def identity(cls, height: int, width: int) -> "SliceAutoencoder":
        """Autoencoder whose latents are the flattened slice (exact for x >= 0)."""
        n = height * width
        params = {
            name: np.zeros(shape) for name, shape in _param_shapes(n, n, n).items()
        }
        for name in ("encoder.w1", "encoder.w2", "decoder.w1", "decoder.w2"):
            params[name] = np.eye(n)
        return cls(height, width, n, n, params)

    @cached_property
    def constants(self) -> dict[str, Tensor]:
        """Parameters as constant tensors, for inference."""
        return {name: constant(value) for name, value in self.params.items()}

    def encode_rows(self, x: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Encode a B x (H*W) batch into B x L latents."""
        p = params or self.constants
        hidden = relu(_dense(x, p["encoder.w1"], p["encoder.b1"]))
        return _dense(hidden, p["encoder.w2"], p["encoder.b2"])

    def decode_rows(self, z: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Decode B x L latents into a B x (H*W) batch."""
        p = params or self.constants
        hidden = relu(_dense(z, p["decoder.w1"], p["decoder.b1"]))
        return _dense(hidden, p["decoder.w2"], p["decoder.b2"])

    def decode_slice(self, z: Tensor) -> Tensor:
        """Decode one 1 x L latent into an H x W slice."""
        return reshape(self.decode_rows(z), (self.height, self.width))


def _param_shapes(pixels: int, hidden: int, latent: int) -> dict[str, tuple[int, int]]:
    return {
        "encoder.w1": (pixels, hidden),
        "encoder.b1": (1, hidden),
        "encoder.w2": (hidden, latent),
        "encoder.b2": (1, latent),
        "decoder.w1": (latent, hidden),
        "decoder.b1": (1, hidden),
        "decoder.w2": (hidden, pixels),
        "decoder.b2": (1, pixels),
    }


@dataclass
class ChunkedDecode:
    """A decoded volume and the latent leaves that can receive gradient."""

    volume: Tensor
    latents: dict[int, Tensor]
    tape: Tape


def encode_volume(ae: SliceAutoencoder, volume: np.ndarray) -> np.ndarray:
    """Encode a D x H x W volume slice by slice into a D x L latent stack."""
    _check_volume(volume, ae.height, ae.width)
    rows = [
        ae.encode_rows(constant(volume[i].reshape(1, ae.pixels))).value[0]
        for i in range(volume.shape[0])
    ]
    return np.stack(rows)


def _check_latents(ae: SliceAutoencoder, z: np.ndarray) -> None:
    if z.ndim != 2 or z.shape[1] != ae.latent_dim:
        raise ShapeMismatchError(
            "Latent stack does not match the autoencoder", (None, ae.latent_dim), z.shape
        )


def decode_chunked(
    ae: SliceAutoencoder,
    z: np.ndarray,
    chunk: ChunkSpec,
    tape: Tape | None = None,
) -> ChunkedDecode:
    """Decode every slice; only latents inside the chunk are recorded on the tape."""
    _check_latents(ae, z)
    chunk.validate_for(z.shape[0])
    tape = tape if tape is not None else Tape()
    leaves: dict[int, Tensor] = {}
    slices = []
    for i in range(z.shape[0]):
        if chunk.contains(i):
            leaves[i] = tape.watch(z[i : i + 1])
            slices.append(ae.decode_slice(leaves[i]))
        else:
            slices.append(block_gradient(ae.decode_slice(constant(z[i : i + 1]))))
    return ChunkedDecode(concat_slices(slices), leaves, tape)


def decode_unblocked(
    ae: SliceAutoencoder, z: np.ndarray, tape: Tape | None = None
) -> ChunkedDecode:
    """Decode every slice on the tape; no gradient blocking at all."""
    _check_latents(ae, z)
    tape = tape if tape is not None else Tape()
    leaves = {i: tape.watch(z[i : i + 1]) for i in range(z.shape[0])}
    slices = [ae.decode_slice(leaves[i]) for i in range(z.shape[0])]
    return ChunkedDecode(concat_slices(slices), leaves, tape)


def reconstruct(ae: SliceAutoencoder, z: np.ndarray) -> np.ndarray:
    """Forward-only decode of a latent stack."""
    _check_latents(ae, z)
    return np.stack(
        [ae.decode_slice(constant(z[i : i + 1])).value for i in range(z.shape[0])]
    )


@dataclass(frozen=True, eq=False)
class VolumeScorer:
    """A differentiable map from a volume to a single scalar."""

    kind: ScorerKind
    height: int
    width: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def seg_sum(cls, height: int, width: int, gain: float, bias: float) -> "VolumeScorer":
        """Sum of per-voxel sigmoid(gain * v + bias), a soft organ voxel count."""
        return cls(
            ScorerKind.SEG_SUM,
            height,
            width,
            {"gain": np.asarray(float(gain)), "bias": np.asarray(float(bias))},
        )

    @classmethod
    def rim_detector(
        cls,
        height: int,
        width: int,
        weights: np.ndarray | None = None,
        bias: float = 0.0,
        bright_threshold: float | None = None,
    ) -> "VolumeScorer":
        """sigmoid of the slice-averaged weighted voxels, optionally gated on brightness."""
        w = np.zeros((height, width)) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (height, width):
            raise ShapeMismatchError("Rim detector weights", (height, width), w.shape)
        params = {"weights": w, "bias": np.asarray(float(bias))}
        if bright_threshold is not None:
            params["bright_threshold"] = np.asarray(float(bright_threshold))
        return cls(ScorerKind.RIM_DETECTOR, height, width, params)

    @classmethod
    def constant(cls, height: int, width: int, value: float) -> "VolumeScorer":
        """Ignores the input."""
        return cls(ScorerKind.CONSTANT, height, width, {"value": np.asarray(float(value))})

    @classmethod
    def linear_probe(cls, weights: np.ndarray, bias: float = 0.0) -> "VolumeScorer":
        """w . flatten(v) + b for volumes of one fixed depth."""
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 3:
            raise ShapeMismatchError("Linear probe weights must be D x H x W", (), w.shape)
        return cls(
            ScorerKind.LINEAR_PROBE,
            w.shape[1],
            w.shape[2],
            {"weights": w, "bias": np.asarray(float(bias))},
        )

    @property
    def bright_threshold(self) -> float | None:
        """Brightness gate of a rim detector, if any."""
        value = self.params.get("bright_threshold")
        return None if value is None else float(value)

    def check_volume_shape(self, shape: Sequence[int]) -> None:
        """Raise ShapeMismatchError if a volume of this shape cannot be scored."""
        shape = tuple(shape)
        if len(shape) != 3 or shape[1:] != (self.height, self.width):
            raise ShapeMismatchError(
                "Volume slices do not match the scorer", (self.height, self.width), shape[1:]
            )
        if self.kind is ScorerKind.LINEAR_PROBE and shape != self.params["weights"].shape:
            raise ShapeMismatchError(
                "Volume does not match the probe", self.params["weights"].shape, shape
            )

    def forward(self, volume: Tensor, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Scalar score of a D x H x W tensor."""
        self.check_volume_shape(volume.shape)
        p = params or {name: constant(value) for name, value in self.params.items()}
        if self.kind is ScorerKind.SEG_SUM:
            return sum_all(sigmoid(self._seg_logits(volume)))
        if self.kind is ScorerKind.RIM_DETECTOR:
            return sigmoid(self._rim_logit(volume, p["weights"], p["bias"]))
        if self.kind is ScorerKind.CONSTANT:
            return constant(self.params["value"])
        return add(sum_all(mul(volume, p["weights"])), p["bias"])

    def _seg_logits(self, volume: Tensor) -> Tensor:
        bias = constant(np.full(volume.shape, float(self.params["bias"])))
        return add(scale(volume, float(self.params["gain"])), bias)

    def gated(self, volume: Tensor) -> Tensor:
        """Voxels as seen by the rim detector: relu(v - threshold) or v itself."""
        threshold = self.bright_threshold
        if threshold is None:
            return volume
        return relu(sub(volume, constant(np.full(volume.shape, threshold))))

    def _rim_logit(self, volume: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
        depth = volume.shape[0]
        rows = reshape(self.gated(volume), (depth, self.height * self.width))
        per_slice = matmul(rows, reshape(weights, (self.height * self.width, 1)))
        return add(scale(sum_all(per_slice), 1.0 / depth), bias)

    def voxel_logits(self, volume: np.ndarray) -> np.ndarray:
        """Per-voxel logits of a segmentation-sum scorer."""
        if self.kind is not ScorerKind.SEG_SUM:
            raise InvalidValueError(f"Scorer {self.kind.value} has no voxel logits")
        self.check_volume_shape(volume.shape)
        return self._seg_logits(constant(volume)).value


def score(f: VolumeScorer, volume: np.ndarray) -> float:
    """Score a volume."""
    return f.forward(constant(volume)).item()


def seg_mask(f: VolumeScorer, volume: np.ndarray, threshold: float) -> np.ndarray:
    """Binary mask of voxels whose segmentation probability reaches the threshold."""
    if not 0 < threshold < 1:
        raise InvalidValueError(f"Threshold must be in (0, 1), got {threshold}")
    return (expit(f.voxel_logits(volume)) >= threshold).astype(np.float64)


def reconstruction_mse(ae: SliceAutoencoder, volumes: Sequence[np.ndarray]) -> float:
    """Mean squared per-voxel error of decode(encode(v)) over volumes."""
    total, count = 0.0, 0
    for volume in volumes:
        recon = reconstruct(ae, encode_volume(ae, volume))
        total += float(((recon - volume) ** 2).sum())
        count += volume.size
    return total / count


def _as_volume(item) -> np.ndarray:
    return item.volume if isinstance(item, LabeledVolume) else np.asarray(item)


def _sgd_step(
    params: dict[str, np.ndarray], leaves: dict[str, Tensor], tape: Tape, loss: Tensor, lr: float
) -> dict[str, np.ndarray]:
    grads = backward(tape, loss)
    return {name: params[name] - lr * grads.wrt(leaves[name]) for name in params}


def train_autoencoder(
    ae: SliceAutoencoder,
    dataset: Sequence[LabeledVolume | np.ndarray],
    cfg: TrainConfig,
) -> tuple[SliceAutoencoder, list[float]]:
    """Minimise slice reconstruction error with plain SGD over shuffled slices.

    The history starts with the per-voxel MSE of the untrained model followed
    by the mean batch MSE of every epoch.
    """
    volumes = [_as_volume(item) for item in dataset]
    if not volumes:
        raise TrainingError("Cannot train an autoencoder on an empty dataset")
    for volume in volumes:
        _check_volume(volume, ae.height, ae.width)
    rows = np.concatenate([v.reshape(v.shape[0], ae.pixels) for v in volumes])
    rng = make_rng(cfg.seed)
    params = {name: value.copy() for name, value in ae.params.items()}
    history = [reconstruction_mse(ae, volumes)]
    _LOGGER.debug(f"Autoencoder training on {len(rows)} slices, initial MSE {history[0]:.6g}")

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(rows))
        losses = []
        for start in range(0, len(rows), cfg.batch_size):
            batch = rows[order[start : start + cfg.batch_size]]
            tape = Tape()
            leaves = {name: tape.watch(value) for name, value in params.items()}
            x = constant(batch)
            out = ae.decode_rows(ae.encode_rows(x, leaves), leaves)
            diff = sub(out, x)
            loss = scale(sum_all(mul(diff, diff)), 1.0 / len(batch))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"Non-finite autoencoder loss at epoch {epoch}, batch starting {start}"
                )
            losses.append(value / ae.pixels)
            params = _sgd_step(params, leaves, tape, loss, cfg.learning_rate)
        history.append(float(np.mean(losses)))
        _LOGGER.debug(f"Autoencoder epoch {epoch + 1}/{cfg.epochs}: MSE {history[-1]:.6g}")

    trained = SliceAutoencoder(ae.height, ae.width, ae.latent_dim, ae.hidden_dim, params)
    return trained, history


@dataclass
class ScorerTraining:
    """A trained rim detector and its training metrics."""

    scorer: VolumeScorer
    loss_history: list[float]
    train_auc: float
    train_accuracy: float


def rim_features(f: VolumeScorer, volumes: Sequence[np.ndarray]) -> np.ndarray:
    """Slice-averaged gated voxels, one row per volume."""
    rows = []
    for volume in volumes:
        f.check_volume_shape(volume.shape)
        gated = f.gated(constant(volume)).value
        rows.append(gated.mean(axis=0).reshape(-1))
    return np.stack(rows)


def predict(f: VolumeScorer, volumes: Sequence[np.ndarray]) -> np.ndarray:
    """Scores of several volumes."""
    return np.array([score(f, v) for v in volumes])


def train_scorer(
    f: VolumeScorer, dataset: Sequence[LabeledVolume], cfg: TrainConfig
) -> ScorerTraining:
    """Fit a rim detector by logistic regression on standardised slice-averaged voxels."""
    if f.kind is not ScorerKind.RIM_DETECTOR:
        raise InvalidValueError(f"Only rim detectors are trainable, got {f.kind.value}")
    if not dataset:
        raise TrainingError("Cannot train a scorer on an empty dataset")
    labels = np.array([1.0 if item.is_positive else 0.0 for item in dataset])
    if labels.min() == labels.max():
        raise TrainingError("Scorer training needs both positive and negative volumes")
    volumes = [item.volume for item in dataset]
    features = rim_features(f, volumes)
    mean = features.mean(axis=0)
    spread = float((features - mean).std()) or 1.0
    standard = (features - mean) / spread

    weights = f.params["weights"].reshape(-1, 1) * spread
    bias = np.asarray(float(f.params["bias"]) + float(f.params["weights"].reshape(-1) @ mean))
    params = {"weights": weights, "bias": bias.reshape(1, 1)}
    rng = make_rng(cfg.seed)
    history: list[float] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        losses = []
        for start in range(0, len(labels), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tape = Tape()
            leaves = {name: tape.watch(value) for name, value in params.items()}
            x = constant(standard[idx])
            y = constant(labels[idx].reshape(-1, 1))
            logits = _dense(x, leaves["weights"], leaves["bias"])
            loss = scale(sum_all(sub(softplus(logits), mul(y, logits))), 1.0 / len(idx))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"Non-finite scorer loss at epoch {epoch}")
            losses.append(value)
            params = _sgd_step(params, leaves, tape, loss, cfg.learning_rate)
        history.append(float(np.mean(losses)))
        _LOGGER.debug(f"Scorer epoch {epoch + 1}/{cfg.epochs}: loss {history[-1]:.6g}")

    if cfg.epochs == 0:
        trained = f
    else:
        w = params["weights"].reshape(-1) / spread
        b = float(params["bias"].reshape(())) - float(w @ mean)
        trained = VolumeScorer.rim_detector(
            f.height, f.width, w.reshape(f.height, f.width), b, f.bright_threshold
        )
    predictions = predict(trained, volumes)
    if not np.all(np.isfinite(predictions)):
        raise NonFiniteError("Trained scorer produced non-finite predictions")
    return ScorerTraining(
        scorer=trained,
        loss_history=history,
        train_auc=float(roc_auc_score(labels, predictions)),
        train_accuracy=float(np.mean((predictions >= 0.5) == (labels == 1.0))),
    )
