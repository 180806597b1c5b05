"""Run configuration: JSON document validated by voluptuous, flags win."""

from __future__ import annotations

import copy
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    CONF_AUTOENCODER,
    CONF_CHUNK,
    CONF_DATA_DIR,
    CONF_DATASET,
    CONF_EVALUATION,
    CONF_OUTPUT_DIR,
    CONF_PHANTOM,
    CONF_SCAN,
    CONF_SCORER,
    CONF_SEARCH,
    CONF_SEED,
    CONF_THREADS,
    DEFAULT_AE_BATCH_SIZE,
    DEFAULT_AE_EPOCHS,
    DEFAULT_AE_LEARNING_RATE,
    DEFAULT_BACKGROUND,
    DEFAULT_BRIGHT_THRESHOLD,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_CONSTANT_VALUE,
    DEFAULT_DEPTH,
    DEFAULT_EVAL_CHUNK_SIZE,
    DEFAULT_GROWTH,
    DEFAULT_HEIGHT,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_HISTOGRAM_BINS,
    DEFAULT_HOLDOUT_FRACTION,
    DEFAULT_INTERIOR,
    DEFAULT_LAMBDA0,
    DEFAULT_LATENT_DIM,
    DEFAULT_MAX_STEPS,
    DEFAULT_N_NEG,
    DEFAULT_N_POS,
    DEFAULT_NOISE,
    DEFAULT_PER_CHUNK_SECONDS,
    DEFAULT_PERMUTATION_ITERATIONS,
    DEFAULT_PIXEL_BUDGET,
    DEFAULT_RIM_EXTENT_DEG,
    DEFAULT_RIM_INTENSITY,
    DEFAULT_RIM_SLICES,
    DEFAULT_RIM_THICKNESS,
    DEFAULT_SCORER_BATCH_SIZE,
    DEFAULT_SCORER_EPOCHS,
    DEFAULT_SCORER_KIND,
    DEFAULT_SCORER_LEARNING_RATE,
    DEFAULT_SEG_BIAS,
    DEFAULT_SEG_GAIN,
    DEFAULT_SEG_THRESHOLD,
    DEFAULT_SWEEP_SIZES,
    DEFAULT_TARGET_FRACTION,
    DEFAULT_WIDTH,
    ENV_THREADS,
)
from .exceptions import ConfigError, MissingFileError
from .models import ChunkSpec, PhantomSpec, RimSpec, ScorerKind, SearchConfig, TrainConfig

_LOGGER = logging.getLogger(__name__)

# Linear probes need explicit weights, so train-scorer cannot build them.
BUILDABLE_SCORER_KINDS = [
    ScorerKind.SEG_SUM.value,
    ScorerKind.RIM_DETECTOR.value,
    ScorerKind.CONSTANT.value,
]

_INT = vol.Coerce(int)
_FLOAT = vol.Coerce(float)


def _positive_int() -> vol.All:
    return vol.All(_INT, vol.Range(min=1))


def _unit(min_included: bool = True, max_included: bool = True) -> vol.All:
    return vol.All(
        _FLOAT,
        vol.Range(min=0.0, max=1.0, min_included=min_included, max_included=max_included),
    )


def _section(fields: dict) -> vol.Schema:
    return vol.Schema(fields, extra=vol.PREVENT_EXTRA)


PHANTOM_SCHEMA = _section(
    {
        vol.Optional("depth", default=DEFAULT_DEPTH): _positive_int(),
        vol.Optional("height", default=DEFAULT_HEIGHT): _positive_int(),
        vol.Optional("width", default=DEFAULT_WIDTH): _positive_int(),
        vol.Optional("interior", default=DEFAULT_INTERIOR): _unit(),
        vol.Optional("background", default=DEFAULT_BACKGROUND): _unit(),
        vol.Optional("noise", default=DEFAULT_NOISE): vol.All(_FLOAT, vol.Range(min=0.0)),
        vol.Optional("rim_intensity", default=DEFAULT_RIM_INTENSITY): _unit(),
        vol.Optional("rim_thickness", default=DEFAULT_RIM_THICKNESS): vol.All(
            _FLOAT, vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional("rim_extent_deg", default=DEFAULT_RIM_EXTENT_DEG): vol.All(
            _FLOAT, vol.Range(min=0.0, max=360.0, min_included=False)
        ),
        vol.Optional("rim_slices", default=DEFAULT_RIM_SLICES): _positive_int(),
    }
)

DATASET_SCHEMA = _section(
    {
        vol.Optional("n_pos", default=DEFAULT_N_POS): vol.All(_INT, vol.Range(min=0)),
        vol.Optional("n_neg", default=DEFAULT_N_NEG): vol.All(_INT, vol.Range(min=0)),
        vol.Optional("holdout_fraction", default=DEFAULT_HOLDOUT_FRACTION): _unit(
            max_included=False
        ),
    }
)

AUTOENCODER_SCHEMA = _section(
    {
        vol.Optional("latent_dim", default=DEFAULT_LATENT_DIM): _positive_int(),
        vol.Optional("hidden_dim", default=DEFAULT_HIDDEN_DIM): _positive_int(),
        vol.Optional("epochs", default=DEFAULT_AE_EPOCHS): vol.All(_INT, vol.Range(min=0)),
        vol.Optional("batch_size", default=DEFAULT_AE_BATCH_SIZE): _positive_int(),
        vol.Optional("learning_rate", default=DEFAULT_AE_LEARNING_RATE): vol.All(
            _FLOAT, vol.Range(min=0.0, min_included=False)
        ),
    }
)

SCORER_SCHEMA = _section(
    {
        vol.Optional("kind", default=DEFAULT_SCORER_KIND): vol.In(BUILDABLE_SCORER_KINDS),
        vol.Optional("seg_gain", default=DEFAULT_SEG_GAIN): _FLOAT,
        vol.Optional("seg_bias", default=DEFAULT_SEG_BIAS): _FLOAT,
        vol.Optional("seg_threshold", default=DEFAULT_SEG_THRESHOLD): _unit(False, False),
        vol.Optional("constant_value", default=DEFAULT_CONSTANT_VALUE): _unit(False, False),
        vol.Optional("bright_threshold", default=DEFAULT_BRIGHT_THRESHOLD): vol.Any(
            None, _unit()
        ),
        vol.Optional("epochs", default=DEFAULT_SCORER_EPOCHS): vol.All(_INT, vol.Range(min=0)),
        vol.Optional("batch_size", default=DEFAULT_SCORER_BATCH_SIZE): _positive_int(),
        vol.Optional("learning_rate", default=DEFAULT_SCORER_LEARNING_RATE): vol.All(
            _FLOAT, vol.Range(min=0.0, min_included=False)
        ),
    }
)

SEARCH_SCHEMA = _section(
    {
        vol.Optional("lambda0", default=DEFAULT_LAMBDA0): vol.All(
            _FLOAT, vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional("growth", default=DEFAULT_GROWTH): vol.All(
            _FLOAT, vol.Range(min=1.0, min_included=False)
        ),
        vol.Optional("max_steps", default=DEFAULT_MAX_STEPS): _positive_int(),
        vol.Optional("pixel_budget", default=DEFAULT_PIXEL_BUDGET): _unit(min_included=False),
        vol.Optional("target_fraction", default=DEFAULT_TARGET_FRACTION): _unit(
            max_included=False
        ),
    }
)

CHUNK_SCHEMA = _section(
    {
        vol.Optional("start", default=0): vol.All(_INT, vol.Range(min=0)),
        vol.Optional("length", default=DEFAULT_CHUNK_SIZE): _positive_int(),
    }
)

SCAN_SCHEMA = _section(
    {
        vol.Optional("chunk_size", default=DEFAULT_CHUNK_SIZE): _positive_int(),
        vol.Optional("stride", default=None): vol.Any(None, _positive_int()),
    }
)

EVALUATION_SCHEMA = _section(
    {
        vol.Optional("chunk_size", default=DEFAULT_EVAL_CHUNK_SIZE): _positive_int(),
        vol.Optional("sweep_sizes", default=list(DEFAULT_SWEEP_SIZES)): vol.All(
            [_positive_int()], vol.Length(min=1)
        ),
        vol.Optional("bins", default=DEFAULT_HISTOGRAM_BINS): vol.All(_INT, vol.Range(min=2)),
        vol.Optional(
            "permutation_iterations", default=DEFAULT_PERMUTATION_ITERATIONS
        ): _positive_int(),
        vol.Optional("per_chunk_seconds", default=DEFAULT_PER_CHUNK_SECONDS): vol.All(
            _FLOAT, vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional("include_negative_cfs", default=False): vol.Boolean(),
    }
)

RUN_SCHEMA = _section(
    {
        vol.Optional(CONF_SEED, default=0): vol.All(_INT, vol.Range(min=0)),
        vol.Optional(CONF_OUTPUT_DIR, default="out"): str,
        vol.Optional(CONF_DATA_DIR, default=None): vol.Any(None, str),
        vol.Optional(CONF_THREADS, default=None): vol.Any(None, _positive_int()),
        vol.Optional(CONF_PHANTOM, default=dict): PHANTOM_SCHEMA,
        vol.Optional(CONF_DATASET, default=dict): DATASET_SCHEMA,
        vol.Optional(CONF_AUTOENCODER, default=dict): AUTOENCODER_SCHEMA,
        vol.Optional(CONF_SCORER, default=dict): SCORER_SCHEMA,
        vol.Optional(CONF_SEARCH, default=dict): SEARCH_SCHEMA,
        vol.Optional(CONF_CHUNK, default=dict): CHUNK_SCHEMA,
        vol.Optional(CONF_SCAN, default=dict): SCAN_SCHEMA,
        vol.Optional(CONF_EVALUATION, default=dict): EVALUATION_SCHEMA,
    }
)


def _error_key(err: vol.Invalid) -> str:
    if "extra keys not allowed" in err.error_message:
        return "unknown_key"
    if "required key not provided" in err.error_message:
        return "missing_key"
    return "invalid_value"


def _env_threads() -> int | None:
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return None
    try:
        threads = int(raw)
    except ValueError as err:
        raise ConfigError(f"{ENV_THREADS}={raw!r} is not an integer") from err
    if threads < 1:
        raise ConfigError(f"{ENV_THREADS} must be >= 1, got {threads}")
    return threads


def _resolve_threads(explicit: int | None) -> int:
    """`CTCF_THREADS` caps any explicit count; the CPU count is the last fallback."""
    env = _env_threads()
    if explicit is None:
        return env if env is not None else os.cpu_count() or 1
    return explicit if env is None else min(explicit, env)


def apply_overrides(
    document: Mapping[str, Any], overrides: Mapping[str, Any]
) -> dict[str, Any]:
    """Merge `section.key` (or top-level `key`) overrides; None values are skipped."""
    merged = copy.deepcopy(dict(document))
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.rpartition(".")
        target = merged
        if section:
            target = merged.setdefault(section, {})
            if not isinstance(target, dict):
                raise ConfigError(f"Section {section!r} must be an object", "invalid_value")
        target[key] = value
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with every default materialised."""

    data: dict[str, Any]

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "RunConfig":
        """Validate a configuration document."""
        try:
            data = RUN_SCHEMA(dict(document))
        except vol.Invalid as err:
            first = err.errors[0] if isinstance(err, vol.MultipleInvalid) else err
            path = ".".join(str(p) for p in first.path) or "<root>"
            raise ConfigError(f"{path}: {first.error_message}", _error_key(first)) from err

        data[CONF_THREADS] = _resolve_threads(data[CONF_THREADS])
        if data[CONF_DATA_DIR] is None:
            data[CONF_DATA_DIR] = str(Path(data[CONF_OUTPUT_DIR]) / "data")
        config = cls(data)
        config.phantom_spec()
        return config

    @property
    def seed(self) -> int:
        """Master seed of the run."""
        return self.data[CONF_SEED]

    @property
    def output_dir(self) -> Path:
        """Directory every command writes into."""
        return Path(self.data[CONF_OUTPUT_DIR])

    @property
    def data_dir(self) -> Path:
        """Directory holding the phantom dataset."""
        return Path(self.data[CONF_DATA_DIR])

    @property
    def threads(self) -> int:
        """Worker thread cap."""
        return self.data[CONF_THREADS]

    def section(self, name: str) -> dict[str, Any]:
        """Return one validated section."""
        return self.data[name]

    def phantom_spec(self) -> PhantomSpec:
        """Base phantom geometry with the rim template used by make_dataset."""
        p = self.data[CONF_PHANTOM]
        depth, height, width = p["depth"], p["height"], p["width"]
        try:
            rim = RimSpec(
                slice_start=0,
                slice_stop=p["rim_slices"],
                angle_start_deg=0.0,
                angle_extent_deg=p["rim_extent_deg"],
                thickness=p["rim_thickness"],
                intensity=p["rim_intensity"],
            )
            return PhantomSpec(
                depth=depth,
                height=height,
                width=width,
                center=(depth / 2, height / 2, width / 2),
                semi_axes=(depth * 0.35, height * 0.3, width * 0.3),
                interior=p["interior"],
                background=p["background"],
                noise=p["noise"],
                rim=rim,
                seed=self.seed,
            )
        except ValueError as err:
            raise ConfigError(f"{CONF_PHANTOM}: {err}") from err

    def search_config(self) -> SearchConfig:
        """Lambda search parameters."""
        return SearchConfig(**self.data[CONF_SEARCH])

    def chunk_spec(self) -> ChunkSpec:
        """Chunk used by gen-cf."""
        c = self.data[CONF_CHUNK]
        return ChunkSpec(c["start"], c["length"])

    def autoencoder_training(self) -> TrainConfig:
        """SGD settings of the autoencoder."""
        a = self.data[CONF_AUTOENCODER]
        return TrainConfig(a["epochs"], a["batch_size"], a["learning_rate"], self.seed)

    def scorer_training(self) -> TrainConfig:
        """SGD settings of the rim detector."""
        s = self.data[CONF_SCORER]
        return TrainConfig(s["epochs"], s["batch_size"], s["learning_rate"], self.seed)

    def as_dict(self) -> dict[str, Any]:
        """Effective configuration, JSON-ready."""
        return copy.deepcopy(self.data)


def load_config(path: Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a JSON configuration file (optional) and apply flag overrides."""
    document: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFileError(f"Configuration file not found: {path}")
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON: {err}", "invalid_json") from err
        if not isinstance(document, dict):
            raise ConfigError(f"{path}: top level must be an object", "invalid_json")
    config = RunConfig.from_dict(apply_overrides(document, overrides or {}))
    _LOGGER.debug(f"Loaded configuration with seed {config.seed} into {config.output_dir}")
    return config
