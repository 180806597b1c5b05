"""Constants for the CT counterfactuals package."""

from typing import List

DOMAIN = "ct_counterfactuals"

# File formats
VOLUME_MAGIC = b"CTVF"
VOLUME_VERSION = 1
MODEL_MAGIC = b"CTCF-MDL\0"
MODEL_VERSION = 1

# Environment
ENV_THREADS = "CTCF_THREADS"

# Configuration Keys
CONF_SEED = "seed"
CONF_OUTPUT_DIR = "output_dir"
CONF_DATA_DIR = "data_dir"
CONF_THREADS = "threads"
CONF_PHANTOM = "phantom"
CONF_DATASET = "dataset"
CONF_AUTOENCODER = "autoencoder"
CONF_SCORER = "scorer"
CONF_SEARCH = "search"
CONF_CHUNK = "chunk"
CONF_SCAN = "scan"
CONF_EVALUATION = "evaluation"

# Default Values: geometry
DEFAULT_DEPTH = 32
DEFAULT_HEIGHT = 16
DEFAULT_WIDTH = 16
DEFAULT_LATENT_DIM = 16
DEFAULT_HIDDEN_DIM = 64

# Default Values: phantoms
DEFAULT_INTERIOR = 0.2
DEFAULT_BACKGROUND = 0.5
DEFAULT_RIM_INTENSITY = 0.9
DEFAULT_NOISE = 0.02
DEFAULT_RIM_THICKNESS = 2.0
DEFAULT_RIM_EXTENT_DEG = 120.0
DEFAULT_RIM_SLICES = 7
DEFAULT_N_POS = 40
DEFAULT_N_NEG = 40
DEFAULT_HOLDOUT_FRACTION = 0.25

# Default Values: training
DEFAULT_AE_EPOCHS = 200
DEFAULT_AE_BATCH_SIZE = 16
DEFAULT_AE_LEARNING_RATE = 0.01
DEFAULT_SCORER_EPOCHS = 200
DEFAULT_SCORER_BATCH_SIZE = 16
DEFAULT_SCORER_LEARNING_RATE = 0.1

# Default Values: scorers
DEFAULT_SCORER_KIND = "rim_detector"
DEFAULT_SEG_GAIN = -30.0
DEFAULT_SEG_BIAS = 9.0
DEFAULT_SEG_THRESHOLD = 0.5
DEFAULT_CONSTANT_VALUE = 0.5
DEFAULT_BRIGHT_THRESHOLD: float | None = None

# Default Values: latent shift search
DEFAULT_LAMBDA0 = 1e-2
DEFAULT_GROWTH = 2.0
DEFAULT_MAX_STEPS = 20
DEFAULT_PIXEL_BUDGET = 0.05
DEFAULT_TARGET_FRACTION = 0.5
DYNAMIC_RANGE = 1.0

# Default Values: chunking and evaluation
DEFAULT_CHUNK_SIZE = 5  # chunks of five slices
DEFAULT_EVAL_CHUNK_SIZE = 12
DEFAULT_SWEEP_SIZES: List[int] = [2, 4, 8, 12]
DEFAULT_HISTOGRAM_BINS = 10
DEFAULT_PERMUTATION_ITERATIONS = 9999
DEFAULT_PER_CHUNK_SECONDS = 30.0
DEFAULT_FINITE_DIFF_STEP = 1e-5

# CLI exit status per error code
EXIT_CODES = {
    "unknown": 1,
    "missing_file": 3,
    "malformed_volume": 4,
    "malformed_config": 5,
    "shape_mismatch": 6,
    "malformed_model": 7,
    "invalid_chunk": 8,
    "non_finite": 9,
    "training_failed": 10,
    "tape_error": 11,
    "invalid_value": 12,
}
