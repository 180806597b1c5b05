"""Chunked Latent Shift counterfactuals for volumetric scorers."""

from __future__ import annotations

from .latent_shift import generate_cf, generate_cf_unblocked, lambda_sweep, shift_direction
from .localization import diff_heatmap, input_gradient, localization_score, scan_chunks
from .models import CFResult, CFStatus, ChunkSpec, ScanReport, SearchConfig
from .networks import SliceAutoencoder, VolumeScorer, decode_chunked, encode_volume

__version__ = "1.0.0"

__all__ = [
    "CFResult",
    "CFStatus",
    "ChunkSpec",
    "ScanReport",
    "SearchConfig",
    "SliceAutoencoder",
    "VolumeScorer",
    "decode_chunked",
    "diff_heatmap",
    "encode_volume",
    "generate_cf",
    "generate_cf_unblocked",
    "input_gradient",
    "lambda_sweep",
    "localization_score",
    "scan_chunks",
    "shift_direction",
]
