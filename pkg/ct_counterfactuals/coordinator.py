"""Coordinator running independent counterfactual searches on a thread pool."""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from typing import Any, TypeVar

import numpy as np

from .const import DOMAIN
from .evaluation import volume_record
from .exceptions import CounterfactualError
from .latent_shift import generate_cf
from .localization import report_from_results, scan_windows
from .models import CFResult, ChunkSpec, LabeledVolume, ScanReport, SearchConfig, VolumeRecord
from .networks import SliceAutoencoder, VolumeScorer

_LOGGER = logging.getLogger(__name__)

_T = TypeVar("_T")


class CounterfactualCoordinator:
    """Class to fan out per-window and per-volume work.

    Results are gathered in submission order, so they match the serial
    library functions exactly.
    """

    def __init__(
        self,
        ae: SliceAutoencoder,
        scorer: VolumeScorer,
        cfg: SearchConfig,
        threads: int = 1,
    ) -> None:
        """Initialise."""
        if threads < 1:
            raise ValueError(f"threads must be >= 1, got {threads}")
        self.ae = ae
        self.scorer = scorer
        self.cfg = cfg
        self.threads = threads
        self._executor = ThreadPoolExecutor(max_workers=threads, thread_name_prefix=DOMAIN)

    async def _async_run_all(
        self, jobs: Sequence[Callable[[], _T]], what: str
    ) -> list[_T]:
        loop = asyncio.get_running_loop()
        try:
            return list(
                await asyncio.gather(
                    *(loop.run_in_executor(self._executor, job) for job in jobs)
                )
            )
        except CounterfactualError:
            raise
        except Exception as err:
            _LOGGER.exception(f"Unexpected error while running {what}: {err}")
            raise CounterfactualError(f"Unexpected error while running {what}: {err}") from err

    async def async_generate_cf(self, volume: np.ndarray, chunk: ChunkSpec) -> CFResult:
        """One counterfactual search off the event loop."""
        (result,) = await self._async_run_all(
            [partial(generate_cf, self.ae, self.scorer, volume, chunk, self.cfg)], "gen-cf"
        )
        return result

    async def async_scan_chunks(
        self, volume: np.ndarray, chunk_size: int, stride: int | None = None
    ) -> ScanReport:
        """Parallel equivalent of localization.scan_chunks."""
        self.scorer.check_volume_shape(volume.shape)
        stride = chunk_size if stride is None else stride
        windows = scan_windows(volume.shape[0], chunk_size, stride)
        _LOGGER.debug(f"Scanning {len(windows)} windows on {self.threads} threads")
        results = await self._async_run_all(
            [
                partial(generate_cf, self.ae, self.scorer, volume, window, self.cfg)
                for window in windows
            ],
            "scan",
        )
        return report_from_results(chunk_size, stride, results)

    async def async_collect_predictions(
        self,
        dataset: Sequence[LabeledVolume],
        chunk_size: int,
        include_negative_cfs: bool = False,
    ) -> list[VolumeRecord]:
        """Parallel equivalent of evaluation.collect_predictions."""
        jobs = [
            partial(
                volume_record,
                self.ae,
                self.scorer,
                index,
                item,
                chunk_size,
                self.cfg,
                item.is_positive or include_negative_cfs,
            )
            for index, item in enumerate(dataset)
        ]
        return await self._async_run_all(jobs, "evaluation")

    def close(self) -> None:
        """Shut the worker pool down."""
        self._executor.shutdown(wait=True)

    def __enter__(self) -> "CounterfactualCoordinator":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()
