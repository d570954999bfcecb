"""
Concurrent per-image execution for evaluation and attack runs.
"""

import asyncio
import logging
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

from run_logger import RunLogger

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class ExperimentRunner:
    """Runs a blocking per-image function on a bounded pool of worker threads"""

    def __init__(self, workers: int = 4, run_logger: Optional[RunLogger] = None,
                 progress_every: int = 50):
        if workers < 1:
            raise ValueError("workers must be at least 1")
        self.workers = workers
        self.run_logger = run_logger
        self.progress_every = progress_every
        self.completed = 0

    async def _run_one(self, semaphore: asyncio.Semaphore, fn: Callable[[T], R],
                       image_id: str, item: T, label: str, total: int) -> Tuple[str, R]:
        async with semaphore:
            result = await asyncio.to_thread(fn, item)
        self.completed += 1
        if self.completed % self.progress_every == 0 or self.completed == total:
            logger.info(f"{label}: {self.completed}/{total} images done")
        if self.completed == total and self.run_logger:
            await self.run_logger.async_progress(label, self.completed, total)
        return image_id, result

    async def map_async(self, items: Sequence[Tuple[str, T]], fn: Callable[[T], R],
                        label: str = "run") -> List[Tuple[str, R]]:
        """Apply fn to every (image_id, item); results sorted by image id"""
        self.completed = 0
        semaphore = asyncio.Semaphore(self.workers)
        tasks = [
            asyncio.create_task(self._run_one(semaphore, fn, image_id, item, label, len(items)))
            for image_id, item in items
        ]
        outcomes = await asyncio.gather(*tasks, return_exceptions=True)

        failures = [o for o in outcomes if isinstance(o, BaseException)]
        for failure in failures:
            logger.error(f"{label}: worker failed: {failure}")
        if failures:
            raise failures[0]
        return sorted(outcomes, key=lambda pair: pair[0])

    def map(self, items: Sequence[Tuple[str, T]], fn: Callable[[T], R],
            label: str = "run") -> List[Tuple[str, R]]:
        return asyncio.run(self.map_async(items, fn, label))
