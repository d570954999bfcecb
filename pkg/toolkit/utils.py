"""
Utility functions, exceptions and decorators for the FLA toolkit.
"""

import functools
import hashlib
import json
import logging
import random
import time
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)


class ToolkitError(Exception):
    """Base class for all toolkit errors"""
    pass


class ValidationError(ToolkitError):
    """Rejected input: bad shapes, out-of-bounds points, invalid values"""
    pass


class ConfigError(ToolkitError, ValueError):
    """Invalid configuration value or config file"""
    pass


class DatasetFormatError(ToolkitError):
    """Corrupt or missing dataset file"""

    def __init__(self, path: Union[str, Path], line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class CheckpointError(ToolkitError):
    """Checkpoint cannot be loaded (version or config mismatch)"""
    pass


class TrainingGateError(ToolkitError):
    """Trained detector did not reach the required mAP"""

    def __init__(self, final_map: float, gate: float):
        self.final_map = final_map
        self.gate = gate
        super().__init__(f"Training gate failed: mAP@0.5 = {final_map:.4f} < {gate:.4f}")


class MetricUndefinedError(ToolkitError):
    """Metric has a zero denominator"""
    pass


class CodecError(ToolkitError):
    """Image encode/decode failure"""
    pass


def error_handler(func: Callable) -> Callable:
    """Decorator to handle errors gracefully in async functions"""
    @functools.wraps(func)
    async def wrapper(*args, **kwargs):
        try:
            return await func(*args, **kwargs)
        except Exception as e:
            logger.error(f"Error in {func.__name__}: {str(e)}", exc_info=True)
            return None
    return wrapper


def sync_error_handler(func: Callable) -> Callable:
    """Decorator to handle errors gracefully in sync functions"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception as e:
            logger.error(f"Error in {func.__name__}: {str(e)}", exc_info=True)
            return None
    return wrapper


class CircuitBreaker:
    """Circuit breaker pattern for external service calls"""

    def __init__(self, failure_threshold: int = 5, recovery_timeout: float = 60.0):
        self.failure_threshold = failure_threshold
        self.recovery_timeout = recovery_timeout
        self.failure_count = 0
        self.last_failure_time = None
        self.state = "CLOSED"  # CLOSED, OPEN, HALF_OPEN

    def allow(self) -> bool:
        """Whether a call may be attempted right now"""
        if self.state == "OPEN":
            if time.time() - self.last_failure_time > self.recovery_timeout:
                self.state = "HALF_OPEN"
                return True
            return False
        return True

    def call(self, func: Callable, *args, **kwargs) -> Any:
        """Call function with circuit breaker protection"""
        if not self.allow():
            raise ToolkitError("Circuit breaker is OPEN")

        try:
            result = func(*args, **kwargs)
            self.reset()
            return result
        except Exception as e:
            self.record_failure()
            raise e

    def record_failure(self) -> None:
        """Record a failure"""
        self.failure_count += 1
        self.last_failure_time = time.time()

        if self.failure_count >= self.failure_threshold:
            self.state = "OPEN"
            logger.warning(f"Circuit breaker opened after {self.failure_count} failures")

    def reset(self) -> None:
        """Reset circuit breaker"""
        self.failure_count = 0
        self.state = "CLOSED"
        self.last_failure_time = None


def parse_json_line(line: str) -> Optional[Dict[str, Any]]:
    """Parse one JSON object per line, None if it is not a JSON object"""
    try:
        data = json.loads(line)
        if not isinstance(data, dict):
            return None
        return data
    except (json.JSONDecodeError, TypeError):
        return None


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch generators"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def derive_seed(base_seed: int, offset: int) -> int:
    """Subsystem seed derived from the run seed by a fixed offset"""
    return int(base_seed) + int(offset)


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class PerformanceMonitor:
    """Monitor performance metrics"""

    def __init__(self):
        self.metrics = {}

    def start_timer(self, name: str) -> None:
        """Start timing an operation"""
        self.metrics[name] = {"start": time.perf_counter()}

    def end_timer(self, name: str) -> float:
        """End timing an operation and return duration"""
        if name not in self.metrics:
            return 0.0

        duration = time.perf_counter() - self.metrics[name]["start"]
        self.metrics[name]["duration"] = duration
        return duration

    def get_durations(self) -> Dict[str, float]:
        """Durations of all finished timers"""
        return {
            name: entry["duration"]
            for name, entry in self.metrics.items()
            if "duration" in entry
        }


# Global performance monitor instance
performance_monitor = PerformanceMonitor()
