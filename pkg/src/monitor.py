"""Throughput and CPU monitoring utilities."""
from __future__ import annotations

import logging
import threading
import time
from typing import Dict, Optional

import psutil


def pixels_per_second(pixels: int, seconds: float) -> float:
    """Throughput as total pixels over wall-clock seconds."""
    if seconds <= 0:
        raise ValueError(f"elapsed time must be positive, got {seconds}")
    return pixels / seconds


class ThroughputMonitor:
    """Count processed pixels against wall time and sample CPU load."""

    def __init__(self, sample_interval: float = 1.0) -> None:
        self._logger = logging.getLogger(__name__)
        self._interval = sample_interval
        self._pixels = 0
        self._lock = threading.Lock()
        self._started: Optional[float] = None
        self._elapsed: float = 0.0
        self._cpu_observations: list[float] = []
        self._stop_event = threading.Event()
        self._sampler: Optional[threading.Thread] = None
        psutil.cpu_percent(interval=None)  # Prime measurement baseline

    def start(self) -> None:
        self._started = time.perf_counter()
        self._stop_event.clear()
        self._sampler = threading.Thread(target=self._run, name="cpu-monitor", daemon=True)
        self._sampler.start()

    def _run(self) -> None:
        while not self._stop_event.wait(self._interval):
            usage = psutil.cpu_percent(interval=None)
            with self._lock:
                self._cpu_observations.append(usage)

    def add(self, pixels: int) -> None:
        with self._lock:
            self._pixels += pixels

    def stop(self) -> float:
        if self._started is None:
            raise RuntimeError("monitor was never started")
        self._elapsed = time.perf_counter() - self._started
        self._stop_event.set()
        if self._sampler is not None:
            self._sampler.join(timeout=self._interval + 1)
        with self._lock:
            self._cpu_observations.append(psutil.cpu_percent(interval=None))
        return self._elapsed

    @property
    def pixels(self) -> int:
        return self._pixels

    @property
    def elapsed(self) -> float:
        return self._elapsed

    def pixels_per_second(self) -> float:
        return pixels_per_second(self._pixels, self._elapsed)

    def cpu_stats(self) -> Dict[str, float]:
        with self._lock:
            observations = list(self._cpu_observations)
        return {
            "avg_percent": round(sum(observations) / len(observations), 1) if observations else 0.0,
            "max_percent": max(observations) if observations else 0.0,
            "logical_cores": psutil.cpu_count(logical=True) or 0,
        }
