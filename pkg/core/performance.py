"""
Run monitoring for long simulations.
Tracks wall time, replicate throughput and (optionally) process resources.
"""

import time
import threading
from collections import deque
from typing import Any, Dict
import logging

# psutil is optional (the 'monitoring' extra)
try:
    import psutil
    HAS_PSUTIL = True
except ImportError:
    psutil = None
    HAS_PSUTIL = False

logger = logging.getLogger(__name__)


class RollingAverage:
    """Efficient rolling average calculator."""

    def __init__(self, window_size: int = 50):
        self.window_size = window_size
        self.values = deque(maxlen=window_size)
        self._sum = 0.0
        self._lock = threading.Lock()

    def add(self, value: float):
        with self._lock:
            if len(self.values) == self.window_size:
                self._sum -= self.values[0]
            self.values.append(value)
            self._sum += value

    @property
    def average(self) -> float:
        with self._lock:
            if not self.values:
                return 0.0
            return self._sum / len(self.values)


class RunMonitor:
    """Replicate accounting and resource usage for one workbench run."""

    def __init__(self, total_replicates: int = 0, log_every: int = 50):
        self.total_replicates = total_replicates
        self.log_every = max(1, log_every)
        self.replicate_seconds = RollingAverage(50)
        self.completed = 0
        self.failed = 0
        self.scenarios_done = 0
        self._start = time.perf_counter()
        self._lock = threading.Lock()
        self._process = psutil.Process() if HAS_PSUTIL else None
        if self._process is not None:
            # first call primes the cpu counter
            self._process.cpu_percent(interval=None)

    def record_replicate(self, seconds: float, failed: bool = False):
        with self._lock:
            self.completed += 1
            if failed:
                self.failed += 1
            done = self.completed
        self.replicate_seconds.add(seconds)
        if done % self.log_every == 0:
            self.log_stats()

    def record_scenario(self):
        with self._lock:
            self.scenarios_done += 1

    @property
    def wall_seconds(self) -> float:
        return time.perf_counter() - self._start

    def get_stats(self) -> Dict[str, Any]:
        """Snapshot for run_manifest.json."""
        stats = {
            'wall_seconds': self.wall_seconds,
            'replicates_completed': self.completed,
            'replicates_failed': self.failed,
            'replicates_requested': self.total_replicates,
            'scenarios_completed': self.scenarios_done,
            'mean_replicate_seconds': self.replicate_seconds.average,
        }
        if self._process is not None:
            try:
                stats['cpu_percent'] = self._process.cpu_percent(interval=None)
                stats['memory_mb'] = self._process.memory_info().rss / (1024 * 1024)
            except psutil.Error as e:
                logger.debug(f"psutil unavailable for this process: {e}")
        return stats

    def log_stats(self):
        stats = self.get_stats()
        line = (
            f"Progress: {stats['replicates_completed']}/{stats['replicates_requested'] or '?'} replicates, "
            f"{stats['replicates_failed']} failed, "
            f"{stats['mean_replicate_seconds']:.2f}s/replicate, "
            f"wall {stats['wall_seconds']:.1f}s"
        )
        if 'memory_mb' in stats:
            line += f", CPU {stats['cpu_percent']:.1f}%, Memory {stats['memory_mb']:.1f}MB"
        logger.info(line)
