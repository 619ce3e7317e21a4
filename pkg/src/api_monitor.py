import itertools
import logging
import threading
import time
from typing import Dict

logger = logging.getLogger(__name__)


class RequestMonitor:
    """Request lifecycle logging plus per-endpoint counters for remote calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._started: Dict[str, float] = {}
        self._endpoints: Dict[str, str] = {}
        self.stats: Dict[str, Dict[str, float]] = {}

    def _endpoint_stats(self, endpoint: str) -> Dict[str, float]:
        return self.stats.setdefault(endpoint, {
            'requests': 0,
            'failures': 0,
            'retries': 0,
            'total_latency_seconds': 0.0,
        })

    def start_request(self, method: str, endpoint: str) -> str:
        """Start monitoring a request; returns its id."""
        with self._lock:
            request_id = f"req_{next(self._ids)}"
            self._started[request_id] = time.perf_counter()
            self._endpoints[request_id] = endpoint
            self._endpoint_stats(endpoint)['requests'] += 1
        logger.debug(f"Request Monitor: Started {method} {endpoint} {request_id}")
        return request_id

    def record_retry(self, request_id: str, attempt: int, reason: str):
        with self._lock:
            endpoint = self._endpoints.get(request_id, 'unknown')
            self._endpoint_stats(endpoint)['retries'] += 1
        logger.warning(f"Request Monitor: {request_id} retry {attempt} after: {reason}")

    def update_status(self, request_id: str, status: str, error_message: str = ""):
        """Close a request with a final status ('success' or 'error')."""
        with self._lock:
            started = self._started.pop(request_id, None)
            endpoint = self._endpoints.pop(request_id, 'unknown')
            stats = self._endpoint_stats(endpoint)
            duration = time.perf_counter() - started if started is not None else 0.0
            stats['total_latency_seconds'] += duration
            if status != 'success':
                stats['failures'] += 1

        logger.debug(f"Request Monitor: {request_id} -> {status} ({duration:.3f}s)")
        if error_message:
            logger.error(f"Request Monitor: {request_id} error: {error_message}")

    def snapshot(self) -> Dict[str, Dict[str, float]]:
        with self._lock:
            return {endpoint: dict(values) for endpoint, values in self.stats.items()}

    def clear_history(self):
        with self._lock:
            self._started.clear()
            self._endpoints.clear()
            self.stats.clear()


# Global instance
request_monitor = RequestMonitor()
