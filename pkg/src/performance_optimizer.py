import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Callable, Dict, List, Optional, Sequence

from tqdm import tqdm

logger = logging.getLogger(__name__)


class PerformanceOptimizer:
    """Thread-pool fan-out and process statistics for pipeline stages."""

    def __init__(self, progress: bool = True):
        self.progress = progress
        self.total_processing_time = 0.0

    def parallel_map(self, func: Callable[[Any], Any], items: Sequence[Any],
                     max_workers: int = 4, desc: str = "Processing") -> List[Dict[str, Any]]:
        """
        Apply func to every item in parallel and collect per-item outcomes.

        Args:
            func: Callable applied to each item
            items: Input items
            max_workers: Thread count; 1 or less runs inline
            desc: Progress bar label

        Returns:
            One dict per item, in input order: {'item', 'result', 'success'} plus
            'error' (the exception) when the call raised.
        """
        start = time.perf_counter()
        outcomes: List[Optional[Dict[str, Any]]] = [None] * len(items)
        progress_bar = tqdm(total=len(items), desc=desc, disable=not self.progress, leave=False)

        if max_workers <= 1 or len(items) <= 1:
            for index, item in enumerate(items):
                outcomes[index] = self._execute(func, item)
                progress_bar.update(1)
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as executor:
                future_to_index = {executor.submit(func, item): index for index, item in enumerate(items)}

                # Collect results as they complete
                for future in as_completed(future_to_index):
                    index = future_to_index[future]
                    try:
                        outcomes[index] = {'item': items[index], 'result': future.result(), 'success': True}
                    except Exception as e:
                        logger.debug(f"{desc}: item {index} failed: {e}")
                        outcomes[index] = {'item': items[index], 'result': None, 'success': False, 'error': e}
                    progress_bar.update(1)

        progress_bar.close()
        elapsed = time.perf_counter() - start
        self.total_processing_time += elapsed
        failures = sum(1 for outcome in outcomes if not outcome['success'])
        logger.debug(f"{desc}: {len(items)} items in {elapsed:.2f}s ({failures} failed)")
        return outcomes

    @staticmethod
    def _execute(func: Callable[[Any], Any], item: Any) -> Dict[str, Any]:
        try:
            return {'item': item, 'result': func(item), 'success': True}
        except Exception as e:
            return {'item': item, 'result': None, 'success': False, 'error': e}

    def get_performance_metrics(self) -> Dict[str, Any]:
        """Get current process metrics."""
        try:
            import psutil

            process = psutil.Process(os.getpid())
            memory_mb = process.memory_info().rss / 1024 / 1024
            return {
                'memory_mb': round(memory_mb, 1),
                'total_processing_time': round(self.total_processing_time, 3),
            }
        except ImportError:
            # Fallback if psutil is not available
            return {'memory_mb': 0.0, 'total_processing_time': round(self.total_processing_time, 3)}
        except Exception as e:
            logger.error(f"Error getting performance metrics: {e}")
            return {'memory_mb': 0.0, 'total_processing_time': round(self.total_processing_time, 3)}


# Global performance optimizer instance
performance_optimizer = PerformanceOptimizer()
