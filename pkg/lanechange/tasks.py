"""
Worker pool for per-scenario work.

Scenarios are independent, so commands fan them out over a thread pool;
numpy, scipy and jax release the GIL in their kernels. Results always
come back in input order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor

logger = logging.getLogger(__name__)


def run_parallel(func, items, jobs=1):
    """Map ``func`` over ``items`` with up to ``jobs`` workers"""
    items = list(items)
    jobs = int(jobs or 1)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug('Running %d tasks on %d workers', len(items), jobs)
    with ThreadPoolExecutor(max_workers=min(jobs, len(items))) as executor:
        return list(executor.map(func, items))
