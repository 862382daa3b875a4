import os
import threading
from concurrent.futures import ThreadPoolExecutor

_lock = threading.Lock()
_max_threads = None


def set_max_threads(n):
    """Cap operator parallelism; None restores the default (all cores)"""
    global _max_threads
    with _lock:
        _max_threads = None if n is None else max(1, int(n))


def max_threads():
    with _lock:
        if _max_threads is not None:
            return _max_threads
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Map `fn` over `items` on a thread pool, results in input order"""
    items = list(items)
    workers = min(max_threads(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
