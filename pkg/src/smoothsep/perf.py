"""Process-level performance knobs for the experiment entry points.

The training graph allocates and frees many MB-sized buffers per step;
with glibc's default dynamic mmap threshold those round-trip through
mmap/munmap and roughly double the step time.  Raising the threshold
keeps them on the heap.  BLAS thread pools likewise lose to their own
synchronization overhead on the small matmuls this workload produces,
so experiment drivers pin them to one thread (parallelism comes from
running experiment variants in separate processes).
"""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_process(blas_threads: int | None = 1,
                 heap_threshold: int = 128 * 1024 * 1024) -> None:
    """Apply allocator and BLAS-thread settings; safe no-op elsewhere."""
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, heap_threshold)
        libc.mallopt(_M_TRIM_THRESHOLD, heap_threshold)
    except (OSError, AttributeError):
        pass
    if blas_threads:
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(blas_threads)
        except Exception:
            pass


def worker_env(base: dict | None = None) -> dict:
    """Environment for spawning single-threaded experiment workers."""
    import os
    env = dict(base if base is not None else os.environ)
    env.update({
        "OPENBLAS_NUM_THREADS": "1",
        "OMP_NUM_THREADS": "1",
        "MKL_NUM_THREADS": "1",
        "MALLOC_MMAP_THRESHOLD_": str(128 * 1024 * 1024),
        "MALLOC_TRIM_THRESHOLD_": str(128 * 1024 * 1024),
    })
    return env
