"""Central numba import point.

NUMBA_NUM_THREADS must be raised before numba is first imported, otherwise
worker counts above the machine's core count are rejected outright.  Every
module in this package imports numba through here.
"""

import os

os.environ.setdefault("NUMBA_NUM_THREADS", "16")

from numba import njit, prange, set_num_threads, get_num_threads  # noqa: E402
from numba import config as _nb_config  # noqa: E402

MAX_WORKERS = int(_nb_config.NUMBA_NUM_THREADS)


def set_workers(n):
    """Clamp n to the allowed range and make it the active thread count."""
    n = max(1, min(int(n), MAX_WORKERS))
    set_num_threads(n)
    return n


__all__ = ["njit", "prange", "set_num_threads", "get_num_threads",
           "set_workers", "MAX_WORKERS"]
