"""
Thread configuration for the numba kernels.

Unlike the blocked numpy code, which follows whatever BLAS
threading is configured in the environment, numba kernels
use numba's own thread pool. set_threads() sets its size
from the command line.
"""

import logging
import os

logger = logging.getLogger(__name__)


def set_threads(n_threads=None):
    """
    Set the number of numba threads.

    Parameters:
    -----------

    n_threads: int or None
        Requested number of threads. None keeps numba's
        default (NUMBA_NUM_THREADS or the number of cores).

    Returns:
    --------

    n: int
        The number of threads numba will use, or 1 if the
        threading API is unavailable.
    """
    try:
        from numba import get_num_threads, set_num_threads
    except ImportError:
        logger.warning(('numba get_num_threads() and '
                        'set_num_threads() are unavailable; '
                        'running single-threaded kernels.'))
        return 1

    if n_threads is not None:
        import numba
        n_max = numba.config.NUMBA_NUM_THREADS
        if n_threads > n_max:
            logger.warning('requested %d threads, numba allows %d',
                           n_threads, n_max)
            n_threads = n_max
        set_num_threads(max(1, int(n_threads)))
    n = get_num_threads()
    logger.debug('NUMBA_NUM_THREADS: %d (OMP_NUM_THREADS=%s)', n,
                 os.environ.get('OMP_NUM_THREADS'))
    return n
