"""Thread-count control for the BLAS pool.

``FLOWSPIKE_THREADS`` overrides whatever count a caller asks for. The numba
kernels are serial, so only BLAS needs capping.
"""
import contextlib
import os

from threadpoolctl import threadpool_limits


def configured_threads(requested=None):
    env = os.environ.get("FLOWSPIKE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    if requested is None:
        return None
    return max(1, int(requested))


@contextlib.contextmanager
def thread_limit(n=None):
    """Cap BLAS thread pools for the duration of the block (no-op when ``n`` is None)."""
    n = configured_threads(n)
    if n is None:
        yield
        return
    with threadpool_limits(limits=n):
        yield
