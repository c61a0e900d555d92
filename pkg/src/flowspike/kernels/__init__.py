"""Hot scatter/gather kernels.

Two interchangeable implementations live side by side: ``numpy_impl`` (pure
numpy, always available) and ``numba_impl`` (``@njit`` loops). The active set
is chosen once at import: numba when it imports cleanly, unless the
environment variable ``FLOWSPIKE_NUMBA`` is set to ``0``.
"""
import os

from flowspike.kernels import _numpy as numpy_impl

try:
    from flowspike.kernels import _numba as numba_impl
except ImportError:  # numba missing or broken
    numba_impl = None

KERNEL_NAMES = ("count_accumulate", "voxel_accumulate", "splat_forward", "splat_backward", "col2im")


def _wanted():
    flag = os.environ.get("FLOWSPIKE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


USE_NUMBA = numba_impl is not None and _wanted()
active = numba_impl if USE_NUMBA else numpy_impl
backend_name = "numba" if USE_NUMBA else "numpy"


def count_accumulate(xs, ys, ps, out):
    return active.count_accumulate(xs, ys, ps, out)


def voxel_accumulate(xs, ys, taus, ps, out):
    return active.voxel_accumulate(xs, ys, taus, ps, out)


def splat_forward(wx, wy, taus, pol, height, width, dtype):
    return active.splat_forward(wx, wy, taus, pol, height, width, dtype)


def splat_backward(wx, wy, taus, pol, gacc):
    return active.splat_backward(wx, wy, taus, pol, gacc)


def col2im(dcols, out):
    return active.col2im(dcols, out)
