"""Kernel backend selection.

``THERMOFLOW_NUMBA=0`` forces the pure-numpy fallback; anything else
(or unset) uses the numba-jitted kernels when numba imports cleanly.
Both implementations stay importable so ``benchmarks/bench_kernels.py``
can time them side by side.
"""

import os

from . import numpy_impl

_WANT_NUMBA = os.environ.get("THERMOFLOW_NUMBA", "1").lower() not in {"0", "false", "no"}

if _WANT_NUMBA:
    try:
        from . import numba_impl as _active
    except ImportError:
        _active = numpy_impl
else:
    _active = numpy_impl

BACKEND = _active.NAME

shift_gather = _active.shift_gather
shift_scatter_add = _active.shift_scatter_add
layernorm_forward = _active.layernorm_forward
layernorm_backward = _active.layernorm_backward
adamw_update = _active.adamw_update
bilinear_resize = _active.bilinear_resize
separable_filter_valid = _active.separable_filter_valid

KERNEL_NAMES = (
    "shift_gather",
    "shift_scatter_add",
    "layernorm_forward",
    "layernorm_backward",
    "adamw_update",
    "bilinear_resize",
    "separable_filter_valid",
)


def implementations():
    """Return {backend name: module} for every importable implementation."""
    impls = {numpy_impl.NAME: numpy_impl}
    try:
        from . import numba_impl

        impls[numba_impl.NAME] = numba_impl
    except ImportError:
        pass
    return impls
