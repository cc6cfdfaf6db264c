"""Backend selection for the numeric inner loops.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy versions in ``_fallback`` stand in. Setting ``MULTIFUTURE_PURE_PYTHON=1``
forces the fallback.
"""
import os

from . import _fallback

if os.environ.get("MULTIFUTURE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "cython" if _impl is not _fallback else "python"

bin_indices = _impl.bin_indices
accumulate_heat = _impl.accumulate_heat
displacement_errors = _impl.displacement_errors
pair_min_distance = _impl.pair_min_distance
neighbour_offsets = _fallback.neighbour_offsets


def backends():
    """Both implementations keyed by name, for parity tests and benchmarks."""
    out = {"python": _fallback}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
