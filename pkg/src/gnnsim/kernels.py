"""Hot-kernel backend selection.

Set GNNSIM_KERNELS=numpy to force the pure-numpy path, GNNSIM_KERNELS=numba
to require the compiled path (ImportError if numba is unavailable).  The
default "auto" prefers numba and falls back to numpy.  Both backends return
bit-identical results; benchmarks/bench_kernels.py compares their speed.
"""
from __future__ import annotations

import os

from .rng import MASK64

_choice = os.environ.get("GNNSIM_KERNELS", "auto").lower()

if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(f"GNNSIM_KERNELS must be auto|numba|numpy, got {_choice!r}")

if _choice == "numpy":
    from . import _kernels_np as _impl
else:
    try:
        from . import _kernels_nb as _impl
    except ImportError:
        if _choice == "numba":
            raise
        from . import _kernels_np as _impl

BACKEND = "numba" if _impl.__name__.endswith("_nb") else "numpy"

sbm_edges = _impl.sbm_edges
sample_frontier = _impl.sample_frontier
pick_k_smallest = _impl.pick_k_smallest
feature_rows = _impl.feature_rows


def probability_threshold(p: float) -> tuple[int, int]:
    """Encode an acceptance probability as (mode, threshold).

    mode 0 never accepts, 2 always accepts, 1 accepts iff hash < threshold.
    The endpoints get exact modes so p=0 and p=1 are structural, not
    astronomically-unlikely-to-fail.
    """
    if p <= 0.0:
        return 0, 0
    if p >= 1.0:
        return 2, 0
    return 1, min(int(p * 2.0**64), MASK64)
