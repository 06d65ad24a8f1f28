"""Hot inner loops with a compiled backend and a numpy fallback.

The Cython extension ``_ckernels`` is used when it has been built; otherwise
the numpy implementation in ``_fallback`` is selected at import time.  Set
``DEEPSNAKE_KERNELS=python`` to force the fallback.
"""

import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if os.environ.get("DEEPSNAKE_KERNELS", "").lower() in ("python", "numpy", "fallback"):
    BACKEND = "python"
else:
    BACKEND = "cython" if _ckernels is not None else "python"

_impl = BACKENDS[BACKEND]

circ_gather = _impl.circ_gather
circ_scatter = _impl.circ_scatter
bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter
rasterize = _impl.rasterize
boundary_distance = _impl.boundary_distance

__all__ = [
    "BACKEND",
    "BACKENDS",
    "circ_gather",
    "circ_scatter",
    "bilinear_gather",
    "bilinear_scatter",
    "rasterize",
    "boundary_distance",
]
