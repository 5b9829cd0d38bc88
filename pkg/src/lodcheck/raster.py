"""Triangle z-buffer kernel, compiled when available.

``rasterize(xy, inv_depth, width, height)`` takes screen-space triangle
corners ``(T, 3, 2)`` (pixel units, pixel centres at +0.5) and per-corner
inverse depth ``(T, 3)``; it returns the id of the nearest triangle per pixel
(``-1`` for background) and the winning inverse depth. The compiled and
numpy kernels produce identical buffers.

Set ``LODCHECK_PURE_PYTHON=1`` to force the numpy kernel.
"""
from __future__ import annotations

import os

from . import _raster_py

python_rasterize = _raster_py.rasterize

try:
    if os.environ.get("LODCHECK_PURE_PYTHON"):
        raise ImportError("compiled kernel disabled by LODCHECK_PURE_PYTHON")
    from ._raster import rasterize as compiled_rasterize
except ImportError:
    compiled_rasterize = None

if compiled_rasterize is not None:
    BACKEND = "cython"
    rasterize = compiled_rasterize
else:
    BACKEND = "python"
    rasterize = python_rasterize


def backends() -> dict:
    out = {"python": python_rasterize}
    if compiled_rasterize is not None:
        out["cython"] = compiled_rasterize
    return out
