# cython: language_level=3
"""Compiled z-buffer triangle fill. Mirrors ``_raster_py.rasterize`` bit for bit."""
import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor

cnp.import_array()


def rasterize(const double[:, :, ::1] xy, const double[:, ::1] inv_depth, int width, int height):
    cdef Py_ssize_t ntri = xy.shape[0]
    ids_arr = np.full((height, width), -1, dtype=np.int32)
    depth_arr = np.zeros((height, width), dtype=np.float64)
    cdef int[:, ::1] ids = ids_arr
    cdef double[:, ::1] depth = depth_arr
    cdef Py_ssize_t t
    cdef int px, py, x_lo, x_hi, y_lo, y_hi
    cdef double x0, y0, x1, y1, x2, y2, w0, w1, w2, area
    cdef double lo, hi, cx, cy, e0, e1, e2, b0, b1, b2, wz
    for t in range(ntri):
        x0 = xy[t, 0, 0]; y0 = xy[t, 0, 1]
        x1 = xy[t, 1, 0]; y1 = xy[t, 1, 1]
        x2 = xy[t, 2, 0]; y2 = xy[t, 2, 1]
        area = (x2 - x0) * (y1 - y0) - (y2 - y0) * (x1 - x0)
        if area == 0.0:
            continue
        lo = ceil(min(x0, min(x1, x2)) - 0.5)
        hi = floor(max(x0, max(x1, x2)) - 0.5)
        if lo < 0.0:
            lo = 0.0
        if hi > width - 1.0:
            hi = width - 1.0
        if hi < lo:
            continue
        x_lo = <int>lo
        x_hi = <int>hi
        lo = ceil(min(y0, min(y1, y2)) - 0.5)
        hi = floor(max(y0, max(y1, y2)) - 0.5)
        if lo < 0.0:
            lo = 0.0
        if hi > height - 1.0:
            hi = height - 1.0
        if hi < lo:
            continue
        y_lo = <int>lo
        y_hi = <int>hi
        w0 = inv_depth[t, 0]; w1 = inv_depth[t, 1]; w2 = inv_depth[t, 2]
        for py in range(y_lo, y_hi + 1):
            cy = py + 0.5
            for px in range(x_lo, x_hi + 1):
                cx = px + 0.5
                e0 = (cx - x1) * (y2 - y1) - (cy - y1) * (x2 - x1)
                e1 = (cx - x2) * (y0 - y2) - (cy - y2) * (x0 - x2)
                e2 = (cx - x0) * (y1 - y0) - (cy - y0) * (x1 - x0)
                b0 = e0 / area
                b1 = e1 / area
                b2 = e2 / area
                if b0 < 0.0 or b1 < 0.0 or b2 < 0.0:
                    continue
                wz = b0 * w0 + b1 * w1 + b2 * w2
                if wz > depth[py, px]:
                    depth[py, px] = wz
                    ids[py, px] = <int>t
    return ids_arr, depth_arr
