"""Vectorised numpy z-buffer fill, the fallback for the compiled kernel.

Every (triangle, pixel) candidate inside a triangle's bounding box is tested
at once; the z-test is resolved by sorting, which reproduces the sequential
"first strictly nearer triangle wins" rule of the compiled loop.
"""
from __future__ import annotations

import numpy as np

#: Upper bound on (triangle, pixel) candidates materialised at once.
CHUNK = 1 << 21


def rasterize(xy: np.ndarray, inv_depth: np.ndarray, width: int, height: int):
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    inv_depth = np.ascontiguousarray(inv_depth, dtype=np.float64)
    ids = np.full((height, width), -1, dtype=np.int32)
    depth = np.zeros((height, width), dtype=np.float64)
    if len(xy) == 0:
        return ids, depth
    x0, x1, x2 = xy[:, 0, 0], xy[:, 1, 0], xy[:, 2, 0]
    y0, y1, y2 = xy[:, 0, 1], xy[:, 1, 1], xy[:, 2, 1]
    area = (x2 - x0) * (y1 - y0) - (y2 - y0) * (x1 - x0)
    x_lo = np.maximum(np.ceil(np.minimum(x0, np.minimum(x1, x2)) - 0.5), 0.0)
    x_hi = np.minimum(np.floor(np.maximum(x0, np.maximum(x1, x2)) - 0.5), width - 1.0)
    y_lo = np.maximum(np.ceil(np.minimum(y0, np.minimum(y1, y2)) - 0.5), 0.0)
    y_hi = np.minimum(np.floor(np.maximum(y0, np.maximum(y1, y2)) - 0.5), height - 1.0)
    valid = (area != 0.0) & (x_hi >= x_lo) & (y_hi >= y_lo)
    tris = np.nonzero(valid)[0]
    if len(tris) == 0:
        return ids, depth
    nx = (x_hi[tris] - x_lo[tris] + 1).astype(np.int64)
    ny = (y_hi[tris] - y_lo[tris] + 1).astype(np.int64)
    counts = nx * ny

    pix_parts, w_parts, t_parts = [], [], []
    start = 0
    ends = np.cumsum(counts)
    while start < len(tris):
        base = ends[start - 1] if start else 0
        stop = int(np.searchsorted(ends, base + CHUNK, side="right"))
        stop = max(stop, start + 1)
        sel = np.arange(start, stop)
        cnt = counts[sel]
        total = int(cnt.sum())
        t_local = np.repeat(sel, cnt)
        offsets = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        t = tris[t_local]
        px = x_lo[t] + (offsets % nx[t_local])
        py = y_lo[t] + (offsets // nx[t_local])
        cx = px + 0.5
        cy = py + 0.5
        e0 = (cx - x1[t]) * (y2[t] - y1[t]) - (cy - y1[t]) * (x2[t] - x1[t])
        e1 = (cx - x2[t]) * (y0[t] - y2[t]) - (cy - y2[t]) * (x0[t] - x2[t])
        e2 = (cx - x0[t]) * (y1[t] - y0[t]) - (cy - y0[t]) * (x1[t] - x0[t])
        a = area[t]
        b0 = e0 / a
        b1 = e1 / a
        b2 = e2 / a
        inside = (b0 >= 0.0) & (b1 >= 0.0) & (b2 >= 0.0)
        wz = b0 * inv_depth[t, 0] + b1 * inv_depth[t, 1] + b2 * inv_depth[t, 2]
        inside &= wz > 0.0
        pix_parts.append((py[inside] * width + px[inside]).astype(np.int64))
        w_parts.append(wz[inside])
        t_parts.append(t[inside])
        start = stop

    pix = np.concatenate(pix_parts)
    wz = np.concatenate(w_parts)
    tri = np.concatenate(t_parts)
    if len(pix) == 0:
        return ids, depth
    order = np.lexsort((tri, -wz, pix))
    pix, wz, tri = pix[order], wz[order], tri[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    ids.ravel()[pix[first]] = tri[first]
    depth.ravel()[pix[first]] = wz[first]
    return ids, depth
