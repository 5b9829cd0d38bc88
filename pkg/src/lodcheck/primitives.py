"""Procedural stand-in assets: spheres, boxes, cylinders and fractal rocks."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh

KINDS = ("rock", "sphere", "box", "cylinder")


def _weld(vertices: np.ndarray, triangles: np.ndarray, decimals: int = 9) -> tuple[np.ndarray, np.ndarray]:
    key = np.round(vertices, decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    # keep first-occurrence order so the result does not depend on sort order
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    tris = rank[inverse.ravel()][triangles]
    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    return vertices[first[order]], tris[ok]


def icosphere(subdivisions: int = 3, radius: float = 1.0, name: str = "icosphere") -> Mesh:
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    pts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = pts[a] + pts[b]
                pts.append(m / np.linalg.norm(m))
                cache[key] = len(pts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(pts) * radius, np.array(faces), name)


def uv_sphere(rings: int = 20, segments: int = 32, radius: float = 1.0, name: str = "sphere") -> Mesh:
    verts = [(0.0, radius, 0.0)]
    for r in range(1, rings):
        phi = np.pi * r / rings
        for s in range(segments):
            th = 2 * np.pi * s / segments
            verts.append((radius * np.sin(phi) * np.cos(th), radius * np.cos(phi), radius * np.sin(phi) * np.sin(th)))
    verts.append((0.0, -radius, 0.0))
    south = len(verts) - 1
    tris = []
    for s in range(segments):
        tris.append((0, 1 + (s + 1) % segments, 1 + s))
    for r in range(rings - 2):
        base = 1 + r * segments
        for s in range(segments):
            a, b = base + s, base + (s + 1) % segments
            c, d = a + segments, b + segments
            tris += [(a, b, d), (a, d, c)]
    base = 1 + (rings - 2) * segments
    for s in range(segments):
        tris.append((south, base + s, base + (s + 1) % segments))
    return Mesh(np.array(verts), np.array(tris), name)


def box(size=(1.0, 1.0, 1.0), subdivisions: int = 10, name: str = "box") -> Mesh:
    n = subdivisions
    u = np.linspace(-1.0, 1.0, n + 1)
    verts, tris = [], []
    # (normal axis, sign); the face grid spans the two remaining axes
    for axis in range(3):
        for sign in (-1.0, 1.0):
            a1, a2 = [k for k in range(3) if k != axis]
            base = len(verts)
            for i in range(n + 1):
                for j in range(n + 1):
                    p = [0.0, 0.0, 0.0]
                    p[axis] = sign
                    p[a1] = u[i]
                    p[a2] = u[j]
                    verts.append(p)
            for i in range(n):
                for j in range(n):
                    a = base + i * (n + 1) + j
                    b, c, d = a + 1, a + n + 1, a + n + 2
                    quad = [(a, c, d), (a, d, b)]
                    if (sign > 0) != (axis == 1):
                        quad = [(a, d, c), (a, b, d)]
                    tris += quad
    v, t = _weld(np.array(verts), np.array(tris))
    return Mesh(v * 0.5 * np.asarray(size, dtype=np.float64), t, name)


def cylinder(segments: int = 32, rings: int = 12, radius: float = 0.5, height: float = 1.5, name: str = "cylinder") -> Mesh:
    verts, tris = [], []
    for r in range(rings + 1):
        y = -height / 2 + height * r / rings
        for s in range(segments):
            th = 2 * np.pi * s / segments
            verts.append((radius * np.cos(th), y, radius * np.sin(th)))
    for r in range(rings):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            tris += [(a, b + segments, b), (a, a + segments, b + segments)]
    # caps as concentric rings around a centre vertex
    for y, row, flip in ((-height / 2, 0, False), (height / 2, rings, True)):
        prev = [row * segments + s for s in range(segments)]
        for k in (2, 1):
            rr = radius * k / 3
            cur = []
            for s in range(segments):
                th = 2 * np.pi * s / segments
                verts.append((rr * np.cos(th), y, rr * np.sin(th)))
                cur.append(len(verts) - 1)
            for s in range(segments):
                a, b = prev[s], prev[(s + 1) % segments]
                c, d = cur[s], cur[(s + 1) % segments]
                pair = [(a, b, d), (a, d, c)]
                tris += [(x, z, y_) for x, y_, z in pair] if flip else pair
            prev = cur
        verts.append((0.0, y, 0.0))
        centre = len(verts) - 1
        for s in range(segments):
            tri = (centre, prev[(s + 1) % segments], prev[s])
            tris.append((tri[0], tri[2], tri[1]) if flip else tri)
    return Mesh(np.array(verts), np.array(tris), name)


def _vertex_normals(mesh: Mesh) -> np.ndarray:
    fn = mesh.face_normals()
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(vn, mesh.triangles[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(norm > 0, norm, 1.0)


def fractal_noise(points: np.ndarray, rng: np.random.Generator, octaves: int = 5, base_freq: float = 1.5, gain: float = 0.5) -> np.ndarray:
    """Sum of randomly oriented sinusoids with geometrically growing frequency."""
    out = np.zeros(len(points))
    amp, freq = 1.0, base_freq
    for _ in range(octaves):
        for _ in range(4):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            out += amp * np.sin(freq * points @ d + rng.uniform(0, 2 * np.pi)) / 4
        amp *= gain
        freq *= 2.0
    return out


def displace(mesh: Mesh, amount: float, seed: int, **noise) -> Mesh:
    rng = np.random.default_rng(seed)
    n = _vertex_normals(mesh)
    h = fractal_noise(mesh.vertices, rng, **noise)
    return Mesh(mesh.vertices + amount * h[:, None] * n, mesh.triangles, mesh.name)


def rock(seed: int = 0, subdivisions: int = 3, name: str | None = None) -> Mesh:
    rng = np.random.default_rng(seed)
    m = icosphere(subdivisions)
    scale = rng.uniform(0.7, 1.3, size=3)
    m = Mesh(m.vertices * scale, m.triangles, name or f"rock_{seed}")
    return displace(m, 0.2, seed + 1, octaves=3, base_freq=4.0, gain=0.7)


# Every kind carries relief a few facets wide, so each quality level changes
# the shaded image; a smooth or planar asset would decimate almost invisibly.
# Shape ranges keep every asset above 500 vertices, i.e. in one quality bucket.
RELIEF = dict(octaves=3, base_freq=5.0, gain=0.6)


def make_asset(kind: str, seed: int, name: str | None = None) -> Mesh:
    """One procedural asset of ``kind`` with seeded shape variation."""
    rng = np.random.default_rng(seed)
    name = name or f"{kind}_{seed}"
    if kind == "rock":
        return rock(seed, name=name)
    if kind == "sphere":
        m = uv_sphere(rings=int(rng.integers(20, 26)), segments=int(rng.integers(28, 36)), name=name)
        return displace(m, 0.2, seed + 7, **RELIEF)
    if kind == "box":
        size = rng.uniform(0.8, 1.4, size=3)
        m = box(size=size, subdivisions=int(rng.integers(10, 13)), name=name)
        return displace(m, 0.18, seed + 11, **RELIEF)
    if kind == "cylinder":
        m = cylinder(segments=int(rng.integers(32, 40)), rings=int(rng.integers(14, 18)),
                     radius=float(rng.uniform(0.4, 0.6)), height=float(rng.uniform(1.2, 1.8)), name=name)
        return displace(m, 0.18, seed + 13, **RELIEF)
    raise ValueError(f"unknown asset kind {kind!r}; expected one of {KINDS}")


def demo_assets(count: int = 20, seed: int = 0, kinds=KINDS) -> list[Mesh]:
    """``count`` assets cycling through ``kinds``; names are ``<kind>_<index>``."""
    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        out.append(make_asset(kind, seed * 1000 + i, name=f"{kind}_{i:02d}").validate())
    return out
