"""Triangle meshes, quality-level policy and quadric-error decimation."""
from __future__ import annotations

import heapq
import json
import logging
import math
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

#: Collapses whose optimal 3x3 system has a row-scaled determinant below this
#: fall back to the best of the edge endpoints and midpoint.
SINGULAR_DET = 1e-12


class MeshError(ValueError):
    """Raised for malformed mesh files or meshes that violate invariants."""


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def vertex_count(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def triangle_count(self) -> int:
        return int(self.triangles.shape[0])

    def validate(self) -> "Mesh":
        """Check the mesh invariants and return ``self``."""
        if self.vertex_count < 3:
            raise MeshError(f"{self.name}: need at least 3 vertices, got {self.vertex_count}")
        if self.triangle_count < 1:
            raise MeshError(f"{self.name}: mesh has no triangles")
        t = self.triangles
        if t.min() < 0 or t.max() >= self.vertex_count:
            raise MeshError(f"{self.name}: triangle index out of range")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError(f"{self.name}: triangle references the same vertex twice")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError(f"{self.name}: non-finite vertex position")
        return self

    def face_normals(self) -> np.ndarray:
        """Unnormalised face normals (length = twice the triangle area)."""
        p = self.vertices[self.triangles]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def center(self) -> np.ndarray:
        lo, hi = self.bounds()
        return 0.5 * (lo + hi)

    def copy(self, name: str | None = None) -> "Mesh":
        return Mesh(self.vertices.copy(), self.triangles.copy(), name or self.name)

    def compact(self) -> "Mesh":
        """Drop unreferenced vertices, keeping the original relative order."""
        used = np.zeros(self.vertex_count, dtype=bool)
        used[self.triangles.ravel()] = True
        remap = np.cumsum(used) - 1
        return Mesh(self.vertices[used], remap[self.triangles], self.name)


# ---------------------------------------------------------------------------
# Wavefront OBJ


def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    raw = token.split("/")[0]
    try:
        idx = int(raw)
    except ValueError:
        raise MeshError(f"line {lineno}: bad face index {token!r}") from None
    if idx == 0:
        raise MeshError(f"line {lineno}: OBJ indices are 1-based, got 0")
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if not 0 <= idx < n_vertices:
        raise MeshError(f"line {lineno}: face index {token!r} out of range")
    return idx


def parse_obj(text: str, name: str = "mesh") -> Mesh:
    verts: list[tuple[float, float, float]] = []
    tris: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError:
                raise MeshError(f"line {lineno}: bad vertex coordinate") from None
        elif tag == "f":
            if len(parts) < 4:
                raise MeshError(f"line {lineno}: face needs at least 3 indices")
            idx = [_parse_index(tok, len(verts), lineno) for tok in parts[1:]]
            # fan triangulation, skipping corners that repeat a vertex
            for k in range(1, len(idx) - 1):
                tri = (idx[0], idx[k], idx[k + 1])
                if len(set(tri)) == 3:
                    tris.append(tri)
    if not verts:
        raise MeshError("OBJ file has no vertices")
    if not tris:
        raise MeshError("OBJ file has no faces")
    return Mesh(np.array(verts), np.array(tris), name).validate()


def load_mesh(path: str | os.PathLike) -> Mesh:
    """Read a Wavefront OBJ file. Polygons are fan-triangulated."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    name = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return parse_obj(text, name)


def format_obj(mesh: Mesh) -> str:
    lines = [f"# {mesh.name}: {mesh.vertex_count} vertices, {mesh.triangle_count} triangles"]
    lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices)
    normals = mesh.face_normals()
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
    lines.extend(f"vn {x:.6f} {y:.6f} {z:.6f}" for x, y, z in normals)
    for k, (a, b, c) in enumerate(mesh.triangles, 1):
        lines.append(f"f {a + 1}//{k} {b + 1}//{k} {c + 1}//{k}")
    return "\n".join(lines) + "\n"


def save_mesh(mesh: Mesh, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_obj(mesh))


# ---------------------------------------------------------------------------
# Quality levels

DEFAULT_BUCKETS = (100, 300, 500)
# rows: quality level 1..6; columns: <100, <300, <500, >=500 original vertices
DEFAULT_RATIOS = (
    (0.98, 0.9, 0.9, 0.5),
    (0.92, 0.81, 0.72, 0.25),
    (0.87, 0.73, 0.5, 0.13),
    (0.81, 0.58, 0.3, 0.075),
    (0.76, 0.47, 0.15, 0.045),
    (0.7, 0.37, 0.075, 0.027),
)
QUALITY_LEVELS = (1, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class QualityPolicy:
    """Retained-vertex fractions per quality level, bucketed by original size."""

    buckets: tuple[int, ...] = DEFAULT_BUCKETS
    ratios: tuple[tuple[float, ...], ...] = DEFAULT_RATIOS

    def __post_init__(self):
        buckets = tuple(int(b) for b in self.buckets)
        ratios = tuple(tuple(float(r) for r in row) for row in self.ratios)
        object.__setattr__(self, "buckets", buckets)
        object.__setattr__(self, "ratios", ratios)
        if list(buckets) != sorted(set(buckets)):
            raise ValueError("bucket thresholds must be strictly increasing")
        if len(ratios) != len(QUALITY_LEVELS):
            raise ValueError("need one ratio row per quality level")
        ncol = len(buckets) + 1
        for row in ratios:
            if len(row) != ncol:
                raise ValueError(f"each ratio row needs {ncol} columns")
            if not all(0.0 < r <= 1.0 for r in row):
                raise ValueError("ratios must lie in (0, 1]")
        for col in range(ncol):
            column = [row[col] for row in ratios]
            if any(b >= a for a, b in zip(column, column[1:])):
                raise ValueError(f"column {col} must strictly decrease with level")

    def bucket(self, count: int) -> int:
        for i, threshold in enumerate(self.buckets):
            if count < threshold:
                return i
        return len(self.buckets)

    def ratio(self, count: int, level: int) -> float:
        if level not in QUALITY_LEVELS:
            raise ValueError(f"quality level must be in 1..6, got {level}")
        return self.ratios[level - 1][self.bucket(count)]

    def to_dict(self) -> dict:
        return {"buckets": list(self.buckets), "ratios": [list(r) for r in self.ratios]}

    @classmethod
    def from_dict(cls, data: dict) -> "QualityPolicy":
        return cls(tuple(data["buckets"]), tuple(tuple(r) for r in data["ratios"]))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "QualityPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_POLICY = QualityPolicy()


def target_vertex_count(original_count: int, level: int, policy: QualityPolicy = DEFAULT_POLICY) -> int:
    """Vertex budget for ``level``: ``round(count * ratio)``, halves rounded up, at least 3.

    The product is evaluated in decimal so ``5500 * 0.075`` is exactly 412.5.
    """
    if original_count < 3:
        raise ValueError(f"original count must be >= 3, got {original_count}")
    ratio = policy.ratio(original_count, level)
    exact = Decimal(original_count) * Decimal(repr(ratio))
    return max(3, int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP)))


# ---------------------------------------------------------------------------
# Quadrics
#
# A symmetric 4x4 quadric is kept as its 10 upper-triangle entries
# (a2, ab, ac, ad, b2, bc, bd, c2, cd, d2) in plain floats; the decimator
# evaluates millions of these and numpy's per-call overhead dominates at 4x4.


@dataclass
class Quadric:
    q: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))

    @classmethod
    def from_plane(cls, a: float, b: float, c: float, d: float, weight: float = 1.0) -> "Quadric":
        p = np.array([a, b, c, d], dtype=np.float64)
        return cls(weight * np.outer(p, p))

    @classmethod
    def from_packed(cls, packed: Sequence[float]) -> "Quadric":
        return cls(_unpack(packed))

    def packed(self) -> list[float]:
        q = self.q
        return [q[0, 0], q[0, 1], q[0, 2], q[0, 3], q[1, 1], q[1, 2], q[1, 3], q[2, 2], q[2, 3], q[3, 3]]

    def __add__(self, other: "Quadric") -> "Quadric":
        return Quadric(self.q + other.q)

    def error(self, point: Sequence[float]) -> float:
        v = np.array([point[0], point[1], point[2], 1.0])
        return float(v @ self.q @ v)


def _unpack(p: Sequence[float]) -> np.ndarray:
    return np.array(
        [
            [p[0], p[1], p[2], p[3]],
            [p[1], p[4], p[5], p[6]],
            [p[2], p[5], p[7], p[8]],
            [p[3], p[6], p[8], p[9]],
        ],
        dtype=np.float64,
    )


def _plane_packed(n: Sequence[float], d: float, w: float) -> list[float]:
    a, b, c = n
    return [
        w * a * a, w * a * b, w * a * c, w * a * d,
        w * b * b, w * b * c, w * b * d,
        w * c * c, w * c * d,
        w * d * d,
    ]


def _add_into(acc: list[float], other: Sequence[float]) -> None:
    for k in range(10):
        acc[k] += other[k]


def _quadric_error(p: Sequence[float], x: float, y: float, z: float) -> float:
    return (
        p[0] * x * x + 2.0 * p[1] * x * y + 2.0 * p[2] * x * z + 2.0 * p[3] * x
        + p[4] * y * y + 2.0 * p[5] * y * z + 2.0 * p[6] * y
        + p[7] * z * z + 2.0 * p[8] * z
        + p[9]
    )


def _face_plane(pa, pb, pc):
    """Unit normal, offset and area of a triangle, or None when degenerate."""
    ux, uy, uz = pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]
    vx, vy, vz = pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]
    nx, ny, nz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
    length = math.sqrt(nx * nx + ny * ny + nz * nz)
    if length == 0.0:
        return None
    n = (nx / length, ny / length, nz / length)
    d = -(n[0] * pa[0] + n[1] * pa[1] + n[2] * pa[2])
    return n, d, 0.5 * length


def quadric_of_vertex(mesh: Mesh, vertex: int, area_weighted: bool = True) -> Quadric:
    """Sum of incident face-plane quadrics. An isolated vertex gets the zero quadric."""
    if not 0 <= vertex < mesh.vertex_count:
        raise IndexError(f"vertex {vertex} out of range")
    acc = [0.0] * 10
    rows = np.nonzero(np.any(mesh.triangles == vertex, axis=1))[0]
    for f in rows:
        a, b, c = mesh.triangles[f]
        plane = _face_plane(mesh.vertices[a], mesh.vertices[b], mesh.vertices[c])
        if plane is None:
            continue
        n, d, area = plane
        _add_into(acc, _plane_packed(n, d, area if area_weighted else 1.0))
    return Quadric.from_packed(acc)


def _solve_optimum(p: Sequence[float]):
    """Minimiser of a packed quadric, or None when the 3x3 block is singular."""
    rows = [
        [p[0], p[1], p[2], -p[3]],
        [p[1], p[4], p[5], -p[6]],
        [p[2], p[5], p[7], -p[8]],
    ]
    for r in rows:
        s = max(abs(r[0]), abs(r[1]), abs(r[2]))
        if s == 0.0:
            return None
        r[0] /= s
        r[1] /= s
        r[2] /= s
        r[3] /= s
    (a, b, c, r0), (d, e, f, r1), (g, h, i, r2) = rows
    co0 = e * i - f * h
    co1 = f * g - d * i
    co2 = d * h - e * g
    det = a * co0 + b * co1 + c * co2
    if abs(det) <= SINGULAR_DET:
        return None
    x = (r0 * co0 + b * (f * r2 - r1 * i) + c * (r1 * h - e * r2)) / det
    y = (a * (r1 * i - f * r2) + r0 * co1 + c * (d * r2 - r1 * g)) / det
    z = (a * (e * r2 - r1 * h) + b * (r1 * g - d * r2) + r0 * co2) / det
    return x, y, z


def _collapse_target(p: Sequence[float], a: Sequence[float], b: Sequence[float]):
    opt = _solve_optimum(p)
    if opt is not None:
        return opt, max(0.0, _quadric_error(p, *opt))
    mid = (0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2]))
    best = None
    for cand in ((a[0], a[1], a[2]), (b[0], b[1], b[2]), mid):
        cost = _quadric_error(p, *cand)
        if best is None or cost < best[1]:
            best = (cand, cost)
    return best[0], max(0.0, best[1])


def optimal_collapse_position(q: Quadric, a: Sequence[float], b: Sequence[float]) -> tuple[np.ndarray, float]:
    """Position minimising ``v^T q v`` for the collapse of edge ``(a, b)`` and its cost.

    Falls back to the cheapest of ``a``, ``b`` and their midpoint when the
    quadric cannot be inverted.
    """
    qm = np.asarray(q.q, dtype=np.float64)
    if not np.allclose(qm, qm.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(qm).max()))):
        raise ValueError("quadric must be symmetric")
    pos, cost = _collapse_target(q.packed(), [float(x) for x in a], [float(x) for x in b])
    return np.array(pos, dtype=np.float64), float(cost)


# ---------------------------------------------------------------------------
# Decimation


@dataclass
class DecimationStats:
    original_vertices: int = 0
    target_vertices: int = 0
    achieved_vertices: int = 0
    collapses: int = 0
    rejected_flips: int = 0
    rejected_topology: int = 0


def _cross(u, v):
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


def _tri_normal(pa, pb, pc):
    return _cross(
        (pb[0] - pa[0], pb[1] - pa[1], pb[2] - pa[2]),
        (pc[0] - pa[0], pc[1] - pa[1], pc[2] - pa[2]),
    )


class _Decimator:
    def __init__(self, mesh: Mesh, boundary_weight: float):
        self.pos = [list(map(float, v)) for v in mesh.vertices]
        self.faces = [list(map(int, t)) for t in mesh.triangles]
        nv = len(self.pos)
        self.face_alive = [True] * len(self.faces)
        self.vfaces: list[set[int]] = [set() for _ in range(nv)]
        for f, tri in enumerate(self.faces):
            for v in tri:
                self.vfaces[v].add(f)
        self.alive = [bool(s) for s in self.vfaces]
        self.n_alive = sum(self.alive)
        self.stamp = [0] * nv
        self.quad = [[0.0] * 10 for _ in range(nv)]
        lo, hi = mesh.bounds()
        diag = float(np.linalg.norm(hi - lo)) or 1.0
        self.flip_penalty = diag ** 4
        self._init_quadrics(boundary_weight)

    def _init_quadrics(self, boundary_weight: float) -> None:
        edge_faces: dict[tuple[int, int], list[int]] = {}
        planes = {}
        for f, (a, b, c) in enumerate(self.faces):
            plane = _face_plane(self.pos[a], self.pos[b], self.pos[c])
            planes[f] = plane
            if plane is not None:
                n, d, area = plane
                packed = _plane_packed(n, d, area)
                for v in (a, b, c):
                    _add_into(self.quad[v], packed)
            for u, w in ((a, b), (b, c), (c, a)):
                edge_faces.setdefault((min(u, w), max(u, w)), []).append(f)
        if boundary_weight <= 0:
            return
        for (u, w), fs in sorted(edge_faces.items()):
            if len(fs) != 1 or planes[fs[0]] is None:
                continue
            n = planes[fs[0]][0]
            pu, pw = self.pos[u], self.pos[w]
            e = (pw[0] - pu[0], pw[1] - pu[1], pw[2] - pu[2])
            m = _cross(e, n)
            mlen = math.sqrt(m[0] * m[0] + m[1] * m[1] + m[2] * m[2])
            if mlen == 0.0:
                continue
            m = (m[0] / mlen, m[1] / mlen, m[2] / mlen)
            d = -(m[0] * pu[0] + m[1] * pu[1] + m[2] * pu[2])
            packed = _plane_packed(m, d, boundary_weight * math.sqrt(e[0] ** 2 + e[1] ** 2 + e[2] ** 2))
            _add_into(self.quad[u], packed)
            _add_into(self.quad[w], packed)

    def neighbors(self, v: int) -> set[int]:
        out: set[int] = set()
        for f in self.vfaces[v]:
            out.update(self.faces[f])
        out.discard(v)
        return out

    def edge_entry(self, i: int, j: int, retry: int = 0, penalty: float = 0.0):
        q = [x + y for x, y in zip(self.quad[i], self.quad[j])]
        target, cost = _collapse_target(q, self.pos[i], self.pos[j])
        return (cost + penalty, i, j, self.stamp[i], self.stamp[j], retry, target)

    def check(self, i: int, j: int, target) -> str | None:
        """Return a rejection reason, or None when the collapse is legal."""
        shared = self.vfaces[i] & self.vfaces[j]
        if not shared:
            return "topology"
        opposite = set()
        for f in shared:
            opposite.update(self.faces[f])
        opposite -= {i, j}
        if self.neighbors(i) & self.neighbors(j) != opposite:
            return "topology"
        remaining = (self.vfaces[i] | self.vfaces[j]) - shared
        if not remaining:
            return "topology"
        keys_i = {frozenset(self.faces[f]) for f in self.vfaces[i] - shared}
        for f in self.vfaces[j] - shared:
            key = frozenset(i if v == j else v for v in self.faces[f])
            if key in keys_i:
                return "topology"
        for f in remaining:
            tri = self.faces[f]
            old = [self.pos[v] for v in tri]
            new = [target if v in (i, j) else self.pos[v] for v in tri]
            n0 = _tri_normal(*old)
            n1 = _tri_normal(*new)
            if n1[0] * n1[0] + n1[1] * n1[1] + n1[2] * n1[2] == 0.0:
                return "flip"
            if n0[0] * n1[0] + n0[1] * n1[1] + n0[2] * n1[2] < 0.0:
                return "flip"
        return None

    def collapse(self, i: int, j: int, target) -> None:
        self.pos[i] = [target[0], target[1], target[2]]
        _add_into(self.quad[i], self.quad[j])
        for f in sorted(self.vfaces[j]):
            tri = self.faces[f]
            if i in tri:
                self.face_alive[f] = False
                for v in tri:
                    if v != j:
                        self.vfaces[v].discard(f)
            else:
                self.faces[f] = [i if v == j else v for v in tri]
                self.vfaces[i].add(f)
        self.vfaces[j] = set()
        self.alive[j] = False
        self.n_alive -= 1
        self.stamp[i] += 1
        self.stamp[j] += 1

    def drop_orphans(self, candidates: Iterable[int]) -> None:
        for v in candidates:
            if self.alive[v] and not self.vfaces[v]:
                self.alive[v] = False
                self.n_alive -= 1
                self.stamp[v] += 1


def decimate(
    mesh: Mesh,
    target_vertices: int,
    *,
    boundary_weight: float = 1e3,
    stats: DecimationStats | None = None,
) -> Mesh:
    """Reduce ``mesh`` to at most ``target_vertices`` by minimum-cost edge collapse.

    Stops early (with more vertices than requested) when no legal collapse
    remains. The result is deterministic for identical input.
    """
    if target_vertices < 3:
        raise ValueError(f"target vertex count must be >= 3, got {target_vertices}")
    mesh.validate()
    st = stats if stats is not None else DecimationStats()
    dec = _Decimator(mesh, boundary_weight)
    st.original_vertices = dec.n_alive
    st.target_vertices = target_vertices

    heap = []
    edges = set()
    for a, b, c in dec.faces:
        for u, w in ((a, b), (b, c), (c, a)):
            edges.add((min(u, w), max(u, w)))
    for i, j in sorted(edges):
        heap.append(dec.edge_entry(i, j))
    heapq.heapify(heap)

    while dec.n_alive > target_vertices and heap:
        cost, i, j, si, sj, retry, target = heapq.heappop(heap)
        if not (dec.alive[i] and dec.alive[j]) or dec.stamp[i] != si or dec.stamp[j] != sj:
            continue
        reason = dec.check(i, j, target)
        if reason == "flip":
            st.rejected_flips += 1
            if retry == 0:
                heapq.heappush(heap, dec.edge_entry(i, j, retry=1, penalty=dec.flip_penalty))
            continue
        if reason is not None:
            st.rejected_topology += 1
            continue
        ring = dec.neighbors(i) | dec.neighbors(j)
        dec.collapse(i, j, target)
        dec.drop_orphans(ring)
        st.collapses += 1
        for k in sorted(dec.neighbors(i)):
            heapq.heappush(heap, dec.edge_entry(min(i, k), max(i, k)))

    tris = [t for t, ok in zip(dec.faces, dec.face_alive) if ok]
    out = Mesh(np.array(dec.pos), np.array(tris, dtype=np.int64).reshape(-1, 3), mesh.name)
    areas = out.face_areas()
    keep = areas > 0.0
    if not keep.all():
        out = Mesh(out.vertices, out.triangles[keep], out.name)
    out = out.compact()
    st.achieved_vertices = out.vertex_count
    if out.vertex_count > target_vertices:
        log.warning(
            "%s: stopped at %d vertices (target %d): no legal collapse left",
            mesh.name, out.vertex_count, target_vertices,
        )
    return out.validate()


def decimate_to_level(mesh: Mesh, level: int, policy: QualityPolicy = DEFAULT_POLICY, **kwargs) -> Mesh:
    return decimate(mesh, target_vertex_count(mesh.vertex_count, level, policy), **kwargs)


# ---------------------------------------------------------------------------
# Surface sampling distance (used to measure decimation error)


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points drawn uniformly by area over the surface."""
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    cdf = np.cumsum(areas)
    faces = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    faces = np.minimum(faces, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    p = mesh.vertices[mesh.triangles[faces]]
    return (
        (1.0 - r1)[:, None] * p[:, 0]
        + (r1 * (1.0 - r2))[:, None] * p[:, 1]
        + (r1 * r2)[:, None] * p[:, 2]
    )


def _closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p, all broadcast to (..., 3)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
        out = a + ab * v[..., None] + ac * w[..., None]

        # edge regions
        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m[..., None], a + ab * t_ab[..., None], out)
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m[..., None], a + ac * t_ac[..., None], out)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        out = np.where(m[..., None], b + (c - b) * t_bc[..., None], out)
    # vertex regions
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    return out


def point_mesh_distance(points: np.ndarray, mesh: Mesh, chunk: int = 2_000_000) -> np.ndarray:
    """Unsigned distance from each point to the nearest triangle of ``mesh``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.vertices[mesh.triangles]
    a, b, c = tri[:, 0][None], tri[:, 1][None], tri[:, 2][None]
    step = max(1, chunk // max(1, len(tri)))
    out = np.empty(len(points))
    for s in range(0, len(points), step):
        p = points[s : s + step, None, :]
        q = _closest_on_triangles(p, a, b, c)
        d2 = np.einsum("...i,...i", q - p, q - p)
        out[s : s + step] = np.sqrt(d2.min(axis=1))
    return out


def symmetric_hausdorff(a: Mesh, b: Mesh, samples: int = 100_000, seed: int = 0) -> float:
    """Sampled symmetric Hausdorff distance between two surfaces."""
    ab = point_mesh_distance(sample_surface(a, samples, seed), b).max()
    ba = point_mesh_distance(sample_surface(b, samples, seed + 1), a).max()
    return float(max(ab, ba))
