"""Deterministic flat-shaded software rendering and binary PPM images."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import raster
from .mesh import Mesh

ALBEDO = 0.7
DEFAULT_RESOLUTION = 224
DEFAULT_FOV = 35.0
DEFAULT_ZOOM = 1.5
#: Fraction of the frame height the LOD0 mesh's bounding sphere should fill.
FILL_FRACTION = 0.9
NEAR = 1e-3


@dataclass(frozen=True)
class ViewSpec:
    """Orbit camera around ``target`` (the mesh's bounding-box centre when None).

    ``light_dir`` points toward the light in camera space (+z faces the
    viewer), so lighting turns with the camera.
    """

    distance: float
    yaw: float = 0.0
    elevation: float = 0.0
    light_dir: tuple[float, float, float] = (0.0, 0.0, 1.0)
    ambient: float = 0.2
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    resolution: int = DEFAULT_RESOLUTION
    fov: float = DEFAULT_FOV
    target: tuple[float, float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "light_dir", tuple(float(x) for x in self.light_dir))
        object.__setattr__(self, "background", tuple(float(x) for x in self.background))
        if self.target is not None:
            object.__setattr__(self, "target", tuple(float(x) for x in self.target))
        if not self.distance > 0:
            raise ValueError("distance must be positive")
        if self.resolution < 16:
            raise ValueError("resolution must be at least 16")
        if not 0 < self.fov < 180:
            raise ValueError("fov must be in (0, 180)")
        if not abs(math.hypot(*self.light_dir) - 1.0) <= 1e-9:
            raise ValueError("light_dir must be a unit vector")
        if not 0.0 <= self.ambient <= 1.0:
            raise ValueError("ambient must be in [0, 1]")
        if not all(0.0 <= c <= 1.0 for c in self.background) or len(self.background) != 3:
            raise ValueError("background must be RGB in [0, 1]")
        if not -90.0 < self.elevation < 90.0:
            raise ValueError("elevation must be in (-90, 90)")

    def zoomed(self, factor: float) -> "ViewSpec":
        return replace(self, distance=self.distance * factor)


def unit(v) -> tuple[float, float, float]:
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return (float(v[0]), float(v[1]), float(v[2]))


@dataclass
class Image:
    """RGB image, row-major ``(height, width, 3)`` values in [0, 1]."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("image data must have shape (height, width, 3)")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def to_uint8(self) -> np.ndarray:
        return np.round(self.data * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Image":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)


def camera_basis(view: ViewSpec, target: np.ndarray):
    """Camera position and right/up/forward unit vectors."""
    yaw = math.radians(view.yaw)
    el = math.radians(view.elevation)
    offset = np.array([math.cos(el) * math.sin(yaw), math.sin(el), math.cos(el) * math.cos(yaw)])
    eye = target + view.distance * offset
    forward = -offset
    right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return eye, right, up, forward


def bounding_radius(mesh: Mesh, center=None) -> float:
    c = mesh.center() if center is None else np.asarray(center)
    return float(np.linalg.norm(mesh.vertices - c, axis=1).max())


def auto_distance(mesh: Mesh, fov: float = DEFAULT_FOV, fill: float = FILL_FRACTION) -> float:
    """Camera distance at which the bounding sphere spans ``fill`` of the frame height."""
    r = bounding_radius(mesh)
    return r / (fill * math.tan(math.radians(fov) / 2.0))


def project(mesh: Mesh, view: ViewSpec):
    """Screen coordinates, inverse depth and a visibility mask per triangle."""
    target = mesh.center() if view.target is None else np.asarray(view.target)
    eye, right, up, forward = camera_basis(view, target)
    rel = mesh.vertices - eye
    cam = np.stack([rel @ right, rel @ up, rel @ forward], axis=1)
    tri = cam[mesh.triangles]
    visible = np.all(tri[:, :, 2] > NEAR, axis=1)
    z = np.where(tri[:, :, 2] > NEAR, tri[:, :, 2], 1.0)
    scale = 1.0 / math.tan(math.radians(view.fov) / 2.0)
    res = view.resolution
    sx = (tri[:, :, 0] * scale / z + 1.0) * 0.5 * res
    sy = (1.0 - tri[:, :, 1] * scale / z) * 0.5 * res
    xy = np.stack([sx, sy], axis=2)
    return xy, 1.0 / z, visible, (eye, right, up, forward)


def face_shades(mesh: Mesh, view: ViewSpec, basis) -> np.ndarray:
    """Two-sided Lambert intensity per face."""
    eye, right, up, forward = basis
    n = mesh.face_normals()
    length = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, length, out=np.zeros_like(n), where=length > 0)
    centroid = mesh.vertices[mesh.triangles].mean(axis=1)
    facing = np.einsum("ij,ij->i", n, eye - centroid)
    n = np.where((facing < 0)[:, None], -n, n)
    lx, ly, lz = view.light_dir
    light = lx * right + ly * up - lz * forward
    diffuse = np.maximum(0.0, n @ light)
    return np.clip(view.ambient + ALBEDO * diffuse, 0.0, 1.0)


def render(mesh: Mesh, view: ViewSpec) -> Image:
    """Perspective, z-buffered, flat-shaded image of ``mesh`` over a solid background."""
    xy, inv_depth, visible, basis = project(mesh, view)
    res = view.resolution
    idx = np.nonzero(visible)[0]
    ids, _ = raster.rasterize(
        np.ascontiguousarray(xy[idx]), np.ascontiguousarray(inv_depth[idx]), res, res
    )
    shade = face_shades(mesh, view, basis)[idx]
    img = np.empty((res, res, 3), dtype=np.float64)
    img[:] = view.background
    hit = ids >= 0
    img[hit] = shade[ids[hit]][:, None]
    return Image(img)


def render_pair(reference: Mesh, candidate: Mesh, view: ViewSpec, zoom_factor: float = DEFAULT_ZOOM) -> tuple[Image, Image]:
    """Reference at ``view.distance``, candidate at ``distance * zoom_factor``.

    Both images orbit the reference's bounding-box centre; nothing else
    about the view changes between them.
    """
    if not zoom_factor > 1.0:
        raise ValueError(f"zoom_factor must be > 1, got {zoom_factor}")
    if view.target is None:
        view = replace(view, target=tuple(float(c) for c in reference.center()))
    return render(reference, view), render(candidate, view.zoomed(zoom_factor))


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


class ImageFormatError(ValueError):
    pass


def encode_ppm(img: Image) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.to_uint8().tobytes()


def save_image(img: Image, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode a binary PPM into a ``(height, width, 3)`` uint8 array."""
    fields: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(fields) < 4:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        fields.append(buf[start:pos])
    if fields[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageFormatError("PPM dimensions must be positive")
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("truncated PPM header")
    pos += 1
    expected = width * height * 3
    data = buf[pos : pos + expected]
    if len(data) != expected:
        raise ImageFormatError(f"truncated PPM data: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def load_image_uint8(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def load_image(path: str | os.PathLike) -> Image:
    return Image.from_uint8(load_image_uint8(path))
