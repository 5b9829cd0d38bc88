"""Labelled 6-channel image-pair datasets, manifests and asset-disjoint folds."""
from __future__ import annotations

import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .mesh import DEFAULT_POLICY, QUALITY_LEVELS, Mesh, QualityPolicy, decimate, target_vertex_count
from .render import (
    DEFAULT_FOV,
    DEFAULT_ZOOM,
    ViewSpec,
    auto_distance,
    load_image_uint8,
    render,
    save_image,
    unit,
)

log = logging.getLogger(__name__)

BINARY = "binary"
MULTICLASS = "multiclass"
KINDS = (BINARY, MULTICLASS)
MANIFEST_NAME = "manifest.jsonl"
META_NAME = "dataset.json"
FIELDS = ("id", "asset", "kind", "label", "yaw", "elevation", "light", "background", "zoom", "ref_path", "cand_path", "fold")

DEFAULT_YAWS = (0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0)
DEFAULT_ELEVATIONS = (-30.0, -15.0, 0.0, 10.0, 20.0, 30.0, 45.0, 60.0)
DEFAULT_LIGHTS = (
    unit((0.3, 0.5, 1.0)),
    unit((-0.6, 0.4, 0.7)),
    unit((0.7, -0.2, 0.7)),
    unit((0.0, 0.9, 0.45)),
)
DEFAULT_BACKGROUNDS = ((0.0, 0.0, 0.0), (0.25, 0.35, 0.5), (0.45, 0.4, 0.3))


@dataclass(frozen=True)
class Grid:
    """Augmentation grid. Lights and backgrounds cycle over cells instead of multiplying them."""

    yaws: tuple[float, ...] = DEFAULT_YAWS
    elevations: tuple[float, ...] = DEFAULT_ELEVATIONS
    lights: tuple[tuple[float, float, float], ...] = DEFAULT_LIGHTS
    backgrounds: tuple[tuple[float, float, float], ...] = DEFAULT_BACKGROUNDS

    def __post_init__(self):
        if not self.yaws or not self.elevations or not self.lights or not self.backgrounds:
            raise ValueError("grid axes must be non-empty")

    @classmethod
    def parse(cls, spec: str) -> "Grid":
        """``"8x8"`` -> the default grid; ``"NxM"`` -> N even yaws, M elevations."""
        try:
            n_yaw, n_el = (int(s) for s in spec.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like '8x8', got {spec!r}") from None
        if n_yaw < 1 or n_el < 1:
            raise ValueError("grid dimensions must be positive")
        yaws = DEFAULT_YAWS if n_yaw == 8 else tuple(360.0 * i / n_yaw for i in range(n_yaw))
        if n_el == 8:
            els = DEFAULT_ELEVATIONS
        elif n_el == 1:
            els = (20.0,)
        else:
            els = tuple(float(x) for x in np.round(np.linspace(-30.0, 60.0, n_el), 6))
        return cls(yaws, els)

    def __len__(self) -> int:
        return len(self.yaws) * len(self.elevations)

    def cells(self):
        """Yield ``(index, yaw, elevation, light_index, background_index)``."""
        k = 0
        for yaw in self.yaws:
            for el in self.elevations:
                yield k, yaw, el, k % len(self.lights), k % len(self.backgrounds)
                k += 1

    def to_dict(self) -> dict:
        return {k: [list(x) if isinstance(x, tuple) else x for x in v] for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(
            tuple(d["yaws"]),
            tuple(d["elevations"]),
            tuple(tuple(x) for x in d["lights"]),
            tuple(tuple(x) for x in d["backgrounds"]),
        )


@dataclass(frozen=True)
class RenderSettings:
    resolution: int = 112
    fov: float = DEFAULT_FOV
    zoom: float = DEFAULT_ZOOM
    ambient: float = 0.2

    def __post_init__(self):
        if not self.zoom > 1.0:
            raise ValueError("zoom must be > 1")


@dataclass
class Record:
    id: str
    asset: str
    kind: str
    label: int
    yaw: float
    elevation: float
    light: int
    background: int
    zoom: float
    ref_path: str
    cand_path: str
    fold: int = -1
    level: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class Manifest:
    records: list[Record]
    kind: str
    seed: int
    root: str = "."
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"dataset kind must be one of {KINDS}")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def assets(self) -> list[str]:
        return sorted({r.asset for r in self.records})

    @property
    def num_classes(self) -> int:
        return 2 if self.kind == BINARY else 7

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def path(self, rel: str) -> str:
        return os.path.join(self.root, rel)

    def subset(self, indices: Iterable[int]) -> "Manifest":
        return Manifest([self.records[i] for i in indices], self.kind, self.seed, self.root, dict(self.meta))

    def save(self, directory: str | os.PathLike | None = None) -> str:
        """Write ``manifest.jsonl`` and ``dataset.json``; returns the manifest path."""
        directory = os.fspath(directory or self.root)
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, MANIFEST_NAME)
        tmp = path + ".partial"
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")
        meta = dict(self.meta, kind=self.kind, seed=self.seed, count=len(self.records))
        with open(os.path.join(directory, META_NAME), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Manifest":
        """Load from a dataset directory or a ``manifest.jsonl`` path."""
        path = os.fspath(path)
        directory = path if os.path.isdir(path) else os.path.dirname(path) or "."
        mpath = os.path.join(directory, MANIFEST_NAME) if os.path.isdir(path) else path
        if not os.path.exists(mpath):
            if os.path.exists(mpath + ".partial"):
                raise FileNotFoundError(f"{mpath}: dataset build did not complete")
            raise FileNotFoundError(mpath)
        with open(os.path.join(directory, META_NAME), encoding="utf-8") as fh:
            meta = json.load(fh)
        records = []
        with open(mpath, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(Record(**json.loads(line)))
        kind = meta.pop("kind")
        seed = meta.pop("seed")
        meta.pop("count", None)
        return cls(records, kind, seed, directory, meta)


# ---------------------------------------------------------------------------
# building


def _cell_rng(seed: int, asset: str, cell: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(asset.encode()), cell]))


def transition_level(seed: int, asset: str, cell: int) -> int:
    """Quality level used for the transition pair of one grid cell."""
    return int(_cell_rng(seed, asset, cell).integers(1, 7))


@dataclass
class _AssetJob:
    mesh: Mesh
    kind: str
    grid: Grid
    settings: RenderSettings
    policy: QualityPolicy
    seed: int
    out_dir: str


def _asset_records(job: _AssetJob):
    """Render every image for one asset; returns (records, lod_counts, warnings)."""
    mesh, grid, st = job.mesh, job.grid, job.settings
    name = mesh.name
    base = auto_distance(mesh, st.fov)
    center = tuple(float(c) for c in mesh.center())
    n0 = mesh.vertex_count

    if job.kind == BINARY:
        levels_by_cell = {k: (0, transition_level(job.seed, name, k)) for k, *_ in grid.cells()}
    else:
        levels_by_cell = {k: QUALITY_LEVELS for k, *_ in grid.cells()}
    needed = sorted({lv for lvs in levels_by_cell.values() for lv in lvs if lv > 0})

    lods: dict[int, Mesh] = {0: mesh}
    counts: dict[int, int] = {0: n0}
    warnings = []
    for lv in needed:
        target = target_vertex_count(n0, lv, job.policy)
        if target >= n0:
            warnings.append(f"{name}: level {lv} does not reduce {n0} vertices; skipped")
            continue
        lods[lv] = decimate(mesh, target)
        counts[lv] = lods[lv].vertex_count
        if counts[lv] != target:
            warnings.append(f"{name}: level {lv} reached {counts[lv]} vertices (target {target})")

    img_dir = os.path.join(job.out_dir, "images", name)
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for k, yaw, el, li, bi in grid.cells():
        levels = levels_by_cell[k]
        if any(lv not in lods for lv in levels):
            warnings.append(f"{name}: cell {k} skipped (missing LOD)")
            continue
        view = ViewSpec(
            distance=base, yaw=yaw, elevation=el, light_dir=grid.lights[li], ambient=st.ambient,
            background=grid.backgrounds[bi], resolution=st.resolution, fov=st.fov, target=center,
        )
        ref_rel = os.path.join("images", name, f"c{k:03d}_ref.ppm")
        save_image(render(mesh, view), os.path.join(job.out_dir, ref_rel))
        far = view.zoomed(st.zoom)
        for lv in levels:
            cand_rel = os.path.join("images", name, f"c{k:03d}_L{lv}.ppm")
            save_image(render(lods[lv], far), os.path.join(job.out_dir, cand_rel))
            label = (0 if lv == 0 else 1) if job.kind == BINARY else lv
            tag = f"{label}" if job.kind == BINARY else f"L{lv}"
            records.append(Record(
                id=f"{name}/{k:03d}/{tag}", asset=name, kind=job.kind, label=label, yaw=yaw,
                elevation=el, light=li, background=bi, zoom=st.zoom, ref_path=ref_rel,
                cand_path=cand_rel, level=lv,
            ))
    return records, counts, warnings


def build_dataset(
    assets: Sequence[Mesh],
    kind: str,
    out_dir: str | os.PathLike,
    grid: Grid | None = None,
    policy: QualityPolicy = DEFAULT_POLICY,
    seed: int = 0,
    settings: RenderSettings | None = None,
    jobs: int = 1,
) -> Manifest:
    """Render all pairs for ``assets`` into ``out_dir`` and write the manifest."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if not assets:
        raise ValueError("need at least one asset")
    names = [m.name for m in assets]
    if len(set(names)) != len(names):
        raise ValueError("asset names must be unique")
    grid = grid or Grid()
    settings = settings or RenderSettings()
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    stale = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(stale):
        os.remove(stale)

    work = [_AssetJob(m.validate(), kind, grid, settings, policy, seed, out_dir) for m in assets]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_asset_records, work))
    else:
        results = [_asset_records(j) for j in work]

    records, lod_counts, warnings = [], {}, []
    for m, (recs, counts, warns) in zip(assets, results):
        records.extend(recs)
        lod_counts[m.name] = {str(k): v for k, v in sorted(counts.items())}
        warnings.extend(warns)
    for w in warnings:
        log.warning(w)
    meta = {
        "grid": grid.to_dict(),
        "render": asdict(settings),
        "policy": policy.to_dict(),
        "lod_vertices": lod_counts,
        "warnings": warnings,
    }
    manifest = Manifest(records, kind, seed, out_dir, meta)
    manifest.save(out_dir)
    return manifest


def build_binary_dataset(assets, out_dir, grid=None, policy=DEFAULT_POLICY, seed=0, **kw) -> Manifest:
    """One non-transition and one transition pair per asset and grid cell."""
    return build_dataset(assets, BINARY, out_dir, grid, policy, seed, **kw)


def build_multiclass_dataset(assets, out_dir, grid=None, policy=DEFAULT_POLICY, seed=0, **kw) -> Manifest:
    """Six pairs per asset and grid cell, one per quality level."""
    return build_dataset(assets, MULTICLASS, out_dir, grid, policy, seed, **kw)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict

    def fold_of(self, asset: str) -> int:
        return self.assignment[asset]

    def val_assets(self, fold: int) -> set[str]:
        return {a for a, f in self.assignment.items() if f == fold}

    def train_assets(self, fold: int) -> set[str]:
        return {a for a, f in self.assignment.items() if f != fold}

    def apply(self, manifest: Manifest) -> Manifest:
        """Copy of ``manifest`` with each record's ``fold`` set."""
        recs = [Record(**dict(asdict(r), fold=self.assignment[r.asset])) for r in manifest.records]
        return Manifest(recs, manifest.kind, manifest.seed, manifest.root, dict(manifest.meta, folds=self.k))

    def split(self, manifest: Manifest, fold: int) -> tuple[list[int], list[int]]:
        train, val = [], []
        for i, r in enumerate(manifest.records):
            (val if self.assignment[r.asset] == fold else train).append(i)
        return train, val


def make_folds(manifest: Manifest | Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle assets with ``seed`` and deal them round-robin into ``k`` folds."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    assets = manifest.assets if isinstance(manifest, Manifest) else sorted(set(manifest))
    if len(assets) < k:
        raise ValueError(f"{len(assets)} assets cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(assets))
    return FoldPlan(k, {assets[p]: i % k for i, p in enumerate(perm)})


def fold_plan_from_manifest(manifest: Manifest) -> FoldPlan:
    assignment = {}
    for r in manifest.records:
        if r.fold < 0:
            raise ValueError("manifest has no fold assignment")
        if assignment.setdefault(r.asset, r.fold) != r.fold:
            raise ValueError(f"asset {r.asset} spans several folds")
    return FoldPlan(max(assignment.values()) + 1, assignment)


# ---------------------------------------------------------------------------
# samples


@dataclass
class SamplePair:
    asset: str
    view: dict
    zoom_factor: float
    label: int
    tensor: np.ndarray = field(repr=False)


def stack_pair(ref: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Channel-stack two ``(H, W, 3)`` images into ``(H, W, 6)``."""
    if ref.shape != cand.shape:
        raise ValueError(f"pair images differ in shape: {ref.shape} vs {cand.shape}")
    return np.concatenate([ref, cand], axis=2)


def load_sample(record: Record, root: str = ".") -> SamplePair:
    """Load a record as a ``6 x H x W`` float tensor in [0, 1] (reference first)."""
    ref = load_image_uint8(os.path.join(root, record.ref_path))
    cand = load_image_uint8(os.path.join(root, record.cand_path))
    tensor = stack_pair(ref, cand).transpose(2, 0, 1).astype(np.float32) / 255.0
    view = {"yaw": record.yaw, "elevation": record.elevation, "light": record.light, "background": record.background}
    return SamplePair(record.asset, view, record.zoom, record.label, tensor)


class PairArrays:
    """All samples of a manifest as one uint8 ``(N, H, W, 6)`` array.

    Images shared between records are decoded once.
    """

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        cache: dict[str, np.ndarray] = {}

        def img(rel: str) -> np.ndarray:
            if rel not in cache:
                cache[rel] = load_image_uint8(manifest.path(rel))
            return cache[rel]

        first = manifest.records[0]
        h, w, _ = img(first.ref_path).shape
        self.x = np.empty((len(manifest), h, w, 6), dtype=np.uint8)
        for i, r in enumerate(manifest.records):
            self.x[i, :, :, :3] = img(r.ref_path)
            self.x[i, :, :, 3:] = img(r.cand_path)
        self.y = manifest.labels()
        self.assets = np.array([r.asset for r in manifest.records])

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, indices) -> np.ndarray:
        """Float32 NHWC batch scaled to [0, 1]."""
        return self.x[indices].astype(np.float32) * np.float32(1.0 / 255.0)
