"""Synthetic labeled scenes and the point cloud data pipeline.

Scenes are procedurally generated rooms: structural planes (floor, ceiling,
walls) plus furniture-like boxes and cylinders, one semantic class each.
This module also owns weak-label sampling, sphere cropping, grid subsampling,
pair sampling, back-projection, and the on-disk formats (binary container,
ASCII PLY, dataset manifest). All sampling is a pure function of (input, seed).
"""

from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger("weakseg.pointcloud")

CLOUD_MAGIC = b"WSPC"
CLOUD_VERSION = 1


class CloudFormatError(ValueError):
    """Malformed or truncated cloud container file."""


class EmptyCropError(RuntimeError):
    """Ball query found no points; the caller should resample the center."""


class PairSamplingError(RuntimeError):
    """No crop pair with a common labeled class within the retry budget."""


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    labels: np.ndarray  # (N,) class indices in [0, num_classes)
    weak_mask: np.ndarray  # (N,) bool, True where the label is revealed
    num_classes: int
    scene_id: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.weak_mask = np.asarray(self.weak_mask, dtype=bool)
        n = self.positions.shape[0]
        if n < 1 or self.positions.shape != (n, 3) or self.colors.shape != (n, 3):
            raise ValueError(f"inconsistent cloud arrays (N={n})")
        if self.labels.shape != (n,) or self.weak_mask.shape != (n,):
            raise ValueError(f"labels/mask must have leading dimension {n}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def labeled_classes(self) -> np.ndarray:
        """Classes visible through the weak mask only."""
        return np.unique(self.labels[self.weak_mask])

    def take(self, indices: np.ndarray, scene_id: str | None = None) -> "PointCloud":
        return PointCloud(
            positions=self.positions[indices],
            colors=self.colors[indices],
            labels=self.labels[indices],
            weak_mask=self.weak_mask[indices],
            num_classes=self.num_classes,
            scene_id=self.scene_id if scene_id is None else scene_id,
        )


@dataclass(frozen=True)
class ClassRecipe:
    """How one semantic class is realized geometrically.

    kind is one of: floor, ceiling, walls (planes tied to the room shell),
    board (plane patch on a wall), box, cylinder (furniture placed on the
    floor). count/size apply to furniture kinds.
    """

    name: str
    kind: str
    color: tuple[float, float, float]
    count: tuple[int, int] = (1, 1)
    size: tuple[float, float, float] = (1.0, 1.0, 1.0)  # w, d, h (cylinder: r, r, h)
    size_jitter: float = 0.15


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple[float, float, float] = (5.0, 4.0, 2.5)
    classes: tuple[ClassRecipe, ...] = ()
    density: float = 48.0  # points per m^2 of sampled surface
    color_jitter: float = 0.06
    position_noise: float = 0.012

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a scene spec needs at least 2 classes")
        if self.density <= 0:
            raise ValueError("point density must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def default_scene_spec(num_classes: int = 7) -> SceneSpec:
    """Room recipe with structural planes plus furniture classes.

    Colors deliberately overlap between some classes (wall/ceiling, table/
    chair) so appearance alone does not separate them.
    """
    recipes = [
        ClassRecipe("floor", "floor", (0.48, 0.44, 0.38)),
        ClassRecipe("ceiling", "ceiling", (0.82, 0.82, 0.80)),
        ClassRecipe("wall", "walls", (0.78, 0.78, 0.74)),
        ClassRecipe("table", "box", (0.52, 0.36, 0.22), (1, 2), (1.2, 0.7, 0.75), 0.2),
        ClassRecipe("chair", "box", (0.46, 0.32, 0.24), (2, 4), (0.45, 0.45, 0.85), 0.2),
        ClassRecipe("column", "cylinder", (0.62, 0.60, 0.58), (1, 2), (0.18, 0.18, 2.5), 0.15),
        ClassRecipe("clutter", "box", (0.30, 0.42, 0.32), (2, 5), (0.3, 0.3, 0.35), 0.4),
        ClassRecipe("board", "board", (0.95, 0.95, 0.92), (1, 2), (1.2, 0.0, 0.9), 0.2),
    ]
    if not 2 <= num_classes <= len(recipes):
        raise ValueError(f"num_classes must be in [2, {len(recipes)}]")
    return SceneSpec(classes=tuple(recipes[:num_classes]))


class _Primitive:
    """A placed surface with an exact area and a uniform surface sampler."""

    def __init__(self, class_id: int, area: float):
        self.class_id = class_id
        self.area = area

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError


class _Rect(_Primitive):
    def __init__(self, class_id, origin, edge_u, edge_v):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.edge_u = np.asarray(edge_u, dtype=np.float64)
        self.edge_v = np.asarray(edge_v, dtype=np.float64)
        super().__init__(class_id, float(np.linalg.norm(np.cross(self.edge_u, self.edge_v))))

    def sample(self, rng, n):
        u = rng.random(n)[:, None]
        v = rng.random(n)[:, None]
        return self.origin + u * self.edge_u + v * self.edge_v


class _CylinderSide(_Primitive):
    def __init__(self, class_id, center, radius, height):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.height = float(height)
        super().__init__(class_id, 2.0 * math.pi * self.radius * self.height)

    def sample(self, rng, n):
        theta = rng.random(n) * 2.0 * math.pi
        z = rng.random(n) * self.height
        pts = np.stack(
            [self.radius * np.cos(theta), self.radius * np.sin(theta), z], axis=1
        )
        return pts + self.center


def _box_faces(class_id, center_xy, size, yaw) -> list[_Rect]:
    """Rectangles for the four sides and top of an upright box (no bottom)."""
    w, d, h = size
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    cx, cy = center_xy

    def place(origin, eu, ev):
        o = rot @ np.asarray(origin, dtype=np.float64) + np.array([cx, cy, 0.0])
        return _Rect(class_id, o, rot @ np.asarray(eu, float), rot @ np.asarray(ev, float))

    hw, hd = w / 2.0, d / 2.0
    return [
        place([-hw, -hd, 0.0], [w, 0, 0], [0, 0, h]),  # front
        place([-hw, hd, 0.0], [w, 0, 0], [0, 0, h]),  # back
        place([-hw, -hd, 0.0], [0, d, 0], [0, 0, h]),  # left
        place([hw, -hd, 0.0], [0, d, 0], [0, 0, h]),  # right
        place([-hw, -hd, h], [w, 0, 0], [0, d, 0]),  # top
    ]


def _build_primitives(spec: SceneSpec, rng: np.random.Generator) -> list[_Primitive]:
    ex, ey, ez = spec.extent
    prims: list[_Primitive] = []
    for class_id, recipe in enumerate(spec.classes):
        kind = recipe.kind
        if kind == "floor":
            prims.append(_Rect(class_id, [0, 0, 0], [ex, 0, 0], [0, ey, 0]))
        elif kind == "ceiling":
            prims.append(_Rect(class_id, [0, 0, ez], [ex, 0, 0], [0, ey, 0]))
        elif kind == "walls":
            prims.extend(
                [
                    _Rect(class_id, [0, 0, 0], [ex, 0, 0], [0, 0, ez]),
                    _Rect(class_id, [0, ey, 0], [ex, 0, 0], [0, 0, ez]),
                    _Rect(class_id, [0, 0, 0], [0, ey, 0], [0, 0, ez]),
                    _Rect(class_id, [ex, 0, 0], [0, ey, 0], [0, 0, ez]),
                ]
            )
        elif kind == "board":
            count = int(rng.integers(recipe.count[0], recipe.count[1] + 1))
            for _ in range(count):
                w = recipe.size[0] * (1.0 + recipe.size_jitter * (rng.random() * 2 - 1))
                h = recipe.size[2] * (1.0 + recipe.size_jitter * (rng.random() * 2 - 1))
                z0 = 0.9 + 0.4 * rng.random()
                wall = int(rng.integers(0, 4))
                off = 0.02  # stand slightly clear of the wall plane
                if wall in (0, 1):
                    x0 = rng.random() * max(ex - w, 0.1)
                    y = off if wall == 0 else ey - off
                    prims.append(_Rect(class_id, [x0, y, z0], [w, 0, 0], [0, 0, h]))
                else:
                    y0 = rng.random() * max(ey - w, 0.1)
                    x = off if wall == 2 else ex - off
                    prims.append(_Rect(class_id, [x, y0, z0], [0, w, 0], [0, 0, h]))
        elif kind in ("box", "cylinder"):
            count = int(rng.integers(recipe.count[0], recipe.count[1] + 1))
            for _ in range(count):
                jitter = 1.0 + recipe.size_jitter * (rng.random() * 2 - 1)
                w, d, h = (recipe.size[0] * jitter, recipe.size[1] * jitter, recipe.size[2] * jitter)
                h = min(h, ez - 0.05)
                margin = max(w, d) / 2.0 + 0.1
                cx = margin + rng.random() * max(ex - 2 * margin, 0.05)
                cy = margin + rng.random() * max(ey - 2 * margin, 0.05)
                if kind == "box":
                    yaw = rng.random() * 2.0 * math.pi
                    prims.extend(_box_faces(class_id, (cx, cy), (w, d, h), yaw))
                else:
                    prims.append(_CylinderSide(class_id, [cx, cy, 0.0], w, h))
        else:
            raise ValueError(f"unknown primitive kind {kind!r} for class {recipe.name!r}")
    return prims


def expected_class_areas(spec: SceneSpec, seed: int) -> np.ndarray:
    """Realized surface area per class for the scene (spec, seed) would build."""
    rng = np.random.default_rng(seed)
    areas = np.zeros(spec.num_classes)
    for prim in _build_primitives(spec, rng):
        areas[prim.class_id] += prim.area
    return areas


def generate_scene(spec: SceneSpec, seed: int) -> PointCloud:
    """Deterministic scene synthesis; labels are exact by construction.

    Each primitive gets round(density * area) points (at least 1), so the
    class histogram tracks surface area analytically.
    """
    rng = np.random.default_rng(seed)
    prims = _build_primitives(spec, rng)
    pos_parts, color_parts, label_parts = [], [], []
    for prim in prims:
        n = max(1, int(round(spec.density * prim.area)))
        pts = prim.sample(rng, n)
        base = np.asarray(spec.classes[prim.class_id].color, dtype=np.float64)
        cols = base[None, :] + rng.normal(scale=spec.color_jitter, size=(n, 3))
        pos_parts.append(pts)
        color_parts.append(np.clip(cols, 0.0, 1.0))
        label_parts.append(np.full(n, prim.class_id, dtype=np.int64))
    positions = np.concatenate(pos_parts, axis=0)
    positions += rng.normal(scale=spec.position_noise, size=positions.shape)
    return PointCloud(
        positions=positions,
        colors=np.concatenate(color_parts, axis=0),
        labels=np.concatenate(label_parts, axis=0),
        weak_mask=np.zeros(positions.shape[0], dtype=bool),
        num_classes=spec.num_classes,
        scene_id=f"scene{seed:05d}",
    )


def sample_weak_labels(cloud: PointCloud, fraction: float, seed: int) -> PointCloud:
    """Reveal ceil(fraction * count_c) labels per class, uniformly without
    replacement. Returns a new cloud; classes absent from the cloud are skipped."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"weak-label fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(cloud), dtype=bool)
    for c in range(cloud.num_classes):
        idx = np.flatnonzero(cloud.labels == c)
        if idx.size == 0:
            continue
        k = math.ceil(fraction * idx.size)
        mask[rng.choice(idx, size=k, replace=False)] = True
    return replace(cloud, weak_mask=mask)


@dataclass
class SubsampleMap:
    """Voxel-grid reduction: one representative (member centroid) per occupied
    cell, plus the total map from original points to their representative."""

    coarse_positions: np.ndarray  # (M, 3)
    indices: np.ndarray  # (N,) index of each original point's representative

    def __post_init__(self):
        if self.indices.min() < 0 or self.indices.max() >= self.coarse_positions.shape[0]:
            raise ValueError("subsample map indices out of range")


def grid_subsample(positions: np.ndarray, cell: float) -> SubsampleMap:
    """Group points into cubic cells of side `cell` centered on integer
    multiples of it; representatives are member centroids, ordered by first
    occurrence so a fine enough grid is the identity."""
    if cell <= 0:
        raise ValueError(f"cell size must be positive, got {cell}")
    positions = np.asarray(positions, dtype=np.float64)
    keys = np.round(positions / cell).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)  # numpy 2.0 briefly shaped this (n, 1)
    # np.unique sorts by key; reorder cells by first member so ordering follows input.
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    inverse = rank[inverse]
    m = order.size
    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, positions)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    return SubsampleMap(coarse_positions=sums / counts[:, None], indices=inverse)


def subsample_cloud(cloud: PointCloud, cell: float) -> tuple[PointCloud, SubsampleMap]:
    """Cloud at voxel resolution: centroid positions, mean colors, majority labels."""
    smap = grid_subsample(cloud.positions, cell)
    m = smap.coarse_positions.shape[0]
    color_sums = np.zeros((m, 3))
    np.add.at(color_sums, smap.indices, cloud.colors)
    counts = np.bincount(smap.indices, minlength=m).astype(np.float64)
    votes = np.zeros((m, cloud.num_classes), dtype=np.int64)
    np.add.at(votes, (smap.indices, cloud.labels), 1)
    coarse = PointCloud(
        positions=smap.coarse_positions,
        colors=color_sums / counts[:, None],
        labels=votes.argmax(axis=1),  # ties break toward the lowest class index
        weak_mask=np.zeros(m, dtype=bool),
        num_classes=cloud.num_classes,
        scene_id=cloud.scene_id,
    )
    return coarse, smap


@dataclass
class SphereCrop:
    center: np.ndarray
    radius: float
    indices: np.ndarray
    scene_id: str


def ball_crop(cloud: PointCloud, center, radius: float = 2.0) -> SphereCrop:
    if radius <= 0:
        raise ValueError(f"crop radius must be positive, got {radius}")
    center = np.asarray(center, dtype=np.float64)
    d2 = ((cloud.positions - center[None, :]) ** 2).sum(axis=1)
    indices = np.flatnonzero(d2 <= radius * radius)
    if indices.size == 0:
        raise EmptyCropError(f"no points within {radius} m of {center.tolist()}")
    return SphereCrop(center=center, radius=float(radius), indices=indices, scene_id=cloud.scene_id)


def sample_crop(
    clouds: list[PointCloud], rng: np.random.Generator, radius: float
) -> tuple[int, SphereCrop]:
    """Crop centered on a random weak-labeled point of a random cloud."""
    for _ in range(100):
        ci = int(rng.integers(0, len(clouds)))
        cloud = clouds[ci]
        labeled = np.flatnonzero(cloud.weak_mask)
        pool = labeled if labeled.size else np.arange(len(cloud))
        center = cloud.positions[int(rng.choice(pool))]
        try:
            return ci, ball_crop(cloud, center, radius)
        except EmptyCropError:  # pragma: no cover - center is itself a point
            continue
    raise PairSamplingError("could not draw a nonempty crop")


def sample_pair(
    clouds: list[PointCloud],
    rng: np.random.Generator,
    radius: float = 2.0,
    max_retries: int = 100,
) -> tuple[tuple[int, SphereCrop], tuple[int, SphereCrop]]:
    """Two crops whose weak-labeled class sets intersect, by bounded rejection."""
    if len(clouds) < 1:
        raise PairSamplingError("dataset is empty")
    for _ in range(max_retries):
        a_ci, a = sample_crop(clouds, rng, radius)
        b_ci, b = sample_crop(clouds, rng, radius)
        classes_a = np.unique(clouds[a_ci].labels[a.indices][clouds[a_ci].weak_mask[a.indices]])
        classes_b = np.unique(clouds[b_ci].labels[b.indices][clouds[b_ci].weak_mask[b.indices]])
        if np.intersect1d(classes_a, classes_b).size > 0:
            return (a_ci, a), (b_ci, b)
    raise PairSamplingError(
        f"no crop pair with a common labeled class after {max_retries} attempts"
    )


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def back_project(coarse_values: np.ndarray, smap: SubsampleMap) -> np.ndarray:
    """Give every original point its representative's value (label or row)."""
    coarse_values = np.asarray(coarse_values)
    if coarse_values.shape[0] != smap.coarse_positions.shape[0]:
        raise ValueError(
            f"got {coarse_values.shape[0]} coarse values for "
            f"{smap.coarse_positions.shape[0]} representatives"
        )
    return coarse_values[smap.indices]


# ---------------------------------------------------------------------------
# File I/O


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_cloud(cloud: PointCloud, path: str) -> None:
    """Versioned little-endian binary container; see read_cloud for the layout."""
    n = len(cloud)
    sid = cloud.scene_id.encode("utf-8")
    parts = [
        CLOUD_MAGIC,
        np.uint16(CLOUD_VERSION).tobytes(),
        np.uint64(n).tobytes(),
        np.uint16(cloud.num_classes).tobytes(),
        np.uint16(len(sid)).tobytes(),
        sid,
        cloud.positions.astype("<f8").tobytes(),
        cloud.colors.astype("<f8").tobytes(),
        cloud.labels.astype("<i8").tobytes(),
        cloud.weak_mask.astype("<u1").tobytes(),
    ]
    _atomic_write(path, b"".join(parts))


def read_cloud(path: str) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CLOUD_MAGIC:
        raise CloudFormatError(f"{path}: bad magic bytes")
    off = 4

    def pull(dtype, count):
        nonlocal off
        dt = np.dtype(dtype)
        end = off + dt.itemsize * count
        if end > len(raw):
            raise CloudFormatError(f"{path}: truncated file")
        out = np.frombuffer(raw[off:end], dtype=dt)
        off = end
        return out

    version = int(pull("<u2", 1)[0])
    if version != CLOUD_VERSION:
        raise CloudFormatError(f"{path}: unsupported container version {version}")
    n = int(pull("<u8", 1)[0])
    num_classes = int(pull("<u2", 1)[0])
    sid_len = int(pull("<u2", 1)[0])
    if off + sid_len > len(raw):
        raise CloudFormatError(f"{path}: truncated file")
    scene_id = raw[off : off + sid_len].decode("utf-8")
    off += sid_len
    positions = pull("<f8", n * 3).reshape(n, 3)
    colors = pull("<f8", n * 3).reshape(n, 3)
    labels = pull("<i8", n)
    mask = pull("<u1", n).astype(bool)
    if off != len(raw):
        raise CloudFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return PointCloud(positions, colors, labels, mask, num_classes, scene_id)


def export_ply(positions: np.ndarray, colors: np.ndarray, path: str) -> None:
    """ASCII PLY with x, y, z and 8-bit red/green/blue."""
    positions = np.asarray(positions, dtype=np.float64)
    rgb = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {positions.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(positions, rgb):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def export_cloud_ply(cloud: PointCloud, path: str) -> None:
    export_ply(cloud.positions, cloud.colors, path)


def affinity_colors(values: np.ndarray) -> np.ndarray:
    """Map affinity weights to colors, red = high, green = low."""
    values = np.asarray(values, dtype=np.float64)
    span = values.max() - values.min()
    t = np.ones_like(values) if span == 0 else (values - values.min()) / span
    return np.stack([t, 1.0 - t, np.zeros_like(t)], axis=1)


def export_affinity_ply(positions: np.ndarray, values: np.ndarray, path: str) -> None:
    export_ply(positions, affinity_colors(values), path)


def write_manifest(path: str, entries: list[tuple[str, str]]) -> None:
    """Dataset manifest: one `<split><TAB><relative path>` line per scene."""
    body = "".join(f"{split}\t{rel}\n" for split, rel in entries)
    _atomic_write(path, body.encode("utf-8"))


def read_manifest(path: str) -> list[tuple[str, str]]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CloudFormatError(f"{path}:{lineno}: expected '<split>\\t<path>'")
            entries.append((parts[0], parts[1]))
    return entries
