"""Point clouds, synthetic scenes, voxel reduction, sampling and augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

FLOOR_CLASS = 0
WALL_CLASS = 1


@dataclass
class PointCloud:
    """N points in meters with optional per-point class ids in ``[0, num_classes)``."""

    points: np.ndarray
    labels: np.ndarray | None = None
    scene_id: str = ""
    num_classes: int = 0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValidationError(
                    f"{len(self.labels)} labels for {len(self.points)} points"
                )
            if self.num_classes == 0:
                self.num_classes = max(2, int(self.labels.max()) + 1) if len(self.labels) else 2
            if self.num_classes < 2:
                raise ValidationError("a labelled cloud needs at least 2 classes")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValidationError(f"labels must lie in [0, {self.num_classes - 1}]")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, index: np.ndarray) -> PointCloud:
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels, self.scene_id, self.num_classes)

    def with_points(self, points: np.ndarray) -> PointCloud:
        return PointCloud(points, self.labels, self.scene_id, self.num_classes)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Recipe for a room-like scene: optional floor and two walls plus primitive objects.

    ``points_per_plane`` defaults to ``2 * points_per_object`` for each of the
    three planes. ``size_scale`` shrinks or grows every object about its own
    footprint center without moving it, which is how the cross-domain harness
    builds a geometry-shifted twin of a scene.
    """

    seed: int = 0
    extent: tuple[float, float, float] = (4.0, 4.0, 2.5)
    num_objects: int = 6
    num_classes: int = 6
    points_per_object: int = 400
    floor_and_walls: bool = True
    points_per_plane: int | None = None
    size_scale: float = 1.0

    def validate(self) -> None:
        if len(self.extent) != 3 or any(not (e > 0) for e in self.extent):
            raise ValidationError(f"extent components must be > 0, got {self.extent}")
        if self.num_objects < 1:
            raise ValidationError("num_objects must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.points_per_object < 1:
            raise ValidationError("points_per_object must be >= 1")
        if self.points_per_plane is not None and self.points_per_plane < 0:
            raise ValidationError("points_per_plane must be >= 0")
        if not (self.size_scale > 0):
            raise ValidationError("size_scale must be > 0")

    @property
    def plane_budget(self) -> int:
        """Total number of floor and wall points this spec generates."""
        if not self.floor_and_walls:
            return 0
        per_plane = self.points_per_plane
        if per_plane is None:
            per_plane = 2 * self.points_per_object
        return 3 * per_plane


def _object_classes(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    # Objects cycle through a seeded permutation of the non-structural classes
    # so every class is used before any repeats.
    if spec.floor_and_walls and spec.num_classes > 2:
        pool = np.arange(2, spec.num_classes)
    else:
        pool = np.arange(spec.num_classes)
    order = rng.permutation(pool)
    return order[np.arange(spec.num_objects) % len(order)]


def _box_surface(rng, center, half, n):
    # five faces: the bottom face rests on the floor and is never sampled
    areas = np.array([
        4 * half[0] * half[1],                          # top
        4 * half[1] * half[2], 4 * half[1] * half[2],   # -x, +x
        4 * half[0] * half[2], 4 * half[0] * half[2],   # -y, +y
    ])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 3))
    pts = uv * half
    pts[face == 0, 2] = half[2]
    pts[face == 1, 0] = -half[0]
    pts[face == 2, 0] = half[0]
    pts[face == 3, 1] = -half[1]
    pts[face == 4, 1] = half[1]
    return pts + center


def _ellipsoid_surface(rng, center, radii, n):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radii + center


def generate_scene(spec: SyntheticSceneSpec) -> PointCloud:
    """Build a labelled synthetic room. Identical specs give bit-identical clouds."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5CE7E])
    dx, dy, dz = spec.extent
    chunks, labels = [], []

    if spec.floor_and_walls:
        per_plane = spec.plane_budget // 3
        floor = np.column_stack([
            rng.uniform(0, dx, per_plane), rng.uniform(0, dy, per_plane), np.zeros(per_plane)
        ])
        wall_x = np.column_stack([
            np.zeros(per_plane), rng.uniform(0, dy, per_plane), rng.uniform(0, dz, per_plane)
        ])
        wall_y = np.column_stack([
            rng.uniform(0, dx, per_plane), np.zeros(per_plane), rng.uniform(0, dz, per_plane)
        ])
        chunks += [floor, wall_x, wall_y]
        labels += [np.full(per_plane, FLOOR_CLASS), np.full(2 * per_plane, WALL_CLASS)]

    classes = _object_classes(spec, rng)
    # Objects occupy distinct cells of a coarse floor grid so they never overlap.
    side = int(np.ceil(np.sqrt(spec.num_objects)))
    cells = rng.permutation(side * side)[: spec.num_objects]
    cell_w, cell_h = dx / side, dy / side
    for j in range(spec.num_objects):
        cx = (cells[j] % side + 0.5) * cell_w
        cy = (cells[j] // side + 0.5) * cell_h
        max_half = 0.4 * min(cell_w, cell_h)
        half = rng.uniform(0.35, 1.0, size=3) * np.array([max_half, max_half, 0.3 * dz])
        half = half * spec.size_scale
        n = spec.points_per_object
        if rng.uniform() < 0.5:
            pts = _box_surface(rng, np.array([cx, cy, half[2]]), half, n)
        else:
            pts = _ellipsoid_surface(rng, np.array([cx, cy, half[2]]), half, n)
        chunks.append(pts)
        labels.append(np.full(n, classes[j]))

    return PointCloud(
        np.concatenate(chunks),
        np.concatenate(labels),
        scene_id=f"synthetic-{spec.seed}",
        num_classes=spec.num_classes,
    )


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the members of each occupied voxel by their centroid.

    Output rows are ordered by voxel key. The label of a voxel is the majority
    label of its members, ties going to the smallest class id.
    """
    if not voxel_size > 0:
        raise ValidationError("voxel_size must be > 0")
    if len(cloud) == 0:
        return cloud.subset(np.arange(0))
    keys = voxel_keys(cloud.points, voxel_size)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = len(counts)
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, cloud.points)
    centroid = sums / counts[:, None]
    # Clamp into the members' range so the centroid cannot round into a
    # neighbouring voxel; this keeps the operation idempotent.
    lo = np.full((n_vox, 3), np.inf)
    hi = np.full((n_vox, 3), -np.inf)
    np.minimum.at(lo, inverse, cloud.points)
    np.maximum.at(hi, inverse, cloud.points)
    centroid = np.clip(centroid, lo, hi)

    labels = None
    if cloud.labels is not None:
        votes = np.zeros((n_vox, cloud.num_classes), dtype=np.int64)
        np.add.at(votes, (inverse, cloud.labels), 1)
        labels = votes.argmax(axis=1)
    return PointCloud(centroid, labels, cloud.scene_id, cloud.num_classes)


def sample_points(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform sample of ``n`` points; without replacement when ``n <= N``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    return cloud.subset(sample_indices(len(cloud), n, seed))


def sample_indices(total: int, n: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.choice(total, size=n, replace=n > total)


def augment_flip(cloud: PointCloud, axis: str, apply: bool = True) -> PointCloud:
    """Mirror the cloud along ``axis`` ('x' or 'y') about its centroid."""
    if axis not in ("x", "y"):
        raise ValidationError(f"flip axis must be 'x' or 'y', got {axis!r}")
    if not apply:
        return cloud
    a = 0 if axis == "x" else 1
    pts = cloud.points.copy()
    c = pts[:, a].mean()
    pts[:, a] = 2.0 * c - pts[:, a]
    return cloud.with_points(pts)


@dataclass
class ElasticField:
    """Displacement field defined by noise on a regular grid, trilinearly interpolated."""

    origin: np.ndarray
    spacing: float
    nodes: np.ndarray = field(repr=False)  # (gx, gy, gz, 3)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        rel = (np.asarray(points, dtype=np.float64) - self.origin) / self.spacing
        shape = np.array(self.nodes.shape[:3])
        base = np.clip(np.floor(rel).astype(np.int64), 0, shape - 2)
        frac = rel - base
        out = np.zeros((len(rel), 3))
        for corner in range(8):
            off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
            idx = base + off
            out += w[:, None] * self.nodes[idx[:, 0], idx[:, 1], idx[:, 2]]
        return out


NOISE_CLIP = 8.0


def elastic_field(cloud: PointCloud, granularity: float, magnitude: float, seed: int) -> ElasticField:
    if not granularity > 0:
        raise ValidationError("granularity must be > 0")
    if magnitude < 0:
        raise ValidationError("magnitude must be >= 0")
    lo, hi = cloud.bounds() if len(cloud) else (np.zeros(3), np.zeros(3))
    shape = np.floor((hi - lo) / granularity).astype(np.int64) + 2
    rng = np.random.default_rng([seed, 0xE1A5])
    noise = rng.standard_normal(size=(*shape, 3))
    noise = np.clip(noise, -NOISE_CLIP, NOISE_CLIP) * magnitude
    return ElasticField(lo, granularity, noise)


def augment_elastic(cloud: PointCloud, granularity: float, magnitude: float, seed: int) -> PointCloud:
    """Add a smooth random displacement; each component is bounded by 8 * magnitude."""
    fld = elastic_field(cloud, granularity, magnitude, seed)
    if magnitude == 0 or len(cloud) == 0:
        return cloud
    return cloud.with_points(cloud.points + fld(cloud.points))


__all__ = [
    "PointCloud", "SyntheticSceneSpec", "generate_scene", "voxel_keys", "voxel_downsample",
    "sample_points", "sample_indices", "augment_flip", "augment_elastic", "elastic_field",
    "ElasticField",
]
