"""Pinhole camera model, z-buffer visibility and point-pixel correspondences.

Conventions: camera x right, y down, z forward. Pixel (u, v) has its center
at integer coordinates, so a projected point belongs to pixel
``(floor(u + 0.5), floor(v + 0.5))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .scene import PointCloud

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be > 0")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``q = R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValidationError("rotation must be orthonormal with det 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-9:
            raise ValidationError("look_at direction is parallel to the up vector")
        right /= norm
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ eye)

    def inverse(self) -> Pose:
        """Camera-to-world transform, returned in the same ``R p + t`` form."""
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(-1), self.translation])


@dataclass
class DepthMap:
    width: int
    height: int
    values: np.ndarray  # (height, width) float32, <= 0 means no depth

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(self.height, self.width)

    def check_matches(self, K: CameraIntrinsics) -> None:
        if (self.width, self.height) != (K.width, K.height):
            raise ValidationError(
                f"depth map is {self.width}x{self.height}, camera is {K.width}x{K.height}"
            )

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0


@dataclass(frozen=True)
class Correspondence:
    point_index: int
    pixel: tuple[int, int]
    cam_depth: float


def project_points(points: np.ndarray, pose: Pose, K: CameraIntrinsics):
    """Vectorised projection. Returns ``(u, v, depth, ok)``; rows with ``ok`` False are behind the camera."""
    q = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = q[:, 2]
    ok = z > MIN_DEPTH
    safe = np.where(ok, z, 1.0)
    u = K.fx * q[:, 0] / safe + K.cx
    v = K.fy * q[:, 1] / safe + K.cy
    return u, v, z, ok


def project_point(p, pose: Pose, K: CameraIntrinsics) -> tuple[float, float, float] | None:
    u, v, z, ok = project_points(np.asarray(p, dtype=np.float64)[None], pose, K)
    if not ok[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def backproject_pixel(u: float, v: float, depth: float, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    if not depth > 0:
        raise ValidationError("depth must be > 0")
    q = np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])
    return pose.rotation.T @ (q - pose.translation)


def pixel_of(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.floor(u + 0.5).astype(np.int64), np.floor(v + 0.5).astype(np.int64)


def zbuffer(points: np.ndarray, pose: Pose, K: CameraIntrinsics, splat_radius: int = 1):
    """Min-depth buffer plus the index of the winning point for every pixel.

    A point writes to every pixel within ``splat_radius`` (Chebyshev) of its
    own pixel. Depth ties go to the lower point index. Pixels nobody writes
    get depth 0 and index -1.
    """
    if splat_radius < 0:
        raise ValidationError("splat_radius must be >= 0")
    u, v, z, ok = project_points(points, pose, K)
    pu, pv = pixel_of(u, v)
    idx = np.nonzero(ok)[0]
    pu, pv, z = pu[idx], pv[idx], z[idx]

    cand_pix, cand_z, cand_idx = [], [], []
    r = int(splat_radius)
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            uu, vv = pu + du, pv + dv
            inside = (uu >= 0) & (uu < K.width) & (vv >= 0) & (vv < K.height)
            cand_pix.append(vv[inside] * K.width + uu[inside])
            cand_z.append(z[inside])
            cand_idx.append(idx[inside])
    pix = np.concatenate(cand_pix)
    zz = np.concatenate(cand_z)
    ii = np.concatenate(cand_idx)

    depth = np.zeros(K.width * K.height, dtype=np.float64)
    owner = np.full(K.width * K.height, -1, dtype=np.int64)
    if len(pix):
        order = np.lexsort((ii, zz, pix))
        pix, zz, ii = pix[order], zz[order], ii[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        depth[pix[first]] = zz[first]
        owner[pix[first]] = ii[first]
    return depth.reshape(K.height, K.width), owner.reshape(K.height, K.width)


def render_depth(cloud: PointCloud, pose: Pose, K: CameraIntrinsics, splat_radius: int = 1) -> DepthMap:
    depth, _ = zbuffer(cloud.points, pose, K, splat_radius)
    return DepthMap(K.width, K.height, depth.astype(np.float32))


def visible_points(points: np.ndarray, pose: Pose, K: CameraIntrinsics, depth: DepthMap, depth_tol: float):
    """Vectorised visibility test. Returns ``(index, pu, pv, cam_depth)`` of visible points."""
    depth.check_matches(K)
    if not depth_tol > 0:
        raise ValidationError("depth_tol must be > 0")
    u, v, z, ok = project_points(points, pose, K)
    pu, pv = pixel_of(u, v)
    ok &= (pu >= 0) & (pu < K.width) & (pv >= 0) & (pv < K.height)
    idx = np.nonzero(ok)[0]
    pu, pv, z = pu[idx], pv[idx], z[idx]
    ref = depth.values[pv, pu].astype(np.float64)
    keep = (ref > 0) & (np.abs(z - ref) <= depth_tol)
    return idx[keep], pu[keep], pv[keep], z[keep]


def compute_correspondences(
    cloud: PointCloud, pose: Pose, K: CameraIntrinsics, depth: DepthMap, depth_tol: float = 0.04
) -> list[Correspondence]:
    idx, pu, pv, z = visible_points(cloud.points, pose, K, depth, depth_tol)
    return [
        Correspondence(int(i), (int(a), int(b)), float(d)) for i, a, b, d in zip(idx, pu, pv, z)
    ]


def orbit_cameras(
    center, radius: float, height: float, target_height: float, num_frames: int, phase: float = 0.0
) -> list[Pose]:
    """Cameras evenly spaced on a horizontal circle, all looking at the circle's axis."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(num_frames):
        a = phase + 2.0 * np.pi * k / num_frames
        eye = np.array([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), height])
        target = np.array([center[0], center[1], target_height])
        poses.append(Pose.look_at(eye, target))
    return poses
