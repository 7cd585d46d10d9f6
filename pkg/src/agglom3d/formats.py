"""Little-endian binary artifact formats (all version 1).

=========  ==========================================================
``A3PC``   point cloud: u32 N, u8 has_labels, u32 K, N*3 f64, N u16
``A3FR``   frame bundle: 6 f64 intrinsics, 12 f64 pose, u32 w, u32 h,
           h*w f32 depth
``A3FM``   feature map: u32 w, u32 h, u32 dim, h*w*dim f32
``A3FB``   fused bank: u32 N, u32 T, T u32 dims, per-teacher N*dim f32,
           N u32 counts
``A3CK``   checkpoint: u32 json length, json config, u32 tensor count,
           per tensor (u32 ndim, ndim u32 shape, f64 data), u64 step
=========  ==========================================================

Every header starts with the 4-byte magic and a u32 version.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError
from .geometry import CameraIntrinsics, DepthMap, Pose
from .scene import PointCloud
from .teachers import FeatureMap

VERSION = 1


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(
                f"truncated {self.what}: expected at least {end} bytes, got {len(self.data)}",
                len(self.data),
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def header(self, magic: bytes) -> None:
        got, version = self.unpack("4sI")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported {self.what} version {version}", 4)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.what} has {len(self.data) - self.pos} trailing bytes "
                f"(expected length {self.pos}, actual {len(self.data)})",
                self.pos,
            )


def _read(path, what: str) -> _Reader:
    return _Reader(Path(path).read_bytes(), what)


# --- point cloud -------------------------------------------------------------

def point_cloud_bytes(cloud: PointCloud) -> bytes:
    has = cloud.labels is not None
    out = [struct.pack("<4sIIBI", b"A3PC", VERSION, len(cloud), int(has), cloud.num_classes if has else 0)]
    out.append(cloud.points.astype("<f8").tobytes())
    if has:
        out.append(cloud.labels.astype("<u2").tobytes())
    return b"".join(out)


def write_point_cloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(point_cloud_bytes(cloud))


def read_point_cloud(path) -> PointCloud:
    r = _read(path, "point cloud")
    r.header(b"A3PC")
    n, has, k = r.unpack("IBI")
    pts = r.array("<f8", 3 * n).reshape(n, 3)
    labels = r.array("<u2", n).astype(np.int64) if has else None
    r.finish()
    return PointCloud(pts, labels, scene_id=Path(path).stem, num_classes=k if has else 0)


# --- frame bundle -----------------------------------------------------------

def frame_bytes(pose: Pose, K: CameraIntrinsics, depth: DepthMap) -> bytes:
    depth.check_matches(K)
    return b"".join([
        struct.pack("<4sI", b"A3FR", VERSION),
        K.as_array().astype("<f8").tobytes(),
        pose.as_array().astype("<f8").tobytes(),
        struct.pack("<II", depth.width, depth.height),
        depth.values.astype("<f4").tobytes(),
    ])


def write_frame(path, pose: Pose, K: CameraIntrinsics, depth: DepthMap) -> None:
    Path(path).write_bytes(frame_bytes(pose, K, depth))


def read_frame(path) -> tuple[Pose, CameraIntrinsics, DepthMap]:
    r = _read(path, "frame bundle")
    r.header(b"A3FR")
    fx, fy, cx, cy, w, h = r.unpack("6d")
    pose_vals = r.unpack("12d")
    width, height = r.unpack("II")
    if (int(w), int(h)) != (width, height):
        raise FormatError(f"intrinsics size {int(w)}x{int(h)} != depth size {width}x{height}", 8 + 48 + 96)
    depth = r.array("<f4", width * height).reshape(height, width)
    r.finish()
    K = CameraIntrinsics(fx, fy, cx, cy, width, height)
    pose = Pose(np.array(pose_vals[:9]).reshape(3, 3), np.array(pose_vals[9:]))
    return pose, K, DepthMap(width, height, depth)


# --- feature map ------------------------------------------------------------

def feature_map_bytes(fmap: FeatureMap) -> bytes:
    return struct.pack("<4sIIII", b"A3FM", VERSION, fmap.width, fmap.height, fmap.dim) + \
        fmap.values.astype("<f4").tobytes()


def write_feature_map(path, fmap: FeatureMap) -> None:
    Path(path).write_bytes(feature_map_bytes(fmap))


def load_feature_map(path, expected_dim: int | None = None) -> FeatureMap:
    """Parse an ``A3FM`` file; ``expected_dim`` is the declaring teacher's dimension."""
    r = _read(path, "feature map")
    r.header(b"A3FM")
    width, height, dim = r.unpack("III")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"feature map has dim {dim}, teacher declares {expected_dim}", 16)
    values = r.array("<f4", width * height * dim)
    r.finish()
    return FeatureMap(width, height, dim, values.reshape(height, width, dim))


# --- fused bank -------------------------------------------------------------

def bank_bytes(bank) -> bytes:
    dims = [f.shape[1] for f in bank.features]
    out = [struct.pack("<4sIII", b"A3FB", VERSION, bank.num_points, len(dims))]
    out.append(np.asarray(dims, dtype="<u4").tobytes())
    out += [f.astype("<f4").tobytes() for f in bank.features]
    out.append(bank.counts.astype("<u4").tobytes())
    return b"".join(out)


def write_bank(path, bank) -> None:
    Path(path).write_bytes(bank_bytes(bank))


def read_bank(path, names: list[str] | None = None):
    from .fusion import FusedFeatureBank

    r = _read(path, "fused bank")
    r.header(b"A3FB")
    n, t = r.unpack("II")
    dims = r.array("<u4", t).astype(int)
    feats = [r.array("<f4", n * d).reshape(n, d).astype(np.float64) for d in dims]
    counts = r.array("<u4", n).astype(np.int64)
    r.finish()
    if names is None:
        names = [f"teacher{i}" for i in range(t)]
    elif len(names) != t:
        raise DimensionError(f"bank holds {t} teachers, config declares {len(names)}", 12)
    return FusedFeatureBank(list(names), feats, counts)


# --- checkpoint -------------------------------------------------------------

def checkpoint_bytes(config: dict, tensors: list[np.ndarray], step: int) -> bytes:
    blob = json.dumps(config, sort_keys=True).encode()
    out = [struct.pack("<4sII", b"A3CK", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for t in tensors:
        t = np.asarray(t, dtype="<f8")
        out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        out.append(t.tobytes())
    out.append(struct.pack("<Q", step))
    return b"".join(out)


def write_checkpoint(path, config: dict, tensors: list[np.ndarray], step: int) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, tensors, step))


def read_checkpoint(path) -> tuple[dict, list[np.ndarray], int]:
    r = _read(path, "checkpoint")
    r.header(b"A3CK")
    (length,) = r.unpack("I")
    start = r.pos
    try:
        config = json.loads(r.take(length).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"checkpoint config is not valid JSON: {err}", start) from None
    (count,) = r.unpack("I")
    tensors = []
    for _ in range(count):
        (ndim,) = r.unpack("I")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        tensors.append(r.array("<f8", size).reshape(shape).astype(np.float64))
    (step,) = r.unpack("Q")
    r.finish()
    return config, tensors, step
