"""Multi-view fusion of 2D teacher features onto points, de-meaning and histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import CameraIntrinsics, DepthMap, Pose, visible_points
from .scene import PointCloud
from .teachers import FeatureMap, TeacherSpec


@dataclass
class FusedFeatureBank:
    """Per-teacher N x D_i fused targets plus per-point view counts."""

    names: list[str]
    features: list[np.ndarray]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.names) != len(self.features):
            raise ValidationError("one feature matrix per teacher name required")
        for f in self.features:
            if f.shape[0] != len(self.counts):
                raise ValidationError("feature rows must match the number of points")
            if not np.all(np.isfinite(f)):
                raise ValidationError("fused features must be finite")

    @property
    def mask(self) -> np.ndarray:
        return self.counts > 0

    @property
    def num_points(self) -> int:
        return len(self.counts)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def select(self, names: list[str]) -> FusedFeatureBank:
        return FusedFeatureBank(list(names), [self.features[self.index(n)] for n in names], self.counts)

    def subset(self, rows: np.ndarray) -> FusedFeatureBank:
        return FusedFeatureBank(self.names, [f[rows] for f in self.features], self.counts[rows])


Frame = tuple[Pose, CameraIntrinsics, DepthMap, list[FeatureMap]]


def fuse_views(
    cloud: PointCloud,
    frames: list[Frame],
    teachers: list[TeacherSpec],
    depth_tol: float = 0.04,
) -> FusedFeatureBank:
    """Average each teacher's pixel feature over every frame in which a point is visible.

    Frames are accumulated in list order; each frame adds at most one feature
    per point.
    """
    n = len(cloud)
    sums = [np.zeros((n, t.dim)) for t in teachers]
    counts = np.zeros(n, dtype=np.int64)
    for fi, (pose, K, depth, fmaps) in enumerate(frames):
        if len(fmaps) != len(teachers):
            raise ValidationError(f"frame {fi}: {len(fmaps)} feature maps for {len(teachers)} teachers")
        for t, fm in zip(teachers, fmaps):
            if fm.dim != t.dim:
                raise ValidationError(f"frame {fi}: teacher {t.name!r} map has dim {fm.dim}, expected {t.dim}")
            if (fm.width, fm.height) != (K.width, K.height):
                raise ValidationError(f"frame {fi}: teacher {t.name!r} map size does not match camera")
        idx, pu, pv, _ = visible_points(cloud.points, pose, K, depth, depth_tol)
        counts[idx] += 1
        for s, fm in zip(sums, fmaps):
            s[idx] += fm.values[pv, pu].astype(np.float64)
    denom = np.maximum(counts, 1)[:, None]
    feats = [s / denom for s in sums]
    return FusedFeatureBank([t.name for t in teachers], feats, counts)


def de_mean(x: np.ndarray) -> np.ndarray:
    """Subtract each row's mean over channels."""
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=1, keepdims=True)


def de_mean_per_channel(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Alternative reading: subtract the per-channel mean over (masked) rows.

    Unmasked rows stay zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        mask = np.ones(len(x), dtype=bool)
    if not mask.any():
        return x.copy()
    out = x - x[mask].mean(axis=0)
    out[~mask] = 0.0
    return out


@dataclass(frozen=True)
class HistogramSpec:
    lo: float
    hi: float
    bins: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError("histogram needs lo < hi")
        if self.bins < 1:
            raise ValidationError("histogram needs at least one bin")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)


@dataclass
class Histogram:
    counts: np.ndarray
    underflow: int
    overflow: int
    spec: HistogramSpec

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    def tail_mass(self) -> int:
        """Overflow counters plus the two outermost bins."""
        outer = int(self.counts[0]) + (int(self.counts[-1]) if self.spec.bins > 1 else 0)
        return self.underflow + self.overflow + outer

    def to_dict(self) -> dict:
        return {
            "lo": self.spec.lo, "hi": self.spec.hi, "bins": self.spec.bins,
            "counts": self.counts.tolist(), "underflow": self.underflow, "overflow": self.overflow,
        }


def feature_histogram(values: np.ndarray, spec: HistogramSpec) -> Histogram:
    """Count every scalar in ``values``; bins are half-open except the last, which includes ``hi``."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    under = int(np.count_nonzero(v < spec.lo))
    over = int(np.count_nonzero(v > spec.hi))
    inside = v[(v >= spec.lo) & (v <= spec.hi)]
    idx = np.floor((inside - spec.lo) / (spec.hi - spec.lo) * spec.bins).astype(np.int64)
    idx = np.minimum(idx, spec.bins - 1)
    counts = np.bincount(idx, minlength=spec.bins)
    return Histogram(counts, under, over, spec)


def sample_kurtosis(values: np.ndarray) -> float:
    """Pearson (non-excess) kurtosis: 3 for a Gaussian."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    c = v - v.mean()
    m2 = np.mean(c**2)
    return float(np.mean(c**4) / m2**2)
