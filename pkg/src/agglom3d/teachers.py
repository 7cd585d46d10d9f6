"""Synthetic 2D teachers and the text-aligned vocabulary.

A synthetic teacher owns one unit-norm prototype per class. Rendering a
frame looks up the class seen at each pixel, occasionally swaps it for a
wrong class (per-view inconsistency), and perturbs the prototype with
Gaussian noise, a constant channel shift and rare large spikes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ContractError, ValidationError
from .geometry import CameraIntrinsics, DepthMap, Pose, zbuffer
from .scene import PointCloud

MAX_REJECTIONS = 10_000
MAX_COSINE = 0.5


@dataclass(frozen=True)
class TeacherSpec:
    name: str
    dim: int
    text_aligned: bool = False
    prototype_seed: int = 0
    noise_std: float = 0.0
    mean_shift: float = 0.0
    spike_prob: float = 0.0
    spike_scale: float = 0.0
    view_confusion_prob: float = 0.0
    # Optional overrides: loss kind ("cosine", "l1", "l2") and de-mean flag.
    loss: str | None = None
    de_mean: bool | None = None
    # Pairs (a, b): class b reuses class a's prototype, making the two
    # indistinguishable to this teacher.
    aliases: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.dim < 2:
            raise ValidationError(f"teacher {self.name!r}: dim must be >= 2")
        if self.noise_std < 0 or self.spike_scale < 0:
            raise ValidationError(f"teacher {self.name!r}: noise_std and spike_scale must be >= 0")
        for p in (self.spike_prob, self.view_confusion_prob):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"teacher {self.name!r}: probabilities must lie in [0, 1]")
        object.__setattr__(self, "aliases", tuple(tuple(int(x) for x in a) for a in self.aliases))


def default_teachers() -> list[TeacherSpec]:
    return [
        TeacherSpec("lseg-like", 32, text_aligned=True, prototype_seed=11,
                    noise_std=0.15, view_confusion_prob=0.10),
        TeacherSpec("dino-like", 24, prototype_seed=22, noise_std=0.10, view_confusion_prob=0.05),
        TeacherSpec("sd-like", 48, prototype_seed=33, noise_std=0.20, mean_shift=0.30,
                    spike_prob=0.02, spike_scale=3.0, view_confusion_prob=0.15),
    ]


def teacher_prototypes(spec: TeacherSpec, K: int) -> np.ndarray:
    """K unit rows with pairwise |cosine| < 0.5, drawn by seeded rejection sampling."""
    if K < 2:
        raise ValidationError("K must be >= 2")
    rng = np.random.default_rng([spec.prototype_seed, spec.dim, K])
    rows: list[np.ndarray] = []
    rejections = 0
    while len(rows) < K:
        cand = rng.standard_normal(spec.dim)
        cand /= np.linalg.norm(cand)
        if rows and np.abs(np.stack(rows) @ cand).max() >= MAX_COSINE:
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                raise CapacityError(
                    f"cannot place {K} prototypes with |cos| < {MAX_COSINE} in {spec.dim} dims"
                )
            continue
        rows.append(cand)
    P = np.stack(rows)
    for a, b in spec.aliases:
        P[b] = P[a]
    return P


@dataclass
class FeatureMap:
    width: int
    height: int
    dim: int
    values: np.ndarray = field(repr=False)  # (height, width, dim) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(self.height, self.width, self.dim)
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("feature map values must be finite")


@dataclass(frozen=True)
class VocabularySet:
    embeddings: np.ndarray  # (K, D) unit rows

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def render_feature_map(
    scene: PointCloud,
    frame: tuple[Pose, CameraIntrinsics, DepthMap],
    spec: TeacherSpec,
    frame_seed: int,
    splat_radius: int = 1,
    prototypes: np.ndarray | None = None,
) -> FeatureMap:
    """Synthesise the teacher's view of one frame.

    All random draws are made for every pixel in raster order from a
    generator keyed on (frame_seed, teacher seed), so each pixel's outcome is
    a fixed function of its index.
    """
    if not scene.has_labels:
        raise ValidationError("render_feature_map needs a labelled scene")
    pose, K, depth = frame
    depth.check_matches(K)
    P = teacher_prototypes(spec, scene.num_classes) if prototypes is None else prototypes
    n_classes, D = P.shape

    _, owner = zbuffer(scene.points, pose, K, splat_radius)
    owner = owner.reshape(-1)
    valid = depth.valid.reshape(-1) & (owner >= 0)
    n_pix = K.width * K.height

    rng = np.random.default_rng([frame_seed, spec.prototype_seed, 0xFEA7])
    confuse = rng.uniform(size=n_pix) < spec.view_confusion_prob
    shift = rng.integers(1, n_classes, size=n_pix)
    noise = rng.standard_normal(size=(n_pix, D))
    spike = rng.uniform(size=n_pix) < spec.spike_prob
    spike_dim = rng.integers(0, D, size=n_pix)
    spike_sign = np.where(rng.uniform(size=n_pix) < 0.5, -1.0, 1.0)

    cls = np.where(owner >= 0, scene.labels[np.maximum(owner, 0)], 0)
    # uniform over the other classes: add a nonzero offset modulo K
    cls = np.where(confuse, (cls + shift) % n_classes, cls)
    feats = P[cls] + spec.noise_std * noise + spec.mean_shift
    rows = np.nonzero(spike)[0]
    feats[rows, spike_dim[rows]] += spec.spike_scale * spike_sign[rows]
    feats[~valid] = 0.0
    return FeatureMap(K.width, K.height, D, feats.reshape(K.height, K.width, D))


def jitter_feature_map(fmap: FeatureMap, std: float, seed: int, valid: np.ndarray | None = None) -> FeatureMap:
    """Add i.i.d. Gaussian noise to feature values, only where ``valid`` (default: every pixel)."""
    if std < 0:
        raise ValidationError("jitter std must be >= 0")
    if std == 0:
        return fmap
    noise = np.random.default_rng(seed).normal(0.0, std, fmap.values.shape)
    if valid is not None:
        noise[~np.asarray(valid, dtype=bool)] = 0.0
    return FeatureMap(fmap.width, fmap.height, fmap.dim, fmap.values + noise)


def vocabulary_from_teacher(spec: TeacherSpec, K: int) -> VocabularySet:
    if not spec.text_aligned:
        raise ContractError(f"teacher {spec.name!r} is not text-aligned and has no vocabulary")
    return VocabularySet(teacher_prototypes(spec, K))
