"""Point-wise student: positional encoding, tanh trunk, one linear head per teacher.

Each teacher also gets one learnable scalar, stored as ``log_sigma``. The
objective reads it as ``sigma = exp(s)`` in the uncertainty modes and as a
loss weight ``1 + s`` in the auto-weighting ablation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, ValidationError


@dataclass(frozen=True)
class StudentConfig:
    head_dims: tuple[int, ...]
    head_names: tuple[str, ...] = ()
    pe_frequencies: int = 6
    trunk_widths: tuple[int, ...] = (64, 64)
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        names = tuple(self.head_names) or tuple(f"head{i}" for i in range(len(self.head_dims)))
        object.__setattr__(self, "head_names", names)
        if len(names) != len(self.head_dims):
            raise ValidationError("one name per head required")
        if not self.head_dims:
            raise ValidationError("at least one head required")
        if any(w < 1 for w in self.trunk_widths) or any(d < 1 for d in self.head_dims):
            raise ValidationError("layer widths must be >= 1")
        if self.pe_frequencies < 0:
            raise ValidationError("pe_frequencies must be >= 0")

    @property
    def input_dim(self) -> int:
        return 3 + 6 * self.pe_frequencies

    @property
    def feature_dim(self) -> int:
        return self.trunk_widths[-1] if self.trunk_widths else self.input_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StudentConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)


@dataclass
class StudentModel:
    config: StudentConfig
    trunk: list[Layer]
    heads: list[Layer]
    log_sigma: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order; the optimizer updates them in place."""
        out = []
        for layer in self.trunk + self.heads:
            out += [layer.W, layer.b]
        out.append(self.log_sigma)
        return out

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def copy(self) -> StudentModel:
        return StudentModel(
            self.config,
            [Layer(l.W.copy(), l.b.copy()) for l in self.trunk],
            [Layer(l.W.copy(), l.b.copy()) for l in self.heads],
            self.log_sigma.copy(),
        )

    @classmethod
    def from_tensors(cls, config: StudentConfig, tensors: list[np.ndarray]) -> StudentModel:
        model = init_student(config)
        dst = model.tensors()
        if len(dst) != len(tensors) or any(a.shape != b.shape for a, b in zip(dst, tensors)):
            raise ValidationError("tensor list does not match the configured architecture")
        for a, b in zip(dst, tensors):
            a[...] = b
        return model


@dataclass
class Gradients:
    tensors: list[np.ndarray]
    count: int = 1

    @classmethod
    def zeros_like(cls, model: StudentModel) -> Gradients:
        return cls([np.zeros_like(t) for t in model.tensors()], 0)

    @property
    def log_sigma(self) -> np.ndarray:
        return self.tensors[-1]


def init_student(config: StudentConfig) -> StudentModel:
    """Uniform fan-in scaled weights (unit output variance for unit inputs), zero biases, sigma = 1."""
    rng = np.random.default_rng([config.init_seed, 0x57D])

    def layer(fan_in, fan_out):
        bound = np.sqrt(3.0 / fan_in)
        return Layer(rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out))

    widths = (config.input_dim,) + config.trunk_widths
    trunk = [layer(a, b) for a, b in zip(widths[:-1], widths[1:])]
    heads = [layer(config.feature_dim, d) for d in config.head_dims]
    return StudentModel(config, trunk, heads, np.zeros(len(config.head_dims)))


def positional_encode(points: np.ndarray, L: int, bbox) -> np.ndarray:
    """``[p, sin(2^k pi p), cos(2^k pi p)]`` for k < L, with p scaled into [-1, 1] by ``bbox``."""
    if L < 0:
        raise ValidationError("L must be >= 0")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValidationError(f"degenerate bounding box with extent {extent}")
    p = 2.0 * (np.asarray(points, dtype=np.float64).reshape(-1, 3) - lo) / extent - 1.0
    parts = [p]
    for k in range(L):
        arg = (2.0**k) * np.pi * p
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=1)


@dataclass
class ForwardCache:
    activations: list[np.ndarray] = field(default_factory=list)  # input, then tanh outputs


def forward_features(model: StudentModel, points: np.ndarray, bbox=None):
    """Run the trunk and heads; returns (per-head outputs, cache for ``backward``)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if bbox is None:
        bbox = (points.min(axis=0), points.max(axis=0))
    return forward_encoded(model, positional_encode(points, model.config.pe_frequencies, bbox))


def forward_encoded(model: StudentModel, h: np.ndarray):
    """Same as ``forward_features`` for inputs that are already positionally encoded."""
    cache = ForwardCache([h])
    for layer in model.trunk:
        h = np.tanh(h @ layer.W + layer.b)
        cache.activations.append(h)
    outs = [h @ head.W + head.b for head in model.heads]
    return outs, cache


def forward(model: StudentModel, points, bbox=None) -> list[np.ndarray]:
    pts = points.points if hasattr(points, "points") else points
    return forward_features(model, pts, bbox)[0]


def trunk_features(model: StudentModel, points, bbox=None) -> np.ndarray:
    pts = points.points if hasattr(points, "points") else points
    return forward_features(model, pts, bbox)[1].activations[-1]


def backward(
    model: StudentModel,
    points,
    cotangents: list[np.ndarray],
    bbox=None,
    cache: ForwardCache | None = None,
) -> Gradients:
    """Gradient of ``sum_i <out_i, cotangent_i>`` with respect to every parameter.

    The ``log_sigma`` slot is returned as zeros; the objective fills it in.
    """
    if cache is None:
        pts = points.points if hasattr(points, "points") else points
        _, cache = forward_features(model, pts, bbox)
    h = cache.activations[-1]
    if len(cotangents) != model.num_heads:
        raise ContractError(f"{len(cotangents)} cotangents for {model.num_heads} heads")
    for g, head in zip(cotangents, model.heads):
        if g.shape != (h.shape[0], head.W.shape[1]):
            raise ContractError(f"cotangent shape {g.shape} != output shape {(h.shape[0], head.W.shape[1])}")

    head_grads = []
    dh = np.zeros_like(h)
    for g, head in zip(cotangents, model.heads):
        head_grads.append((h.T @ g, g.sum(axis=0)))
        dh += g @ head.W.T

    trunk_grads = []
    for i in range(len(model.trunk) - 1, -1, -1):
        layer = model.trunk[i]
        out, inp = cache.activations[i + 1], cache.activations[i]
        dz = dh * (1.0 - out * out)
        trunk_grads.append((inp.T @ dz, dz.sum(axis=0)))
        dh = dz @ layer.W.T
    trunk_grads.reverse()

    tensors = []
    for gW, gb in trunk_grads + head_grads:
        tensors += [gW, gb]
    tensors.append(np.zeros_like(model.log_sigma))
    return Gradients(tensors, 1)
