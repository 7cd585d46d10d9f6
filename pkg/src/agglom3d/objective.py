"""Distillation losses and the uncertainty-weighted multi-teacher objective."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError
from .teachers import TeacherSpec

DEGENERATE_NORM = 1e-12


class ObjectiveMode(str, Enum):
    STABILIZED = "stabilized"        # L/(2 s^2) + log(1 + s)
    NAIVE = "naive_log_sigma"        # L/(2 s^2) + log s
    AUTO_WEIGHT = "auto_weight"      # w L, w learned, no regularizer
    UNWEIGHTED = "unweighted"        # plain sum

    @property
    def uses_sigma(self) -> bool:
        return self in (ObjectiveMode.STABILIZED, ObjectiveMode.NAIVE)


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != n:
        raise ContractError(f"mask has {mask.shape[0]} entries for {n} rows")
    if not mask.any():
        raise ContractError("empty mask: no supervised rows")
    return mask


def _check_shapes(f3: np.ndarray, f2: np.ndarray) -> None:
    if f3.shape != f2.shape:
        raise ContractError(f"student output {f3.shape} and target {f2.shape} differ in shape")


def cosine_loss(f3: np.ndarray, f2: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over masked rows of ``1 - cos(f3, f2)`` and its gradient in ``f3``.

    Student rows with norm below 1e-12 count as loss 1 with zero gradient.
    """
    _check_shapes(f3, f2)
    mask = _check_mask(mask, f3.shape[0])
    a, b = f3[mask], f2[mask]
    nb = np.linalg.norm(b, axis=1)
    if np.any(nb == 0):
        raise ContractError("masked-in target rows must have nonzero norm")
    na = np.linalg.norm(a, axis=1)
    ok = na >= DEGENERATE_NORM
    safe_na = np.where(ok, na, 1.0)
    cos = np.where(ok, np.einsum("ij,ij->i", a, b) / (safe_na * nb), 0.0)
    m = a.shape[0]
    loss = float(np.sum(1.0 - cos) / m)
    dcos = b / (safe_na * nb)[:, None] - cos[:, None] * a / (safe_na**2)[:, None]
    dcos[~ok] = 0.0
    grad = np.zeros_like(f3, dtype=np.float64)
    grad[mask] = -dcos / m
    return loss, grad


def l1_loss(f3: np.ndarray, f2: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error over masked entries; the subgradient at zero is zero."""
    _check_shapes(f3, f2)
    mask = _check_mask(mask, f3.shape[0])
    diff = f3[mask] - f2[mask]
    m = diff.size
    grad = np.zeros_like(f3, dtype=np.float64)
    grad[mask] = np.sign(diff) / m
    return float(np.abs(diff).sum() / m), grad


def l2_loss(f3: np.ndarray, f2: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    _check_shapes(f3, f2)
    mask = _check_mask(mask, f3.shape[0])
    diff = f3[mask] - f2[mask]
    m = diff.size
    grad = np.zeros_like(f3, dtype=np.float64)
    grad[mask] = 2.0 * diff / m
    return float((diff * diff).sum() / m), grad


LOSSES = {"cosine": cosine_loss, "l1": l1_loss, "l2": l2_loss}


@dataclass(frozen=True)
class LossKind:
    kind: str
    de_mean: bool = False

    def __call__(self, f3, f2, mask):
        return LOSSES[self.kind](f3, f2, mask)


_DEFAULT_KINDS = {"lseg": LossKind("cosine"), "dino": LossKind("l1"), "sd": LossKind("cosine", True)}


def map_teacher_loss(teacher: TeacherSpec) -> LossKind:
    """Loss for a teacher: explicit ``loss``/``de_mean`` fields win over the name-based default."""
    family = teacher.name.split("-")[0].lower()
    base = _DEFAULT_KINDS.get(family)
    if teacher.loss is None and base is None:
        raise ConfigError(f"no default loss for teacher {teacher.name!r}; set 'loss'", "teachers.loss")
    kind = teacher.loss if teacher.loss is not None else base.kind
    if kind not in LOSSES:
        raise ConfigError(f"unknown loss {kind!r}; expected one of {sorted(LOSSES)}", "teachers.loss")
    demean = teacher.de_mean if teacher.de_mean is not None else (base.de_mean if base else False)
    return LossKind(kind, demean)


@dataclass
class LossBreakdown:
    raw: np.ndarray           # L_i
    weighted: np.ndarray      # the data term actually summed for each teacher
    regularizer: np.ndarray   # log(1 + s), log s or 0
    total: float
    scalars: np.ndarray       # sigma_i, or w_i in auto-weight mode

    def to_dict(self, names: list[str]) -> dict:
        return {
            "loss": {n: float(v) for n, v in zip(names, self.raw)},
            "scalar": {n: float(v) for n, v in zip(names, self.scalars)},
            "total": float(self.total),
        }


def distill_total(
    losses,
    sigmas=None,
    mode: ObjectiveMode | str = ObjectiveMode.STABILIZED,
    weights=None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Combine per-teacher losses.

    Returns the breakdown, ``d total / d L_i`` and the partial with respect to
    each learnable scalar: ``sigma_i`` in the uncertainty modes, ``w_i`` in
    auto-weight mode, zeros when unweighted.
    """
    mode = ObjectiveMode(mode)
    L = np.asarray(losses, dtype=np.float64)
    if np.any(L < 0):
        raise ContractError("per-teacher losses must be >= 0")
    zeros = np.zeros_like(L)

    if mode is ObjectiveMode.UNWEIGHTED:
        return LossBreakdown(L, L.copy(), zeros, float(L.sum()), np.ones_like(L)), np.ones_like(L), zeros

    if mode is ObjectiveMode.AUTO_WEIGHT:
        w = np.ones_like(L) if weights is None else np.asarray(weights, dtype=np.float64)
        term = w * L
        return LossBreakdown(L, term, zeros, float(term.sum()), w), w.copy(), L.copy()

    s = np.asarray(sigmas, dtype=np.float64)
    if np.any(~(s > 0)):
        raise ContractError("sigma must be > 0 in uncertainty-weighted modes")
    weight = 1.0 / (2.0 * s * s)
    term = weight * L
    if mode is ObjectiveMode.STABILIZED:
        reg = np.log1p(s)
        dreg = 1.0 / (1.0 + s)
    else:
        reg = np.log(s)
        dreg = 1.0 / s
    total = float(term.sum() + reg.sum())
    dsigma = -L / (s**3) + dreg
    return LossBreakdown(L, term, reg, total, s), weight, dsigma
