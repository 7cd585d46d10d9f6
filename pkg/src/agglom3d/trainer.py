"""Adam training loop for the student under a chosen objective mode.

Every random choice (scene order, point samples, augmentations) is drawn
from a generator keyed on ``(seed, purpose, epoch, step, slot)``, so a run is
a pure function of its config and data.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, NonFiniteError, ValidationError
from .fusion import FusedFeatureBank, de_mean, de_mean_per_channel
from .objective import LossKind, ObjectiveMode, distill_total, map_teacher_loss
from .scene import PointCloud, augment_elastic, augment_flip, sample_indices
from .student import StudentConfig, StudentModel, backward, forward_encoded, init_student, positional_encode
from .teachers import TeacherSpec

_ORDER, _SAMPLE, _AUGMENT = 1, 2, 3


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    epochs: int = 50
    scenes_per_batch: int = 2
    points_per_scene: int = 2048
    lr_decay: float = 0.95
    # passes over the scene list per epoch
    loop: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: ObjectiveMode = ObjectiveMode.STABILIZED
    augment: bool = False
    elastic_granularity: float = 0.2
    elastic_magnitude: float = 0.01
    de_mean_mode: str = "per_point"
    collapse_window: int = 3

    def __post_init__(self):
        self.mode = ObjectiveMode(self.mode)
        if not self.lr0 >= 0:
            raise ValidationError("lr0 must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError("lr_decay must lie in (0, 1]")
        if self.epochs < 1 or self.scenes_per_batch < 1 or self.points_per_scene < 1 or self.loop < 1:
            raise ValidationError("epochs, scenes_per_batch, points_per_scene and loop must be >= 1")
        if self.de_mean_mode not in ("per_point", "per_channel"):
            raise ValidationError("de_mean_mode must be 'per_point' or 'per_channel'")


@dataclass
class TrainScene:
    """One scene with its fused targets, already de-meaned where the loss asks for it."""

    cloud: PointCloud
    targets: list[np.ndarray]
    mask: np.ndarray

    @property
    def bbox(self):
        return self.cloud.bounds()


@dataclass
class Sample:
    points: np.ndarray
    targets: list[np.ndarray]
    mask: np.ndarray
    bbox: tuple[np.ndarray, np.ndarray]


@dataclass
class TrainState:
    model: StudentModel
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    epoch: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: StudentModel) -> TrainState:
        return cls(model, [np.zeros_like(t) for t in model.tensors()], [np.zeros_like(t) for t in model.tensors()])


@dataclass(frozen=True)
class Collapse:
    step: int
    epoch: int
    reason: str

    def to_dict(self) -> dict:
        return {"event": "collapse", "step": self.step, "epoch": self.epoch, "reason": self.reason}


@dataclass
class TrainResult:
    model: StudentModel
    log: list[dict]
    epoch_totals: list[float]
    collapse: Collapse | None = None

    @property
    def collapsed(self) -> bool:
        return self.collapse is not None


def prepare_scenes(
    clouds: list[PointCloud],
    banks: list[FusedFeatureBank],
    teachers: list[TeacherSpec],
    de_mean_mode: str = "per_point",
) -> list[TrainScene]:
    """Pick each teacher's targets out of the banks and de-mean those whose loss needs it."""
    kinds = [map_teacher_loss(t) for t in teachers]
    scenes = []
    for cloud, bank in zip(clouds, banks):
        if bank.num_points != len(cloud):
            raise ValidationError(f"bank has {bank.num_points} rows for {len(cloud)} points")
        mask = bank.mask
        targets = []
        for t, kind in zip(teachers, kinds):
            f = bank.features[bank.index(t.name)]
            if kind.de_mean:
                f = de_mean(f) if de_mean_mode == "per_point" else de_mean_per_channel(f, mask)
                f[~mask] = 0.0
            targets.append(np.asarray(f, dtype=np.float64))
        scenes.append(TrainScene(cloud, targets, mask))
    return scenes


def adam_update(params, grads, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place Adam step ``t`` (1-based) with bias correction."""
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def scalar_gradient(mode: ObjectiveMode, log_sigma: np.ndarray, dscalar: np.ndarray) -> np.ndarray:
    """Chain the objective's scalar partials onto the stored parameter."""
    if mode.uses_sigma:
        return dscalar * np.exp(log_sigma)
    if mode is ObjectiveMode.AUTO_WEIGHT:
        return dscalar.copy()
    return np.zeros_like(log_sigma)


def objective_scalars(mode: ObjectiveMode, log_sigma: np.ndarray) -> dict:
    if mode is ObjectiveMode.AUTO_WEIGHT:
        return {"weights": 1.0 + log_sigma}
    return {"sigmas": np.exp(log_sigma)}


def evaluate_objective(model: StudentModel, batch: list[Sample], kinds: list[LossKind], mode: ObjectiveMode):
    """Forward pass plus the full objective. Returns (breakdown, gradients)."""
    mode = ObjectiveMode(mode)
    enc = np.concatenate([
        positional_encode(s.points, model.config.pe_frequencies, s.bbox) for s in batch
    ])
    outs, cache = forward_encoded(model, enc)
    mask = np.concatenate([s.mask for s in batch])
    losses, grads = [], []
    for i, kind in enumerate(kinds):
        target = np.concatenate([s.targets[i] for s in batch])
        loss, g = kind(outs[i], target, mask)
        losses.append(loss)
        grads.append(g)
    breakdown, dL, dscalar = distill_total(losses, mode=mode, **objective_scalars(mode, model.log_sigma))
    cot = [dL[i] * grads[i] for i in range(len(kinds))]
    gradients = backward(model, None, cot, cache=cache)
    gradients.tensors[-1] = scalar_gradient(mode, model.log_sigma, dscalar)
    return breakdown, gradients


def train_step(state: TrainState, batch: list[Sample], config: TrainConfig, kinds: list[LossKind]) -> TrainState:
    """One Adam step on ``batch``. Raises ``NonFiniteError`` if the loss or any parameter blows up."""
    model = state.model
    mode = config.mode
    breakdown, grads = evaluate_objective(model, batch, kinds, mode)
    step = state.step + 1
    if not math.isfinite(breakdown.total) or not all(np.all(np.isfinite(g)) for g in grads.tensors):
        raise NonFiniteError("non-finite loss or gradient", step)
    if mode is ObjectiveMode.STABILIZED and breakdown.total < 0:
        raise ContractError(f"stabilized objective went negative ({breakdown.total}) at step {step}")

    lr = config.lr0 * config.lr_decay**state.epoch
    adam_update(model.tensors(), grads.tensors, state.m, state.v, step, lr,
                config.beta1, config.beta2, config.eps)
    if not all(np.all(np.isfinite(t)) for t in model.tensors()):
        raise NonFiniteError("non-finite parameter after update", step)

    names = list(model.config.head_names)
    record = {"step": step, "epoch": state.epoch, "lr": lr, "mode": mode.value}
    record["loss"] = {n: float(x) for n, x in zip(names, breakdown.raw)}
    key = "weight" if mode is ObjectiveMode.AUTO_WEIGHT else "sigma"
    record[key] = {n: float(x) for n, x in zip(names, breakdown.scalars)}
    record["total"] = breakdown.total
    state.log.append(record)
    state.step = step
    return state


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def make_sample(scene: TrainScene, config: TrainConfig, epoch: int, step: int, slot: int) -> Sample:
    cloud = scene.cloud
    if config.augment:
        rng = _rng(config.seed, _AUGMENT, epoch, step, slot)
        flips = rng.uniform(size=2) < 0.5
        cloud = augment_flip(cloud, "x", bool(flips[0]))
        cloud = augment_flip(cloud, "y", bool(flips[1]))
        cloud = augment_elastic(cloud, config.elastic_granularity, config.elastic_magnitude,
                                int(rng.integers(2**31)))
    idx = sample_indices(len(cloud), config.points_per_scene, [config.seed, _SAMPLE, epoch, step, slot])
    return Sample(cloud.points[idx], [t[idx] for t in scene.targets], scene.mask[idx], cloud.bounds())


def steps_per_epoch(num_scenes: int, config: TrainConfig) -> int:
    return math.ceil(num_scenes * config.loop / config.scenes_per_batch)


def _detect_divergence(epoch_totals: list[float], window: int) -> bool:
    if len(epoch_totals) < window:
        return False
    tail = epoch_totals[-window:]
    return all(x < 0 for x in tail) and all(b < a for a, b in zip(tail[:-1], tail[1:]))


def train(
    dataset: list[TrainScene],
    teachers: list[TeacherSpec],
    config: TrainConfig,
    student: StudentConfig | None = None,
    checkpoint_dir=None,
    log_path=None,
) -> TrainResult:
    """Run ``config.epochs`` epochs; collapse ends the run early with a ``Collapse`` record."""
    if not dataset:
        raise ContractError("empty dataset")
    kinds = [map_teacher_loss(t) for t in teachers]
    if student is None:
        student = StudentConfig(tuple(t.dim for t in teachers), tuple(t.name for t in teachers))
    if list(student.head_dims) != [t.dim for t in teachers]:
        raise ContractError("student heads do not match the teacher dimensions")
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    state = TrainState.fresh(init_student(student))
    n_steps = steps_per_epoch(len(dataset), config)
    epoch_totals: list[float] = []
    collapse = None

    for epoch in range(config.epochs):
        state.epoch = epoch
        order = _rng(config.seed, _ORDER, epoch).permutation(np.tile(np.arange(len(dataset)), config.loop))
        first = len(state.log)
        for b in range(n_steps):
            chunk = order[b * config.scenes_per_batch:(b + 1) * config.scenes_per_batch]
            batch = [make_sample(dataset[i], config, epoch, b, j) for j, i in enumerate(chunk)]
            try:
                train_step(state, batch, config, kinds)
            except NonFiniteError as err:
                collapse = Collapse(err.step, epoch, "non-finite")
                break
        if collapse is None:
            epoch_totals.append(float(np.mean([r["total"] for r in state.log[first:]])))
            if config.mode is not ObjectiveMode.STABILIZED and _detect_divergence(epoch_totals, config.collapse_window):
                collapse = Collapse(state.step, epoch, "negative-divergence")
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:03d}.a3ck", state.model, state.step)
        if collapse is not None:
            state.log.append(collapse.to_dict())
            break

    if log_path is not None:
        write_log(log_path, state.log)
    return TrainResult(state.model, state.log, epoch_totals, collapse)


def write_log(path, log: list[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def save_checkpoint(path, model: StudentModel, step: int) -> None:
    from .formats import write_checkpoint

    write_checkpoint(path, {"student": model.config.to_dict()}, model.tensors(), step)


def load_checkpoint(path) -> tuple[StudentModel, int]:
    from .formats import read_checkpoint

    cfg, tensors, step = read_checkpoint(path)
    config = StudentConfig.from_dict(cfg["student"])
    return StudentModel.from_tensors(config, tensors), step


@dataclass
class SigmaTrajectory:
    names: list[str]
    rows: list[tuple[float, ...]]
    collapse_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", *self.names, "status"])
        for e, row in enumerate(self.rows):
            status = "collapse" if e == self.collapse_epoch else "ok"
            w.writerow([e, *[repr(x) for x in row], status])
        return buf.getvalue()


def sigma_trajectory(log: list[dict]) -> SigmaTrajectory:
    """Sigma at the start of every epoch, read from the first step logged in it."""
    steps = [r for r in log if "event" not in r]
    if not steps or not ObjectiveMode(steps[0]["mode"]).uses_sigma:
        raise ContractError("sigma trajectory needs a log from an uncertainty-weighted run")
    names = list(steps[0]["sigma"])
    rows, seen = [], set()
    for r in steps:
        if r["epoch"] not in seen:
            seen.add(r["epoch"])
            rows.append(tuple(r["sigma"][n] for n in names))
    collapse = next((r for r in log if r.get("event") == "collapse"), None)
    if collapse is None:
        return SigmaTrajectory(names, rows)
    # truncate at the collapse epoch; if it died on that epoch's first step, the
    # marker row carries no values
    rows = rows[: collapse["epoch"] + 1]
    if len(rows) == collapse["epoch"]:
        rows.append(tuple(float("nan") for _ in names))
    return SigmaTrajectory(names, rows, collapse["epoch"])
