"""End-to-end stages shared by the CLI: scene data, training setup and the ablation grid."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CellSpec, RunConfig
from .errors import Agglom3DError, ContractError
from .evalsuite import compute_metrics, find_text_head, ov_segment
from .fusion import FusedFeatureBank, fuse_views
from .geometry import CameraIntrinsics, DepthMap, Pose, orbit_cameras, render_depth
from .objective import ObjectiveMode
from .scene import PointCloud, SyntheticSceneSpec, generate_scene, voxel_downsample
from .student import StudentConfig
from .teachers import (
    FeatureMap, TeacherSpec, jitter_feature_map, render_feature_map, teacher_prototypes, vocabulary_from_teacher,
)
from .trainer import TrainConfig, TrainResult, TrainScene, prepare_scenes, save_checkpoint, sigma_trajectory, train, write_log

# stage tags for seed derivation
SCENE, FRAME, TRAIN, INIT, PROBE, TOY, JITTER = 1, 2, 3, 4, 5, 6, 7


def derive_seed(root: int, *tags: int) -> int:
    """A 63-bit seed that depends on the root seed and the tag path only."""
    state = np.random.SeedSequence([int(root), *map(int, tags)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & (2**63 - 1)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, paths, name: str = "manifest.json") -> dict:
    """Digest every artifact; paths are stored relative to ``out_dir`` and sorted."""
    out_dir = Path(out_dir)
    entries = []
    for p in sorted(Path(p) for p in paths):
        entries.append({"path": p.relative_to(out_dir).as_posix(), "sha256": sha256_file(p),
                        "bytes": p.stat().st_size})
    entries.sort(key=lambda e: e["path"])
    manifest = {"artifacts": entries}
    (out_dir / name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --- scene data -------------------------------------------------------------

@dataclass
class SceneData:
    cloud: PointCloud
    frames: list[tuple[Pose, CameraIntrinsics, DepthMap]]
    maps: list[list[FeatureMap]]   # [frame][teacher]
    bank: FusedFeatureBank | None = None


def scene_spec(cfg: RunConfig, seed: int, size_scale: float | None = None) -> SyntheticSceneSpec:
    s = cfg.scene
    spec = SyntheticSceneSpec(
        seed=seed, extent=tuple(float(e) for e in s.extent), num_objects=s.num_objects,
        num_classes=s.num_classes, points_per_object=s.points_per_object,
        floor_and_walls=s.floor_and_walls, points_per_plane=s.points_per_plane,
        size_scale=s.size_scale if size_scale is None else size_scale,
    )
    spec.validate()
    return spec


def camera_rig(cfg: RunConfig) -> tuple[list[Pose], CameraIntrinsics]:
    s = cfg.scene
    ex, ey, ez = (float(e) for e in s.extent)
    f = s.focal_scale * s.image_width
    K = CameraIntrinsics(f, f, (s.image_width - 1) / 2.0, (s.image_height - 1) / 2.0, s.image_width, s.image_height)
    poses = orbit_cameras((ex / 2, ey / 2), s.camera_radius * min(ex, ey), s.camera_height * ez,
                          s.target_height * ez, s.num_frames)
    return poses, K


def render_frames(cfg: RunConfig, cloud: PointCloud, teachers: list[TeacherSpec], scene_seed: int) -> SceneData:
    poses, K = camera_rig(cfg)
    protos = [teacher_prototypes(t, cloud.num_classes) for t in teachers]
    frames, maps = [], []
    for fi, pose in enumerate(poses):
        depth = render_depth(cloud, pose, K, cfg.fusion.splat_radius)
        frame = (pose, K, depth)
        seed = derive_seed(scene_seed, FRAME, fi)
        fmaps = [render_feature_map(cloud, frame, t, seed, cfg.fusion.splat_radius, p)
                 for t, p in zip(teachers, protos)]
        maps.append([jitter_feature_map(m, cfg.fusion.feature_jitter, derive_seed(seed, JITTER, ti), depth.valid)
                     for ti, m in enumerate(fmaps)])
        frames.append(frame)
    return SceneData(cloud, frames, maps)


def build_scene_data(cfg: RunConfig, scene_seed: int, teachers: list[TeacherSpec] | None = None,
                     size_scale: float | None = None) -> SceneData:
    """Generate, downsample, render every teacher from every camera and fuse."""
    teachers = cfg.teachers if teachers is None else teachers
    cloud = generate_scene(scene_spec(cfg, scene_seed, size_scale))
    cloud = voxel_downsample(cloud, cfg.scene.voxel_size)
    data = render_frames(cfg, cloud, teachers, scene_seed)
    data.bank = fuse_views(cloud, [(*f, m) for f, m in zip(data.frames, data.maps)], teachers,
                           cfg.fusion.depth_tol)
    return data


def scene_seeds(cfg: RunConfig, seed: int) -> list[int]:
    return [derive_seed(seed, SCENE, i) for i in range(cfg.scene.num_scenes)]


# --- training setup ---------------------------------------------------------

def train_config(cfg: RunConfig, seed: int, mode: str | None = None) -> TrainConfig:
    t = cfg.trainer
    return TrainConfig(
        lr0=t.lr0, epochs=t.epochs, scenes_per_batch=t.scenes_per_batch, points_per_scene=t.points_per_scene,
        lr_decay=t.lr_decay, loop=t.loop, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
        seed=derive_seed(seed, TRAIN), mode=mode or cfg.objective.mode, augment=t.augment,
        elastic_granularity=t.elastic_granularity, elastic_magnitude=t.elastic_magnitude,
        de_mean_mode=cfg.fusion.de_mean_mode, collapse_window=t.collapse_window,
    )


def student_config(cfg: RunConfig, teachers: list[TeacherSpec], seed: int) -> StudentConfig:
    return StudentConfig(
        tuple(t.dim for t in teachers), tuple(t.name for t in teachers),
        cfg.student.pe_frequencies, tuple(cfg.student.trunk_widths), derive_seed(seed, INIT) % 2**32,
    )


def linear_toy(num_points: int = 256, seed: int = 0) -> tuple[list[TrainScene], list[TeacherSpec]]:
    """A fit-to-convergence problem: both targets are affine in the normalised coordinates.

    The first teacher is scored with L1, the second with cosine distance.
    Every point is observed.
    """
    rng = np.random.default_rng([seed, TOY])
    pts = rng.uniform(0.0, 1.0, size=(num_points, 3))
    cloud = PointCloud(pts, np.zeros(num_points, dtype=np.int64), "linear-toy", 2)
    lo, hi = cloud.bounds()
    p = 2.0 * (pts - lo) / (hi - lo) - 1.0
    a = 0.5 * p @ rng.standard_normal((3, 4))
    b = 0.5 * p @ rng.standard_normal((3, 3)) + np.array([2.0, 0.0, 0.0])
    teachers = [TeacherSpec("toy-a", 4, loss="l1", de_mean=False),
                TeacherSpec("toy-b", 3, loss="cosine", de_mean=False)]
    return [TrainScene(cloud, [a, b], np.ones(num_points, dtype=bool))], teachers


# --- ablation grid ----------------------------------------------------------

@dataclass
class CellResult:
    cell: str
    seed: int
    mode: str
    teachers: list[str]
    status: str                      # "ok", "collapse" or "error"
    miou: float | None = None
    macc: float | None = None
    final_total: float | None = None
    sigma: dict | None = None
    collapse: dict | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PipelineReport:
    rows: list[CellResult] = field(default_factory=list)

    def cell_names(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.cell not in seen:
                seen.append(r.cell)
        return seen

    def mean_miou(self, cell: str) -> float | None:
        vals = [r.miou for r in self.rows if r.cell == cell and r.miou is not None]
        return float(np.mean(vals)) if vals else None

    def miou_by_seed(self, cell: str) -> dict[int, float | None]:
        return {r.seed: r.miou for r in self.rows if r.cell == cell}

    def to_dict(self) -> dict:
        summary = {c: {"mean_miou": self.mean_miou(c),
                       "completed": sum(r.status == "ok" for r in self.rows if r.cell == c)}
                   for c in self.cell_names()}
        return {"rows": [r.to_dict() for r in self.rows], "summary": summary}

    def to_text(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.4f}"

        header = ["cell", "seed", "mode", "status", "mIoU", "mAcc", "total", "note"]
        body = []
        for r in self.rows:
            note = ""
            if r.collapse:
                note = f"{r.collapse['reason']} at step {r.collapse['step']}"
            elif r.error:
                note = r.error
            body.append([r.cell, str(r.seed), r.mode, r.status, fmt(r.miou), fmt(r.macc), fmt(r.final_total), note])
        for c in self.cell_names():
            body.append([c, "mean", "", "", fmt(self.mean_miou(c)), "", "", ""])
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in [header] + body]
        return "\n".join(lines) + "\n"


def _cell_name(cell: CellSpec) -> str:
    return cell.name or f"{'+'.join(cell.teachers)}/{cell.mode}"


def evaluate_scenes(model, clouds: list[PointCloud], teachers: list[TeacherSpec]):
    """Open-vocabulary labels for every point of every scene, pooled into one Metrics."""
    head = find_text_head(teachers)
    K = max(c.num_classes for c in clouds)
    vocab = vocabulary_from_teacher(teachers[head], K)
    preds = [ov_segment(model, c, vocab, head, bbox=c.bounds()) for c in clouds]
    return compute_metrics(np.concatenate(preds), np.concatenate([c.labels for c in clouds]), K)


def run_cell(cfg: RunConfig, cell: CellSpec, seed: int, data: list[SceneData] | None,
             out_dir: Path | None = None) -> CellResult:
    """Train and evaluate one grid cell. Failures end up in the result instead of propagating."""
    row = CellResult(_cell_name(cell), seed, cell.mode, list(cell.teachers), "ok")
    try:
        if cell.dataset == "linear_toy":
            dataset, teachers = linear_toy(cfg.trainer.points_per_scene, derive_seed(seed, TOY))
            row.teachers = [t.name for t in teachers]
        else:
            teachers = [cfg.teacher(n) for n in cell.teachers]
            find_text_head(teachers)
            names = [t.name for t in teachers]
            dataset = prepare_scenes([d.cloud for d in data], [d.bank.select(names) for d in data],
                                     teachers, cfg.fusion.de_mean_mode)
        tcfg = train_config(cfg, seed, cell.mode)
        result: TrainResult = train(dataset, teachers, tcfg, student_config(cfg, teachers, seed))
        steps = [r for r in result.log if "event" not in r]
        if steps:
            row.final_total = steps[-1]["total"]
            if tcfg.mode.uses_sigma:
                row.sigma = {n: float(s) for n, s in zip(result.model.config.head_names, result.model.sigmas)}
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_log(out_dir / "log.jsonl", result.log)
            save_checkpoint(out_dir / "final.a3ck", result.model, steps[-1]["step"] if steps else 0)
            if tcfg.mode.uses_sigma and steps:
                (out_dir / "sigma.csv").write_text(sigma_trajectory(result.log).to_csv())
        if result.collapse is not None:
            row.status = "collapse"
            row.collapse = result.collapse.to_dict()
        elif cell.dataset == "synthetic":
            metrics = evaluate_scenes(result.model, [d.cloud for d in data], teachers)
            row.miou, row.macc = metrics.miou, metrics.macc
    except (Agglom3DError, ValueError, FloatingPointError) as err:
        row.status = "error"
        row.error = f"{type(err).__name__}: {err}"
    return row


def run_pipeline(cfg: RunConfig, out_dir=None) -> PipelineReport:
    """Every cell for every seed; scene data is built once per seed and shared by all its cells."""
    if not cfg.pipeline.cells:
        raise ContractError("pipeline needs at least one cell")
    for cell in cfg.pipeline.cells:
        ObjectiveMode(cell.mode)
    out = Path(out_dir) if out_dir is not None else None
    report = PipelineReport()
    needs_scenes = any(c.dataset == "synthetic" for c in cfg.pipeline.cells)
    for seed in cfg.pipeline.seeds:
        run_seed = derive_seed(cfg.seed, int(seed))
        data = [build_scene_data(cfg, s) for s in scene_seeds(cfg, run_seed)] if needs_scenes else None
        for ci, cell in enumerate(cfg.pipeline.cells):
            cell_dir = out / f"cell{ci:02d}_seed{seed}" if out is not None else None
            row = run_cell(cfg, cell, run_seed, data, cell_dir)
            row.seed = int(seed)
            report.rows.append(row)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "report.txt").write_text(report.to_text())
        write_manifest(out, [p for p in out.rglob("*") if p.is_file() and not p.name.startswith("manifest")])
    return report
