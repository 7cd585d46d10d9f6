"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints a
PASS/FAIL line per criterion.
"""

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import brentq, minimize_scalar

from agglom3d.cli import run
from agglom3d.config import RunConfig, load_config
from agglom3d.evalsuite import ProbeConfig, compute_metrics, linear_probe
from agglom3d.fusion import HistogramSpec, de_mean, feature_histogram, fuse_views, sample_kurtosis
from agglom3d.geometry import CameraIntrinsics, Pose, backproject_pixel, project_points, render_depth
from agglom3d.objective import ObjectiveMode, distill_total
from agglom3d.pipeline import (
    build_scene_data, derive_seed, render_frames, run_pipeline, scene_seeds, scene_spec, student_config,
    train_config,
)
from agglom3d.scene import generate_scene, voxel_downsample
from agglom3d.teachers import TeacherSpec, default_teachers
from agglom3d.trainer import prepare_scenes, read_log, train

from conftest import random_pose, random_rotation
from gradcheck import max_relative_error, tiny_problem
from test_evalsuite import metrics_oracle
from test_fusion import brute_fuse, make_frames
from test_geometry import brute_zbuffer

CONFIGS = Path(__file__).parents[1] / "configs"


def record(request, **values):
    for k, v in values.items():
        request.node.user_properties.append((k, v))


@pytest.mark.criterion(1, "gradient correctness, all objective modes")
def test_gradients_match_finite_differences(request):
    start = time.perf_counter()
    worst = {m.value: max_relative_error(*tiny_problem(seed=0), m) for m in ObjectiveMode}
    elapsed = time.perf_counter() - start
    record(request, worst=f"{max(worst.values()):.1e}", seconds=f"{elapsed:.1f}")
    assert all(e < 1e-4 for e in worst.values()), worst
    assert elapsed < 10


@pytest.mark.criterion(2, "objective analytics")
def test_objective_analytics(request):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    # (a) 10^4 random (L, sigma) triples
    L = rng.uniform(0, 10, (10_000, 3)) * rng.choice([0.0, 1e-6, 1.0], (10_000, 3))
    S = np.exp(rng.uniform(-8, 4, (10_000, 3)))
    lowest = min(distill_total(l, s, "stabilized")[0].total for l, s in zip(L, S))
    assert lowest >= 0

    # (b) naive minimum over sigma against the closed form
    for Lv in (1.0, 1e-2, 1e-4, 1e-8):
        res = minimize_scalar(lambda u: distill_total([Lv], [math.exp(u)], "naive_log_sigma")[0].total,
                              bounds=(-15, 5), method="bounded", options={"xatol": 1e-10})
        closed = 0.5 + 0.5 * math.log(Lv)
        assert abs(res.fun - closed) < 1e-6
        assert abs(math.exp(res.x) - math.sqrt(Lv)) < 1e-4 * math.sqrt(Lv)
    assert abs((0.5 + 0.5 * math.log(1e-8)) - (-8.7103)) < 1e-4

    # (c) stabilized minimizer: root of the analytic sigma partial
    for Lv in (1e-8, 1e-4, 1e-2, 0.3, 1.0, 10.0):
        s = brentq(lambda x: distill_total([Lv], [x], "stabilized")[2][0], 1e-9, 1e3, xtol=1e-15)
        assert abs(s**3 - Lv * (1 + s)) < 1e-6
        grid = np.geomspace(1e-6, 1e3, 2001)
        assert distill_total([Lv], [s], "stabilized")[0].total <= min(
            distill_total([Lv], [g], "stabilized")[0].total for g in grid) + 1e-12
    elapsed = time.perf_counter() - start
    record(request, min_stabilized=f"{lowest:.3g}", seconds=f"{elapsed:.1f}")
    assert elapsed < 5


@pytest.mark.criterion(3, "collapse reproduction on the toy problem")
def test_collapse_reproduction(request, tmp_path):
    start = time.perf_counter()
    cfg = load_config(CONFIGS / "collapse.yaml")
    report = run_pipeline(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    rows = {r.mode: (i, r) for i, r in enumerate(report.rows)}
    notes = {}
    for mode in ("naive_log_sigma", "auto_weight"):
        i, row = rows[mode]
        assert row.status == "collapse", (mode, row.status, row.error)
        log = read_log(tmp_path / f"cell{i:02d}_seed0" / "log.jsonl")
        assert log[-1]["event"] == "collapse"
        if row.collapse["reason"] == "negative-divergence":
            totals = {}
            for r in log[:-1]:
                totals.setdefault(r["epoch"], []).append(r["total"])
            means = [float(np.mean(totals[e])) for e in sorted(totals)][-3:]
            assert all(m < 0 for m in means) and means[0] > means[1] > means[2]
        notes[mode] = f"{row.collapse['reason']}@{row.collapse['step']}"
    i, row = rows["stabilized"]
    assert row.status == "ok"
    log = read_log(tmp_path / f"cell{i:02d}_seed0" / "log.jsonl")
    assert {r["epoch"] for r in log} == set(range(50))
    assert all(r["total"] >= 0 for r in log)
    record(request, **notes, stabilized_min_total=f"{min(r['total'] for r in log):.3g}", seconds=f"{elapsed:.1f}")
    assert elapsed < 60


def _two_teacher_config(teachers) -> RunConfig:
    cfg = RunConfig(teachers=teachers)
    cfg.trainer.lr0, cfg.trainer.loop, cfg.trainer.epochs, cfg.trainer.scenes_per_batch = 3e-3, 8, 50, 1
    return cfg


def _train_on_scene(cfg, root_seed):
    data = build_scene_data(cfg, scene_seeds(cfg, root_seed)[0])
    dataset = prepare_scenes([data.cloud], [data.bank], cfg.teachers)
    result = train(dataset, cfg.teachers, train_config(cfg, root_seed, "stabilized"),
                   student_config(cfg, cfg.teachers, root_seed))
    return data, result


@pytest.mark.slow
@pytest.mark.criterion(4, "noisier teacher learns the larger sigma")
def test_uncertainty_ordering(request):
    start = time.perf_counter()
    cfg = _two_teacher_config([TeacherSpec("dino-a", 16, prototype_seed=5, noise_std=0.05),
                               TeacherSpec("dino-b", 16, prototype_seed=6, noise_std=0.5)])
    wins = 0
    for seed in range(20):
        _, result = _train_on_scene(cfg, derive_seed(7, seed))
        sigma_a, sigma_b = result.model.sigmas
        wins += bool(sigma_b > sigma_a)
    elapsed = time.perf_counter() - start
    record(request, wins=f"{wins}/20", seconds=f"{elapsed:.0f}")
    assert wins >= 19
    assert elapsed < 300


@pytest.mark.criterion(5, "de-mean contract")
def test_de_mean_contract(request):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    x = rng.normal(0.3, 2.0, (10_000, 48))
    d = de_mean(x)
    vocab = rng.normal(size=(12, 48))
    vocab -= vocab.mean(axis=1, keepdims=True)
    row_means = np.abs(d.mean(axis=1)).max()
    idempotence = np.abs(de_mean(d) - d).max()
    preserved = np.array_equal(np.argmax(x @ vocab.T, axis=1), np.argmax(d @ vocab.T, axis=1))
    elapsed = time.perf_counter() - start
    record(request, max_row_mean=f"{row_means:.1e}", seconds=f"{elapsed:.2f}")
    assert row_means < 1e-12 and idempotence <= 1e-12 and preserved
    assert elapsed < 2


@pytest.mark.criterion(6, "geometry oracles")
def test_geometry_oracles(request):
    from agglom3d.geometry import compute_correspondences

    start = time.perf_counter()
    rng = np.random.default_rng(6)
    K = CameraIntrinsics(525.0, 520.0, 319.5, 239.5, 640, 480)
    worst = 0.0
    for _ in range(100_000):
        pose = Pose(random_rotation(rng), rng.normal(scale=2.0, size=3))
        q = rng.uniform([-2, -2, 0.1], [2, 2, 8])
        p = pose.rotation.T @ (q - pose.translation)
        u, v, z, ok = project_points(p, pose, K)
        assert ok[0]
        worst = max(worst, float(np.abs(backproject_pixel(u[0], v[0], z[0], pose, K) - p).max()))
    assert worst < 1e-9

    small = CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
    for trial in range(20):
        from conftest import random_scene

        cloud = random_scene(rng, 500)
        pose = Pose.identity() if trial % 2 == 0 else random_pose(rng, 0.05)
        radius = trial % 3
        oracle, pix = brute_zbuffer(cloud.points, pose, small, radius)
        depth = render_depth(cloud, pose, small, radius)
        assert np.array_equal(depth.values, oracle.astype(np.float32))
        expected = []
        for i, entry in enumerate(pix):
            if entry is not None and 0 <= entry[0] < small.width and 0 <= entry[1] < small.height:
                ref = float(depth.values[entry[1], entry[0]])
                if ref > 0 and abs(entry[2] - ref) <= 0.04:
                    expected.append((i, (entry[0], entry[1])))
        got = [(c.point_index, c.pixel) for c in compute_correspondences(cloud, pose, small, depth, 0.04)]
        assert got == expected
    elapsed = time.perf_counter() - start
    record(request, round_trip=f"{worst:.1e}", seconds=f"{elapsed:.1f}")
    assert elapsed < 30


@pytest.mark.criterion(7, "fusion oracle and frame-order invariance")
def test_fusion_oracle(request):
    from conftest import random_scene
    from test_fusion import TEACHERS

    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        cloud = random_scene(rng, 300)
        frames = make_frames(rng, cloud, 5)
        bank = fuse_views(cloud, frames, TEACHERS, 0.04)
        oracle, counts = brute_fuse(cloud, frames, 0.04)
        assert np.array_equal(bank.counts, counts)
        worst = max(worst, max(np.abs(g - w).max() for g, w in zip(bank.features, oracle)))
        shuffled = fuse_views(cloud, [frames[i] for i in rng.permutation(5)], TEACHERS, 0.04)
        worst = max(worst, max(np.abs(a - b).max() for a, b in zip(bank.features, shuffled.features)))
    elapsed = time.perf_counter() - start
    record(request, max_abs_diff=f"{worst:.1e}", seconds=f"{elapsed:.1f}")
    assert worst < 1e-12
    assert elapsed < 10


@pytest.mark.criterion(8, "metrics oracle")
def test_metrics_oracle(request):
    start = time.perf_counter()
    m = compute_metrics(np.zeros(4, int), np.array([0, 0, 1, 1]), 2)
    assert m.per_class_iou.tolist() == [0.5, 0.0] and m.miou == 0.25
    rng = np.random.default_rng(8)
    for _ in range(100):
        K = int(rng.integers(2, 8))
        n = int(rng.integers(1, 1000))
        pred, gt = rng.integers(0, K, n), rng.integers(0, K, n)
        got = compute_metrics(pred, gt, K)
        assert (got.miou, got.macc) == metrics_oracle(pred, gt, K)
    elapsed = time.perf_counter() - start
    record(request, seconds=f"{elapsed:.2f}")
    assert elapsed < 5


@pytest.mark.slow
@pytest.mark.criterion(9, "concat probe beats single heads and the average")
def test_complementarity_ordering(request):
    start = time.perf_counter()
    cfg = _two_teacher_config([
        TeacherSpec("dino-a", 16, prototype_seed=5, noise_std=0.1, aliases=((2, 3),)),
        TeacherSpec("dino-b", 16, prototype_seed=6, noise_std=0.1, aliases=((0, 1),)),
    ])
    margins = []
    for seed in range(5):
        root = derive_seed(9, seed)
        data, result = _train_on_scene(cfg, root)
        perm = np.random.default_rng(root).permutation(len(data.cloud))
        half = len(perm) // 2
        train_split, eval_split = data.cloud.subset(perm[:half]), data.cloud.subset(perm[half:])
        box = data.cloud.bounds()
        scores = {c.label: linear_probe(result.model, train_split, eval_split, c, box, box).miou
                  for c in (ProbeConfig("concat"), ProbeConfig("average"),
                            ProbeConfig("single", 0), ProbeConfig("single", 1))}
        margins.append(scores["concat"] - max(v for k, v in scores.items() if k != "concat"))
    elapsed = time.perf_counter() - start
    record(request, min_margin=f"{min(margins):.4f}", seconds=f"{elapsed:.0f}")
    assert all(m >= 0 for m in margins), margins
    assert elapsed < 180


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    timings = []
    for name in ("first", "second"):
        start = time.perf_counter()
        code = run(["pipeline", "--config", str(CONFIGS / "ablation.yaml"), "--out", str(root / name),
                    "--deterministic"])
        timings.append(time.perf_counter() - start)
        assert code == 0
    return root / "first", root / "second", timings


@pytest.mark.slow
@pytest.mark.criterion(10, "ablation direction: stabilized three teachers vs baselines")
def test_ablation_direction(request, ablation_runs):
    first, _, timings = ablation_runs
    rows = json.loads((first / "report.json").read_text())["rows"]
    by = {(r["cell"], r["seed"]): r for r in rows}
    assert all(r["status"] == "ok" for r in rows)
    seeds = sorted({r["seed"] for r in rows})
    mean = {c: float(np.mean([by[c, s]["miou"] for s in seeds]))
            for c in ("lseg-only/unweighted", "all/unweighted", "all/stabilized")}
    wins = sum(by["all/stabilized", s]["miou"] >= by["all/unweighted", s]["miou"] for s in seeds)
    record(request, **{k: f"{v:.4f}" for k, v in mean.items()}, wins=f"{wins}/{len(seeds)}",
           seconds=f"{timings[0]:.0f}")
    assert mean["all/stabilized"] >= mean["lseg-only/unweighted"]
    assert wins >= 4
    assert timings[0] < 600


@pytest.mark.slow
@pytest.mark.criterion(11, "deterministic pipeline rerun is byte-identical")
def test_pipeline_determinism(request, ablation_runs):
    first, second, timings = ablation_runs
    assert (first / "manifest.json").read_bytes() == (second / "manifest.json").read_bytes()
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    logs = [f for f in files if f.suffix in (".jsonl", ".a3ck")]
    assert logs
    for f in files:
        assert (first / f).read_bytes() == (second / f).read_bytes(), f
    record(request, files=len(files), seconds=f"{timings[1]:.0f}")
    assert timings[1] < 600


@pytest.mark.criterion(12, "heavy tails show up in the sd-like histogram")
def test_heavy_tail_detection(request):
    start = time.perf_counter()
    cfg = RunConfig()
    spiky = default_teachers()[2]
    calm = dataclasses.replace(spiky, spike_prob=0.0)
    cloud = voxel_downsample(generate_scene(scene_spec(cfg, 3)), cfg.scene.voxel_size)

    def rendered_values(teacher):
        data = render_frames(cfg, cloud, [teacher], 3)
        return np.concatenate([maps[0].values[depth.valid].reshape(-1)
                               for (_, _, depth), maps in zip(data.frames, data.maps)])

    on, off = rendered_values(spiky), rendered_values(calm)
    spec = HistogramSpec(-1.5, 2.1, 36)
    tail_on, tail_off = feature_histogram(on, spec).tail_mass(), feature_histogram(off, spec).tail_mass()
    k_on, k_off = sample_kurtosis(on), sample_kurtosis(off)
    elapsed = time.perf_counter() - start
    record(request, values=on.size, kurtosis_on=f"{k_on:.2f}", kurtosis_off=f"{k_off:.2f}",
           tail_on=tail_on, tail_off=tail_off, seconds=f"{elapsed:.1f}")
    assert on.size >= 100_000 and off.size == on.size
    assert tail_on > tail_off
    assert 2.5 <= k_off <= 3.5 and k_on > 3.5
    assert elapsed < 10
