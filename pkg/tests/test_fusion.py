import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from agglom3d.errors import ValidationError
from agglom3d.fusion import (
    FusedFeatureBank, HistogramSpec, de_mean, de_mean_per_channel, feature_histogram, fuse_views, sample_kurtosis,
)
from agglom3d.geometry import CameraIntrinsics, Pose, render_depth
from agglom3d.teachers import FeatureMap, TeacherSpec, render_feature_map

from conftest import random_pose, random_scene

K = CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
TEACHERS = [TeacherSpec("lseg-like", 6, text_aligned=True, prototype_seed=1, noise_std=0.3),
            TeacherSpec("dino-like", 4, prototype_seed=2, noise_std=0.2, view_confusion_prob=0.2)]


def make_frames(rng, cloud, n_frames):
    frames = []
    for f in range(n_frames):
        pose = Pose.identity() if f == 0 else random_pose(rng, 0.05)
        depth = render_depth(cloud, pose, K)
        maps = [render_feature_map(cloud, (pose, K, depth), t, 100 + f) for t in TEACHERS]
        frames.append((pose, K, depth, maps))
    return frames


def brute_fuse(cloud, frames, tol):
    """Loop point by point and frame by frame."""
    n = len(cloud)
    out = [np.zeros((n, t.dim)) for t in TEACHERS]
    counts = np.zeros(n, dtype=int)
    for i, p in enumerate(cloud.points):
        acc = [[] for _ in TEACHERS]
        for pose, Kf, depth, maps in frames:
            q = pose.rotation @ p + pose.translation
            if q[2] <= 1e-6:
                continue
            u = int(np.floor(Kf.fx * q[0] / q[2] + Kf.cx + 0.5))
            v = int(np.floor(Kf.fy * q[1] / q[2] + Kf.cy + 0.5))
            if not (0 <= u < Kf.width and 0 <= v < Kf.height):
                continue
            ref = float(depth.values[v, u])
            if ref <= 0 or abs(q[2] - ref) > tol:
                continue
            for a, m in zip(acc, maps):
                a.append(m.values[v, u].astype(np.float64))
        counts[i] = len(acc[0])
        for t, a in enumerate(acc):
            if a:
                out[t][i] = np.mean(a, axis=0)
    return out, counts


def test_fusion_matches_brute_force_and_is_order_invariant():
    rng = np.random.default_rng(0)
    for _ in range(10):
        cloud = random_scene(rng, 300)
        frames = make_frames(rng, cloud, 5)
        bank = fuse_views(cloud, frames, TEACHERS, 0.04)
        oracle, counts = brute_fuse(cloud, frames, 0.04)
        assert np.array_equal(bank.counts, counts)
        for got, want in zip(bank.features, oracle):
            assert np.abs(got - want).max() < 1e-12
        perm = rng.permutation(5)
        shuffled = fuse_views(cloud, [frames[i] for i in perm], TEACHERS, 0.04)
        for a, b in zip(bank.features, shuffled.features):
            assert np.abs(a - b).max() < 1e-12
        # unobserved rows are zero
        for f in bank.features:
            assert np.all(f[~bank.mask] == 0)


def test_one_and_two_frame_means():
    from agglom3d.scene import PointCloud

    cloud = PointCloud(np.array([[0.0, 0.0, 1.0]]), np.array([0]), num_classes=2)
    depth = render_depth(cloud, Pose.identity(), K)
    t = [TeacherSpec("x", 2)]
    v = np.zeros((K.height, K.width, 2))
    w = np.zeros((K.height, K.width, 2))
    v[12, 16] = [1.0, 2.0]   # pixel of (0, 0, 1): floor(15.5 + 0.5), floor(11.5 + 0.5)
    w[12, 16] = [3.0, -2.0]
    fv, fw = FeatureMap(K.width, K.height, 2, v), FeatureMap(K.width, K.height, 2, w)
    one = fuse_views(cloud, [(Pose.identity(), K, depth, [fv])], t)
    assert one.features[0].tolist() == [[1.0, 2.0]]
    two = fuse_views(cloud, [(Pose.identity(), K, depth, [fv]), (Pose.identity(), K, depth, [fw])], t)
    assert two.features[0].tolist() == [[2.0, 0.0]] and two.counts.tolist() == [2]


def test_dimension_mismatch_rejected():
    rng = np.random.default_rng(1)
    cloud = random_scene(rng, 50)
    frames = make_frames(rng, cloud, 1)
    with pytest.raises(ValidationError):
        fuse_views(cloud, frames, [TEACHERS[1], TEACHERS[0]])


def test_bank_invariants():
    with pytest.raises(ValidationError):
        FusedFeatureBank(["a"], [np.full((2, 2), np.nan)], [1, 1])
    bank = FusedFeatureBank(["a", "b"], [np.ones((3, 2)), np.ones((3, 4))], [0, 1, 2])
    assert bank.mask.tolist() == [False, True, True]
    assert bank.select(["b"]).features[0].shape == (3, 4)
    assert bank.subset(np.array([2])).counts.tolist() == [2]


def test_de_mean_examples():
    assert de_mean(np.full((1, 4), 5.0)).tolist() == [[0.0] * 4]
    assert de_mean(np.array([[1.0, -1.0]])).tolist() == [[1.0, -1.0]]


def test_de_mean_per_channel():
    x = np.array([[1.0, 2.0], [3.0, 6.0], [100.0, 100.0]])
    out = de_mean_per_channel(x, np.array([True, True, False]))
    assert out.tolist() == [[-1.0, -2.0], [1.0, 2.0], [0.0, 0.0]]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(2, 16)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_de_mean_properties(x):
    out = de_mean(x)
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
    assert np.abs(de_mean(out) - out).max() <= 1e-9


def test_histogram_examples():
    h = feature_histogram(np.zeros((3, 4)), HistogramSpec(-1, 1, 2))
    assert h.counts.tolist() == [0, 12]
    h = feature_histogram(np.array([-2.0, -1.0, 0.999, 1.0, 3.0]), HistogramSpec(-1, 1, 4))
    assert h.underflow == 1 and h.overflow == 1 and h.counts.tolist() == [1, 0, 0, 2]
    assert h.tail_mass() == 5


def test_histogram_conservation_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=2, size=(100, 7))
    spec = HistogramSpec(-3, 3, 30)
    h = feature_histogram(x, spec)
    assert h.total == x.size
    inside = x[(x >= -3) & (x <= 3)]
    assert np.array_equal(h.counts, np.histogram(inside, bins=spec.edges)[0])


def test_histogram_spec_validation():
    with pytest.raises(ValidationError):
        HistogramSpec(1, 1, 3)
    with pytest.raises(ValidationError):
        HistogramSpec(0, 1, 0)


def test_kurtosis_matches_scipy():
    x = np.random.default_rng(3).standard_t(5, size=10_000)
    assert abs(sample_kurtosis(x) - stats.kurtosis(x, fisher=True, bias=True) - 3) < 1e-9
