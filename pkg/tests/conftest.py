import numpy as np
import pytest

from agglom3d.geometry import CameraIntrinsics, Pose
from agglom3d.scene import PointCloud


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng, scale=1.0):
    return Pose(random_rotation(rng), rng.normal(scale=scale, size=3))


@pytest.fixture
def small_camera():
    return CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)


def random_scene(rng, n=500, K=4):
    """Points in front of an identity camera, scattered in a frustum-shaped slab."""
    z = rng.uniform(1.0, 3.0, n)
    x = rng.uniform(-0.4, 0.4, n) * z
    y = rng.uniform(-0.3, 0.3, n) * z
    return PointCloud(np.column_stack([x, y, z]), rng.integers(0, K, n), num_classes=K)


# --- acceptance summary ------------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failing fixture counts against the criterion too
    if call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if call.excinfo is not None and not detail:
        detail = call.excinfo.exconly().splitlines()[0][:160]
    _CRITERIA[number] = (title, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
