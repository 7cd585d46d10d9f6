import json
import subprocess
import sys

import numpy as np
import pytest

from agglom3d.cli import run
from agglom3d.formats import read_point_cloud, write_bank, write_point_cloud
from agglom3d.fusion import FusedFeatureBank
from agglom3d.pipeline import sha256_file
from agglom3d.scene import PointCloud

SMALL = """\
seed: 3
scene: {num_objects: 3, num_classes: 4, points_per_object: 150, points_per_plane: 300,
        num_frames: 4, image_width: 32, image_height: 24}
teachers:
  - {name: lseg-like, dim: 8, text_aligned: true, prototype_seed: 11}
  - {name: dino-like, dim: 6, prototype_seed: 12, noise_std: 0.05}
student: {pe_frequencies: 2, trunk_widths: [16]}
objective: {mode: MODE}
trainer: {lr0: 0.01, lr_decay: 1.0, epochs: EPOCHS, scenes_per_batch: 1, points_per_scene: 256, loop: 4}
eval: {kmeans_k: 4}
"""


def _config(tmp_path, mode="stabilized", epochs=5, name="run.yaml"):
    path = tmp_path / name
    path.write_text(SMALL.replace("MODE", mode).replace("EPOCHS", str(epochs)))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root)
    out = root / "out"
    for cmd in ("gen", "fuse", "train"):
        assert run([cmd, "--config", str(cfg), "--out", str(out), "--deterministic"]) == 0
    return cfg, out


def test_gen_manifest_lists_frames_and_maps(trained, tmp_path, capsys):
    cfg, out = trained
    manifest = json.loads((out / "manifest.gen.json").read_text())
    names = [e["path"] for e in manifest["artifacts"]]
    assert names.count("scene_000.a3pc") == 1
    assert sum(n.endswith(".a3fr") for n in names) == 4
    assert sum(n.endswith(".a3fm") for n in names) == 4 * 2
    assert run(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["artifacts"] == manifest["artifacts"]


def test_seed_flag_changes_digests(trained, tmp_path):
    cfg, out = trained
    assert run(["gen", "--config", str(cfg), "--out", str(tmp_path), "--seed", "4"]) == 0
    assert sha256_file(tmp_path / "scene_000.a3pc") != sha256_file(out / "scene_000.a3pc")


def test_train_outputs(trained):
    _, out = trained
    assert (out / "final.a3ck").exists() and (out / "log.jsonl").exists()
    assert len(list((out / "checkpoints").glob("epoch_*.a3ck"))) == 5
    assert (out / "sigma.csv").read_text().startswith("epoch,lseg-like,dino-like,status")


def test_eval_and_ensemble(trained, tmp_path):
    cfg, out = trained
    a, b = tmp_path / "a", tmp_path / "b"
    common = ["--config", str(cfg), "--data", str(out), "--checkpoint", str(out / "final.a3ck")]
    assert run(["eval", *common, "--out", str(a)]) == 0
    assert run(["eval", *common, "--out", str(b), "--ensemble"]) == 0
    ma, mb = json.loads((a / "metrics.json").read_text()), json.loads((b / "metrics.json").read_text())
    assert ma["method"] == "3d" and mb["method"] == "2d3d"
    assert set(ma) >= {"per_class_iou", "miou", "per_class_acc", "macc", "n_points"}
    assert 0 <= ma["miou"] <= 1 and ma["n_points"] == mb["n_points"]


def test_probe_cluster_hist(trained, tmp_path):
    cfg, out = trained
    common = ["--config", str(cfg), "--data", str(out), "--checkpoint", str(out / "final.a3ck"), "--out", str(tmp_path)]
    for cmd in ("probe", "cluster", "hist"):
        assert run([cmd, *common]) == 0
    probe = json.loads((tmp_path / "probe.json").read_text())
    assert set(probe) == {"concat", "average", "single(0)", "single(1)"}
    labels = np.fromfile(tmp_path / "clusters" / "scene_000.lseg-like.u16", dtype="<u2")
    assert len(labels) == read_point_cloud(out / "scene_000.a3pc").points.shape[0]
    assert labels.max() < 4
    hist = json.loads((tmp_path / "hist.json").read_text())
    assert set(hist) == {"lseg-like", "dino-like"}
    assert (tmp_path / "hist.csv").read_text().startswith("bin_lo,bin_hi,lseg-like,dino-like")


def test_hist_of_zero_bank_is_one_bin(tmp_path):
    cfg = _config(tmp_path)
    pts = np.random.default_rng(0).uniform(size=(50, 3))
    write_point_cloud(tmp_path / "scene_000.a3pc", PointCloud(pts, np.zeros(50, int), "scene_000", 4))
    write_bank(tmp_path / "scene_000.a3fb",
               FusedFeatureBank(["lseg-like", "dino-like"], [np.zeros((50, 8)), np.zeros((50, 6))], np.ones(50)))
    assert run(["hist", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    hist = json.loads((tmp_path / "hist.json").read_text())["lseg-like"]
    nonzero = [c for c in hist["counts"] if c]
    assert nonzero == [400] and hist["underflow"] == hist["overflow"] == 0


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trainer: {lr0: 0.1}\n")
    assert run(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert run(["gen", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 3
    cfg = _config(tmp_path)
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 3
    (tmp_path / "scene_000.a3pc").write_bytes(b"not a cloud")
    assert run(["fuse", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    with pytest.raises(SystemExit) as info:
        run(["gen"])
    assert info.value.code == 64


def test_naive_training_collapses_with_exit_5(tmp_path):
    cfg = _config(tmp_path, mode="naive_log_sigma", epochs=40)
    out = tmp_path / "out"
    assert run(["gen", "--config", str(cfg), "--out", str(out)]) == 0
    assert run(["fuse", "--config", str(cfg), "--out", str(out)]) == 0
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == 5
    last = json.loads((out / "log.jsonl").read_text().splitlines()[-1])
    assert last["event"] == "collapse"
    assert (out / "sigma.csv").read_text().rstrip().endswith("collapse")


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "agglom3d", "gen", "--config", str(tmp_path / "x.yaml"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 3 and "i/o error" in res.stderr
