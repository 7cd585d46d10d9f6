"""Command-line entry point: ``agglom3d <command> --config <file> [--out <dir>] [--deterministic] [--seed <u64>]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config
from .errors import Agglom3DError, ConfigError, ContractError, FormatError, NonFiniteError
from .evalsuite import (
    ProbeConfig, compute_metrics, ensemble_2d3d, find_text_head, fit_ridge, kmeans, ov_segment, probe_features,
)
from .formats import (
    load_feature_map, read_bank, read_frame, read_point_cloud, write_bank, write_feature_map, write_frame,
    write_point_cloud,
)
from .fusion import HistogramSpec, feature_histogram, fuse_views, sample_kurtosis
from .pipeline import (
    PROBE, build_scene_data, derive_seed, run_pipeline, scene_seeds, student_config, train_config, write_manifest,
)
from .student import forward
from .teachers import vocabulary_from_teacher
from .trainer import load_checkpoint, prepare_scenes, save_checkpoint, sigma_trajectory, train, write_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONTRACT = 4
EXIT_COLLAPSE = 5
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class CollapseExit(Exception):
    pass


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in [header] + rows) + "\n"


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# --- data directory layout ----------------------------------------------------

def _scene_paths(data: Path) -> list[Path]:
    paths = sorted(data.glob("scene_*.a3pc"))
    if not paths:
        raise FileNotFoundError(f"no scene_*.a3pc files in {data}")
    return paths


def _load_scenes(data: Path):
    return [read_point_cloud(p) for p in _scene_paths(data)]


def _load_banks(cfg: RunConfig, data: Path, clouds):
    names = [t.name for t in cfg.teachers]
    banks = []
    for p in _scene_paths(data):
        bank = read_bank(p.with_suffix(".a3fb"), names)
        banks.append(bank)
    for c, b in zip(clouds, banks):
        if b.num_points != len(c):
            raise ContractError(f"bank for {c.scene_id} has {b.num_points} rows for {len(c)} points")
    return banks


def _load_model(cfg: RunConfig, path: Path):
    model, _ = load_checkpoint(path)
    names = [t.name for t in cfg.teachers]
    if list(model.config.head_names) != names:
        raise ContractError(f"checkpoint heads {list(model.config.head_names)} do not match teachers {names}")
    return model


# --- commands ---------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    out = args.out
    paths = []
    for i, seed in enumerate(scene_seeds(cfg, cfg.seed)):
        data = build_scene_data(cfg, seed)
        stem = out / f"scene_{i:03d}"
        stem.mkdir(parents=True, exist_ok=True)
        write_point_cloud(stem.with_suffix(".a3pc"), data.cloud)
        paths.append(stem.with_suffix(".a3pc"))
        for fi, ((pose, K, depth), maps) in enumerate(zip(data.frames, data.maps)):
            p = stem / f"frame_{fi:02d}.a3fr"
            write_frame(p, pose, K, depth)
            paths.append(p)
            for t, fm in zip(cfg.teachers, maps):
                q = stem / f"frame_{fi:02d}.{t.name}.a3fm"
                write_feature_map(q, fm)
                paths.append(q)
    manifest = write_manifest(out, paths, "manifest.gen.json")
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_fuse(cfg: RunConfig, args) -> int:
    paths = []
    for p in _scene_paths(args.data):
        cloud = read_point_cloud(p)
        frames = []
        for fr in sorted(p.with_suffix("").glob("frame_*.a3fr")):
            pose, K, depth = read_frame(fr)
            maps = [load_feature_map(fr.with_name(f"{fr.stem}.{t.name}.a3fm"), t.dim) for t in cfg.teachers]
            frames.append((pose, K, depth, maps))
        bank = fuse_views(cloud, frames, cfg.teachers, cfg.fusion.depth_tol)
        dst = args.out / f"{p.stem}.a3fb"
        write_bank(dst, bank)
        paths.append(dst)
        print(f"{p.stem}: {len(frames)} frames, {int(bank.mask.sum())}/{bank.num_points} points observed")
    write_manifest(args.out, paths, "manifest.fuse.json")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    clouds = _load_scenes(args.data)
    banks = _load_banks(cfg, args.data, clouds)
    dataset = prepare_scenes(clouds, banks, cfg.teachers, cfg.fusion.de_mean_mode)
    tcfg = train_config(cfg, cfg.seed)
    ckpt_dir = args.out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    result = train(dataset, cfg.teachers, tcfg, student_config(cfg, cfg.teachers, cfg.seed), checkpoint_dir=ckpt_dir)
    write_log(args.out / "log.jsonl", result.log)
    steps = [r for r in result.log if "event" not in r]
    save_checkpoint(args.out / "final.a3ck", result.model, steps[-1]["step"] if steps else 0)
    produced = [args.out / "log.jsonl", args.out / "final.a3ck", *sorted(ckpt_dir.glob("*.a3ck"))]
    if tcfg.mode.uses_sigma and steps:
        (args.out / "sigma.csv").write_text(sigma_trajectory(result.log).to_csv())
        produced.append(args.out / "sigma.csv")
    write_manifest(args.out, produced, "manifest.train.json")
    if result.collapse is not None:
        c = result.collapse
        raise CollapseExit(f"training collapsed at step {c.step} (epoch {c.epoch}): {c.reason}")
    print(f"trained {len(steps)} steps; final total {steps[-1]['total']:.6g}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    clouds = _load_scenes(args.data)
    model = _load_model(cfg, args.checkpoint)
    head = find_text_head(cfg.teachers)
    K = max(c.num_classes for c in clouds)
    vocab = vocabulary_from_teacher(cfg.teachers[head], K)
    if args.ensemble or cfg.eval.ensemble:
        banks = _load_banks(cfg, args.data, clouds)
        preds = [ensemble_2d3d(model, c, b, vocab, head, bbox=c.bounds()) for c, b in zip(clouds, banks)]
    else:
        preds = [ov_segment(model, c, vocab, head, bbox=c.bounds()) for c in clouds]
    metrics = compute_metrics(np.concatenate(preds), np.concatenate([c.labels for c in clouds]), K)
    report = metrics.to_dict()
    report["method"] = "2d3d" if (args.ensemble or cfg.eval.ensemble) else "3d"
    rows = [[str(k), "-" if np.isnan(i) else f"{i:.4f}", "-" if np.isnan(a) else f"{a:.4f}"]
            for k, (i, a) in enumerate(zip(metrics.per_class_iou, metrics.per_class_acc))]
    rows.append(["mean", f"{metrics.miou:.4f}", f"{metrics.macc:.4f}"])
    text = _table(["class", "IoU", "Acc"], rows)
    _write_json(args.out / "metrics.json", report)
    (args.out / "metrics.txt").write_text(text)
    write_manifest(args.out, [args.out / "metrics.json", args.out / "metrics.txt"], "manifest.eval.json")
    print(text, end="")
    return EXIT_OK


def _split(n: int, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    cut = min(max(int(round(fraction * n)), 1), n - 1)
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def cmd_probe(cfg: RunConfig, args) -> int:
    clouds = _load_scenes(args.data)
    model = _load_model(cfg, args.checkpoint)
    K = max(c.num_classes for c in clouds)
    outs = [forward(model, c, c.bounds()) for c in clouds]
    splits = [_split(len(c), cfg.eval.probe_train_fraction, derive_seed(cfg.seed, PROBE, i))
              for i, c in enumerate(clouds)]
    variants = [ProbeConfig("concat", ridge_lambda=cfg.eval.probe_lambda),
                ProbeConfig("average", ridge_lambda=cfg.eval.probe_lambda)]
    variants += [ProbeConfig("single", i, cfg.eval.probe_lambda) for i in range(model.num_heads)]
    results = {}
    for v in variants:
        feats = [probe_features(o, v) for o in outs]
        Xtr = np.concatenate([f[tr] for f, (tr, _) in zip(feats, splits)])
        ytr = np.concatenate([c.labels[tr] for c, (tr, _) in zip(clouds, splits)])
        Xev = np.concatenate([f[ev] for f, (_, ev) in zip(feats, splits)])
        yev = np.concatenate([c.labels[ev] for c, (_, ev) in zip(clouds, splits)])
        clf = fit_ridge(Xtr, ytr, K, v.ridge_lambda)
        results[v.label] = compute_metrics(clf.predict(Xev), yev, K)
    report = {k: m.to_dict() for k, m in results.items()}
    text = _table(["features", "mIoU", "mAcc"], [[k, f"{m.miou:.4f}", f"{m.macc:.4f}"] for k, m in results.items()])
    _write_json(args.out / "probe.json", report)
    (args.out / "probe.txt").write_text(text)
    write_manifest(args.out, [args.out / "probe.json", args.out / "probe.txt"], "manifest.probe.json")
    print(text, end="")
    return EXIT_OK


def cmd_cluster(cfg: RunConfig, args) -> int:
    clouds = _load_scenes(args.data)
    model = _load_model(cfg, args.checkpoint)
    cdir = args.out / "clusters"
    cdir.mkdir(parents=True, exist_ok=True)
    report, rows, produced = [], [], []
    for c in clouds:
        for name, feats in zip(model.config.head_names, forward(model, c, c.bounds())):
            res = kmeans(feats, cfg.eval.kmeans_k, cfg.seed, cfg.eval.kmeans_max_iters, cfg.eval.kmeans_normalize)
            path = cdir / f"{c.scene_id}.{name}.u16"
            path.write_bytes(res.assignments.astype("<u2").tobytes())
            produced.append(path)
            report.append({"scene": c.scene_id, "head": name, "k": cfg.eval.kmeans_k,
                           "iterations": len(res.inertia), "inertia": res.inertia})
            rows.append([c.scene_id, name, str(len(res.inertia)), f"{res.inertia[-1]:.6g}"])
    produced.append(_write_json(args.out / "cluster.json", report))
    text = _table(["scene", "head", "iters", "inertia"], rows)
    (args.out / "cluster.txt").write_text(text)
    produced.append(args.out / "cluster.txt")
    write_manifest(args.out, produced, "manifest.cluster.json")
    print(text, end="")
    return EXIT_OK


def cmd_hist(cfg: RunConfig, args) -> int:
    clouds = _load_scenes(args.data)
    banks = _load_banks(cfg, args.data, clouds)
    spec = HistogramSpec(cfg.eval.hist_lo, cfg.eval.hist_hi, cfg.eval.hist_bins)
    report, rows = {}, []
    per_teacher = {}
    for ti, t in enumerate(cfg.teachers):
        values = np.concatenate([b.features[ti][b.mask].reshape(-1) for b in banks])
        h = feature_histogram(values, spec)
        per_teacher[t.name] = h
        kurt = sample_kurtosis(values) if values.size and np.ptp(values) > 0 else None
        report[t.name] = {**h.to_dict(), "tail_mass": h.tail_mass(), "kurtosis": kurt, "n_values": h.total}
        rows.append([t.name, str(h.total), str(h.tail_mass()), "-" if kurt is None else f"{kurt:.4f}"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", *per_teacher])
    edges = spec.edges
    for i in range(spec.bins):
        w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), *[int(h.counts[i]) for h in per_teacher.values()]])
    produced = [_write_json(args.out / "hist.json", report), args.out / "hist.csv", args.out / "hist.txt"]
    (args.out / "hist.csv").write_text(buf.getvalue())
    text = _table(["teacher", "values", "tail", "kurtosis"], rows)
    (args.out / "hist.txt").write_text(text)
    write_manifest(args.out, produced, "manifest.hist.json")
    print(text, end="")
    return EXIT_OK


def cmd_pipeline(cfg: RunConfig, args) -> int:
    report = run_pipeline(cfg, args.out)
    print(report.to_text(), end="")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "fuse": cmd_fuse, "train": cmd_train, "eval": cmd_eval,
    "probe": cmd_probe, "cluster": cmd_cluster, "hist": cmd_hist, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agglom3d", description="Multi-teacher 2D-to-3D feature distillation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("agglom3d_out"))
        p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--data", type=Path, help="input directory (defaults to --out)")
        p.add_argument("--checkpoint", type=Path, help="model checkpoint (defaults to <out>/final.a3ck)")
        if name == "eval":
            p.add_argument("--ensemble", action="store_true", help="2D3D ensemble instead of 3D-only labels")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
            cfg.seed = args.seed
        args.data = args.data or args.out
        args.checkpoint = args.checkpoint or args.out / "final.a3ck"
        args.out.mkdir(parents=True, exist_ok=True)
        limits = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
        with limits:
            return COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except (CollapseExit, NonFiniteError) as err:
        print(f"collapse: {err}", file=sys.stderr)
        return EXIT_COLLAPSE
    except (Agglom3DError, ValueError) as err:
        print(f"contract error: {err}", file=sys.stderr)
        return EXIT_CONTRACT


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
