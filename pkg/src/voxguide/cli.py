"""Command-line entry point: ``voxguide <command> [flags]``.

Exit codes: 0 success, 1 I/O error, 2 usage or configuration error,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

DATA_PRIOR = "prior.ply"
DATA_SCENE = "scene.json"
DATA_MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if not (v >= 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError("must be a finite number >= 0")
    return v


# --------------------------------------------------------------------------
# shared loaders


def _load_svo(spec: str, data: Path | None):
    """``auto`` rebuilds from the dataset's prior; otherwise an octree JSON."""
    from .svo import build_octree, read_cloud, read_octree_dump

    if spec == "auto":
        if data is None:
            raise UsageError("--svo auto needs --data")
        return build_octree(read_cloud(data / DATA_PRIOR))
    path = Path(spec)
    if path.suffix in (".ply", ".xyz", ".txt"):
        return build_octree(read_cloud(path))
    meta = json.loads(path.read_text())
    svo = read_octree_dump(path.parent / meta["dump"], meta["origin"], meta["side"])
    if meta.get("scene_bounds"):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in meta["scene_bounds"])
        svo = replace(svo, scene_bounds=(lo, hi))
    return svo


def save_svo(svo, path) -> None:
    """Octree as JSON metadata plus a ``level code x y z`` leaf dump next to it."""
    from .svo import write_octree_dump

    path = Path(path)
    dump = path.with_suffix(".leaves.txt")
    write_octree_dump(svo, dump)
    meta = {"origin": svo.origin.tolist(), "side": svo.side, "max_level": svo.max_level,
            "leaf_size": svo.leaf_size, "n_leaves": int(len(svo.occupied_leaves)), "dump": dump.name,
            "scene_bounds": None if svo.scene_bounds is None else [b.tolist() for b in svo.scene_bounds]}
    path.write_text(json.dumps(meta, indent=1))


def _load_train_config(path: str | None, args):
    from .train import TrainConfig

    cfg = TrainConfig()
    if path:
        try:
            cfg = TrainConfig.from_dict(json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError, ValueError) as exc:
            raise UsageError(f"invalid config {path}: {exc}") from exc
    over = {"seed": args.seed}
    if getattr(args, "strategy", None):
        over["strategy"] = args.strategy
    if getattr(args, "iterations", None):
        over["iterations"] = args.iterations
    cfg = replace(cfg, **over)
    if getattr(args, "no_depth_loss", False):
        cfg = replace(cfg, loss=replace(cfg.loss, lambda_d=0.0))
    if cfg.strategy not in ("guided", "uniform"):
        raise UsageError(f"unknown strategy {cfg.strategy!r}")
    return cfg


def _load_field_config(path: str | None):
    from .field import FieldConfig

    if not path:
        return FieldConfig()
    try:
        return FieldConfig(**json.loads(Path(path).read_text()))
    except (TypeError, json.JSONDecodeError, ValueError) as exc:
        raise UsageError(f"invalid field config {path}: {exc}") from exc


def _sampler_from_meta(meta: dict, seed: int):
    from .sampler import SamplerConfig

    t = meta.get("train", {})
    return SamplerConfig(t.get("n_important", 128), t.get("n_free", 128), t.get("strategy", "guided"), seed)


# --------------------------------------------------------------------------
# commands


def cmd_synth_gen(args) -> int:
    from .svo import write_ply
    from .synth import (TrajectoryConfig, load_scene, make_dataset, sample_prior_cloud, save_dataset,
                        save_scene, toy_room)

    scene = load_scene(args.scene) if args.scene else toy_room()
    tc = TrajectoryConfig(width=args.width, height=args.height)
    ds = make_dataset(scene, args.train, args.test, args.trajectory, args.seed, tc)
    sigma = args.noise * scene.diagonal
    cloud = sample_prior_cloud(scene, args.points, sigma, args.outliers, np.random.default_rng([args.seed, 1]))
    out = Path(args.out)
    save_dataset(ds, out)
    write_ply(cloud, out / DATA_PRIOR)
    save_scene(scene, out / DATA_SCENE)
    manifest = {"scene": args.scene or "toy_room", "train": args.train, "test": args.test, "seed": args.seed,
                "noise_fraction": args.noise, "noise_sigma": sigma, "outliers": args.outliers,
                "points": args.points, "width": args.width, "height": args.height,
                "trajectory": args.trajectory}
    (out / DATA_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {len(ds.cameras)} views and {len(cloud)} prior points to {out}")
    return EXIT_OK


def cmd_build_svo(args) -> int:
    from .svo import build_octree, read_cloud

    cloud = read_cloud(args.prior, default_sigma=args.sigma)
    svo = build_octree(cloud, leaf_size=args.leaf_size)
    save_svo(svo, args.out)
    print(f"octree: {svo.max_level} levels, leaf {svo.leaf_size:.4f} m, {len(svo.occupied_leaves)} leaves")
    return EXIT_OK


def cmd_train(args) -> int:
    from .field import load_checkpoint
    from .synth import load_dataset
    from .train import TrainState, train

    cfg = _load_train_config(args.config, args)
    field_cfg = _load_field_config(args.field_config)
    data = Path(args.data)
    ds = load_dataset(data)
    svo = _load_svo(args.svo, data)
    state = None
    if args.resume:
        params, meta, adam = load_checkpoint(args.resume)
        if adam is None:
            raise UsageError("checkpoint has no optimiser state to resume from")
        state = TrainState(params, adam, int(meta.get("iteration", 0)))
        field_cfg = params.config
    _, rows = train(ds, svo, field_cfg, cfg, out_dir=args.out, threads=args.threads, state=state)
    last = rows[-1]
    print(f"final train patch PSNR {last['psnr_train_patch']:.2f} dB at iteration {last['iteration']}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .field import load_checkpoint
    from .metrics import write_depth, write_png, write_ppm
    from .render import render_image
    from .synth import load_dataset

    params, meta, _ = load_checkpoint(args.ckpt)
    data = Path(args.data)
    ds = load_dataset(data)
    svo = _load_svo(args.svo, data)
    views = ds.indices(args.split) if args.split != "all" else list(range(len(ds.cameras)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sampler = _sampler_from_meta(meta, args.seed)
    for v in views:
        r = render_image(params, svo, ds.cameras[v], sampler, seed=args.seed, view_id=v, threads=args.threads)
        write_ppm(out / f"{v:04d}.ppm", r.image)
        write_depth(out / f"{v:04d}_depth.raw", r.depth)
        if args.png:
            write_png(out / f"{v:04d}.png", r.image)
    print(f"rendered {len(views)} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .field import load_checkpoint
    from .metrics import config_hash, evaluate
    from .synth import load_dataset

    params, meta, _ = load_checkpoint(args.ckpt)
    data = Path(args.data)
    ds = load_dataset(data)
    svo = _load_svo(args.svo, data)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    rep = evaluate(params, svo, ds, args.split, _sampler_from_meta(meta, args.seed), args.seed, args.threads,
                   out, {"config_hash": config_hash(meta), "checkpoint": Path(args.ckpt).name})
    print(f"{args.split}: PSNR {rep.mean_psnr:.2f} dB  SSIM {rep.mean_ssim:.4f}  depth MAE {rep.mean_depth_mae:.4f} m")
    return EXIT_OK


def run_ablation(ds, svo, base_cfg, field_cfg, matrix: dict, out: Path, threads: int = 1) -> list[dict]:
    """Train and evaluate every (strategy, depth loss, seed) arm of ``matrix``."""
    from .metrics import evaluate
    from .train import train

    strategies = matrix.get("strategy", ["guided", "uniform"])
    depth = matrix.get("depth_loss", [True, False])
    seeds = matrix.get("seeds", [base_cfg.seed])
    splits = matrix.get("splits", ["test_interp", "test_extrap"])
    rows = []
    for strat in strategies:
        for dl in depth:
            for seed in seeds:
                lam = base_cfg.loss.lambda_d if dl else 0.0
                cfg = replace(base_cfg, strategy=strat, seed=seed, loss=replace(base_cfg.loss, lambda_d=lam))
                name = f"{strat}_{'depth' if dl else 'nodepth'}_s{seed}"
                params, _ = train(ds, svo, field_cfg, cfg, out_dir=out / name, threads=threads)
                row = {"arm": name, "strategy": strat, "depth_loss": bool(dl), "seed": seed}
                for sp in splits:
                    rep = evaluate(params, svo, ds, sp, cfg.sampler, seed, threads)
                    row[f"{sp}_psnr"] = rep.mean_psnr
                    row[f"{sp}_ssim"] = rep.mean_ssim
                    row[f"{sp}_depth_mae"] = rep.mean_depth_mae
                rows.append(row)
    return rows


def write_table(rows: list[dict], csv_path, md_path) -> None:
    import csv

    keys = list(rows[0])
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)  # noqa: E731
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    lines += ["| " + " | ".join(fmt(r[k]) for k in keys) + " |" for r in rows]
    Path(md_path).write_text("\n".join(lines) + "\n")


def cmd_ablate(args) -> int:
    from .synth import load_dataset

    matrix = {}
    if args.matrix:
        try:
            matrix = json.loads(Path(args.matrix).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid matrix {args.matrix}: {exc}") from exc
        unknown = set(matrix) - {"strategy", "depth_loss", "seeds", "splits"}
        if unknown:
            raise UsageError(f"unknown matrix keys: {sorted(unknown)}")
    cfg = _load_train_config(args.config, args)
    data = Path(args.data)
    ds = load_dataset(data)
    svo = _load_svo(args.svo, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(ds, svo, cfg, _load_field_config(args.field_config), matrix, out, args.threads)
    write_table(rows, out / "ablation.csv", out / "ablation.md")
    print((out / "ablation.md").read_text(), end="")
    return EXIT_OK


def cmd_info(args) -> int:
    from .field import load_checkpoint
    from .svo import read_cloud
    from .synth import load_scene, surface_distance

    if args.ckpt:
        params, meta, adam = load_checkpoint(args.ckpt)
        print(json.dumps({"params": params.config.n_params, "field": params.config.__dict__,
                          "iteration": meta.get("iteration"), "has_optimizer": adam is not None}, indent=1))
    if args.svo:
        svo = _load_svo(args.svo, Path(args.data) if args.data else None)
        print(f"octree: {svo.max_level} levels, leaf {svo.leaf_size:.4f} m, "
              f"{len(svo.occupied_leaves)} leaves, scene diagonal {svo.scene_diagonal:.3f} m")
    if args.data:
        data = Path(args.data)
        manifest = json.loads((data / DATA_MANIFEST).read_text())
        print(json.dumps(manifest, indent=1, sort_keys=True))
        cloud = read_cloud(data / DATA_PRIOR)
        dist = surface_distance(load_scene(data / DATA_SCENE), cloud.positions)
        print(f"prior: {len(cloud)} points, surface distance mean {dist.mean():.3e} max {dist.max():.3e} m")
        if manifest.get("noise_sigma", 1) == 0 and manifest.get("outliers", 1) == 0:
            print("prior on-surface:", "yes" if dist.max() < 1e-9 else "NO")
    if not (args.ckpt or args.svo or args.data):
        raise UsageError("info needs at least one of --data, --svo, --ckpt")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--threads", type=_positive_int, default=_cores(),
                        help="worker threads; results do not depend on it (default: available cores)")

    p = argparse.ArgumentParser(prog="voxguide", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic dataset and prior cloud")
    s.add_argument("--scene", help="scene JSON (default: built-in toy_room)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--train", type=_positive_int, default=20, help="training views (default 20)")
    s.add_argument("--test", type=_positive_int, default=4, help="views per test split (default 4)")
    s.add_argument("--noise", type=_nonneg_float, default=0.02,
                   help="prior noise std as a fraction of the room diagonal (default 0.02)")
    s.add_argument("--outliers", type=_nonneg_float, default=0.01, help="outlier fraction (default 0.01)")
    s.add_argument("--points", type=_positive_int, default=10000, help="prior points (default 10000)")
    s.add_argument("--width", type=_positive_int, default=64)
    s.add_argument("--height", type=_positive_int, default=64)
    s.add_argument("--trajectory", choices=("inside-out", "orbit"), default="inside-out")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("build-svo", parents=[common], help="build an octree from a point cloud")
    s.add_argument("--prior", required=True, help="PLY or 'x y z [sigma]' text cloud")
    s.add_argument("--out", required=True, help="output octree JSON (leaf dump written alongside)")
    s.add_argument("--sigma", type=_nonneg_float, help="global sigma for clouds without one")
    s.add_argument("--leaf-size", type=float, help="override the leaf size (metres)")
    s.set_defaults(func=cmd_build_svo)

    s = sub.add_parser("train", parents=[common], help="train a field on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--svo", default="auto", help="octree JSON, a cloud file, or 'auto' (default)")
    s.add_argument("--config", help="train config JSON (see docs/train_config.schema.json)")
    s.add_argument("--field-config", help="field config JSON (see docs/field_config.schema.json)")
    s.add_argument("--strategy", choices=("guided", "uniform"))
    s.add_argument("--no-depth-loss", action="store_true", help="set the depth-loss weight to 0")
    s.add_argument("--iterations", type=_positive_int, help="override the config's iteration count")
    s.add_argument("--resume", help="checkpoint with optimiser state to continue from")
    s.add_argument("--out", required=True, help="output directory for checkpoints and the log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render dataset views from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--svo", default="auto")
    s.add_argument("--split", default="test_interp", choices=("train", "test_interp", "test_extrap", "all"))
    s.add_argument("--png", action="store_true", help="also write PNG copies")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--svo", default="auto")
    s.add_argument("--split", default="test_interp", choices=("train", "test_interp", "test_extrap", "interp", "extrap"))
    s.add_argument("--out", help="report directory (default: <ckpt dir>/eval)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="sampling strategy x depth loss ablation")
    s.add_argument("--data", required=True)
    s.add_argument("--svo", default="auto")
    s.add_argument("--matrix", help="matrix JSON (see docs/ablation_matrix.schema.json)")
    s.add_argument("--config", help="base train config JSON")
    s.add_argument("--field-config")
    s.add_argument("--iterations", type=_positive_int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("info", parents=[common], help="summarise a dataset, octree or checkpoint")
    s.add_argument("--data")
    s.add_argument("--svo")
    s.add_argument("--ckpt")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    from .svo import OctreeError, ParseError
    from .train import TrainingAborted

    args = build_parser().parse_args(argv)
    if getattr(args, "split", None) in ("interp", "extrap"):
        args.split = "test_" + args.split
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"error: {exc}; last checkpoint: {exc.checkpoint or 'none'}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OctreeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
