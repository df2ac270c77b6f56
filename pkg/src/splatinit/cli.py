"""Command-line entry point: ``splatinit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from splatinit.bench import FieldConfig, default_matrix, run_experiments
from splatinit.dataset import load_dataset, save_dataset, save_image
from splatinit.distill import DistillConfig, evaluate, train_splat, write_metrics_csv
from splatinit.initialization import InitConfig, make_point_cloud, scene_from_point_cloud
from splatinit.ply import read_ply, write_ply
from splatinit.scenes import BOUNDS, SCENES, make_toy_scene
from splatinit.splat import load_scene, save_scene
from splatinit.volfield import VoxelField, load_field, save_field, train_field

INIT_CHOICES = {"bbox": "bbox_multiple", "constant": "constant_box", "field": "point_cloud"}


def _init_config(args) -> InitConfig:
    return InitConfig(INIT_CHOICES[args.init], args.multiplier, args.extent, args.n_points, args.seed)


def cmd_make_scene(args):
    ds, gt = make_toy_scene(args.scene, args.resolution, args.n_views, args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    save_field(gt, out / "gt.vfld")
    print(f"wrote {len(ds.cameras)} views to {out}")


def cmd_train_field(args):
    ds = load_dataset(args.data)
    fc = FieldConfig(spacing=args.spacing, seed=args.seed)
    res = tuple(int(r) for r in np.round(BOUNDS.extent / fc.spacing).astype(int) + 1)
    f0 = VoxelField(BOUNDS, np.full(res, fc.init_density), np.full(res + (3,), 0.5))
    f = train_field(
        f0, ds, args.field_iters, fc.lr, fc.rays_per_iter, fc.seed, fc.n_samples, log_every=100,
        lr_final=fc.lr_final, tv_density=fc.tv_density, tv_color=fc.tv_color,
    )
    save_field(f, args.out)
    print(f"wrote field {res} to {args.out}")


def cmd_sample_init(args):
    ds = load_dataset(args.data)
    fld = load_field(args.field) if args.field else None
    pc = make_point_cloud(_init_config(args), ds.train_cameras, fld)
    write_ply(pc, args.out, binary=not args.ascii)
    print(f"wrote {len(pc)} points to {args.out}")


def cmd_train_splat(args):
    ds = load_dataset(args.data)
    scene = scene_from_point_cloud(read_ply(args.init_ply))
    fld = load_field(args.field) if args.field else None
    lam = args.lambda_init if args.depth_loss else 0.0
    if args.depth_loss and fld is None:
        raise SystemExit("--depth-loss needs --field")
    config = DistillConfig(lambda_init=lam, decay=args.decay, decay_step=args.decay_step, total_iters=args.iters, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_splat(scene, ds, fld, config, checkpoint_dir=out)
    write_metrics_csv(res.log, out / "metrics.csv")
    save_scene(res.scene, out / "scene.gspl")
    print(f"trained {len(res.scene)} primitives; wrote {out}")


def cmd_eval(args):
    ds = load_dataset(args.data)
    scene = load_scene(args.model)
    ev = evaluate(scene, ds.test_cameras, ds.test_images)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for k, img in zip(ds.test_idx, ev["renders"]):
            save_image(out / f"test_{k:03d}.png", img)
    print(json.dumps({"test_psnr": ev["psnr"], "test_ssim": ev["ssim"], "n_primitives": len(scene)}))


def cmd_run_matrix(args):
    scenes = args.scene or ["spheres", "reflective_floor_analog"]
    seeds = args.seed_list or [args.seed]
    depth_modes = {"off": (False,), "on": (True,), "both": (False, True)}[args.depth]
    specs = default_matrix(
        scenes, seeds, args.field_iters, args.iters, args.n_points, args.resolution, args.n_views, depth_modes,
    )
    if args.only:
        specs = [s for s in specs if s.init_label in args.only]
    for s in specs:
        s.lambda_init, s.decay, s.decay_step = args.lambda_init, args.decay, args.decay_step
    path = run_experiments(specs, args.out, deterministic=args.deterministic)
    print(path.read_text())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatinit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("make-scene", help="render a synthetic dataset")
    sp.add_argument("--scene", choices=SCENES, default="spheres")
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--n-views", type=int, default=20)
    common(sp)
    sp.set_defaults(func=cmd_make_scene)

    sp = sub.add_parser("train-field", help="fit a voxel radiance field")
    sp.add_argument("--data", required=True)
    sp.add_argument("--field-iters", type=int, default=2000)
    sp.add_argument("--spacing", type=float, default=FieldConfig.spacing)
    common(sp)
    sp.set_defaults(func=cmd_train_field)

    sp = sub.add_parser("sample-init", help="write an initial point cloud")
    sp.add_argument("--data", required=True)
    sp.add_argument("--field")
    sp.add_argument("--init", choices=sorted(INIT_CHOICES), default="field")
    sp.add_argument("--multiplier", type=float, default=3.0)
    sp.add_argument("--extent", type=float, default=24.0)
    sp.add_argument("--n-points", type=int, default=50_000)
    sp.add_argument("--ascii", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_sample_init)

    def schedule(sp):
        sp.add_argument("--lambda-init", type=float, default=0.9)
        sp.add_argument("--decay", type=float, default=0.9)
        sp.add_argument("--decay-step", type=int, default=100)
        sp.add_argument("--iters", type=int, default=3000)

    sp = sub.add_parser("train-splat", help="optimize primitives from an init cloud")
    sp.add_argument("--data", required=True)
    sp.add_argument("--init-ply", required=True)
    sp.add_argument("--field")
    sp.add_argument("--depth-loss", action="store_true")
    schedule(sp)
    common(sp)
    sp.set_defaults(func=cmd_train_splat)

    sp = sub.add_parser("eval", help="test-view PSNR/SSIM of a saved scene")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("run-matrix", help="run the init x depth-loss experiment matrix")
    sp.add_argument("--scene", action="append", choices=SCENES)
    sp.add_argument("--seed-list", type=int, nargs="+")
    sp.add_argument("--field-iters", type=int, default=2000)
    sp.add_argument("--n-points", type=int, default=50_000)
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--n-views", type=int, default=20)
    sp.add_argument("--depth", choices=("off", "on", "both"), default="both")
    sp.add_argument("--only", nargs="+", help="restrict to init labels, e.g. field bbox1.5x")
    sp.add_argument("--deterministic", action="store_true")
    schedule(sp)
    common(sp)
    sp.set_defaults(func=cmd_run_matrix)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
